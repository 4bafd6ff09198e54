//! Sequential (or joint) training over scenes with optional RSU replay.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{batch_gradient, forward_pipeline, record_traffic, LossConfig, Overrides, PipelineFlags};
use crate::channel::{BandwidthLedger, PayloadKind, Topology};
use crate::error::{Error, Result};
use crate::eval::{
    argmax_labels, average_precision_pooled, decode_detections, DetectionConfig, DetectionSample, IouAccumulator,
    MetricRecord, SceneMetrics,
};
use crate::model::ModelParams;
use crate::replay::{make_training_stream, ReplayBuffer};
use crate::scene::{Frame, NUM_LABELS};

/// Column order of the metric log.
pub const CSV_HEADER: &str = "scene_idx,epoch,split_scene,mIoU,AP50,AP70,loss,cumulative_bytes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurriculumMode {
    /// One scene after another, as a continual learner sees them.
    #[default]
    Sequential,
    /// All scenes' training frames pooled into one stage.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Frames kept from each finished scene.
    pub select_count: usize,
    pub capacity: usize,
    /// Buffered frames mixed into each epoch.
    pub replay_draw: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            select_count: 20,
            capacity: 60,
            replay_draw: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub flags: PipelineFlags,
    pub replay: ReplayConfig,
    pub mode: CurriculumMode,
    pub topology: Topology,
    pub detection: DetectionConfig,
    /// Also evaluate every this many epochs; 0 evaluates at stage end only.
    pub eval_interval: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossConfig::default(),
            flags: PipelineFlags::default(),
            replay: ReplayConfig::default(),
            mode: CurriculumMode::Sequential,
            topology: Topology::VehicleToVehicle,
            detection: DetectionConfig::default(),
            eval_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub train: Vec<Frame>,
    pub test: Vec<Frame>,
}

/// Every fifth step (4, 9, 14, …) is held out for testing.
pub fn split_frames(frames: Vec<Frame>) -> SceneData {
    let (test, train) = frames.into_iter().partition(|f| f.step % 5 == 4);
    SceneData { train, test }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub scene_idx: usize,
    pub epoch: usize,
    pub split_scene: usize,
    pub miou: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub loss: f64,
    pub cumulative_bytes: u64,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.scene_idx,
            self.epoch,
            self.split_scene,
            self.miou,
            self.ap50,
            self.ap70,
            self.loss,
            self.cumulative_bytes
        )
    }
}

pub fn write_log_csv(rows: &[LogRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    /// Parameters after each stage.
    pub checkpoints: Vec<ModelParams>,
    pub log: Vec<LogRow>,
    /// `history[t][s]`: metrics on scene `s` after stage `t`.
    pub history: Vec<Vec<SceneMetrics>>,
    pub records: Vec<MetricRecord>,
    pub ledger: BandwidthLedger,
}

impl CurriculumResult {
    pub fn final_record(&self) -> &MetricRecord {
        self.records.last().expect("at least one stage")
    }

    /// Payload bytes of feature messages, headers excluded.
    pub fn feature_payload_bytes(&self) -> u64 {
        self.ledger.by_kind(PayloadKind::Feature).payload
            + self.ledger.by_kind(PayloadKind::CompressedFeature).payload
    }
}

/// SplitMix64 over the master seed and a list of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(master), |acc, &t| mix(acc ^ mix(t)))
}

/// Dataset-level mIoU and pooled AP over every vehicle of every frame.
pub fn evaluate_frames(
    frames: &[Frame],
    p: &ModelParams,
    flags: &PipelineFlags,
    detection: DetectionConfig,
) -> Result<SceneMetrics> {
    if frames.is_empty() {
        return Err(Error::Empty("no evaluation frames".into()));
    }
    let mut iou = IouAccumulator::new(NUM_LABELS);
    let mut samples = Vec::new();
    for f in frames {
        let out = forward_pipeline(f, p, flags, &Overrides::default())?;
        for (v, o) in out.vehicles.iter().enumerate() {
            let gt = &f.truths[v + 1];
            iou.add(&argmax_labels(&o.seg_logits), &gt.seg_labels)?;
            samples.push(DetectionSample {
                predictions: decode_detections(&o.det, detection)?,
                ground_truth: gt.boxes.iter().map(|b| b.rect).collect(),
            });
        }
    }
    Ok(SceneMetrics {
        miou: iou.miou()?,
        ap50: average_precision_pooled(&samples, 0.5),
        ap70: average_precision_pooled(&samples, 0.7),
    })
}

pub fn train_curriculum(scenes: &[SceneData], init: ModelParams, cfg: &CurriculumConfig) -> Result<CurriculumResult> {
    if scenes.is_empty() {
        return Err(Error::Empty("curriculum has no scenes".into()));
    }
    cfg.loss.validate()?;
    let stages: Vec<Vec<Frame>> = match cfg.mode {
        CurriculumMode::Sequential => scenes.iter().map(|s| s.train.clone()).collect(),
        CurriculumMode::Joint => vec![scenes.iter().flat_map(|s| s.train.iter().cloned()).collect()],
    };
    let mut p = init;
    let mut buffer = ReplayBuffer::<Frame>::new(cfg.replay.select_count, cfg.replay.capacity)?;
    let mut ledger = BandwidthLedger::new();
    let mut result = CurriculumResult {
        checkpoints: Vec::new(),
        log: Vec::new(),
        history: Vec::new(),
        records: Vec::new(),
        ledger: BandwidthLedger::new(),
    };

    let evaluate_all = |p: &ModelParams| -> Result<Vec<SceneMetrics>> {
        scenes
            .iter()
            .map(|s| evaluate_frames(&s.test, p, &cfg.flags, cfg.detection))
            .collect()
    };

    for (stage, train) in stages.iter().enumerate() {
        let mut epoch_loss = f64::NAN;
        for epoch in 0..cfg.loss.epochs_per_scene {
            let stream_seed = derive_seed(cfg.seed, &[1, stage as u64, epoch as u64]);
            let batches = make_training_stream(
                train,
                &buffer,
                cfg.replay.replay_draw,
                cfg.loss.batch_size,
                stream_seed,
            )?;
            let mut sum = 0.0;
            for batch in &batches {
                let (loss, grads) = batch_gradient(batch, &p, &cfg.flags, &cfg.loss, |f, out| {
                    record_traffic(f, out, cfg.topology, &mut ledger)
                })?;
                p.sgd_step(&grads, cfg.loss.learning_rate);
                sum += loss;
            }
            epoch_loss = sum / batches.len() as f64;
            if !p.is_finite() {
                return Err(Error::Config(format!(
                    "training diverged at stage {stage}, epoch {epoch}; lower the learning rate"
                )));
            }
            let last = epoch + 1 == cfg.loss.epochs_per_scene;
            if cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0 && !last {
                for (s, m) in evaluate_all(&p)?.into_iter().enumerate() {
                    result.log.push(row(stage, epoch + 1, s, m, epoch_loss, &ledger));
                }
            }
        }
        let metrics = evaluate_all(&p)?;
        for (s, m) in metrics.iter().enumerate() {
            result
                .log
                .push(row(stage, cfg.loss.epochs_per_scene, s, *m, epoch_loss, &ledger));
        }
        result.history.push(metrics);
        result.records.push(MetricRecord::from_history(&result.history)?);
        result.checkpoints.push(p.clone());
        if cfg.replay.enabled && cfg.mode == CurriculumMode::Sequential {
            buffer.refresh(stage, train, derive_seed(cfg.seed, &[2, stage as u64]))?;
        }
    }
    result.ledger = ledger;
    Ok(result)
}

fn row(stage: usize, epoch: usize, split: usize, m: SceneMetrics, loss: f64, ledger: &BandwidthLedger) -> LogRow {
    LogRow {
        scene_idx: stage,
        epoch,
        split_scene: split,
        miou: m.miou,
        ap50: m.ap50,
        ap70: m.ap70,
        loss,
        cumulative_bytes: ledger.cumulative().total,
    }
}
