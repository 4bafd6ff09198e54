use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::{ExperimentConfig, Variant};
use super::plot::{line_plot, Series};
use crate::error::{Error, Result};
use crate::eval::SceneMetrics;
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::scene::{build_frame, generate_scenario};
use crate::training::{
    derive_seed, evaluate_frames, split_frames, train_curriculum, write_log_csv, CurriculumMode, CurriculumResult,
    SceneData,
};

pub const SUMMARY_HEADER: &str = "variant,rsu_on,graph_on,compensator_on,replay_on,compression,threshold,select_count,\
mIoU,AP50,AP70,forget_mIoU,forget_AP50,forget_AP70,feature_payload_bytes,total_bytes";

/// Generates every scene of the curriculum and splits its frames.
pub fn build_scenes(cfg: &ExperimentConfig) -> Result<Vec<SceneData>> {
    let sensors = cfg.sensor_config();
    cfg.scenes
        .styles
        .iter()
        .enumerate()
        .map(|(k, &style)| {
            let s = generate_scenario(derive_seed(cfg.seed, &[3, k as u64]), &cfg.scene_config(style))?;
            let frames = (0..s.num_steps)
                .map(|t| build_frame(&s, t, &sensors))
                .collect::<Result<Vec<_>>>()?;
            let data = split_frames(frames);
            if data.train.is_empty() || data.test.is_empty() {
                return Err(Error::Config(format!(
                    "scene {k} needs at least 5 steps to have both train and test frames"
                )));
            }
            Ok(data)
        })
        .collect()
}

fn init_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    ModelParams::init(cfg.model_dims(), derive_seed(cfg.seed, &[4]))
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub name: String,
    pub config: ExperimentConfig,
    pub result: CurriculumResult,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub rsu_on: bool,
    pub graph_on: bool,
    pub compensator_on: bool,
    pub replay_on: bool,
    pub compression: usize,
    pub threshold: f64,
    pub select_count: usize,
    /// Means over every scene's test split after the last stage.
    pub metrics: SceneMetrics,
    pub forget_miou: Option<f64>,
    pub forget_ap50: Option<f64>,
    pub forget_ap70: Option<f64>,
    pub feature_payload_bytes: u64,
    pub total_bytes: u64,
}

impl VariantRun {
    pub fn summary(&self) -> SummaryRow {
        let rec = self.result.final_record();
        let p = &self.config.pipeline;
        SummaryRow {
            rsu_on: p.rsu_on,
            graph_on: p.graph_on,
            compensator_on: p.compensator_on,
            replay_on: self.config.replay.enabled,
            compression: p.compression,
            threshold: p.compensation_threshold,
            select_count: self.config.replay.select_count,
            metrics: rec.mean(),
            forget_miou: rec.forget_miou,
            forget_ap50: rec.forget_ap50,
            forget_ap70: rec.forget_ap70,
            feature_payload_bytes: self.result.feature_payload_bytes(),
            total_bytes: self.result.ledger.cumulative().total,
        }
    }

    fn summary_line(&self) -> String {
        let s = self.summary();
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
            self.name,
            s.rsu_on,
            s.graph_on,
            s.compensator_on,
            s.replay_on,
            s.compression,
            s.threshold,
            s.select_count,
            s.metrics.miou,
            s.metrics.ap50,
            s.metrics.ap70,
            opt(s.forget_miou),
            opt(s.forget_ap50),
            opt(s.forget_ap70),
            s.feature_payload_bytes,
            s.total_bytes
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub variants: Vec<VariantRun>,
}

impl RunOutput {
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for v in &self.variants {
            s.push_str(&v.summary_line());
            s.push('\n');
        }
        s
    }

    pub fn variant(&self, name: &str) -> Option<&VariantRun> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Trains every variant; no filesystem access.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let variants = cfg.resolved_variants()?;
    let mut cache: Vec<(ExperimentConfig, std::rc::Rc<Vec<SceneData>>)> = Vec::new();
    let mut runs = Vec::with_capacity(variants.len());
    for (name, vcfg) in variants {
        // variants that only change training settings share scene data
        let key = ExperimentConfig {
            name: String::new(),
            variants: Vec::new(),
            pipeline: Default::default(),
            replay: Default::default(),
            loss: Default::default(),
            model: Default::default(),
            detection: Default::default(),
            mode: Default::default(),
            topology: Default::default(),
            eval_interval: 0,
            ..vcfg.clone()
        };
        let scenes = match cache.iter().find(|(k, _)| *k == key) {
            Some((_, s)) => s.clone(),
            None => {
                let s = std::rc::Rc::new(build_scenes(&vcfg)?);
                cache.push((key, s.clone()));
                s
            }
        };
        let result = train_curriculum(&scenes, init_params(&vcfg)?, &vcfg.curriculum()?)?;
        runs.push(VariantRun {
            name,
            config: vcfg,
            result,
        });
    }
    Ok(RunOutput {
        config: cfg.clone(),
        variants: runs,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(contents.as_ref())?;
    Ok(())
}

/// Writes the resolved config, per-variant logs and checkpoints, the summary
/// and plots under `out_dir`.
pub fn write_artifacts(out: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_file(&out_dir.join("config.resolved.toml"), out.config.to_toml()?)?;
    write_file(&out_dir.join("summary.csv"), out.summary_csv())?;
    for v in &out.variants {
        let dir = out_dir.join(&v.name);
        fs::create_dir_all(&dir)?;
        write_file(&dir.join("config.resolved.toml"), v.config.to_toml()?)?;
        let mut csv = Vec::new();
        write_log_csv(&v.result.log, &mut csv)?;
        write_file(&dir.join("metrics.csv"), csv)?;
        for (k, p) in v.result.checkpoints.iter().enumerate() {
            save_checkpoint(p, &dir.join(format!("scene_{k}.ckpt")))?;
        }
    }
    let sequential: Vec<&VariantRun> = out
        .variants
        .iter()
        .filter(|v| v.config.mode == CurriculumMode::Sequential && v.result.history.len() > 1)
        .collect();
    if !sequential.is_empty() {
        let series: Vec<Series> = sequential
            .iter()
            .map(|v| Series {
                name: v.name.clone(),
                points: v
                    .result
                    .history
                    .iter()
                    .enumerate()
                    .map(|(t, row)| (t as f64, row[0].miou))
                    .collect(),
            })
            .collect();
        write_file(
            &out_dir.join("forgetting.svg"),
            line_plot("First-scene mIoU over the curriculum", "scenes learned - 1", "mIoU", &series),
        )?;
    }
    if out.variants.len() > 1 {
        let mut points: Vec<(f64, f64)> = out
            .variants
            .iter()
            .map(|v| {
                let s = v.summary();
                (s.feature_payload_bytes as f64, s.metrics.miou)
            })
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        write_file(
            &out_dir.join("tradeoff.svg"),
            line_plot(
                "Performance vs bandwidth",
                "feature payload bytes",
                "mIoU",
                &[Series {
                    name: out.config.name.clone(),
                    points,
                }],
            ),
        )?;
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    write_artifacts(&out, out_dir)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Compression,
    Threshold,
    SelectCount,
}

impl SweepAxis {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "compression" | "compression_n" => Ok(Self::Compression),
            "threshold" | "lambda_c" => Ok(Self::Threshold),
            "mu" | "select_count" => Ok(Self::SelectCount),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {name:?}; use compression, threshold or mu"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Compression => "compression",
            Self::Threshold => "threshold",
            Self::SelectCount => "mu",
        }
    }
}

/// Base config with its variants replaced by one per sweep value.
pub fn sweep_config(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<ExperimentConfig> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let integer = |v: f64| -> Result<i64> {
        if v.fract() == 0.0 && v >= 0.0 {
            Ok(v as i64)
        } else {
            Err(Error::Config(format!("{} values must be non-negative integers, got {v}", axis.name())))
        }
    };
    let mut variants = Vec::with_capacity(values.len());
    for &v in values {
        let (table, key, value) = match axis {
            SweepAxis::Compression => ("pipeline", "compression", toml::Value::from(integer(v)?)),
            SweepAxis::Threshold => ("pipeline", "compensation_threshold", toml::Value::from(v)),
            SweepAxis::SelectCount => ("replay", "select_count", toml::Value::from(integer(v)?)),
        };
        let mut inner = toml::Table::new();
        inner.insert(key.into(), value);
        let mut set = toml::Table::new();
        set.insert(table.into(), toml::Value::Table(inner));
        variants.push(Variant {
            name: format!("{}_{v}", axis.name()),
            set,
        });
    }
    let swept = ExperimentConfig {
        variants,
        ..cfg.clone()
    };
    for v in &swept.variants {
        swept.variant(v)?;
    }
    Ok(swept)
}

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out_dir: &Path) -> Result<RunOutput> {
    run(&sweep_config(cfg, axis, values)?, out_dir)
}

/// Scores a checkpoint on every scene's test split.
pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<SceneMetrics>> {
    let p = load_checkpoint(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.pipeline.compression = p.dims.compression;
    let flags = cfg.pipeline_flags()?;
    build_scenes(&cfg)?
        .iter()
        .map(|s| evaluate_frames(&s.test, &p, &flags, cfg.detection))
        .collect()
}
