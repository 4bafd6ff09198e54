//! In-browser front end: browse a generated scene, train a small model and
//! probe cooperative inference, and price the feature traffic.
//!
//! Everything below the `wasm_bindgen` wrappers is plain Rust so it can be
//! tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ar2vp_core::channel::{feature_message_bytes, Topology, WireFloat};
use ar2vp_core::compensation::CompensationConfig;
use ar2vp_core::eval::{argmax_labels, miou};
use ar2vp_core::experiment::{build_scenes, run_experiment, ExperimentConfig, Preset};
use ar2vp_core::model::ModelParams;
use ar2vp_core::scene::{EntityClass, Frame, SceneStyle, NUM_LABELS};
use ar2vp_core::training::{forward_pipeline, Overrides};
use ar2vp_core::{Error, Result, Tensor3};

/// RGBA per segmentation label; 0 is unlabeled.
const PALETTE: [[u8; 4]; NUM_LABELS] = [
    [30, 30, 34, 255],
    [120, 120, 128, 255],
    [150, 90, 60, 255],
    [220, 50, 50, 255],
    [240, 200, 40, 255],
    [60, 150, 70, 255],
    [190, 170, 120, 255],
];

/// Drawing order for observed occupancy: later classes paint over earlier.
const PAINT_ORDER: [EntityClass; 6] = [
    EntityClass::Ground,
    EntityClass::Road,
    EntityClass::Vegetation,
    EntityClass::Building,
    EntityClass::Pedestrian,
    EntityClass::Vehicle,
];

fn parse_style(name: &str) -> Result<SceneStyle> {
    match name {
        "urban" => Ok(SceneStyle::Urban),
        "suburban" => Ok(SceneStyle::Suburban),
        "rural" => Ok(SceneStyle::Rural),
        _ => Err(Error::Config(format!("unknown scene style {name:?}"))),
    }
}

fn labels_rgba(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|&l| PALETTE[usize::from(l).min(NUM_LABELS - 1)]).collect()
}

fn occupancy_rgba(grid: &Tensor3) -> Vec<u8> {
    let labels: Vec<u8> = (0..grid.cells())
        .map(|cell| {
            let v = grid.cell(cell);
            PAINT_ORDER
                .iter()
                .rev()
                .find(|c| v[c.channel()] > 0.0)
                .map_or(0, |c| c.label())
        })
        .collect();
    labels_rgba(&labels)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub miou: f64,
    pub ap50: f64,
    pub ap70: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Inference {
    /// Graph weights of vehicles 1..=N into the chosen vehicle.
    pub weights: Option<Vec<f64>>,
    pub ratio: Option<f64>,
    pub miou: f64,
    #[serde(skip)]
    pub rgba: Vec<u8>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Traffic {
    pub message_bytes: usize,
    pub sends_per_step: usize,
    pub bytes_per_step: usize,
}

/// Feature traffic of one step with `vehicles` vehicles.
pub fn traffic(
    vehicles: usize,
    side: usize,
    channels: usize,
    compression: usize,
    f32_wire: bool,
    model_at_rsu: bool,
) -> Result<Traffic> {
    if compression == 0 || !channels.is_multiple_of(compression) {
        return Err(Error::Config(format!("{compression} does not divide {channels} channels")));
    }
    let float = if f32_wire { WireFloat::F32 } else { WireFloat::F64 };
    let topology = if model_at_rsu {
        Topology::ModelAtRsu
    } else {
        Topology::VehicleToVehicle
    };
    let message_bytes = feature_message_bytes(side, side, channels / compression, float);
    let sends_per_step = topology.feature_sends_per_step(vehicles);
    Ok(Traffic {
        message_bytes,
        sends_per_step,
        bytes_per_step: message_bytes * sends_per_step,
    })
}

/// One generated scene, its frames in step order and, once trained, a model.
pub struct Session {
    cfg: ExperimentConfig,
    frames: Vec<Frame>,
    params: Option<ModelParams>,
}

impl Session {
    pub fn new(style: &str, seed: u64, vehicles: usize) -> Result<Self> {
        let mut cfg = Preset::Smoke.config();
        cfg.name = "web".into();
        cfg.seed = seed;
        cfg.scenes.styles = vec![parse_style(style)?];
        cfg.scenes.num_vehicles = vehicles;
        cfg.scenes.num_steps = 15;
        cfg.grid.height = 16;
        cfg.grid.width = 16;
        cfg.loss.epochs_per_scene = 6;
        cfg.replay.enabled = false;
        cfg.validate()?;
        let mut frames: Vec<Frame> = build_scenes(&cfg)?
            .into_iter()
            .flat_map(|s| s.train.into_iter().chain(s.test))
            .collect();
        frames.sort_by_key(|f| f.step);
        Ok(Self {
            cfg,
            frames,
            params: None,
        })
    }

    pub fn side(&self) -> usize {
        self.cfg.grid.height
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    pub fn agents(&self) -> usize {
        self.frames[0].poses.len()
    }

    pub fn is_trained(&self) -> bool {
        self.params.is_some()
    }

    fn frame(&self, step: usize) -> Result<&Frame> {
        self.frames.get(step).ok_or(Error::IndexOutOfRange {
            index: step,
            len: self.frames.len(),
        })
    }

    fn agent(&self, step: usize, agent: usize) -> Result<usize> {
        let n = self.frame(step)?.poses.len();
        if agent >= n {
            return Err(Error::IndexOutOfRange { index: agent, len: n });
        }
        Ok(agent)
    }

    pub fn observation(&self, step: usize, agent: usize) -> Result<Vec<u8>> {
        let a = self.agent(step, agent)?;
        Ok(occupancy_rgba(&self.frame(step)?.grids[a].data))
    }

    pub fn truth(&self, step: usize, agent: usize) -> Result<Vec<u8>> {
        let a = self.agent(step, agent)?;
        Ok(labels_rgba(&self.frame(step)?.truths[a].seg_labels))
    }

    /// Trains the full pipeline on the scene's training steps.
    pub fn train(&mut self) -> Result<TrainReport> {
        let out = run_experiment(&self.cfg)?;
        let run = &out.variants[0];
        let m = run.result.final_record().mean();
        self.params = run.result.checkpoints.last().cloned();
        Ok(TrainReport {
            miou: m.miou,
            ap50: m.ap50,
            ap70: m.ap70,
        })
    }

    /// Segmentation of `vehicle` (1-based) under the chosen components.
    pub fn infer(
        &self,
        step: usize,
        vehicle: usize,
        rsu_on: bool,
        graph_on: bool,
        compensator_on: bool,
        threshold: f64,
    ) -> Result<Inference> {
        let p = self
            .params
            .as_ref()
            .ok_or_else(|| Error::Config("train the model first".into()))?;
        if vehicle == 0 || self.agent(step, vehicle).is_err() {
            return Err(Error::Config(format!("vehicle {vehicle} is not in the frame")));
        }
        let frame = self.frame(step)?;
        let mut flags = self.cfg.pipeline_flags()?;
        flags.rsu_on = rsu_on;
        flags.graph_on = graph_on;
        flags.compensator_on = compensator_on;
        flags.compensation = CompensationConfig::new(threshold)?;
        let out = forward_pipeline(frame, p, &flags, &Overrides::default())?;
        let v = &out.vehicles[vehicle - 1];
        let labels = argmax_labels(&v.seg_logits);
        let (m, _) = miou(&labels, &frame.truths[vehicle].seg_labels, NUM_LABELS)?;
        Ok(Inference {
            weights: v.weights.clone(),
            ratio: v.ratio,
            miou: m,
            rgba: labels_rgba(&labels),
        })
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(style: &str, seed: u32, vehicles: usize) -> std::result::Result<Demo, JsError> {
        Session::new(style, u64::from(seed), vehicles).map(Demo).map_err(js)
    }

    pub fn side(&self) -> usize {
        self.0.side()
    }

    pub fn steps(&self) -> usize {
        self.0.steps()
    }

    pub fn agents(&self) -> usize {
        self.0.agents()
    }

    pub fn observation(&self, step: usize, agent: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.0.observation(step, agent).map_err(js)
    }

    pub fn truth(&self, step: usize, agent: usize) -> std::result::Result<Vec<u8>, JsError> {
        self.0.truth(step, agent).map_err(js)
    }

    /// JSON `{miou, ap50, ap70}` on the held-out steps.
    pub fn train(&mut self) -> std::result::Result<String, JsError> {
        self.0.train().map(|r| json(&r)).map_err(js)
    }

    /// JSON `{weights, ratio, miou}`; the label image follows via
    /// [`Demo::prediction`].
    pub fn infer(
        &self,
        step: usize,
        vehicle: usize,
        rsu_on: bool,
        graph_on: bool,
        compensator_on: bool,
        threshold: f64,
    ) -> std::result::Result<String, JsError> {
        self.0
            .infer(step, vehicle, rsu_on, graph_on, compensator_on, threshold)
            .map(|i| json(&i))
            .map_err(js)
    }

    pub fn prediction(
        &self,
        step: usize,
        vehicle: usize,
        rsu_on: bool,
        graph_on: bool,
        compensator_on: bool,
        threshold: f64,
    ) -> std::result::Result<Vec<u8>, JsError> {
        self.0
            .infer(step, vehicle, rsu_on, graph_on, compensator_on, threshold)
            .map(|i| i.rgba)
            .map_err(js)
    }
}

/// JSON `{message_bytes, sends_per_step, bytes_per_step}`.
#[wasm_bindgen]
pub fn bandwidth(
    vehicles: usize,
    side: usize,
    channels: usize,
    compression: usize,
    f32_wire: bool,
    model_at_rsu: bool,
) -> std::result::Result<String, JsError> {
    traffic(vehicles, side, channels, compression, f32_wire, model_at_rsu)
        .map(|t| json(&t))
        .map_err(js)
}
