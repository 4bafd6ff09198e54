//! Experiment configuration: one TOML schema, presets, and variants that
//! overlay partial tables on the base config.

use serde::{Deserialize, Serialize};

use crate::channel::{Topology, WireFloat};
use crate::compensation::CompensationConfig;
use crate::error::{Error, Result};
use crate::eval::DetectionConfig;
use crate::fusion::{DistanceWeighting, GraphOptions, SelfLoop};
use crate::geometry::GridSpec;
use crate::model::ModelDims;
use crate::scene::{SceneStyle, SensorConfig, NUM_ENTITY_CLASSES, NUM_LABELS};
use crate::training::{CurriculumConfig, CurriculumMode, LossConfig, PipelineFlags, ReplayConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    /// One scene per entry, learned in this order.
    pub styles: Vec<SceneStyle>,
    pub num_vehicles: usize,
    pub num_steps: usize,
    pub extent: [u32; 2],
}

impl Default for ScenesConfig {
    fn default() -> Self {
        Self {
            styles: vec![SceneStyle::Urban, SceneStyle::Suburban, SceneStyle::Rural],
            num_vehicles: 4,
            num_steps: 30,
            extent: [48, 48],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorsConfig {
    pub vehicle_range: f64,
    pub rsu_range: f64,
    pub vehicle_occlusion: bool,
    pub rsu_occlusion: bool,
}

impl Default for SensorsConfig {
    fn default() -> Self {
        let s = SensorConfig::default();
        Self {
            vehicle_range: s.vehicle_range,
            rsu_range: s.rsu_range,
            vehicle_occlusion: s.vehicle_occlusion,
            rsu_occlusion: s.rsu_occlusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_channels: usize,
    pub decoder_channels: usize,
    pub context_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            feature_channels: d.feature_channels,
            decoder_channels: d.decoder_channels,
            context_pool: d.context_pool,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rsu_on: bool,
    pub graph_on: bool,
    pub compensator_on: bool,
    pub compression: usize,
    pub dpr_self: SelfLoop,
    pub dpr_distance: DistanceWeighting,
    pub compensation_threshold: f64,
    pub wire: WireFloat,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rsu_on: true,
            graph_on: true,
            compensator_on: true,
            compression: 1,
            dpr_self: SelfLoop::Include,
            dpr_distance: DistanceWeighting::Raw,
            compensation_threshold: CompensationConfig::default().threshold(),
            wire: WireFloat::F32,
        }
    }
}

/// Named overlay applied on top of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub mode: CurriculumMode,
    pub topology: Topology,
    pub eval_interval: usize,
    pub scenes: ScenesConfig,
    pub grid: GridSpec,
    pub sensors: SensorsConfig,
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    pub replay: ReplayConfig,
    pub loss: LossConfig,
    pub detection: DetectionConfig,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 1,
            mode: CurriculumMode::Sequential,
            topology: Topology::VehicleToVehicle,
            eval_interval: 0,
            scenes: ScenesConfig::default(),
            grid: GridSpec::default(),
            sensors: SensorsConfig::default(),
            model: ModelConfig::default(),
            pipeline: PipelineConfig::default(),
            replay: ReplayConfig::default(),
            loss: LossConfig::default(),
            detection: DetectionConfig::default(),
            variants: Vec::new(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        for v in &cfg.variants {
            cfg.variant(v)?;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.scenes.styles.is_empty() {
            return Err(Error::Config("scenes.styles must list at least one scene".into()));
        }
        if self.scenes.num_vehicles == 0 {
            return Err(Error::Config("scenes.num_vehicles must be at least 1".into()));
        }
        self.scene_config(SceneStyle::Suburban).validate()?;
        self.model_dims().validate()?;
        CompensationConfig::new(self.pipeline.compensation_threshold)?;
        self.loss.validate()?;
        if self.replay.select_count > self.replay.capacity {
            return Err(Error::Config(format!(
                "replay.select_count {} exceeds replay.capacity {}",
                self.replay.select_count, self.replay.capacity
            )));
        }
        let names: std::collections::BTreeSet<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        if names.len() != self.variants.len() {
            return Err(Error::Config("variant names must be unique".into()));
        }
        Ok(())
    }

    /// Base config with one variant's overlay applied, variants cleared.
    pub fn variant(&self, v: &Variant) -> Result<Self> {
        let mut base = toml::Table::try_from(Self {
            variants: Vec::new(),
            ..self.clone()
        })
        .map_err(config_err)?;
        merge(&mut base, &v.set);
        let mut cfg: Self = base
            .try_into()
            .map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
        cfg.name = format!("{}/{}", self.name, v.name);
        cfg.validate()
            .map_err(|e| Error::Config(format!("variant {:?}: {e}", v.name)))?;
        Ok(cfg)
    }

    /// `(name, config)` for every variant, or the base config alone.
    pub fn resolved_variants(&self) -> Result<Vec<(String, Self)>> {
        if self.variants.is_empty() {
            return Ok(vec![("default".into(), self.clone())]);
        }
        self.variants
            .iter()
            .map(|v| Ok((v.name.clone(), self.variant(v)?)))
            .collect()
    }

    pub fn scene_config(&self, style: SceneStyle) -> crate::scene::ScenarioConfig {
        let mut c = style.config();
        c.num_vehicles = self.scenes.num_vehicles;
        c.num_steps = self.scenes.num_steps;
        c.extent = self.scenes.extent;
        c
    }

    pub fn sensor_config(&self) -> SensorConfig {
        SensorConfig {
            grid: self.grid,
            vehicle_range: self.sensors.vehicle_range,
            rsu_range: self.sensors.rsu_range,
            vehicle_occlusion: self.sensors.vehicle_occlusion,
            rsu_occlusion: self.sensors.rsu_occlusion,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_channels: NUM_ENTITY_CLASSES,
            context_pool: self.model.context_pool,
            feature_channels: self.model.feature_channels,
            decoder_channels: self.model.decoder_channels,
            num_classes: NUM_LABELS,
            compression: self.pipeline.compression,
        }
    }

    pub fn pipeline_flags(&self) -> Result<PipelineFlags> {
        let p = &self.pipeline;
        Ok(PipelineFlags {
            rsu_on: p.rsu_on,
            graph_on: p.graph_on,
            compensator_on: p.compensator_on,
            compression: p.compression,
            graph: GraphOptions {
                self_loop: p.dpr_self,
                distance: p.dpr_distance,
            },
            compensation: CompensationConfig::new(p.compensation_threshold)?,
            wire: p.wire,
        })
    }

    pub fn curriculum(&self) -> Result<CurriculumConfig> {
        Ok(CurriculumConfig {
            seed: self.seed,
            loss: self.loss,
            flags: self.pipeline_flags()?,
            replay: self.replay,
            mode: self.mode,
            topology: self.topology,
            detection: self.detection,
            eval_interval: self.eval_interval,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Smoke,
    Ablation,
    Bandwidth,
    Forgetting,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Smoke, Preset::Ablation, Preset::Bandwidth, Preset::Forgetting];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Ablation => "ablation",
            Preset::Bandwidth => "bandwidth",
            Preset::Forgetting => "forgetting",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
    }

    pub fn config(self) -> ExperimentConfig {
        let base = ExperimentConfig {
            name: self.name().into(),
            ..ExperimentConfig::default()
        };
        match self {
            Preset::Smoke => ExperimentConfig {
                scenes: ScenesConfig {
                    styles: vec![SceneStyle::Suburban],
                    num_vehicles: 2,
                    num_steps: 10,
                    ..ScenesConfig::default()
                },
                grid: GridSpec::new(8, 8, 1.0),
                loss: LossConfig {
                    epochs_per_scene: 2,
                    ..LossConfig::default()
                },
                ..base
            },
            Preset::Ablation => ExperimentConfig {
                mode: CurriculumMode::Joint,
                variants: ablation_variants(),
                ..base
            },
            Preset::Bandwidth => ExperimentConfig {
                mode: CurriculumMode::Joint,
                variants: [1usize, 2, 4, 8, 16, 32]
                    .into_iter()
                    .map(|n| variant(&format!("n{n}"), &[("pipeline", "compression", toml::Value::from(n as i64))]))
                    .collect(),
                ..base
            },
            Preset::Forgetting => ExperimentConfig {
                variants: vec![
                    variant("replay_on", &[("replay", "enabled", true.into())]),
                    variant("replay_off", &[("replay", "enabled", false.into())]),
                ],
                ..base
            },
        }
    }
}

fn variant(name: &str, sets: &[(&str, &str, toml::Value)]) -> Variant {
    let mut set = toml::Table::new();
    for (table, key, value) in sets {
        let t = set
            .entry(table.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(t) = t {
            t.insert(key.to_string(), value.clone());
        }
    }
    Variant {
        name: name.into(),
        set,
    }
}

/// The no-fusion baseline and six RSU / graph / compensator combinations.
pub fn ablation_variants() -> Vec<Variant> {
    [
        ("none", false, false, false),
        ("comp", false, false, true),
        ("graph", false, true, false),
        ("graph_comp", false, true, true),
        ("rsu_comp", true, false, true),
        ("rsu_graph", true, true, false),
        ("rsu_graph_comp", true, true, true),
    ]
    .into_iter()
    .map(|(name, rsu, graph, comp)| {
        variant(
            name,
            &[
                ("pipeline", "rsu_on", rsu.into()),
                ("pipeline", "graph_on", graph.into()),
                ("pipeline", "compensator_on", comp.into()),
            ],
        )
    })
    .collect()
}
