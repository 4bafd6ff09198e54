//! Synthetic dynamic traffic scenes and their rasterisation into per-agent
//! bird's-eye-view grids.
//!
//! Geometry is axis-aligned: footprint edges sit on half-integer metres and
//! agents on integer metres, so with unit cells and quarter-turn headings no
//! cell centre ever lies on an entity edge.

mod generate;
mod raster;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation2, Vec2};

pub use generate::{generate_scenario, ScenarioConfig, SceneStyle};
pub use raster::{build_frame, rasterize, BevGrid, Frame, GroundTruth, GtBox, SensorConfig};

/// Number of entity classes, which is also the number of BEV input channels.
pub const NUM_ENTITY_CLASSES: usize = 6;
/// Entity classes plus the "unlabeled" background label 0.
pub const NUM_LABELS: usize = NUM_ENTITY_CLASSES + 1;
pub const UNLABELED: u8 = 0;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Road,
    Building,
    Vehicle,
    Pedestrian,
    Vegetation,
    Ground,
}

impl EntityClass {
    pub const ALL: [EntityClass; NUM_ENTITY_CLASSES] = [
        EntityClass::Road,
        EntityClass::Building,
        EntityClass::Vehicle,
        EntityClass::Pedestrian,
        EntityClass::Vegetation,
        EntityClass::Ground,
    ];

    /// BEV input channel.
    pub fn channel(self) -> usize {
        self as usize
    }

    /// Segmentation label (0 is reserved for unlabeled).
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Self> {
        Self::ALL.get((label as usize).checked_sub(1)?).copied()
    }

    pub fn is_static(self) -> bool {
        !matches!(self, EntityClass::Vehicle | EntityClass::Pedestrian)
    }

    /// Which class wins a cell covered by several entities.
    pub(crate) fn label_priority(self) -> u8 {
        match self {
            EntityClass::Pedestrian => 6,
            EntityClass::Vehicle => 5,
            EntityClass::Building => 4,
            EntityClass::Vegetation => 3,
            EntityClass::Road => 2,
            EntityClass::Ground => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityClass::Road => "road",
            EntityClass::Building => "building",
            EntityClass::Vehicle => "vehicle",
            EntityClass::Pedestrian => "pedestrian",
            EntityClass::Vegetation => "vegetation",
            EntityClass::Ground => "ground",
        }
    }
}

pub fn label_name(label: u8) -> &'static str {
    EntityClass::from_label(label).map_or("unlabeled", EntityClass::name)
}

/// Axis-aligned rectangle `[min, max)` in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Self { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn center(&self) -> Vec2 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.min[0] && p[0] < self.max[0] && p[1] >= self.min[1] && p[1] < self.max[1]
    }

    /// True if the rectangles overlap after growing `self` by `margin`.
    pub fn intersects(&self, other: &Rect, margin: f64) -> bool {
        self.min[0] - margin < other.max[0]
            && other.min[0] < self.max[0] + margin
            && self.min[1] - margin < other.max[1]
            && other.min[1] < self.max[1] + margin
    }

    pub fn translated(&self, d: Vec2) -> Rect {
        Rect {
            min: [self.min[0] + d[0], self.min[1] + d[1]],
            max: [self.max[0] + d[0], self.max[1] + d[1]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub class: EntityClass,
    pub footprint: Rect,
    /// Metres per step; zero for static classes.
    pub velocity: Vec2,
}

impl Entity {
    pub fn validate(&self) -> Result<()> {
        let f = &self.footprint;
        if !(f.width() > 0.0 && f.height() > 0.0) {
            return Err(Error::Config(format!(
                "entity {} has a degenerate footprint",
                self.id
            )));
        }
        if self.class.is_static() && self.velocity != [0.0, 0.0] {
            return Err(Error::Config(format!(
                "static {} entity {} has non-zero velocity",
                self.class.name(),
                self.id
            )));
        }
        Ok(())
    }
}

/// One synthetic traffic scene: static layout, moving entities, an RSU and
/// the ego vehicles that ride on designated vehicle entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub extent: Rect,
    pub entities: Vec<Entity>,
    pub rsu_pose: Pose,
    pub vehicle_spawns: Vec<Pose>,
    /// Entity carrying each ego vehicle, parallel to `vehicle_spawns`.
    pub ego_entities: Vec<u32>,
    pub num_steps: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    schema_version: u32,
    #[serde(flatten)]
    scenario: Scenario,
}

impl Scenario {
    pub fn num_vehicles(&self) -> usize {
        self.vehicle_spawns.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("scenario needs num_steps >= 1".into()));
        }
        if !self.extent.contains(self.rsu_pose.position) {
            return Err(Error::Config("RSU lies outside the scenario extent".into()));
        }
        self.rsu_pose.validate()?;
        if self.ego_entities.len() != self.vehicle_spawns.len() {
            return Err(Error::Config(
                "ego_entities and vehicle_spawns differ in length".into(),
            ));
        }
        for (spawn, id) in self.vehicle_spawns.iter().zip(&self.ego_entities) {
            spawn.validate()?;
            if !self.extent.contains(spawn.position) {
                return Err(Error::Config(format!("spawn of ego entity {id} lies outside the extent")));
            }
            match self.entities.iter().find(|e| e.id == *id) {
                Some(e) if e.class == EntityClass::Vehicle => {}
                _ => {
                    return Err(Error::Config(format!(
                        "ego entity {id} is not a vehicle entity"
                    )))
                }
            }
        }
        self.entities.iter().try_for_each(Entity::validate)
    }

    /// Entities at step `t`. Moving entities travel `t · velocity` and bounce
    /// off the extent boundary; the result depends only on `(self, t)`.
    pub fn entities_at(&self, t: usize) -> Result<Vec<Entity>> {
        if t >= self.num_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                num_steps: self.num_steps,
            });
        }
        Ok(self.entities.iter().map(|e| self.advance(e, t as f64)).collect())
    }

    fn advance(&self, e: &Entity, t: f64) -> Entity {
        if e.velocity == [0.0, 0.0] {
            return e.clone();
        }
        let mut out = e.clone();
        for axis in 0..2 {
            let size = e.footprint.max[axis] - e.footprint.min[axis];
            let lo = self.extent.min[axis];
            let hi = self.extent.max[axis] - size;
            let (pos, vel) = reflect(e.footprint.min[axis], e.velocity[axis], lo, hi, t);
            out.footprint.min[axis] = pos;
            out.footprint.max[axis] = pos + size;
            out.velocity[axis] = vel;
        }
        out
    }

    /// Poses of the RSU (index 0) followed by every ego vehicle at step `t`.
    pub fn agent_poses(&self, t: usize) -> Result<Vec<Pose>> {
        let entities = self.entities_at(t)?;
        let mut poses = Vec::with_capacity(self.num_vehicles() + 1);
        poses.push(self.rsu_pose);
        for (spawn, id) in self.vehicle_spawns.iter().zip(&self.ego_entities) {
            let initial = self
                .entities
                .iter()
                .find(|e| e.id == *id)
                .ok_or_else(|| Error::Config(format!("missing ego entity {id}")))?;
            let now = entities.iter().find(|e| e.id == *id).expect("same ids");
            let turned = (0..2).any(|a| initial.velocity[a] * now.velocity[a] < 0.0);
            let rotation = if turned {
                Rotation2::quarter_turns(2).compose(&spawn.rotation)
            } else {
                spawn.rotation
            };
            poses.push(Pose {
                position: now.footprint.center(),
                rotation,
            });
        }
        Ok(poses)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            scenario: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCENARIO_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported scenario schema_version {v}"
                )))
            }
            None => return Err(Error::Config("scenario file lacks schema_version".into())),
        }
        let file: ScenarioFile = serde_json::from_value(value)?;
        file.scenario.validate()?;
        Ok(file.scenario)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Entities at step `t` (see [`Scenario::entities_at`]).
pub fn step_scenario(s: &Scenario, t: usize) -> Result<Vec<Entity>> {
    s.entities_at(t)
}

/// Position and velocity after `t` steps of motion inside `[lo, hi]` with
/// mirror reflection at both ends.
fn reflect(start: f64, v: f64, lo: f64, hi: f64, t: f64) -> (f64, f64) {
    let len = hi - lo;
    if v == 0.0 || len <= 0.0 {
        return (start, v);
    }
    let period = 2.0 * len;
    let fold = |u: f64| {
        let m = u.rem_euclid(period);
        if m <= len {
            m
        } else {
            period - m
        }
    };
    let u = start - lo + v * t;
    let pos = lo + fold(u);
    // direction of travel over the next half step
    let m_mid = (u + 0.5 * v).rem_euclid(period);
    let vel = if m_mid < len { v } else { -v };
    (pos, vel)
}
