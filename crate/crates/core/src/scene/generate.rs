use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Entity, EntityClass, Rect, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation2};

/// Layout families used to model changes between scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStyle {
    /// Dense blocks of buildings on a road grid, heavy traffic.
    Urban,
    /// Mixed buildings, vegetation and open ground.
    Suburban,
    /// Open ground and vegetation along a single crossing, no buildings.
    Rural,
}

impl SceneStyle {
    pub fn config(self) -> ScenarioConfig {
        let base = ScenarioConfig::default();
        match self {
            SceneStyle::Urban => ScenarioConfig {
                horizontal_roads: 2,
                vertical_roads: 2,
                buildings: 14,
                vegetation: 2,
                ground_patches: 0,
                traffic: 6,
                pedestrians: 6,
                ..base
            },
            SceneStyle::Suburban => base,
            SceneStyle::Rural => ScenarioConfig {
                horizontal_roads: 1,
                vertical_roads: 1,
                buildings: 0,
                vegetation: 10,
                ground_patches: 8,
                traffic: 2,
                pedestrians: 2,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Width and height of the scene in metres.
    pub extent: [u32; 2],
    pub num_vehicles: usize,
    pub num_steps: usize,
    pub horizontal_roads: usize,
    pub vertical_roads: usize,
    /// Odd, so lanes sit on integer metres.
    pub road_width: u32,
    pub buildings: usize,
    pub vegetation: usize,
    pub ground_patches: usize,
    /// Non-ego moving vehicles.
    pub traffic: usize,
    pub pedestrians: usize,
    /// Ego vehicle speed in metres per step.
    pub ego_speed: u32,
    pub max_retries: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            extent: [48, 48],
            num_vehicles: 4,
            num_steps: 30,
            horizontal_roads: 1,
            vertical_roads: 2,
            road_width: 5,
            buildings: 6,
            vegetation: 6,
            ground_patches: 4,
            traffic: 3,
            pedestrians: 4,
            ego_speed: 1,
            max_retries: 400,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extent[0] < 12 || self.extent[1] < 12 {
            return Err(Error::Config("scenario extent must be at least 12 m per side".into()));
        }
        if self.road_width < 3 || self.road_width.is_multiple_of(2) {
            return Err(Error::Config("road_width must be odd and at least 3".into()));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if self.num_vehicles + self.traffic > 0 && self.horizontal_roads + self.vertical_roads == 0 {
            return Err(Error::Config("vehicles need at least one road".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Road {
    horizontal: bool,
    center: i64,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    cfg: &'a ScenarioConfig,
    w: i64,
    h: i64,
    entities: Vec<Entity>,
}

impl Builder<'_> {
    fn push(&mut self, class: EntityClass, footprint: Rect, velocity: [f64; 2]) -> u32 {
        let id = self.entities.len() as u32;
        self.entities.push(Entity {
            id,
            class,
            footprint,
            velocity,
        });
        id
    }

    fn rects_of(&self, classes: &[EntityClass]) -> Vec<Rect> {
        self.entities
            .iter()
            .filter(|e| classes.contains(&e.class))
            .map(|e| e.footprint)
            .collect()
    }

    fn road_centers(&mut self, count: usize, through: i64, span: i64, what: &str) -> Result<Vec<i64>> {
        let hw = (self.cfg.road_width / 2) as i64;
        let min_sep = self.cfg.road_width as i64 + 6;
        let mut centers: Vec<i64> = Vec::new();
        for k in 0..count {
            if k == 0 {
                centers.push(through);
                continue;
            }
            let mut placed = false;
            for _ in 0..self.cfg.max_retries {
                let c = self.rng.gen_range(hw..span - hw);
                if centers.iter().all(|o| (o - c).abs() >= min_sep) {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place {what} road {} of {count} at least {min_sep} m from the others",
                    k + 1
                )));
            }
        }
        Ok(centers)
    }

    /// Random axis-aligned block with integer size in `sizes`, clear of `avoid`.
    fn place_block(
        &mut self,
        sizes: (i64, i64),
        avoid: &[Rect],
        margin: f64,
        what: &str,
    ) -> Result<Rect> {
        for _ in 0..self.cfg.max_retries {
            let sw = self.rng.gen_range(sizes.0..=sizes.1).min(self.w);
            let sh = self.rng.gen_range(sizes.0..=sizes.1).min(self.h);
            let x0 = self.rng.gen_range(0..=self.w - sw);
            let y0 = self.rng.gen_range(0..=self.h - sh);
            let rect = Rect::new(
                [x0 as f64 - 0.5, y0 as f64 - 0.5],
                [(x0 + sw) as f64 - 0.5, (y0 + sh) as f64 - 0.5],
            );
            if avoid.iter().all(|a| !rect.intersects(a, margin)) {
                return Ok(rect);
            }
        }
        Err(Error::Generation(format!(
            "could not place {what} clear of existing layout after {} attempts",
            self.cfg.max_retries
        )))
    }

    /// Vehicle footprint (3 × 5 m, long side along the road) in a lane.
    fn place_vehicle(&mut self, roads: &[Road], speed: f64, what: &str) -> Result<(u32, Rotation2)> {
        let occupied = self.rects_of(&[EntityClass::Vehicle]);
        for _ in 0..self.cfg.max_retries {
            let road = *roads.choose(&mut self.rng).expect("validated: roads exist");
            let lane: i64 = if self.rng.gen_bool(0.5) { 1 } else { -1 };
            let (along_span, cross) = if road.horizontal {
                (self.w, road.center + lane)
            } else {
                (self.h, road.center + lane)
            };
            let along = self.rng.gen_range(2..along_span - 2);
            let (center, half, velocity, rotation) = if road.horizontal {
                (
                    [along as f64, cross as f64],
                    [2.5, 1.5],
                    [speed * lane as f64, 0.0],
                    Rotation2::quarter_turns(if lane > 0 { 0 } else { 2 }),
                )
            } else {
                (
                    [cross as f64, along as f64],
                    [1.5, 2.5],
                    [0.0, speed * lane as f64],
                    Rotation2::quarter_turns(if lane > 0 { 3 } else { 1 }),
                )
            };
            let rect = Rect::new(
                [center[0] - half[0], center[1] - half[1]],
                [center[0] + half[0], center[1] + half[1]],
            );
            if occupied.iter().all(|o| !rect.intersects(o, 1.0)) {
                let id = self.push(EntityClass::Vehicle, rect, velocity);
                return Ok((id, rotation));
            }
        }
        Err(Error::Generation(format!(
            "could not place {what} without overlapping another vehicle after {} attempts",
            self.cfg.max_retries
        )))
    }
}

/// Builds a scene deterministically from `(layout_seed, config)`. Different
/// seeds move roads, buildings and vegetation; the style presets change the
/// class mix.
pub fn generate_scenario(layout_seed: u64, config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let w = config.extent[0] as i64;
    let h = config.extent[1] as i64;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(layout_seed),
        cfg: config,
        w,
        h,
        entities: Vec::new(),
    };
    let extent = Rect::new([-0.5, -0.5], [w as f64 - 0.5, h as f64 - 0.5]);
    let center = [(w - 1) / 2, (h - 1) / 2];
    let hw = config.road_width as f64 / 2.0;

    // Roads; the first of each direction crosses at the RSU.
    let mut roads = Vec::new();
    for c in b.road_centers(config.horizontal_roads, center[1], h, "horizontal")? {
        roads.push(Road { horizontal: true, center: c });
        let rect = Rect::new([-0.5, c as f64 - hw], [w as f64 - 0.5, c as f64 + hw]);
        b.push(EntityClass::Road, rect, [0.0, 0.0]);
    }
    for c in b.road_centers(config.vertical_roads, center[0], w, "vertical")? {
        roads.push(Road { horizontal: false, center: c });
        let rect = Rect::new([c as f64 - hw, -0.5], [c as f64 + hw, h as f64 - 0.5]);
        b.push(EntityClass::Road, rect, [0.0, 0.0]);
    }

    for k in 0..config.buildings {
        let avoid = b.rects_of(&[EntityClass::Road, EntityClass::Building]);
        let rect = b.place_block((3, 8), &avoid, 1.0, &format!("building {}", k + 1))?;
        b.push(EntityClass::Building, rect, [0.0, 0.0]);
    }
    for k in 0..config.vegetation {
        let avoid = b.rects_of(&[EntityClass::Road, EntityClass::Building, EntityClass::Vegetation]);
        let rect = b.place_block((2, 5), &avoid, 0.0, &format!("vegetation patch {}", k + 1))?;
        b.push(EntityClass::Vegetation, rect, [0.0, 0.0]);
    }
    for k in 0..config.ground_patches {
        let avoid = b.rects_of(&[
            EntityClass::Road,
            EntityClass::Building,
            EntityClass::Vegetation,
            EntityClass::Ground,
        ]);
        let rect = b.place_block((4, 10), &avoid, 0.0, &format!("ground patch {}", k + 1))?;
        b.push(EntityClass::Ground, rect, [0.0, 0.0]);
    }

    let mut vehicle_spawns = Vec::new();
    let mut ego_entities = Vec::new();
    for k in 0..config.num_vehicles {
        let (id, rotation) =
            b.place_vehicle(&roads, config.ego_speed as f64, &format!("ego vehicle {}", k + 1))?;
        let position = b.entities[id as usize].footprint.center();
        vehicle_spawns.push(Pose { position, rotation });
        ego_entities.push(id);
    }
    for k in 0..config.traffic {
        let speed = b.rng.gen_range(1..=2) as f64;
        b.place_vehicle(&roads, speed, &format!("traffic vehicle {}", k + 1))?;
    }

    for k in 0..config.pedestrians {
        let buildings = b.rects_of(&[EntityClass::Building]);
        let mut placed = false;
        for _ in 0..config.max_retries {
            let x = b.rng.gen_range(0..w) as f64;
            let y = b.rng.gen_range(0..h) as f64;
            let rect = Rect::new([x - 0.5, y - 0.5], [x + 0.5, y + 0.5]);
            if buildings.iter().any(|r| rect.intersects(r, 0.0)) {
                continue;
            }
            let velocity = loop {
                let v = [b.rng.gen_range(-1..=1) as f64, b.rng.gen_range(-1..=1) as f64];
                if v != [0.0, 0.0] {
                    break v;
                }
            };
            b.push(EntityClass::Pedestrian, rect, velocity);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place pedestrian {} outside buildings",
                k + 1
            )));
        }
    }

    let scenario = Scenario {
        id: layout_seed,
        extent,
        entities: b.entities,
        rsu_pose: Pose::at(center[0] as f64, center[1] as f64),
        vehicle_spawns,
        ego_entities,
        num_steps: config.num_steps,
        seed: layout_seed,
    };
    scenario.validate()?;
    Ok(scenario)
}
