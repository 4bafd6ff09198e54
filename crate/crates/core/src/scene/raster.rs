use serde::{Deserialize, Serialize};

use super::{EntityClass, Scenario, NUM_ENTITY_CLASSES, UNLABELED};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Pose};
use crate::tensor::Tensor3;

/// Sensing limits for one experiment. The RSU is modelled as an elevated
/// sensor: long range, and by default not occluded by buildings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub grid: GridSpec,
    pub vehicle_range: f64,
    pub rsu_range: f64,
    pub vehicle_occlusion: bool,
    pub rsu_occlusion: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            vehicle_range: 8.0,
            rsu_range: 22.0,
            vehicle_occlusion: true,
            rsu_occlusion: false,
        }
    }
}

/// Per-class occupancy observed by one agent, in that agent's frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub data: Tensor3,
    pub cell_size: f64,
    pub origin_pose: Pose,
}

/// Axis-aligned box in continuous grid coordinates `[x0, y0, x1, y1]`, where
/// x runs along columns and y along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub entity: u32,
    pub class: EntityClass,
    pub rect: [f64; 4],
}

/// Complete labels for one observer frame; unlike [`BevGrid`] these ignore
/// range and occlusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub seg_labels: Vec<u8>,
    /// Vehicle boxes, the single detection class.
    pub boxes: Vec<GtBox>,
}

/// Renders what `observer` sees at step `t` plus the full ground truth.
pub fn rasterize(
    s: &Scenario,
    t: usize,
    observer: &Pose,
    range: f64,
    occlusion: bool,
    grid: GridSpec,
) -> Result<(BevGrid, GroundTruth)> {
    grid.validate()?;
    observer.validate()?;
    if !s.extent.contains(observer.position) {
        return Err(Error::Config(format!(
            "observer at {:?} lies outside the scenario extent",
            observer.position
        )));
    }
    let entities = s.entities_at(t)?;
    let (h, w) = (grid.height, grid.width);

    let mut occupancy = Tensor3::zeros(h, w, NUM_ENTITY_CLASSES);
    let mut labels = vec![UNLABELED; h * w];
    let mut building = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            let g = observer.to_global(grid.cell_center_local(r, c));
            if !s.extent.contains(g) {
                continue;
            }
            let mut best: Option<EntityClass> = None;
            for e in entities.iter().filter(|e| e.footprint.contains(g)) {
                occupancy.cell_mut(cell)[e.class.channel()] = 1.0;
                if best.is_none_or(|b| e.class.label_priority() > b.label_priority()) {
                    best = Some(e.class);
                }
            }
            if let Some(class) = best {
                labels[cell] = class.label();
            }
            building[cell] = occupancy.cell(cell)[EntityClass::Building.channel()] > 0.0;
        }
    }

    let (r0, c0) = ((h / 2) as i64, (w / 2) as i64);
    let shadowed = |r: usize, c: usize| -> bool {
        let dr = r as i64 - r0;
        let dc = c as i64 - c0;
        let n = 4 * dr.abs().max(dc.abs());
        for step in 1..n {
            let f = step as f64 / n as f64;
            // rounding the offset (half away from zero) keeps the ray
            // symmetric under quarter-turn rotations of the observer
            let rr = r0 + (f * dr as f64).round() as i64;
            let cc = c0 + (f * dc as f64).round() as i64;
            if (rr, cc) == (r as i64, c as i64) || (rr, cc) == (r0, c0) {
                continue;
            }
            if building[rr as usize * w + cc as usize] {
                return true;
            }
        }
        false
    };

    for r in 0..h {
        for c in 0..w {
            let q = grid.cell_center_local(r, c);
            let visible = q[0].hypot(q[1]) <= range && !(occlusion && shadowed(r, c));
            if !visible {
                occupancy.cell_mut(r * w + c).fill(0.0);
            }
        }
    }

    let mut boxes = Vec::new();
    for e in entities.iter().filter(|e| e.class == EntityClass::Vehicle) {
        let f = &e.footprint;
        let corners = [f.min, [f.max[0], f.min[1]], f.max, [f.min[0], f.max[1]]];
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for corner in corners {
            let gxy = grid.local_to_grid(observer.to_local(corner));
            for a in 0..2 {
                lo[a] = lo[a].min(gxy[a]);
                hi[a] = hi[a].max(gxy[a]);
            }
        }
        let x0 = lo[0].max(0.0);
        let y0 = lo[1].max(0.0);
        let x1 = hi[0].min(w as f64);
        let y1 = hi[1].min(h as f64);
        if x1 > x0 && y1 > y0 {
            boxes.push(GtBox {
                entity: e.id,
                class: e.class,
                rect: [x0, y0, x1, y1],
            });
        }
    }

    Ok((
        BevGrid {
            data: occupancy,
            cell_size: grid.cell_size,
            origin_pose: *observer,
        },
        GroundTruth {
            height: h,
            width: w,
            seg_labels: labels,
            boxes,
        },
    ))
}

/// Everything all agents sense at one step: RSU at index 0, then vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub scenario_id: u64,
    pub step: usize,
    pub poses: Vec<Pose>,
    pub grids: Vec<BevGrid>,
    pub truths: Vec<GroundTruth>,
}

impl Frame {
    pub fn num_vehicles(&self) -> usize {
        self.poses.len().saturating_sub(1)
    }

    pub fn grid_spec(&self) -> GridSpec {
        let d = &self.grids[0].data;
        GridSpec::new(d.height(), d.width(), self.grids[0].cell_size)
    }
}

pub fn build_frame(s: &Scenario, t: usize, sensors: &SensorConfig) -> Result<Frame> {
    let poses = s.agent_poses(t)?;
    let mut grids = Vec::with_capacity(poses.len());
    let mut truths = Vec::with_capacity(poses.len());
    for (a, pose) in poses.iter().enumerate() {
        let (range, occlusion) = if a == 0 {
            (sensors.rsu_range, sensors.rsu_occlusion)
        } else {
            (sensors.vehicle_range, sensors.vehicle_occlusion)
        };
        let (g, gt) = rasterize(s, t, pose, range, occlusion, sensors.grid)?;
        grids.push(g);
        truths.push(gt);
    }
    Ok(Frame {
        scenario_id: s.id,
        step: t,
        poses,
        grids,
        truths,
    })
}
