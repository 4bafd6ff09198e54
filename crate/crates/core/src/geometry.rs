//! Agent poses, rigid 2-D transforms and grid resampling between agent frames.
//!
//! Frame convention: an agent with pose `(p, R)` sees a global point `g` at
//! local coordinates `R (g - p)`, so `R` rotates global vectors into the
//! agent frame. Index 0 is the RSU throughout the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub type Vec2 = [f64; 2];

const ORTHO_TOL: f64 = 1e-9;

/// 2×2 rotation matrix, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 2]", into = "[[f64; 2]; 2]")]
pub struct Rotation2 {
    m: [[f64; 2]; 2],
}

impl Rotation2 {
    pub const IDENTITY: Rotation2 = Rotation2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };

    /// Counter-clockwise rotation by `theta` radians.
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            m: [[c, -s], [s, c]],
        }
    }

    /// Counter-clockwise rotation by `k` quarter turns, with exact entries.
    pub fn quarter_turns(k: i32) -> Self {
        let m = match k.rem_euclid(4) {
            0 => [[1.0, 0.0], [0.0, 1.0]],
            1 => [[0.0, -1.0], [1.0, 0.0]],
            2 => [[-1.0, 0.0], [0.0, -1.0]],
            _ => [[0.0, 1.0], [-1.0, 0.0]],
        };
        Self { m }
    }

    pub fn from_matrix(m: [[f64; 2]; 2]) -> Result<Self> {
        let r = Self { m };
        r.validate()?;
        Ok(r)
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        self.m
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("rotation has non-finite entries".into()));
        }
        let rtr = self.transpose().compose(self).m;
        let off = (rtr[0][0] - 1.0)
            .abs()
            .max((rtr[1][1] - 1.0).abs())
            .max(rtr[0][1].abs())
            .max(rtr[1][0].abs());
        if off > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (|R^T R - I| = {off:e})"
            )));
        }
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let m = self.m;
        Self {
            m: [[m[0][0], m[1][0]], [m[0][1], m[1][1]]],
        }
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Rotation2) -> Self {
        let a = self.m;
        let b = other.m;
        let mut m = [[0.0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Self { m }
    }

    pub fn apply(&self, v: Vec2) -> Vec2 {
        let m = self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    }
}

impl TryFrom<[[f64; 2]; 2]> for Rotation2 {
    type Error = Error;

    fn try_from(m: [[f64; 2]; 2]) -> Result<Self> {
        Self::from_matrix(m)
    }
}

impl From<Rotation2> for [[f64; 2]; 2] {
    fn from(r: Rotation2) -> Self {
        r.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub rotation: Rotation2,
}

impl Pose {
    pub fn new(position: Vec2, rotation: Rotation2) -> Result<Self> {
        let pose = Self { position, rotation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn at(x: f64, y: f64) -> Self {
        Self {
            position: [x, y],
            rotation: Rotation2::IDENTITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("position is not finite".into()));
        }
        self.rotation.validate()
    }

    /// Global point -> this agent's frame.
    pub fn to_local(&self, g: Vec2) -> Vec2 {
        self.rotation
            .apply([g[0] - self.position[0], g[1] - self.position[1]])
    }

    /// This agent's frame -> global point.
    pub fn to_global(&self, q: Vec2) -> Vec2 {
        let v = self.rotation.transpose().apply(q);
        [v[0] + self.position[0], v[1] + self.position[1]]
    }
}

/// RSU position relative to vehicle `i`: `R_i R_0^T (p_0 - p_i)`.
pub fn transform_to_agent_frame(rsu: &Pose, vehicle: &Pose) -> Result<Vec2> {
    rsu.validate()?;
    vehicle.validate()?;
    let rot = vehicle.rotation.compose(&rsu.rotation.transpose());
    Ok(rot.apply([
        rsu.position[0] - vehicle.position[0],
        rsu.position[1] - vehicle.position[1],
    ]))
}

/// Inverse of [`transform_to_agent_frame`]: recovers the RSU position.
pub fn agent_frame_to_global(rsu: &Pose, vehicle: &Pose, relative: Vec2) -> Vec2 {
    let back = rsu.rotation.compose(&vehicle.rotation.transpose()).apply(relative);
    [back[0] + vehicle.position[0], back[1] + vehicle.position[1]]
}

/// Euclidean RSU–vehicle distance in the global frame.
pub fn rsu_vehicle_distance(rsu: &Pose, vehicle: &Pose) -> Result<f64> {
    rsu.validate()?;
    vehicle.validate()?;
    let dx = rsu.position[0] - vehicle.position[0];
    let dy = rsu.position[1] - vehicle.position[1];
    Ok(dx.hypot(dy))
}

/// Raster geometry shared by every agent in a frame.
///
/// Cell `(r, c)` is centred at local `((c - W/2)·s, (r - H/2)·s)` with integer
/// division, so cell `(H/2, W/2)` sits exactly on the observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            cell_size: 1.0,
        }
    }
}

impl GridSpec {
    pub fn new(height: usize, width: usize, cell_size: f64) -> Self {
        Self {
            height,
            width,
            cell_size,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config("cell_size must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_center_local(&self, r: usize, c: usize) -> Vec2 {
        [
            (c as f64 - (self.width / 2) as f64) * self.cell_size,
            (r as f64 - (self.height / 2) as f64) * self.cell_size,
        ]
    }

    /// Nearest cell to a local point, if it falls on the grid.
    pub fn cell_of_local(&self, q: Vec2) -> Option<(usize, usize)> {
        let c = (q[0] / self.cell_size + 0.5).floor() + (self.width / 2) as f64;
        let r = (q[1] / self.cell_size + 0.5).floor() + (self.height / 2) as f64;
        if c < 0.0 || r < 0.0 || c >= self.width as f64 || r >= self.height as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Local metric coordinates -> continuous grid coordinates, where cell
    /// `(r, c)` spans `[c, c+1) × [r, r+1)`.
    pub fn local_to_grid(&self, q: Vec2) -> Vec2 {
        [
            q[0] / self.cell_size + (self.width / 2) as f64 + 0.5,
            q[1] / self.cell_size + (self.height / 2) as f64 + 0.5,
        ]
    }
}

/// Nearest-neighbour resampling of a grid from one agent frame into another.
/// Target cells whose source falls off the grid read as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWarp {
    grid: GridSpec,
    source: Vec<Option<u32>>,
}

impl CellWarp {
    pub fn identity(grid: GridSpec) -> Self {
        Self {
            grid,
            source: (0..grid.cells() as u32).map(Some).collect(),
        }
    }

    /// Warp that expresses content observed from `from` in the frame of `to`.
    pub fn between(from: &Pose, to: &Pose, grid: GridSpec) -> Self {
        let mut source = Vec::with_capacity(grid.cells());
        for r in 0..grid.height {
            for c in 0..grid.width {
                let g = to.to_global(grid.cell_center_local(r, c));
                let q = from.to_local(g);
                source.push(
                    grid.cell_of_local(q)
                        .map(|(sr, sc)| (sr * grid.width + sc) as u32),
                );
            }
        }
        Self { grid, source }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn source_of(&self, cell: usize) -> Option<usize> {
        self.source[cell].map(|s| s as usize)
    }

    pub fn apply(&self, src: &Tensor3) -> Tensor3 {
        let ch = src.channels();
        let mut out = Tensor3::zeros(self.grid.height, self.grid.width, ch);
        for (cell, s) in self.source.iter().enumerate() {
            if let Some(s) = s {
                out.cell_mut(cell).copy_from_slice(src.cell(*s as usize));
            }
        }
        out
    }

    /// Accumulates the adjoint of [`CellWarp::apply`] into `grad_src`.
    pub fn accumulate_backward(&self, grad_dst: &Tensor3, grad_src: &mut Tensor3) {
        self.accumulate_backward_scaled(grad_dst, 1.0, grad_src);
    }

    /// Adds `alpha` times the adjoint of [`CellWarp::apply`] to `grad_src`.
    pub fn accumulate_backward_scaled(&self, grad_dst: &Tensor3, alpha: f64, grad_src: &mut Tensor3) {
        for (cell, s) in self.source.iter().enumerate() {
            if let Some(s) = s {
                let g = grad_dst.cell(cell);
                for (acc, v) in grad_src.cell_mut(*s as usize).iter_mut().zip(g) {
                    *acc += alpha * v;
                }
            }
        }
    }
}
