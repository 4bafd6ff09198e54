//! Segmentation and detection losses with closed-form gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::sigmoid;
use crate::scene::GroundTruth;
use crate::tensor::Tensor3;

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Det,
    #[default]
    Joint,
}

impl Task {
    pub fn uses_seg(self) -> bool {
        matches!(self, Task::Seg | Task::Joint)
    }

    pub fn uses_det(self) -> bool {
        matches!(self, Task::Det | Task::Joint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Detection loss weight.
    pub eta: f64,
    /// Detection normaliser; the loss scales with `1 / sigma²`.
    pub sigma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_scene: usize,
    pub task: Task,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            sigma: 1.0,
            learning_rate: 0.2,
            batch_size: 4,
            epochs_per_scene: 30,
            task: Task::Joint,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("loss.{name} must be positive, got {v}")))
            }
        };
        pos(self.eta, "eta")?;
        pos(self.sigma, "sigma")?;
        pos(self.learning_rate, "learning_rate")?;
        if self.batch_size == 0 {
            return Err(Error::Config("loss.batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Mean per-cell cross-entropy and its gradient with respect to the logits.
pub fn seg_loss_grad(logits: &Tensor3, labels: &[u8]) -> Result<(f64, Tensor3)> {
    if labels.len() != logits.cells() {
        return Err(Error::Shape(format!(
            "{} labels for {} cells",
            labels.len(),
            logits.cells()
        )));
    }
    let k = logits.channels();
    let cells = logits.cells() as f64;
    let mut grad = Tensor3::zeros(logits.height(), logits.width(), k);
    let mut p = vec![0.0; k];
    let mut loss = 0.0;
    for (cell, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, len: k });
        }
        softmax(logits.cell(cell), &mut p);
        loss -= p[y].max(PROB_FLOOR).ln();
        if p[y] >= PROB_FLOOR {
            let g = grad.cell_mut(cell);
            for j in 0..k {
                g[j] = (p[j] - f64::from(u8::from(j == y))) / cells;
            }
        }
    }
    Ok((loss / cells, grad))
}

pub fn seg_loss(logits: &Tensor3, labels: &[u8]) -> Result<f64> {
    Ok(seg_loss_grad(logits, labels)?.0)
}

/// Per-cell detection targets: objectness everywhere, box offsets only
/// inside a ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub height: usize,
    pub width: usize,
    pub objectness: Vec<f64>,
    /// `(dx, dy, ln w, ln h)` of the assigned box, `None` outside boxes.
    pub offsets: Vec<Option<[f64; 4]>>,
}

impl DetTargets {
    /// A cell belongs to every box containing its centre; the nearest box
    /// centre wins, ties going to the smaller entity id.
    pub fn render(gt: &GroundTruth) -> Self {
        let cells = gt.height * gt.width;
        let mut objectness = vec![0.0; cells];
        let mut offsets = vec![None; cells];
        for r in 0..gt.height {
            for c in 0..gt.width {
                let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
                let mut best: Option<(f64, u32, [f64; 4])> = None;
                for b in &gt.boxes {
                    let [x0, y0, x1, y1] = b.rect;
                    if !(x0 <= cx && cx < x1 && y0 <= cy && cy < y1) {
                        continue;
                    }
                    let (bx, by) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
                    let d2 = (bx - cx).powi(2) + (by - cy).powi(2);
                    let better = match best {
                        None => true,
                        Some((bd, id, _)) => d2 < bd || (d2 == bd && b.entity < id),
                    };
                    if better {
                        let t = [bx - cx, by - cy, (x1 - x0).ln(), (y1 - y0).ln()];
                        best = Some((d2, b.entity, t));
                    }
                }
                if let Some((_, _, t)) = best {
                    let i = r * gt.width + c;
                    objectness[i] = 1.0;
                    offsets[i] = Some(t);
                }
            }
        }
        Self {
            height: gt.height,
            width: gt.width,
            objectness,
            offsets,
        }
    }
}

/// `eta / sigma²` times the per-cell mean of summed squared residuals.
/// The objectness residual is taken after a sigmoid.
pub fn det_loss_grad(pred: &Tensor3, targets: &DetTargets, sigma: f64, eta: f64) -> Result<(f64, Tensor3)> {
    if pred.shape() != (targets.height, targets.width, 5) {
        return Err(Error::Shape(format!(
            "detection map {:?} vs targets {}x{}x5",
            pred.shape(),
            targets.height,
            targets.width
        )));
    }
    let scale = eta / (sigma * sigma);
    let cells = pred.cells() as f64;
    let mut grad = Tensor3::zeros(pred.height(), pred.width(), 5);
    let mut sum = 0.0;
    for cell in 0..pred.cells() {
        let p = pred.cell(cell);
        let g = grad.cell_mut(cell);
        let s = sigmoid(p[0]);
        let e = s - targets.objectness[cell];
        sum += e * e;
        g[0] = scale * 2.0 * e * s * (1.0 - s) / cells;
        if let Some(t) = targets.offsets[cell] {
            for k in 0..4 {
                let e = p[k + 1] - t[k];
                sum += e * e;
                g[k + 1] = scale * 2.0 * e / cells;
            }
        }
    }
    Ok((scale * sum / cells, grad))
}

pub fn det_loss(pred: &Tensor3, gt: &GroundTruth, sigma: f64, eta: f64) -> Result<f64> {
    Ok(det_loss_grad(pred, &DetTargets::render(gt), sigma, eta)?.0)
}

/// Replay part plus current part; an empty part contributes nothing.
pub fn total_loss(current: &[f64], replay: &[f64]) -> f64 {
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(replay) + mean(current)
}
