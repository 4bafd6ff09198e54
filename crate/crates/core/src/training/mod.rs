//! Losses, the cooperative forward/backward pipeline and the SGD loop over a
//! scene curriculum.

mod curriculum;
mod losses;
mod pipeline;

pub use curriculum::{
    derive_seed, evaluate_frames, split_frames, train_curriculum, write_log_csv, CurriculumConfig,
    CurriculumMode, CurriculumResult, LogRow, ReplayConfig, SceneData, CSV_HEADER,
};
pub use losses::{
    det_loss, det_loss_grad, seg_loss, seg_loss_grad, total_loss, DetTargets, LossConfig, Task, PROB_FLOOR,
};
pub use pipeline::{
    backward_pipeline, forward_pipeline, record_traffic, Overrides, PipelineFlags, PipelineOutput, VehicleOutput,
};

use crate::error::Result;
use crate::model::ModelParams;
use crate::replay::{Origin, StreamItem};
use crate::scene::Frame;
use crate::tensor::Tensor3;

/// Loss of one frame (mean over vehicles) with head gradients.
#[derive(Debug, Clone)]
pub struct FrameLoss {
    pub loss: f64,
    pub grad_seg: Vec<Tensor3>,
    pub grad_det: Vec<Tensor3>,
}

pub fn frame_loss(frame: &Frame, out: &PipelineOutput, cfg: &LossConfig) -> Result<FrameLoss> {
    let n = out.vehicles.len();
    let w = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_seg = Vec::with_capacity(n);
    let mut grad_det = Vec::with_capacity(n);
    for (v, o) in out.vehicles.iter().enumerate() {
        let gt = &frame.truths[v + 1];
        let mut gs = Tensor3::zeros(o.seg_logits.height(), o.seg_logits.width(), o.seg_logits.channels());
        let mut gd = Tensor3::zeros(o.det.height(), o.det.width(), o.det.channels());
        if cfg.task.uses_seg() {
            let (l, g) = seg_loss_grad(&o.seg_logits, &gt.seg_labels)?;
            loss += w * l;
            gs = g;
            gs.scale(w);
        }
        if cfg.task.uses_det() {
            let (l, g) = det_loss_grad(&o.det, &DetTargets::render(gt), cfg.sigma, cfg.eta)?;
            loss += w * l;
            gd = g;
            gd.scale(w);
        }
        grad_seg.push(gs);
        grad_det.push(gd);
    }
    Ok(FrameLoss {
        loss,
        grad_seg,
        grad_det,
    })
}

/// Loss of one frame under `p`, for finite-difference checks.
pub fn frame_objective(
    frame: &Frame,
    p: &ModelParams,
    flags: &PipelineFlags,
    overrides: &Overrides,
    cfg: &LossConfig,
) -> Result<f64> {
    let out = forward_pipeline(frame, p, flags, overrides)?;
    Ok(frame_loss(frame, &out, cfg)?.loss)
}

/// Total loss of a mixed batch and its parameter gradient. Current and
/// replayed frames are averaged separately and the two means summed.
pub fn batch_gradient(
    batch: &[StreamItem<'_, Frame>],
    p: &ModelParams,
    flags: &PipelineFlags,
    cfg: &LossConfig,
    mut on_forward: impl FnMut(&Frame, &PipelineOutput) -> Result<()>,
) -> Result<(f64, ModelParams)> {
    let count = |o: Origin| batch.iter().filter(|i| i.origin == o).count();
    let (cur, rep) = (count(Origin::Current), count(Origin::Replay));
    let mut grads = p.zeros_like();
    let mut current = Vec::with_capacity(cur);
    let mut replay = Vec::with_capacity(rep);
    for item in batch {
        let out = forward_pipeline(item.sample, p, flags, &Overrides::default())?;
        on_forward(item.sample, &out)?;
        let mut fl = frame_loss(item.sample, &out, cfg)?;
        let weight = match item.origin {
            Origin::Current => {
                current.push(fl.loss);
                1.0 / cur as f64
            }
            Origin::Replay => {
                replay.push(fl.loss);
                1.0 / rep as f64
            }
        };
        fl.grad_seg.iter_mut().chain(fl.grad_det.iter_mut()).for_each(|g| g.scale(weight));
        backward_pipeline(p, &out, &fl.grad_seg, &fl.grad_det, &mut grads)?;
    }
    Ok((total_loss(&current, &replay), grads))
}
