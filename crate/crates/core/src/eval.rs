//! Segmentation, detection and continual-learning metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Per-class intersection and union cell counts, accumulated over any
/// number of label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IouAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} cells, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.intersection.len();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::IndexOutOfRange {
                    index: p.max(g),
                    len: k,
                });
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both sides.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Empty("no labelled cells".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean IoU over classes present in either map, plus the per-class values.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok((acc.miou()?, acc.per_class()))
}

/// Per-cell argmax over channels; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor3) -> Vec<u8> {
    (0..logits.cells())
        .map(|cell| {
            let v = logits.cell(cell);
            let mut best = 0;
            for k in 1..v.len() {
                if v[k] > v[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Axis-aligned box `[x0, y0, x1, y1]` in grid coordinates with a score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub rect: [f64; 4],
    pub score: f64,
}

pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub objectness_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            objectness_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

/// Box encoded at cell `(r, c)`: centre `(c + 0.5 + dx, r + 0.5 + dy)`,
/// size `(e^dw, e^dh)`.
pub fn cell_box(r: usize, c: usize, offsets: &[f64]) -> [f64; 4] {
    let cx = c as f64 + 0.5 + offsets[0];
    let cy = r as f64 + 0.5 + offsets[1];
    let (w, h) = (offsets[2].exp(), offsets[3].exp());
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Greedy NMS; input order breaks score ties.
pub fn nms(mut boxes: Vec<ScoredBox>, iou: f64) -> Vec<ScoredBox> {
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<ScoredBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| box_iou(&k.rect, &b.rect) <= iou) {
            kept.push(b);
        }
    }
    kept
}

pub fn decode_detections(det: &Tensor3, cfg: DetectionConfig) -> Result<Vec<ScoredBox>> {
    if det.channels() != 5 {
        return Err(Error::Shape(format!("detection map has {} channels, expected 5", det.channels())));
    }
    let mut boxes = Vec::new();
    for r in 0..det.height() {
        for c in 0..det.width() {
            let v = det.cell(r * det.width() + c);
            let score = sigmoid(v[0]);
            if score > cfg.objectness_threshold {
                boxes.push(ScoredBox {
                    rect: cell_box(r, c, &v[1..]),
                    score,
                });
            }
        }
    }
    Ok(nms(boxes, cfg.nms_iou))
}

/// One image's predictions and ground truth boxes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSample {
    pub predictions: Vec<ScoredBox>,
    pub ground_truth: Vec<[f64; 4]>,
}

pub fn average_precision(preds: &[ScoredBox], gts: &[[f64; 4]], iou_threshold: f64) -> f64 {
    average_precision_pooled(
        &[DetectionSample {
            predictions: preds.to_vec(),
            ground_truth: gts.to_vec(),
        }],
        iou_threshold,
    )
}

/// AP with predictions from all images ranked together. Empty ground truth
/// scores 1 without predictions and 0 with any.
pub fn average_precision_pooled(samples: &[DetectionSample], iou_threshold: f64) -> f64 {
    let total_gt: usize = samples.iter().map(|s| s.ground_truth.len()).sum();
    let mut ranked: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.predictions.len()).map(move |j| (i, j)))
        .collect();
    if total_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    let score = |&(i, j): &(usize, usize)| samples[i].predictions[j].score;
    ranked.sort_by(|a, b| score(b).total_cmp(&score(a)));
    let mut matched: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for (k, &(i, j)) in ranked.iter().enumerate() {
        let p = &samples[i].predictions[j].rect;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in samples[i].ground_truth.iter().enumerate() {
            if matched[i][g] {
                continue;
            }
            let iou = box_iou(p, gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[i][g] = true;
            tp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, then area under the step curve
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Mean over earlier scenes of best-before-final minus final.
/// `history[t][s]` is the metric on scene `s` after learning scene `t`.
pub fn forget(history: &[Vec<f64>]) -> Result<f64> {
    let Some(last) = history.len().checked_sub(1).filter(|&t| t >= 1) else {
        return Err(Error::Undefined("forgetting needs at least two learned scenes".into()));
    };
    for (t, row) in history.iter().enumerate() {
        if row.len() <= t.min(last) {
            return Err(Error::Shape(format!("history row {t} has {} entries", row.len())));
        }
    }
    if history[last].len() < last {
        return Err(Error::Shape("final history row is incomplete".into()));
    }
    let total: f64 = (0..last)
        .map(|s| {
            let best = (s..last).map(|t| history[t][s]).fold(f64::NEG_INFINITY, f64::max);
            best - history[last][s]
        })
        .sum();
    Ok(total / last as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub miou: f64,
    pub ap50: f64,
    pub ap70: f64,
}

/// Metrics after learning scene `scene_idx`, on every scene's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scene_idx: usize,
    pub per_scene: Vec<SceneMetrics>,
    pub forget_miou: Option<f64>,
    pub forget_ap50: Option<f64>,
    pub forget_ap70: Option<f64>,
}

impl MetricRecord {
    /// Builds the record for the last entry of `history`, one row per
    /// learned scene.
    pub fn from_history(history: &[Vec<SceneMetrics>]) -> Result<Self> {
        let last = history
            .last()
            .ok_or_else(|| Error::Empty("no metric history".into()))?;
        let column = |f: fn(&SceneMetrics) -> f64| {
            let h: Vec<Vec<f64>> = history.iter().map(|row| row.iter().map(f).collect()).collect();
            forget(&h).ok()
        };
        Ok(Self {
            scene_idx: history.len() - 1,
            per_scene: last.clone(),
            forget_miou: column(|m| m.miou),
            forget_ap50: column(|m| m.ap50),
            forget_ap70: column(|m| m.ap70),
        })
    }

    pub fn mean(&self) -> SceneMetrics {
        let n = self.per_scene.len().max(1) as f64;
        SceneMetrics {
            miou: self.per_scene.iter().map(|m| m.miou).sum::<f64>() / n,
            ap50: self.per_scene.iter().map(|m| m.ap50).sum::<f64>() / n,
            ap70: self.per_scene.iter().map(|m| m.ap70).sum::<f64>() / n,
        }
    }
}
