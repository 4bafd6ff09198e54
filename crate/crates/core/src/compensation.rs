//! Pearson-gated residual compensation of a vehicle's decoded map with a
//! reference (normally the RSU's) decoded map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Row-major flattening: row, then column, then channel.
pub fn flatten(m: &FeatureMap) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Pearson correlation. A constant input gives 0.
pub fn similarity_ratio(rsu_flat: &[f64], veh_flat: &[f64]) -> Result<f64> {
    if rsu_flat.len() != veh_flat.len() {
        return Err(Error::Shape(format!(
            "Pearson inputs differ in length: {} vs {}",
            rsu_flat.len(),
            veh_flat.len()
        )));
    }
    if rsu_flat.len() < 2 {
        return Err(Error::Undefined("Pearson correlation needs at least two values".into()));
    }
    let n = rsu_flat.len() as f64;
    let ma = rsu_flat.iter().sum::<f64>() / n;
    let mb = veh_flat.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in rsu_flat.iter().zip(veh_flat) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CompensationConfig {
    threshold: f64,
}

impl CompensationConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold.is_finite() && (-1.0..=1.0).contains(&threshold)) {
            return Err(Error::Config(format!(
                "compensation threshold {threshold} must lie in [-1, 1]"
            )));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Residual coefficient `threshold - r` below the gate, else 0.
    pub fn coefficient(&self, r: f64) -> f64 {
        if r >= self.threshold {
            0.0
        } else {
            self.threshold - r
        }
    }
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl TryFrom<f64> for CompensationConfig {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CompensationConfig> for f64 {
    fn from(c: CompensationConfig) -> f64 {
        c.threshold
    }
}

pub fn compensate(
    veh_dec: &FeatureMap,
    rsu_dec: &FeatureMap,
    r: f64,
    cfg: CompensationConfig,
) -> Result<FeatureMap> {
    veh_dec.ensure_same_shape(rsu_dec, "compensate")?;
    let mut out = veh_dec.clone();
    let coef = cfg.coefficient(r);
    if coef > 0.0 {
        out.axpy(coef, rsu_dec);
    }
    Ok(out)
}

/// Gradients with respect to the vehicle and reference maps; `r` is held
/// fixed.
pub fn compensate_backward(grad_out: &FeatureMap, r: f64, cfg: CompensationConfig) -> (FeatureMap, FeatureMap) {
    let mut g_ref = grad_out.clone();
    g_ref.scale(cfg.coefficient(r));
    (grad_out.clone(), g_ref)
}
