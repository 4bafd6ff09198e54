//! Directed collaborative graph over vehicles and distance-weighted feature
//! aggregation.
//!
//! Weights for destination `i` come from `max(0, d_j · cos(M_i, M_j))`,
//! normalised over the sources. Weights are constants for backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Cosine of the flattened maps. A zero-norm input gives 0.
pub fn cosine_similarity(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    a.ensure_same_shape(b, "cosine_similarity")?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfLoop {
    /// The destination weighs its own map with cosine 1 and its own distance.
    #[default]
    Include,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceWeighting {
    /// Farther vehicles weigh more.
    #[default]
    Raw,
    /// `1 / (1 + d)`, finite at `d = 0`.
    Inverse,
}

impl DistanceWeighting {
    pub fn factor(self, distance: f64) -> f64 {
        match self {
            DistanceWeighting::Raw => distance,
            DistanceWeighting::Inverse => 1.0 / (1.0 + distance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    pub self_loop: SelfLoop,
    pub distance: DistanceWeighting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabGraph {
    pub num_vehicles: usize,
    /// RSU distance of each vehicle, in metres.
    pub distances: Vec<f64>,
    /// `edge_weights[j][i]` is the weight of the edge `j → i`.
    pub edge_weights: Vec<Vec<f64>>,
    /// Fixed RSU weight, `1 / N`.
    pub rsu_weight: f64,
}

impl CollabGraph {
    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.edge_weights[from][to]
    }

    /// Column `i`: the weights of every source into destination `i`.
    pub fn destination_weights(&self, i: usize) -> Vec<f64> {
        self.edge_weights.iter().map(|row| row[i]).collect()
    }
}

fn check_distances(distances: &[f64], n: usize) -> Result<()> {
    if distances.len() != n {
        return Err(Error::Shape(format!("{n} features but {} distances", distances.len())));
    }
    if let Some(d) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Config(format!("distance {d} must be finite and non-negative")));
    }
    Ok(())
}

/// Weights of every source into destination `i`, with all maps already in
/// `i`'s frame.
pub fn destination_weights(
    features: &[FeatureMap],
    distances: &[f64],
    i: usize,
    opts: GraphOptions,
) -> Result<Vec<f64>> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("no vehicle features".into()));
    }
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    check_distances(distances, n)?;
    let eligible = |j: usize| j != i || opts.self_loop == SelfLoop::Include || n == 1;
    let mut w = vec![0.0; n];
    for j in (0..n).filter(|&j| eligible(j)) {
        let cos = if j == i { 1.0 } else { cosine_similarity(&features[i], &features[j])? };
        w[j] = (opts.distance.factor(distances[j]) * cos).max(0.0);
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let count = (0..n).filter(|&j| eligible(j)).count() as f64;
        for (j, v) in w.iter_mut().enumerate() {
            *v = if eligible(j) { 1.0 / count } else { 0.0 };
        }
    }
    Ok(w)
}

/// Graph over maps that already share one frame.
pub fn build_graph(features: &[FeatureMap], distances: &[f64]) -> Result<CollabGraph> {
    build_graph_with(features, distances, GraphOptions::default())
}

pub fn build_graph_with(
    features: &[FeatureMap],
    distances: &[f64],
    opts: GraphOptions,
) -> Result<CollabGraph> {
    let n = features.len();
    if n == 0 {
        return Err(Error::Empty("no vehicle features".into()));
    }
    for f in &features[1..] {
        features[0].ensure_same_shape(f, "build_graph")?;
    }
    let columns = (0..n)
        .map(|i| destination_weights(features, distances, i, opts))
        .collect::<Result<Vec<_>>>()?;
    let edge_weights = (0..n).map(|j| columns.iter().map(|col| col[j]).collect()).collect();
    Ok(CollabGraph {
        num_vehicles: n,
        distances: distances.to_vec(),
        edge_weights,
        rsu_weight: 1.0 / n as f64,
    })
}

/// `Σ_j w_j M_j + rsu_weight · M_0`.
pub fn weighted_sum(
    weights: &[f64],
    features: &[FeatureMap],
    rsu: Option<(&FeatureMap, f64)>,
) -> Result<FeatureMap> {
    if weights.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} features",
            weights.len(),
            features.len()
        )));
    }
    let first = features.first().ok_or_else(|| Error::Empty("no vehicle features".into()))?;
    let mut out = FeatureMap::zeros(first.height(), first.width(), first.channels());
    for (w, f) in weights.iter().zip(features) {
        out.ensure_same_shape(f, "aggregate")?;
        if *w != 0.0 {
            out.axpy(*w, f);
        }
    }
    if let Some((m0, lambda)) = rsu {
        out.ensure_same_shape(m0, "aggregate RSU feature")?;
        out.axpy(lambda, m0);
    }
    Ok(out)
}

/// Fused map for destination `i`; `rsu_feature` is omitted when no RSU
/// takes part.
pub fn aggregate(
    graph: &CollabGraph,
    features: &[FeatureMap],
    rsu_feature: Option<&FeatureMap>,
    i: usize,
) -> Result<FeatureMap> {
    if i >= graph.num_vehicles {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: graph.num_vehicles,
        });
    }
    if features.len() != graph.num_vehicles {
        return Err(Error::Shape(format!(
            "graph has {} vehicles, got {} features",
            graph.num_vehicles,
            features.len()
        )));
    }
    weighted_sum(
        &graph.destination_weights(i),
        features,
        rsu_feature.map(|m| (m, graph.rsu_weight)),
    )
}

/// Input gradients of [`weighted_sum`]: one map per source, then the RSU's.
pub fn weighted_sum_backward(
    weights: &[f64],
    rsu_weight: f64,
    grad_out: &FeatureMap,
) -> (Vec<FeatureMap>, FeatureMap) {
    let scaled = |w: f64| {
        let mut g = grad_out.clone();
        g.scale(w);
        g
    };
    (weights.iter().map(|&w| scaled(w)).collect(), scaled(rsu_weight))
}
