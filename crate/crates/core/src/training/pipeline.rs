//! Full cooperative forward pass for one frame and its closed-form backward.
//!
//! Per destination vehicle `i`:
//!
//! 1. every agent encodes its own grid with the shared encoder;
//! 2. maps sent over the channel pass through the autoencoder (when the
//!    compression factor exceeds 1) and the wire's float format;
//! 3. received maps are warped into `i`'s frame and fused with graph weights,
//!    plus `1/N` of the RSU map;
//! 4. the fused map is decoded, compared with the decoded reference map
//!    (the RSU's, or vehicle 1's without an RSU) and compensated when their
//!    Pearson correlation falls below the threshold;
//! 5. both heads run on the result.
//!
//! Graph weights and correlations are constants for backpropagation. The
//! wire quantisation passes gradients straight through.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channel::{
    account_step, feature_message_bytes, AgentId, BandwidthLedger, Message, PayloadKind, Topology, WireFloat,
};
use crate::compensation::{compensate, compensate_backward, flatten, similarity_ratio, CompensationConfig};
use crate::error::{Error, Result};
use crate::fusion::{destination_weights, weighted_sum, GraphOptions};
use crate::geometry::{rsu_vehicle_distance, CellWarp};
use crate::model::{backward, encode_traced, forward_traced, Layer, ModelParams, OpTrace};
use crate::scene::Frame;
use crate::tensor::{FeatureMap, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineFlags {
    pub rsu_on: bool,
    pub graph_on: bool,
    pub compensator_on: bool,
    /// Channel compression factor; 1 sends raw encoder features.
    pub compression: usize,
    pub graph: GraphOptions,
    pub compensation: CompensationConfig,
    pub wire: WireFloat,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            rsu_on: true,
            graph_on: true,
            compensator_on: true,
            compression: 1,
            graph: GraphOptions::default(),
            compensation: CompensationConfig::default(),
            wire: WireFloat::F64,
        }
    }
}

impl PipelineFlags {
    /// Single-vehicle baseline: no communication at all.
    pub fn no_fusion() -> Self {
        Self {
            rsu_on: false,
            graph_on: false,
            compensator_on: false,
            ..Self::default()
        }
    }

    fn needs_channel(&self, agent: usize) -> bool {
        if agent == 0 {
            self.rsu_on && (self.graph_on || self.compensator_on)
        } else {
            self.graph_on || (self.compensator_on && !self.rsu_on && agent == HUB)
        }
    }
}

/// Vehicle whose map serves as the compensation reference without an RSU.
const HUB: usize = 1;

/// Fixed graph weights and correlations, indexed by vehicle (0 = vehicle 1).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub weights: Option<Vec<Vec<f64>>>,
    pub ratios: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleOutput {
    pub seg_logits: Tensor3,
    pub det: Tensor3,
    /// Graph weights over vehicles into this destination, if fused.
    pub weights: Option<Vec<f64>>,
    /// Pearson correlation with the reference map, if compensating.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    /// The destination's own encoder output.
    Own(usize),
    /// Another agent's received map, warped into the destination frame.
    Received(usize),
}

#[derive(Debug, Clone)]
struct Link {
    autoencoder: Option<(OpTrace, OpTrace)>,
    /// What the destination reconstructs.
    received: Arc<FeatureMap>,
    /// What goes on the wire.
    payload: Arc<FeatureMap>,
}

#[derive(Debug, Clone)]
struct VehicleTrace {
    fused_from: Option<Vec<(Source, f64)>>,
    rsu_weight: f64,
    decode: OpTrace,
    reference: Option<(Source, OpTrace, f64)>,
    seg: OpTrace,
    det: OpTrace,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub vehicles: Vec<VehicleOutput>,
    encoded: Vec<Option<(Arc<FeatureMap>, OpTrace)>>,
    links: Vec<Option<Link>>,
    /// `warps[a][i]` takes agent `a`'s frame into vehicle `i`'s.
    warps: Vec<Vec<Option<CellWarp>>>,
    traces: Vec<VehicleTrace>,
    flags: PipelineFlags,
}

impl PipelineOutput {
    /// Wire payload of every agent that transmitted.
    pub fn payloads(&self) -> Vec<Option<&FeatureMap>> {
        self.links.iter().map(|l| l.as_ref().map(|l| &*l.payload)).collect()
    }
}

fn transmit(p: &ModelParams, flags: &PipelineFlags, e: &Arc<FeatureMap>) -> Result<Link> {
    if flags.compression > 1 {
        let (z, ct) = forward_traced(p, Layer::Compressor, Arc::clone(e))?;
        let payload = Arc::new(flags.wire.quantize_map(&z));
        let (received, dt) = forward_traced(p, Layer::Decompressor, Arc::clone(&payload))?;
        Ok(Link {
            autoencoder: Some((ct, dt)),
            received: Arc::new(received),
            payload,
        })
    } else {
        let payload = Arc::new(flags.wire.quantize_map(e));
        Ok(Link {
            autoencoder: None,
            received: Arc::clone(&payload),
            payload,
        })
    }
}

pub fn forward_pipeline(
    frame: &Frame,
    p: &ModelParams,
    flags: &PipelineFlags,
    overrides: &Overrides,
) -> Result<PipelineOutput> {
    let n = frame.num_vehicles();
    if n == 0 {
        return Err(Error::Empty("frame has no vehicles".into()));
    }
    if frame.grids.len() != n + 1 || frame.poses.len() != n + 1 {
        return Err(Error::Shape("frame agents are inconsistent".into()));
    }
    if flags.compression != p.dims.compression {
        return Err(Error::Config(format!(
            "pipeline compression {} does not match model compression {}",
            flags.compression, p.dims.compression
        )));
    }
    let grid = frame.grid_spec();
    let agents = n + 1;

    let mut encoded = Vec::with_capacity(agents);
    for a in 0..agents {
        encoded.push(if a > 0 || flags.rsu_on {
            let (e, trace) = encode_traced(&frame.grids[a].data, p)?;
            Some((Arc::new(e), trace))
        } else {
            None
        });
    }
    let mut links = Vec::with_capacity(agents);
    for (a, e) in encoded.iter().enumerate() {
        links.push(match e {
            Some((e, _)) if flags.needs_channel(a) => Some(transmit(p, flags, e)?),
            _ => None,
        });
    }
    let mut warps: Vec<Vec<Option<CellWarp>>> = vec![vec![None; agents]; agents];
    for (a, row) in warps.iter_mut().enumerate() {
        if links[a].is_none() {
            continue;
        }
        for (i, w) in row.iter_mut().enumerate().skip(1) {
            if i != a {
                *w = Some(CellWarp::between(&frame.poses[a], &frame.poses[i], grid));
            }
        }
    }
    let distances = (1..agents)
        .map(|v| rsu_vehicle_distance(&frame.poses[0], &frame.poses[v]))
        .collect::<Result<Vec<_>>>()?;

    let view = |src: Source, i: usize| -> FeatureMap {
        match src {
            Source::Own(a) => (*encoded[a].as_ref().unwrap().0).clone(),
            Source::Received(a) => warps[a][i].as_ref().unwrap().apply(&links[a].as_ref().unwrap().received),
        }
    };

    let mut vehicles = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for i in 1..agents {
        let (fused, fused_from, rsu_weight) = if flags.graph_on {
            let sources: Vec<Source> = (1..agents)
                .map(|j| if j == i { Source::Own(j) } else { Source::Received(j) })
                .collect();
            let maps: Vec<FeatureMap> = sources.iter().map(|&s| view(s, i)).collect();
            let weights = match &overrides.weights {
                Some(w) => w[i - 1].clone(),
                None => destination_weights(&maps, &distances, i - 1, flags.graph)?,
            };
            let rsu_weight = if flags.rsu_on { 1.0 / n as f64 } else { 0.0 };
            let rsu_map = flags.rsu_on.then(|| view(Source::Received(0), i));
            let fused = weighted_sum(&weights, &maps, rsu_map.as_ref().map(|m| (m, rsu_weight)))?;
            (fused, Some(sources.into_iter().zip(weights).collect::<Vec<_>>()), rsu_weight)
        } else {
            ((*encoded[i].as_ref().unwrap().0).clone(), None, 0.0)
        };
        let (decoded, decode) = forward_traced(p, Layer::Decoder, Arc::new(fused))?;

        let mut ratio = None;
        let (compensated, reference) = if flags.compensator_on {
            let src = match (flags.rsu_on, i == HUB) {
                (true, _) => Source::Received(0),
                (false, true) => Source::Own(HUB),
                (false, false) => Source::Received(HUB),
            };
            let (ref_dec, ref_trace) = forward_traced(p, Layer::Decoder, Arc::new(view(src, i)))?;
            let r = match &overrides.ratios {
                Some(r) => r[i - 1],
                None => similarity_ratio(&flatten(&ref_dec), &flatten(&decoded))?,
            };
            ratio = Some(r);
            let out = compensate(&decoded, &ref_dec, r, flags.compensation)?;
            (out, Some((src, ref_trace, r)))
        } else {
            (decoded, None)
        };
        let compensated = Arc::new(compensated);
        let (seg_logits, seg) = forward_traced(p, Layer::SegHead, Arc::clone(&compensated))?;
        let (det, det_trace) = forward_traced(p, Layer::DetHead, compensated)?;
        vehicles.push(VehicleOutput {
            seg_logits,
            det,
            weights: fused_from.as_ref().map(|f| f.iter().map(|(_, w)| *w).collect()),
            ratio,
        });
        traces.push(VehicleTrace {
            fused_from,
            rsu_weight,
            decode,
            reference,
            seg,
            det: det_trace,
        });
    }
    Ok(PipelineOutput {
        vehicles,
        encoded,
        links,
        warps,
        traces,
        flags: *flags,
    })
}

/// Accumulates parameter gradients given upstream gradients of every
/// vehicle's head outputs.
pub fn backward_pipeline(
    p: &ModelParams,
    out: &PipelineOutput,
    grad_seg: &[Tensor3],
    grad_det: &[Tensor3],
    grads: &mut ModelParams,
) -> Result<()> {
    let n = out.vehicles.len();
    if grad_seg.len() != n || grad_det.len() != n {
        return Err(Error::Shape(format!("expected {n} head gradients per task")));
    }
    let agents = n + 1;
    let zeros_like = |m: &FeatureMap| FeatureMap::zeros(m.height(), m.width(), m.channels());
    let mut g_enc: Vec<Option<FeatureMap>> = out
        .encoded
        .iter()
        .map(|e| e.as_ref().map(|(m, _)| zeros_like(m)))
        .collect();
    let mut g_recv: Vec<Option<FeatureMap>> = out
        .links
        .iter()
        .map(|l| l.as_ref().map(|l| zeros_like(&l.received)))
        .collect();

    let mut route = |src: Source, i: usize, alpha: f64, g: &FeatureMap, g_enc: &mut Vec<Option<FeatureMap>>| match src {
        Source::Own(a) => g_enc[a].as_mut().unwrap().axpy(alpha, g),
        Source::Received(a) => out.warps[a][i]
            .as_ref()
            .unwrap()
            .accumulate_backward_scaled(g, alpha, g_recv[a].as_mut().unwrap()),
    };

    for (v, tr) in out.traces.iter().enumerate() {
        let i = v + 1;
        let mut g_comp = backward(p, &tr.seg, &grad_seg[v], grads)?;
        g_comp.axpy(1.0, &backward(p, &tr.det, &grad_det[v], grads)?);
        if let Some((src, ref_trace, r)) = &tr.reference {
            let (g_veh, g_ref) = compensate_backward(&g_comp, *r, out.flags.compensation);
            if out.flags.compensation.coefficient(*r) > 0.0 {
                let g_in = backward(p, ref_trace, &g_ref, grads)?;
                route(*src, i, 1.0, &g_in, &mut g_enc);
            }
            g_comp = g_veh;
        }
        let g_dec = g_comp;
        let g_fused = backward(p, &tr.decode, &g_dec, grads)?;
        match &tr.fused_from {
            Some(sources) => {
                // the adjoint of a weighted sum scales the output gradient
                for (src, w) in sources {
                    if *w != 0.0 {
                        route(*src, i, *w, &g_fused, &mut g_enc);
                    }
                }
                if out.flags.rsu_on {
                    route(Source::Received(0), i, tr.rsu_weight, &g_fused, &mut g_enc);
                }
            }
            None => g_enc[i].as_mut().unwrap().axpy(1.0, &g_fused),
        }
    }

    for a in 0..agents {
        if let (Some(link), Some(g)) = (&out.links[a], &g_recv[a]) {
            let acc = g_enc[a].as_mut().unwrap();
            match &link.autoencoder {
                Some((ct, dt)) => {
                    let g_payload = backward(p, dt, g, grads)?;
                    acc.axpy(1.0, &backward(p, ct, &g_payload, grads)?);
                }
                None => acc.axpy(1.0, g),
            }
        }
        if let (Some((_, tr)), Some(g)) = (&out.encoded[a], &g_enc[a]) {
            backward(p, tr, g, grads)?;
        }
    }
    Ok(())
}

/// Charges one frame's messages: one pose per participating agent, then the
/// feature traffic. With an RSU every vehicle uploads and receives the RSU
/// map; vehicle maps additionally go to each other vehicle when the graph is
/// on under [`Topology::VehicleToVehicle`]. Without an RSU, vehicles only
/// exchange maps among themselves.
pub fn record_traffic(
    frame: &Frame,
    out: &PipelineOutput,
    topology: Topology,
    ledger: &mut BandwidthLedger,
) -> Result<()> {
    let flags = &out.flags;
    let n = out.vehicles.len();
    let payloads = out.payloads();
    let compressed = flags.compression > 1;
    if flags.rsu_on && flags.graph_on {
        let maps: Vec<FeatureMap> = payloads
            .iter()
            .map(|m| m.cloned().ok_or_else(|| Error::Shape("missing payload".into())))
            .collect::<Result<_>>()?;
        account_step(ledger, topology, &maps, compressed, flags.wire)?;
    } else {
        ledger.begin_step();
        let kind = if compressed {
            PayloadKind::CompressedFeature
        } else {
            PayloadKind::Feature
        };
        for (a, m) in payloads.iter().enumerate() {
            let Some(m) = m else { continue };
            let (h, w, c) = m.shape();
            let bytes = feature_message_bytes(h, w, c, flags.wire);
            // the RSU map goes to every vehicle, a vehicle map to the others
            let sends = if a == 0 { n } else { n - 1 };
            for _ in 0..sends {
                ledger.charge(AgentId(a as u32), kind, bytes);
            }
        }
    }
    let first = usize::from(!flags.rsu_on);
    for a in first..=n {
        ledger.record(&Message::pose(AgentId(a as u32), &frame.poses[a])?);
    }
    Ok(())
}
