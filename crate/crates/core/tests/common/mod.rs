//! Checks shared by the integration tests and the acceptance runner. Each
//! check returns `Err` with a readable reason instead of panicking, so the
//! acceptance runner can report every failure.
#![allow(dead_code)]

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ar2vp_core::channel::{serialize_feature, AgentId, PayloadKind, WireFloat};
use ar2vp_core::compensation::{compensate, flatten, similarity_ratio, CompensationConfig};
use ar2vp_core::eval::{average_precision, box_iou, forget, miou, nms, ScoredBox};
use ar2vp_core::experiment::{run_experiment, sweep_config, ExperimentConfig, Preset, SweepAxis};
use ar2vp_core::fusion::{aggregate, build_graph, build_graph_with, destination_weights, weighted_sum, GraphOptions};
use ar2vp_core::geometry::{rsu_vehicle_distance, transform_to_agent_frame, GridSpec, Pose, Rotation2};
use ar2vp_core::model::{
    backward, compress, decode, decompress, det_head, encode_traced, forward_traced, load_checkpoint, save_checkpoint,
    seg_head, Layer, ModelDims, ModelParams,
};
use ar2vp_core::replay::{select, ReplayBuffer};
use ar2vp_core::scene::{
    generate_scenario, rasterize, Entity, EntityClass, Rect, Scenario, SceneStyle, NUM_ENTITY_CLASSES,
};
use ar2vp_core::training::{
    backward_pipeline, forward_pipeline, frame_loss, frame_objective, seg_loss, total_loss, write_log_csv, LossConfig,
    Overrides, PipelineFlags,
};
use ar2vp_core::{FeatureMap, Tensor3};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // bound first so NaN comparisons count as failures
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use ensure;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(h: usize, w: usize, c: usize, lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| r.gen_range(lo..hi))
}

pub fn random_params(dims: ModelDims, r: &mut ChaCha8Rng) -> ModelParams {
    let mut p = ModelParams::zeros(dims).unwrap();
    for a in p.layers_mut() {
        a.weight.iter_mut().for_each(|w| *w = r.gen_range(-0.8..0.8));
        a.bias.iter_mut().for_each(|b| *b = r.gen_range(-0.2..0.3));
    }
    p
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn close_slices(what: &str, got: &[f64], want: &[f64], tol: f64) -> Check {
    ensure!(got.len() == want.len(), "{what}: length {} vs {}", got.len(), want.len());
    let d = max_abs_diff(got, want);
    ensure!(d <= tol, "{what}: max deviation {d:e} exceeds {tol:e}");
    Ok(())
}

/// A named check with its runner.
pub type NamedCheck = (&'static str, fn() -> Check);

// ---------------------------------------------------------------------------
// oracle equivalence

pub fn oracle_checks() -> Vec<NamedCheck> {
    vec![
        ("agent frame under a quarter turn", geometry_quarter_turn),
        ("distance ignores rotations", distance_rotation_invariant),
        ("different seeds give different layouts", layouts_differ_by_seed),
        ("reflection at the extent boundary", reflection_hand_simulated),
        ("out-of-range entity only in ground truth", out_of_range_entity),
        ("encoder scalar oracle", encoder_oracle),
        ("decoder scalar oracle", decoder_oracle),
        ("head scalar oracles", head_oracles),
        ("autoencoder round trip oracle", autoencoder_oracle),
        ("per-layer finite differences", layer_finite_differences),
        ("graph weights for d = (1, 3)", dpr_hand_weights),
        ("aggregation scalar oracle", aggregation_oracle),
        ("flatten index oracle", flatten_oracle),
        ("Pearson spreadsheet oracle", pearson_oracle),
        ("compensation scalar oracle", compensation_oracle),
        ("wire byte lengths", wire_byte_lengths),
        ("replay selection uniformity", replay_uniformity),
        ("replay eviction composition", replay_eviction_composition),
        ("replay per-scene composition", replay_two_scenes),
        ("segmentation loss oracle", seg_loss_oracle),
        ("total loss from parts", total_loss_parts),
        ("full pipeline monolithic oracle", oracle::pipeline_oracle_check),
        ("mIoU cell-count oracle", miou_hand_count),
        ("NMS suppression order", nms_hand_check),
        ("AP hand-computed PR area", ap_hand_check),
        ("Forget hand evaluation", forget_hand_check),
        ("mu = 0 sweep equals replay off", mu_zero_equals_replay_off),
        ("smoke preset runtime", smoke_runtime),
    ]
}

fn geometry_quarter_turn() -> Check {
    let rsu = Pose::at(1.0, 0.0);
    let veh = Pose::new([0.0, 0.0], Rotation2::quarter_turns(1)).map_err(|e| e.to_string())?;
    let got = transform_to_agent_frame(&rsu, &veh).map_err(|e| e.to_string())?;
    // rot(90°) = [[0, -1], [1, 0]] applied to (1, 0)
    close_slices("relative position", &got, &[0.0, 1.0], 1e-12)
}

fn distance_rotation_invariant() -> Check {
    let mut r = rng(11);
    for _ in 0..8 {
        let a = Pose::new([1.0, 2.0], Rotation2::from_angle(r.gen_range(-3.2..3.2))).unwrap();
        let b = Pose::new([4.0, 6.0], Rotation2::from_angle(r.gen_range(-3.2..3.2))).unwrap();
        let d = rsu_vehicle_distance(&a, &b).map_err(|e| e.to_string())?;
        ensure!(d == 5.0, "distance {d} under rotated poses");
    }
    Ok(())
}

fn layouts_differ_by_seed() -> Check {
    let cfg = SceneStyle::Urban.config();
    let a = generate_scenario(1, &cfg).map_err(|e| e.to_string())?;
    let b = generate_scenario(2, &cfg).map_err(|e| e.to_string())?;
    let buildings = |s: &Scenario| -> Vec<Rect> {
        s.entities
            .iter()
            .filter(|e| e.class == EntityClass::Building)
            .map(|e| e.footprint)
            .collect()
    };
    ensure!(buildings(&a) != buildings(&b), "seeds 1 and 2 give identical buildings");
    Ok(())
}

fn moving_scenario(start: [f64; 2], velocity: [f64; 2]) -> Scenario {
    Scenario {
        id: 0,
        extent: Rect::new([-0.5, -0.5], [19.5, 19.5]),
        entities: vec![Entity {
            id: 1,
            class: EntityClass::Pedestrian,
            footprint: Rect::new(start, [start[0] + 1.0, start[1] + 1.0]),
            velocity,
        }],
        rsu_pose: Pose::at(10.0, 10.0),
        vehicle_spawns: vec![],
        ego_entities: vec![],
        num_steps: 5,
        seed: 0,
    }
}

fn reflection_hand_simulated() -> Check {
    // the unit footprint may reach min x = 18.5; from 17.5 at +1 m/step it
    // touches the wall at t = 1 and is back at 17.5 at t = 2
    let s = moving_scenario([17.5, 3.5], [1.0, 0.0]);
    let e = &s.entities_at(2).map_err(|e| e.to_string())?[0];
    ensure!(e.footprint.min == [17.5, 3.5], "t = 2 footprint {:?}", e.footprint);
    ensure!(e.velocity == [-1.0, 0.0], "t = 2 velocity {:?}", e.velocity);
    Ok(())
}

fn out_of_range_entity() -> Check {
    let mut s = moving_scenario([0.0, 0.0], [0.0, 0.0]);
    s.extent = Rect::new([0.0, 0.0], [40.0, 40.0]);
    // 9 m east of an observer with an 8 m range, one grid cell past it
    s.entities = vec![Entity {
        id: 0,
        class: EntityClass::Vegetation,
        footprint: Rect::new([28.5, 19.5], [29.5, 20.5]),
        velocity: [0.0, 0.0],
    }];
    let (grid, gt) = rasterize(&s, 0, &Pose::at(20.0, 20.0), 8.0, false, GridSpec::default())
        .map_err(|e| e.to_string())?;
    ensure!(grid.data.as_slice().iter().all(|&v| v == 0.0), "entity leaked into the grid");
    ensure!(
        gt.seg_labels[16 * 32 + 25] == EntityClass::Vegetation.label(),
        "entity missing from ground truth"
    );
    Ok(())
}

/// Independent per-cell affine evaluation.
pub fn scalar_affine(x: &[f64], cells: usize, w: &[f64], b: &[f64], relu: bool) -> Vec<f64> {
    let (n_out, n_in) = (b.len(), w.len() / b.len());
    let mut y = vec![0.0; cells * n_out];
    for cell in 0..cells {
        for o in 0..n_out {
            let mut s = b[o];
            for i in 0..n_in {
                s += w[o * n_in + i] * x[cell * n_in + i];
            }
            y[cell * n_out + o] = if relu && s < 0.0 { 0.0 } else { s };
        }
    }
    y
}

/// Raw channels followed by their zero-padded 3×3 means.
pub fn scalar_pool(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 2 * c];
    for r in 0..h as i64 {
        for col in 0..w as i64 {
            let cell = (r * w as i64 + col) as usize;
            for k in 0..c {
                out[cell * 2 * c + k] = x[cell * c + k];
                let mut acc = 0.0;
                for rr in r - 1..=r + 1 {
                    for cc in col - 1..=col + 1 {
                        if (0..h as i64).contains(&rr) && (0..w as i64).contains(&cc) {
                            acc += x[(rr * w as i64 + cc) as usize * c + k];
                        }
                    }
                }
                out[cell * 2 * c + c + k] = acc / 9.0;
            }
        }
    }
    out
}

fn small_dims(input_channels: usize, compression: usize) -> ModelDims {
    ModelDims {
        input_channels,
        context_pool: true,
        feature_channels: 4,
        decoder_channels: 3,
        num_classes: 3,
        compression,
    }
}

fn encoder_oracle() -> Check {
    let mut r = rng(21);
    let p = random_params(small_dims(2, 1), &mut r);
    let x = random_map(2, 2, 2, 0.0, 1.0, &mut r);
    let got = encode_traced(&x, &p).map_err(|e| e.to_string())?.0;
    let pooled = scalar_pool(x.as_slice(), 2, 2, 2);
    let want = scalar_affine(&pooled, 4, &p.encoder.weight, &p.encoder.bias, true);
    close_slices("encoder", got.as_slice(), &want, 1e-12)
}

fn decoder_oracle() -> Check {
    let mut r = rng(22);
    let p = random_params(small_dims(2, 1), &mut r);
    let m = random_map(2, 2, 4, -1.0, 1.0, &mut r);
    let got = decode(&m, &p).map_err(|e| e.to_string())?;
    let want = scalar_affine(m.as_slice(), 4, &p.decoder.weight, &p.decoder.bias, true);
    close_slices("decoder", got.as_slice(), &want, 1e-12)
}

fn head_oracles() -> Check {
    let mut r = rng(23);
    let p = random_params(small_dims(2, 1), &mut r);
    let m = random_map(2, 2, 3, -1.0, 1.0, &mut r);
    let seg = seg_head(&m, &p).map_err(|e| e.to_string())?;
    let det = det_head(&m, &p).map_err(|e| e.to_string())?;
    close_slices(
        "segmentation head",
        seg.as_slice(),
        &scalar_affine(m.as_slice(), 4, &p.seg_head.weight, &p.seg_head.bias, false),
        1e-12,
    )?;
    close_slices(
        "detection head",
        det.as_slice(),
        &scalar_affine(m.as_slice(), 4, &p.det_head.weight, &p.det_head.bias, false),
        1e-12,
    )
}

fn autoencoder_oracle() -> Check {
    let mut r = rng(24);
    let p = random_params(small_dims(2, 2), &mut r);
    let m = random_map(2, 2, 4, -1.0, 1.0, &mut r);
    let z = compress(&m, &p, 2).map_err(|e| e.to_string())?;
    ensure!(z.channels() == 2, "compressed map has {} channels", z.channels());
    let back = decompress(&z, &p, 2).map_err(|e| e.to_string())?;
    let zo = scalar_affine(m.as_slice(), 4, &p.compressor.weight, &p.compressor.bias, false);
    let want = scalar_affine(&zo, 4, &p.decompressor.weight, &p.decompressor.bias, false);
    close_slices("autoencoder round trip", back.as_slice(), &want, 1e-12)
}

fn layer_finite_differences() -> Check {
    let mut r = rng(25);
    let dims = small_dims(2, 2);
    let p = random_params(dims, &mut r);
    for layer in Layer::ALL {
        let a = p.layer(layer);
        let n_in = a.weight.len() / a.bias.len();
        let x = random_map(2, 2, n_in, -1.0, 1.0, &mut r);
        let (out, trace) = forward_traced(&p, layer, std::sync::Arc::new(x.clone())).map_err(|e| e.to_string())?;
        let probe = random_map(2, 2, out.channels(), -1.0, 1.0, &mut r);
        let objective = |q: &ModelParams, x: &Tensor3| -> f64 {
            let (o, _) = forward_traced(q, layer, std::sync::Arc::new(x.clone())).unwrap();
            o.dot(&probe)
        };
        let mut grads = p.zeros_like();
        let g_in = backward(&p, &trace, &probe, &mut grads).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let g_layer = grads.layer(layer);
        for k in 0..a.weight.len() + a.bias.len() {
            let bump = |s: f64| {
                let mut q = p.clone();
                let l = q.layer_mut(layer);
                if k < l.weight.len() {
                    l.weight[k] += s;
                } else {
                    l.bias[k - l.weight.len()] += s;
                }
                objective(&q, &x)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = if k < a.weight.len() {
                g_layer.weight[k]
            } else {
                g_layer.bias[k - a.weight.len()]
            };
            ensure!(rel_err(fd, an) < 1e-4, "{} parameter {k}: fd {fd} analytic {an}", layer.name());
        }
        for k in 0..x.as_slice().len() {
            let bump = |s: f64| {
                let mut y = x.clone();
                y.as_mut_slice()[k] += s;
                objective(&p, &y)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = g_in.as_slice()[k];
            ensure!(rel_err(fd, an) < 1e-4, "{} input {k}: fd {fd} analytic {an}", layer.name());
        }
    }
    Ok(())
}

pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn dpr_hand_weights() -> Check {
    let mut r = rng(31);
    let m = random_map(2, 2, 3, 0.0, 1.0, &mut r);
    let graph = build_graph(&[m.clone(), m], &[1.0, 3.0]).map_err(|e| e.to_string())?;
    // identical maps: cos = 1, weights d_j / Σ d = 1/4 and 3/4
    close_slices("weights into vehicle 2", &graph.destination_weights(1), &[0.25, 0.75], 1e-12)?;
    ensure!(graph.rsu_weight == 0.5, "RSU weight {}", graph.rsu_weight);
    Ok(())
}

fn aggregation_oracle() -> Check {
    let mut r = rng(32);
    let maps = [random_map(2, 2, 2, -1.0, 1.0, &mut r), random_map(2, 2, 2, -1.0, 1.0, &mut r)];
    let m0 = random_map(2, 2, 2, -1.0, 1.0, &mut r);
    let got = weighted_sum(&[0.25, 0.75], &maps, Some((&m0, 0.5))).map_err(|e| e.to_string())?;
    let mut want = vec![0.0; 8];
    for r in 0..2 {
        for c in 0..2 {
            for k in 0..2 {
                want[(r * 2 + c) * 2 + k] =
                    0.25 * maps[0].get(r, c, k) + 0.75 * maps[1].get(r, c, k) + 0.5 * m0.get(r, c, k);
            }
        }
    }
    close_slices("aggregate", got.as_slice(), &want, 1e-12)
}

fn flatten_oracle() -> Check {
    let mut r = rng(33);
    let m = random_map(2, 2, 2, -1.0, 1.0, &mut r);
    let flat = flatten(&m);
    for row in 0..2 {
        for col in 0..2 {
            for k in 0..2 {
                let idx = row * 4 + col * 2 + k;
                ensure!(flat[idx] == m.get(row, col, k), "flatten index {idx}");
            }
        }
    }
    Ok(())
}

fn pearson_oracle() -> Check {
    let (x, y) = ([1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 5.0, 4.0]);
    // computational formula: (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²))
    let n = 4.0;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|a| a * a).sum();
    let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    let got = similarity_ratio(&x, &y).map_err(|e| e.to_string())?;
    ensure!((got - want).abs() < 1e-12, "Pearson {got} vs {want}");
    ensure!((want - 3.5 / 23.75f64.sqrt()).abs() < 1e-12, "oracle arithmetic");
    Ok(())
}

fn compensation_oracle() -> Check {
    let mut r = rng(34);
    let veh = random_map(2, 2, 3, -1.0, 1.0, &mut r);
    let rsu = random_map(2, 2, 3, -1.0, 1.0, &mut r);
    let cfg = CompensationConfig::new(0.8).map_err(|e| e.to_string())?;
    let got = compensate(&veh, &rsu, 0.3, cfg).map_err(|e| e.to_string())?;
    let want: Vec<f64> = veh.as_slice().iter().zip(rsu.as_slice()).map(|(v, m)| v + 0.5 * m).collect();
    close_slices("compensated map", got.as_slice(), &want, 1e-12)
}

fn wire_byte_lengths() -> Check {
    for (h, w, c) in [(1, 1, 1), (4, 3, 2), (32, 32, 32)] {
        let m = FeatureMap::zeros(h, w, c);
        for (float, width) in [(WireFloat::F64, 8), (WireFloat::F32, 4)] {
            let bytes = serialize_feature(AgentId(3), PayloadKind::Feature, &m, float).map_err(|e| e.to_string())?;
            let want = 24 + width * h * w * c;
            ensure!(bytes.len() == want, "{h}×{w}×{c} {float:?}: {} bytes, expected {want}", bytes.len());
        }
    }
    Ok(())
}

fn replay_uniformity() -> Check {
    let items: Vec<usize> = (0..10).collect();
    ensure!(select(&items, 2, 5) == select(&items, 2, 5), "fixed seed is not reproducible");
    let trials = 10_000;
    let mut counts = [0usize; 10];
    for seed in 0..trials {
        for i in select(&items, 2, seed as u64) {
            counts[i] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / trials as f64;
        ensure!((f - 0.2).abs() <= 0.02, "sample {i} selected with frequency {f}");
    }
    Ok(())
}

fn replay_eviction_composition() -> Check {
    let mut buf = ReplayBuffer::new(5, 10).map_err(|e| e.to_string())?;
    buf.refresh(0, &(0..5).collect::<Vec<u32>>(), 1).map_err(|e| e.to_string())?;
    buf.refresh(1, &(100..105).collect::<Vec<u32>>(), 2).map_err(|e| e.to_string())?;
    ensure!(buf.len() == 10, "buffer holds {}", buf.len());
    buf.refresh(2, &(200..210).collect::<Vec<u32>>(), 3).map_err(|e| e.to_string())?;
    let new = buf.entries().iter().filter(|e| e.scene == 2).count();
    let old = buf.entries().iter().filter(|e| e.scene < 2).count();
    ensure!(buf.len() == 10 && new == 5 && old == 5, "composition {new} new + {old} old");
    Ok(())
}

fn replay_two_scenes() -> Check {
    let mut buf = ReplayBuffer::new(3, 6).map_err(|e| e.to_string())?;
    buf.refresh(0, &(0..8).collect::<Vec<u32>>(), 4).map_err(|e| e.to_string())?;
    buf.refresh(1, &(100..108).collect::<Vec<u32>>(), 5).map_err(|e| e.to_string())?;
    for scene in 0..2 {
        let n = buf.entries().iter().filter(|e| e.scene == scene).count();
        ensure!(n == 3, "scene {scene} holds {n} samples");
    }
    Ok(())
}

fn seg_loss_oracle() -> Check {
    let mut r = rng(41);
    let logits = random_map(2, 2, 4, -3.0, 3.0, &mut r);
    let labels: Vec<u8> = (0..4).map(|_| r.gen_range(0..4)).collect();
    let mut want = 0.0;
    for (cell, &y) in labels.iter().enumerate() {
        let z = logits.cell(cell);
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        want -= (z[y as usize].exp() / denom).ln();
    }
    want /= 4.0;
    let got = seg_loss(&logits, &labels).map_err(|e| e.to_string())?;
    ensure!((got - want).abs() < 1e-10, "seg loss {got} vs {want}");
    Ok(())
}

fn total_loss_parts() -> Check {
    let (cur, rep) = ([0.4, 0.8, 1.5], [0.3, 0.9]);
    let want = (0.4 + 0.8 + 1.5) / 3.0 + (0.3 + 0.9) / 2.0;
    let got = total_loss(&cur, &rep);
    ensure!((got - want).abs() < 1e-12, "total loss {got} vs {want}");
    Ok(())
}

fn miou_hand_count() -> Check {
    // ground truth class 1 in columns 0-1, prediction shifted one column
    let gt: Vec<u8> = (0..16).map(|i| u8::from(i % 4 < 2)).collect();
    let pred: Vec<u8> = (0..16).map(|i| u8::from((1..3).contains(&(i % 4)))).collect();
    let (m, per) = miou(&pred, &gt, 2).map_err(|e| e.to_string())?;
    // class 1: 4 shared cells of 12; class 0: 4 shared cells of 12
    ensure!((m - 1.0 / 3.0).abs() < 1e-12, "mIoU {m}");
    ensure!(per == vec![Some(1.0 / 3.0), Some(1.0 / 3.0)], "per-class {per:?}");
    Ok(())
}

fn nms_hand_check() -> Check {
    let a = ScoredBox {
        rect: [0.0, 0.0, 2.0, 2.0],
        score: 0.9,
    };
    let b = ScoredBox {
        rect: [0.5, 0.0, 2.5, 2.0],
        score: 0.8,
    };
    // overlap 1.5×2 = 3 over union 5
    ensure!((box_iou(&a.rect, &b.rect) - 0.6).abs() < 1e-12, "IoU");
    let kept = nms(vec![b, a], 0.5);
    ensure!(kept == vec![a], "kept {kept:?}");
    Ok(())
}

fn ap_hand_check() -> Check {
    let gts = [[0.0, 0.0, 2.0, 2.0], [5.0, 5.0, 7.0, 7.0]];
    let preds = [
        ScoredBox {
            rect: gts[0],
            score: 0.9,
        },
        ScoredBox {
            rect: [10.0, 10.0, 12.0, 12.0],
            score: 0.8,
        },
        ScoredBox {
            rect: gts[1],
            score: 0.7,
        },
    ];
    // ranks: TP (r .5, p 1), FP (r .5, p .5), TP (r 1, p 2/3)
    let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    let got = average_precision(&preds, &gts, 0.5);
    ensure!((got - want).abs() < 1e-12, "AP {got} vs {want}");
    Ok(())
}

fn forget_hand_check() -> Check {
    let history = vec![vec![0.9], vec![0.7, 0.8], vec![0.6, 0.75, 0.85]];
    // scene 0: 0.9 - 0.6; scene 1: 0.8 - 0.75
    let want = (0.3 + 0.05) / 2.0;
    let got = forget(&history).map_err(|e| e.to_string())?;
    ensure!((got - want).abs() < 1e-12, "Forget {got} vs {want}");
    Ok(())
}

/// Two small sequential scenes that train in well under a second.
pub fn tiny_sequential() -> ExperimentConfig {
    let mut cfg = Preset::Smoke.config();
    cfg.name = "tiny".into();
    cfg.scenes.styles = vec![SceneStyle::Suburban, SceneStyle::Rural];
    cfg.scenes.num_steps = 10;
    cfg.replay.select_count = 3;
    cfg.replay.capacity = 6;
    cfg.replay.replay_draw = 3;
    cfg
}

fn mu_zero_equals_replay_off() -> Check {
    let base = tiny_sequential();
    let swept = sweep_config(&base, SweepAxis::SelectCount, &[0.0, 3.0]).map_err(|e| e.to_string())?;
    let out = run_experiment(&swept).map_err(|e| e.to_string())?;
    let mut off = base.clone();
    off.replay.enabled = false;
    let off = run_experiment(&off).map_err(|e| e.to_string())?;
    let mu0 = &out.variants[0];
    let off = &off.variants[0];
    ensure!(mu0.config.replay.select_count == 0, "first sweep row is not mu = 0");
    ensure!(
        mu0.result.checkpoints == off.result.checkpoints,
        "checkpoints differ between mu = 0 and replay off"
    );
    ensure!(log_csv(mu0) == log_csv(off), "metric logs differ between mu = 0 and replay off");
    ensure!(
        mu0.result.log != out.variants[1].result.log,
        "mu = 3 did not change training, so the comparison is vacuous"
    );
    Ok(())
}

pub fn log_csv(v: &ar2vp_core::experiment::VariantRun) -> Vec<u8> {
    let mut buf = Vec::new();
    write_log_csv(&v.result.log, &mut buf).unwrap();
    buf
}

fn smoke_runtime() -> Check {
    let t = Instant::now();
    let out = run_experiment(&Preset::Smoke.config()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "smoke preset took {secs:.1} s");
    ensure!(!out.variants[0].result.log.is_empty(), "smoke preset logged nothing");
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient suite

/// Finite differences over every parameter for N = 2 on 4×4 frames, with
/// the compensator always firing.
pub fn gradient_suite() -> Check {
    let flags_for = |compression| PipelineFlags {
        compression,
        compensation: CompensationConfig::new(1.0).unwrap(),
        ..PipelineFlags::default()
    };
    let frames = [oracle::random_frame(2, 4, 51, false), oracle::random_frame(2, 4, 52, true)];
    for (k, frame) in frames.iter().enumerate() {
        for compression in [1, 2] {
            let dims = ModelDims {
                feature_channels: 6,
                decoder_channels: 5,
                compression,
                ..ModelDims::default()
            };
            let p = random_params(dims, &mut rng(60 + k as u64));
            check_pipeline_gradients(frame, &p, &flags_for(compression))
                .map_err(|e| format!("frame {k}, compression {compression}: {e}"))?;
        }
    }
    Ok(())
}

pub fn check_pipeline_gradients(frame: &ar2vp_core::scene::Frame, p: &ModelParams, flags: &PipelineFlags) -> Check {
    let cfg = LossConfig::default();
    let out = forward_pipeline(frame, p, flags, &Overrides::default()).map_err(|e| e.to_string())?;
    ensure!(
        out.vehicles.iter().all(|v| v.ratio.is_some_and(|r| r < 1.0)),
        "compensation did not fire for every vehicle"
    );
    // graph weights and correlations are constants of the backward pass
    let frozen = Overrides {
        weights: Some(out.vehicles.iter().map(|v| v.weights.clone().unwrap()).collect()),
        ratios: Some(out.vehicles.iter().map(|v| v.ratio.unwrap()).collect()),
    };
    let fl = frame_loss(frame, &out, &cfg).map_err(|e| e.to_string())?;
    let mut grads = p.zeros_like();
    backward_pipeline(p, &out, &fl.grad_seg, &fl.grad_det, &mut grads).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.values().collect();
    for layer in Layer::ALL {
        let routed = p.dims.compression > 1 || !matches!(layer, Layer::Compressor | Layer::Decompressor);
        let a = grads.layer(layer);
        let live = a.weight.iter().chain(&a.bias).any(|&g| g != 0.0);
        ensure!(live || !routed, "{} receives no gradient", layer.name());
    }
    let h = 1e-5;
    for (k, &an) in analytic.iter().enumerate() {
        let eval = |s: f64| {
            let mut q = p.clone();
            *q.value_mut(k) += s;
            frame_objective(frame, &q, flags, &frozen, &cfg).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        ensure!(rel_err(fd, an) < 1e-4, "parameter {k}: fd {fd:e} analytic {an:e}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// graph invariants

pub fn dpr_invariants(graphs: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for g in 0..graphs {
        let n = r.gen_range(1..=6);
        let (h, w, c) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5));
        let features: Vec<FeatureMap> = (0..n).map(|_| random_map(h, w, c, -1.0, 1.0, &mut r)).collect();
        let distances: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..30.0)).collect();
        let opts = GraphOptions {
            self_loop: if r.gen_bool(0.5) {
                ar2vp_core::fusion::SelfLoop::Include
            } else {
                ar2vp_core::fusion::SelfLoop::Exclude
            },
            distance: ar2vp_core::fusion::DistanceWeighting::Raw,
        };
        let graph = build_graph_with(&features, &distances, opts).map_err(|e| e.to_string())?;
        for i in 0..n {
            let col = graph.destination_weights(i);
            let sum: f64 = col.iter().sum();
            ensure!((sum - 1.0).abs() < 1e-9, "graph {g}: weights into {i} sum to {sum}");
            ensure!(col.iter().all(|&v| v >= 0.0), "graph {g}: negative weight into {i}");
        }
        // scale covariance
        let s = r.gen_range(0.1..10.0);
        let scaled: Vec<FeatureMap> = features
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.scale(s);
                f
            })
            .collect();
        let graph_s = build_graph_with(&scaled, &distances, opts).map_err(|e| e.to_string())?;
        let m0 = random_map(h, w, c, -1.0, 1.0, &mut r);
        let mut m0_s = m0.clone();
        m0_s.scale(s);
        for i in 0..n {
            let (a, b) = (graph.destination_weights(i), graph_s.destination_weights(i));
            ensure!(max_abs_diff(&a, &b) < 1e-9, "graph {g}: weights into {i} change under scaling by {s}");
            let fused = aggregate(&graph, &features, Some(&m0), i).map_err(|e| e.to_string())?;
            let fused_s = aggregate(&graph_s, &scaled, Some(&m0_s), i).map_err(|e| e.to_string())?;
            for (x, y) in fused.as_slice().iter().zip(fused_s.as_slice()) {
                ensure!((s * x - y).abs() < 1e-9 * (1.0 + y.abs()), "graph {g}: fused map is not scaled by {s}");
            }
        }
        // distance monotonicity with identical features
        if n >= 2 {
            let same: Vec<FeatureMap> = vec![features[0].clone(); n];
            let i = r.gen_range(0..n);
            let j = (i + r.gen_range(1..n)) % n;
            let before = destination_weights(&same, &distances, i, opts).map_err(|e| e.to_string())?;
            let mut farther = distances.clone();
            farther[j] += r.gen_range(0.1..10.0);
            let after = destination_weights(&same, &farther, i, opts).map_err(|e| e.to_string())?;
            // with only j eligible its weight is pinned at 1
            let pinned = before[j] == 1.0 && after[j] == 1.0;
            ensure!(
                after[j] > before[j] || pinned,
                "graph {g}: raising d_{j} moved its weight into {i} from {} to {}",
                before[j],
                after[j]
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics

pub fn metric_checks() -> Vec<NamedCheck> {
    vec![
        ("mIoU of a perfect prediction", || {
            let gt: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
            let (m, _) = miou(&gt, &gt, 3).map_err(|e| e.to_string())?;
            ensure!(m == 1.0, "mIoU {m}");
            Ok(())
        }),
        ("mIoU of disjoint masks", || {
            let gt = vec![1u8, 1, 0, 0];
            let pred = vec![0u8, 0, 1, 1];
            let (_, per) = miou(&pred, &gt, 2).map_err(|e| e.to_string())?;
            ensure!(per[1] == Some(0.0), "class 1 IoU {:?}", per[1]);
            Ok(())
        }),
        ("mIoU cell-count oracle", miou_hand_count),
        ("AP of perfect predictions", || {
            let gts = [[0.0, 0.0, 1.0, 1.0], [3.0, 3.0, 5.0, 4.0]];
            let preds: Vec<ScoredBox> = gts.iter().map(|&rect| ScoredBox { rect, score: 0.9 }).collect();
            let ap = average_precision(&preds, &gts, 0.7);
            ensure!(ap == 1.0, "AP {ap}");
            Ok(())
        }),
        ("AP without predictions", || {
            let ap = average_precision(&[], &[[0.0, 0.0, 1.0, 1.0]], 0.5);
            ensure!(ap == 0.0, "AP {ap}");
            Ok(())
        }),
        ("AP hand-computed PR area", ap_hand_check),
        ("Forget of a constant history", || {
            let f = forget(&[vec![0.5], vec![0.5, 0.5], vec![0.5, 0.5, 0.5]]).map_err(|e| e.to_string())?;
            ensure!(f == 0.0, "Forget {f}");
            Ok(())
        }),
        ("Forget of two scenes", || {
            let f = forget(&[vec![0.8], vec![0.6, 0.9]]).map_err(|e| e.to_string())?;
            ensure!((f - 0.2).abs() < 1e-12, "Forget {f}");
            Ok(())
        }),
        ("Forget hand evaluation", forget_hand_check),
        ("Forget needs two scenes", || {
            ensure!(forget(&[vec![0.5]]).is_err(), "single scene accepted");
            Ok(())
        }),
        ("AP70 never exceeds AP50", || ap_threshold_order(200, 71)),
    ]
}

pub fn ap_threshold_order(sets: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let random_box = |r: &mut ChaCha8Rng| {
        let (x, y) = (r.gen_range(0.0..20.0), r.gen_range(0.0..20.0));
        [x, y, x + r.gen_range(0.5..4.0), y + r.gen_range(0.5..4.0)]
    };
    for s in 0..sets {
        let gts: Vec<[f64; 4]> = (0..r.gen_range(0..6)).map(|_| random_box(&mut r)).collect();
        let mut preds: Vec<ScoredBox> = (0..r.gen_range(0..8))
            .map(|_| ScoredBox {
                rect: random_box(&mut r),
                score: r.gen_range(0.0..1.0),
            })
            .collect();
        // jittered copies of the truth so that both thresholds get matches
        for g in &gts {
            if r.gen_bool(0.7) {
                let j = r.gen_range(0.0..0.6);
                preds.push(ScoredBox {
                    rect: [g[0] + j, g[1], g[2] + j, g[3]],
                    score: r.gen_range(0.0..1.0),
                });
            }
        }
        let (a50, a70) = (average_precision(&preds, &gts, 0.5), average_precision(&preds, &gts, 0.7));
        ensure!(a70 <= a50 + 1e-12, "set {s}: AP70 {a70} > AP50 {a50}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// determinism

pub fn determinism_check() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let cfg = tiny_sequential();
    for d in &dirs {
        ar2vp_core::experiment::run(&cfg, d.path()).map_err(|e| e.to_string())?;
    }
    let csvs = |root: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|e| e == "csv") {
                    let rel = path.strip_prefix(root).unwrap().display().to_string();
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
        out
    };
    let (a, b) = (csvs(dirs[0].path()), csvs(dirs[1].path()));
    ensure!(a.len() >= 2, "only {} CSV files written", a.len());
    ensure!(
        a.keys().collect::<Vec<_>>() == b.keys().collect::<Vec<_>>(),
        "runs wrote different CSV files"
    );
    for (name, bytes) in &a {
        ensure!(Some(bytes) == b.get(name), "{name} differs between identical runs");
    }
    Ok(())
}

pub fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(81);
    let mut p = random_params(ModelDims::default(), &mut r);
    // values that text formats tend to mangle
    p.encoder.weight[0] = f64::MIN_POSITIVE / 3.0;
    p.encoder.weight[1] = -0.0;
    p.decoder.bias[0] = 1.0 / 3.0;
    let path = dir.path().join("p.ckpt");
    save_checkpoint(&p, &path).map_err(|e| e.to_string())?;
    let q = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure!(q.dims == p.dims, "dimensions changed");
    let bits = |m: &ModelParams| m.values().map(f64::to_bits).collect::<Vec<_>>();
    ensure!(bits(&p) == bits(&q), "parameters changed bitwise");
    let again = dir.path().join("q.ckpt");
    save_checkpoint(&q, &again).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap(),
        "re-saved checkpoint differs"
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// replay fuzz

/// Random scene sequences against a buffer of `(scene, index)` samples.
pub fn replay_fuzz(operations: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut done = 0;
    while done < operations {
        let capacity = r.gen_range(0..25);
        let mu = r.gen_range(0..=capacity);
        let mut buf: ReplayBuffer<(usize, usize)> = ReplayBuffer::new(mu, capacity).map_err(|e| e.to_string())?;
        let mut scene = 0;
        let mut last: Option<usize> = None;
        let mut previous: BTreeSet<(usize, usize)> = BTreeSet::new();
        for _ in 0..r.gen_range(1..12) {
            done += 1;
            if let Some(last) = last.filter(|_| r.gen_bool(0.1)) {
                // a stale scene id must be rejected without side effects
                let before = buf.clone();
                let stale = r.gen_range(0..=last);
                ensure!(
                    buf.refresh(stale, &[(stale, 0)], 1).is_err(),
                    "stale scene {stale} accepted after {last}"
                );
                ensure!(buf == before, "rejected refresh mutated the buffer");
                continue;
            }
            let size = r.gen_range(0..30);
            let finished: Vec<(usize, usize)> = (0..size).map(|k| (scene, k)).collect();
            let old_len = buf.len();
            buf.refresh(scene, &finished, r.gen()).map_err(|e| e.to_string())?;
            let entries = buf.entries();
            ensure!(entries.len() <= capacity, "size {} over capacity {capacity}", entries.len());
            let newest = entries.iter().filter(|e| e.scene == scene).count();
            ensure!(newest == mu.min(size), "newest scene kept {newest}, expected {}", mu.min(size));
            let expected_len = (old_len + mu.min(size)).min(capacity);
            ensure!(entries.len() == expected_len, "size {} expected {expected_len}", entries.len());
            let mut seen = BTreeSet::new();
            let mut per_scene: BTreeMap<usize, usize> = BTreeMap::new();
            for e in entries {
                ensure!(e.sample.0 == e.scene, "sample {:?} filed under scene {}", e.sample, e.scene);
                ensure!(seen.insert(e.sample), "duplicate sample {:?}", e.sample);
                *per_scene.entry(e.scene).or_default() += 1;
                if e.scene != scene {
                    ensure!(previous.contains(&e.sample), "old sample {:?} appeared from nowhere", e.sample);
                }
            }
            ensure!(per_scene.values().all(|&k| k <= mu), "a scene holds more than mu = {mu}");
            previous = seen;
            last = Some(scene);
            scene += r.gen_range(1..3);
        }
    }
    Ok(())
}

/// Keeps the unused-import lint quiet for helpers only some targets use.
pub fn encoded_channels() -> usize {
    NUM_ENTITY_CLASSES
}
