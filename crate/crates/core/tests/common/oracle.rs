//! Straight-line re-implementation of the cooperative forward pass over flat
//! vectors, used to check the traced pipeline end to end.

use rand::Rng;

use ar2vp_core::compensation::CompensationConfig;
use ar2vp_core::geometry::{Pose, Rotation2};
use ar2vp_core::model::{ModelDims, ModelParams};
use ar2vp_core::scene::{BevGrid, EntityClass, Frame, GroundTruth, GtBox, NUM_ENTITY_CLASSES, NUM_LABELS};
use ar2vp_core::training::{forward_pipeline, Overrides, PipelineFlags};
use ar2vp_core::Tensor3;

use super::{ensure, random_params, rng, scalar_affine, scalar_pool, Check};

/// Random frame with `n` vehicles on a `size × size` grid of unit cells.
/// Poses use quarter turns and quarter-metre offsets so no warped cell
/// centre lands on a rounding boundary.
pub fn random_frame(n: usize, size: usize, seed: u64, dense: bool) -> Frame {
    let mut r = rng(seed);
    let mut poses = Vec::with_capacity(n + 1);
    let mut grids = Vec::with_capacity(n + 1);
    let mut truths = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        let pos = [
            r.gen_range(-2i32..=2) as f64 + 0.25,
            r.gen_range(-2i32..=2) as f64 - 0.25,
        ];
        let pose = Pose::new(pos, Rotation2::quarter_turns(r.gen_range(0..4))).unwrap();
        let data = Tensor3::from_fn(size, size, NUM_ENTITY_CLASSES, |_, _, _| {
            if dense {
                r.gen_range(0.0..1.0)
            } else {
                f64::from(u8::from(r.gen_bool(0.3)))
            }
        });
        grids.push(BevGrid {
            data,
            cell_size: 1.0,
            origin_pose: pose,
        });
        truths.push(GroundTruth {
            height: size,
            width: size,
            seg_labels: (0..size * size).map(|_| r.gen_range(0..NUM_LABELS as u8)).collect(),
            boxes: vec![GtBox {
                entity: 1,
                class: EntityClass::Vehicle,
                rect: [0.5, 1.0, 2.5, 2.0],
            }],
        });
        poses.push(pose);
    }
    Frame {
        scenario_id: seed,
        step: 0,
        poses,
        grids,
        truths,
    }
}

/// Nearest-cell resampling of agent `a`'s map into agent `i`'s frame.
fn warp(map: &[f64], channels: usize, from: &Pose, to: &Pose, size: usize) -> Vec<f64> {
    let (mf, mt) = (from.rotation.matrix(), to.rotation.matrix());
    let half = (size / 2) as f64;
    let mut out = vec![0.0; size * size * channels];
    for r in 0..size {
        for c in 0..size {
            let q = [c as f64 - half, r as f64 - half];
            // to-frame local → global: Rᵀ q + p
            let g = [
                mt[0][0] * q[0] + mt[1][0] * q[1] + to.position[0],
                mt[0][1] * q[0] + mt[1][1] * q[1] + to.position[1],
            ];
            let d = [g[0] - from.position[0], g[1] - from.position[1]];
            let s = [mf[0][0] * d[0] + mf[0][1] * d[1], mf[1][0] * d[0] + mf[1][1] * d[1]];
            let sc = (s[0] + 0.5).floor() + half;
            let sr = (s[1] + 0.5).floor() + half;
            if (0.0..size as f64).contains(&sc) && (0.0..size as f64).contains(&sr) {
                let (src, dst) = ((sr as usize * size + sc as usize) * channels, (r * size + c) * channels);
                out[dst..dst + channels].copy_from_slice(&map[src..src + channels]);
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let num = n * dot(a, b) - sa * sb;
    let den = ((n * dot(a, a) - sa * sa) * (n * dot(b, b) - sb * sb)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Segmentation logits and detection maps of every vehicle.
pub fn pipeline_oracle(frame: &Frame, p: &ModelParams, flags: &PipelineFlags) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = frame.poses.len() - 1;
    let size = frame.grids[0].data.height();
    let cells = size * size;
    let dims = p.dims;
    let (f, dc) = (dims.feature_channels, dims.decoder_channels);
    let enc: Vec<Vec<f64>> = frame
        .grids
        .iter()
        .map(|g| {
            let x = scalar_pool(g.data.as_slice(), size, size, NUM_ENTITY_CLASSES);
            scalar_affine(&x, cells, &p.encoder.weight, &p.encoder.bias, true)
        })
        .collect();
    let received: Vec<Vec<f64>> = enc
        .iter()
        .map(|e| {
            if dims.compression > 1 {
                let z = scalar_affine(e, cells, &p.compressor.weight, &p.compressor.bias, false);
                scalar_affine(&z, cells, &p.decompressor.weight, &p.decompressor.bias, false)
            } else {
                e.clone()
            }
        })
        .collect();
    let into = |a: usize, i: usize| warp(&received[a], f, &frame.poses[a], &frame.poses[i], size);
    let dist = |j: usize| {
        let (a, b) = (frame.poses[0].position, frame.poses[j].position);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let decode = |m: &[f64]| scalar_affine(m, cells, &p.decoder.weight, &p.decoder.bias, true);
    let lambda = flags.compensation.threshold();

    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let fused = if flags.graph_on {
            let maps: Vec<Vec<f64>> = (1..=n).map(|j| if j == i { enc[i].clone() } else { into(j, i) }).collect();
            let mut w: Vec<f64> = (1..=n)
                .map(|j| {
                    let cos = if j == i { 1.0 } else { cosine(&enc[i], &maps[j - 1]) };
                    (dist(j) * cos).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                w = vec![1.0 / n as f64; n];
            }
            let mut fused = vec![0.0; cells * f];
            for (wj, m) in w.iter().zip(&maps) {
                fused.iter_mut().zip(m).for_each(|(o, v)| *o += wj * v);
            }
            if flags.rsu_on {
                let m0 = into(0, i);
                fused.iter_mut().zip(&m0).for_each(|(o, v)| *o += v / n as f64);
            }
            fused
        } else {
            enc[i].clone()
        };
        let mut dec = decode(&fused);
        if flags.compensator_on {
            let reference = if flags.rsu_on {
                decode(&into(0, i))
            } else if i == 1 {
                decode(&enc[1])
            } else {
                decode(&into(1, i))
            };
            let r = pearson(&reference, &dec);
            if r < lambda {
                dec.iter_mut().zip(&reference).for_each(|(o, v)| *o += (lambda - r) * v);
            }
        }
        debug_assert_eq!(dec.len(), cells * dc);
        let seg = scalar_affine(&dec, cells, &p.seg_head.weight, &p.seg_head.bias, false);
        let det = scalar_affine(&dec, cells, &p.det_head.weight, &p.det_head.bias, false);
        out.push((seg, det));
    }
    out
}

pub fn pipeline_oracle_check() -> Check {
    let mut compensations = 0;
    for (k, dense) in [(0u64, true), (1, false)] {
        let frame = random_frame(3, 4, 90 + k, dense);
        for compression in [1, 2] {
            let dims = ModelDims {
                feature_channels: 6,
                decoder_channels: 5,
                compression,
                ..ModelDims::default()
            };
            let p = random_params(dims, &mut rng(95 + k));
            for bits in 0..8u8 {
                for lambda in [0.5, 1.0] {
                    let flags = PipelineFlags {
                        rsu_on: bits & 1 != 0,
                        graph_on: bits & 2 != 0,
                        compensator_on: bits & 4 != 0,
                        compression,
                        compensation: CompensationConfig::new(lambda).unwrap(),
                        ..PipelineFlags::default()
                    };
                    let got = forward_pipeline(&frame, &p, &flags, &Overrides::default()).map_err(|e| e.to_string())?;
                    let want = pipeline_oracle(&frame, &p, &flags);
                    for (v, (o, (seg, det))) in got.vehicles.iter().zip(&want).enumerate() {
                        let ctx = format!("dense {dense}, n {compression}, flags {bits:03b}, lambda {lambda}, vehicle {v}");
                        let ds = super::max_abs_diff(o.seg_logits.as_slice(), seg);
                        let dd = super::max_abs_diff(o.det.as_slice(), det);
                        ensure!(ds <= 1e-10 && dd <= 1e-10, "{ctx}: deviation seg {ds:e}, det {dd:e}");
                        compensations += usize::from(o.ratio.is_some_and(|r| r < lambda));
                    }
                }
            }
        }
    }
    ensure!(compensations > 0, "no configuration exercised the compensation branch");
    Ok(())
}
