//! Shared oracles for the integration tests: explicit-loop references and
//! the finite-difference gradient suite.

#![allow(dead_code)]

use cotr::decoder::LabelGroup;
use cotr::pipeline::{Dataset, Model, RunConfig};
use cotr::scene::{GridSpec, EMPTY};
use cotr::tensor::ops::{CameraRef, DeformLayout};
use cotr::tensor::{check_gradients, ConvSpec, GradCheckReport, NdValue, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdValue {
    NdValue::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> NdValue {
    NdValue::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn in_unit(shape: &[usize], rng: &mut ChaCha8Rng) -> NdValue {
    NdValue::from_fn(shape, |_| rng.random_range(0.05..0.95))
}

/// `Σ y ⊙ r` with a fixed irregular `r`, so every output element matters.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let r = NdValue::from_fn(shape, |i| ((i as f64 * 0.618_033_988_7 + 0.3) % 1.0) * 2.0 - 1.0);
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum_all(p))
}

type Case = fn(&mut ChaCha8Rng) -> GradCheckReport;

fn check(inputs: Vec<NdValue>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCheckReport {
    check_gradients(&inputs, FD_STEP, f).expect("gradient check runs")
}

/// One finite-difference case per differentiable op.
pub fn gradient_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| check(vec![random(&[3, 4], r), random(&[3, 4], r)], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        })),
        ("sub", |r| check(vec![random(&[3, 4], r), random(&[3, 4], r)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y)
        })),
        ("mul", |r| check(vec![random(&[3, 4], r), random(&[3, 4], r)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y)
        })),
        ("scale+add_scalar", |r| check(vec![random(&[5], r)], |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            let y2 = t.mul(y, y)?;
            project(t, y2)
        })),
        ("sigmoid", |r| check(vec![random(&[2, 5], r)], |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        })),
        ("relu", |r| check(vec![away_from_zero(&[2, 5], r)], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        })),
        ("add_broadcast", |r| check(vec![random(&[3, 4], r), random(&[4], r)], |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            project(t, y)
        })),
        ("sum_all+mean_all", |r| check(vec![random(&[3, 4], r)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let m = t.mean_all(sq);
            let s = t.sum_all(v[0]);
            let ms = t.mul(m, s)?;
            Ok(t.sum_all(ms))
        })),
        ("linear_combination", |r| check(vec![random(&[3], r), random(&[3], r)], |t, v| {
            let a = project(t, v[0])?;
            let bb = t.mul(v[1], v[1])?;
            let b = t.sum_all(bb);
            t.linear_combination(&[(0.5, a), (-2.0, b)])
        })),
        ("matmul", |r| check(vec![random(&[3, 4], r), random(&[4, 2], r)], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y)
        })),
        ("matmul_nt", |r| check(vec![random(&[3, 4], r), random(&[2, 4], r)], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            project(t, y)
        })),
        ("transpose", |r| check(vec![random(&[3, 5], r)], |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y)
        })),
        ("reshape", |r| check(vec![random(&[2, 6], r)], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            let y = t.mul(y, y)?;
            project(t, y)
        })),
        ("concat", |r| check(vec![random(&[2, 3], r), random(&[2, 2], r)], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y)
        })),
        ("slice", |r| check(vec![random(&[4, 5], r)], |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            project(t, y)
        })),
        ("gather_rows", |r| check(vec![random(&[4, 3], r)], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(t, y)
        })),
        ("softmax", |r| check(vec![random(&[3, 4], r)], |t, v| {
            let a = t.softmax(v[0], 0)?;
            let b = t.softmax(v[0], 1)?;
            let y = t.add(a, b)?;
            project(t, y)
        })),
        ("log_softmax", |r| check(vec![random(&[3, 4], r)], |t, v| {
            let y = t.log_softmax(v[0], 1)?;
            project(t, y)
        })),
        ("layer_norm", |r| check(vec![random(&[3, 5], r), random(&[5], r), random(&[5], r)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y)
        })),
        ("conv3d", |r| {
            check(vec![random(&[2, 4, 4, 3], r), random(&[3, 2, 3, 3, 3], r), random(&[3], r)], |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), ConvSpec::cube(3, 2, 1))?;
                project(t, y)
            })
        }),
        ("conv3d_transpose", |r| {
            check(vec![random(&[2, 2, 2, 2], r), random(&[2, 3, 2, 2, 2], r), random(&[3], r)], |t, v| {
                let spec = ConvSpec::anisotropic([2; 3], [2; 3], [0; 3]);
                let y = t.conv3d_transpose(v[0], v[1], Some(v[2]), spec)?;
                project(t, y)
            })
        }),
        ("trilinear_sample", |r| check(vec![random(&[2, 3, 4, 3], r), in_unit(&[6, 3], r)], |t, v| {
            let (y, _) = t.trilinear_sample(v[0], v[1])?;
            project(t, y)
        })),
        ("deformable_attention_3d", |r| {
            check(vec![random(&[4, 3, 3, 3], r), in_unit(&[2, 2, 3, 3], r), random(&[2, 2, 3], r)], |t, v| {
                let layout = DeformLayout { queries: 2, heads: 2, samples: 3 };
                let y = t.deformable_attention_3d(v[0], v[1], v[2], layout)?;
                project(t, y)
            })
        }),
        ("deformable_attention_2d", |r| {
            let refs: Vec<CameraRef> = (0..4)
                .map(|i| CameraRef { valid: i != 1, x: r.random_range(0.5..3.5), y: r.random_range(0.5..2.5) })
                .collect();
            let inputs = vec![random(&[4, 2, 4, 5], r), random(&[2, 2, 3, 2], r), random(&[2, 2, 3], r)];
            check(inputs, move |t, v| {
                let layout = DeformLayout { queries: 2, heads: 2, samples: 3 };
                let y = t.deformable_attention_2d(v[0], &refs, v[1], v[2], layout)?;
                project(t, y)
            })
        }),
        ("cross_entropy", |r| {
            let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..5)).collect();
            check(vec![random(&[5, 4], r)], move |t, v| {
                // target 4 is the ignore index
                t.cross_entropy(v[0], &targets, Some(&[1.0, 0.5, 2.0, 0.1]), Some(4))
            })
        }),
        ("bce_with_logits_rows", |r| {
            let targets: Vec<f64> = (0..18).map(|_| r.random_range(0..2) as f64).collect();
            let w: Vec<f64> = (0..6).map(|_| r.random_range(0..2) as f64).collect();
            check(vec![random(&[3, 6], r)], move |t, v| {
                let y = t.bce_with_logits_rows(v[0], &targets, Some(&w))?;
                project(t, y)
            })
        }),
        ("dice_rows", |r| {
            let targets: Vec<f64> = (0..18).map(|_| r.random_range(0..2) as f64).collect();
            check(vec![random(&[3, 6], r)], move |t, v| {
                let y = t.dice_rows(v[0], &targets, None)?;
                project(t, y)
            })
        }),
        ("lift_outer_product", |r| check(vec![random(&[2, 2, 2, 3], r), random(&[3, 2, 2, 3], r)], |t, v| {
            let y = t.lift_outer_product(v[0], v[1])?;
            project(t, y)
        })),
        ("voxel_pool", |r| {
            let grid = GridSpec { dims: [2, 2, 2], voxel_size: 1.0, origin: [0.0; 3] };
            let pos: Vec<[f64; 3]> =
                (0..6).map(|_| [0, 1, 2].map(|_| r.random_range(-0.5..2.5))).collect();
            check(vec![random(&[6, 2], r)], move |t, v| {
                let y = t.voxel_pool(v[0], &pos, &grid)?;
                project(t, y)
            })
        }),
    ]
}

/// Worst relative error of every op over `seeds` seeded cases.
pub fn run_gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    gradient_cases()
        .into_iter()
        .map(|(name, case)| {
            let worst = (0..seeds)
                .map(|s| case(&mut ChaCha8Rng::seed_from_u64(1000 + s)).max_rel_err)
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

/// Triple loop over voxels, scanning every point for each one.
pub fn voxel_pool_loop(features: &NdValue, positions: &[[f64; 3]], grid: &GridSpec) -> Vec<f64> {
    let c = features.shape()[1];
    let [nx, ny, nz] = grid.dims;
    let mut out = vec![0.0; c * nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = (x * ny + y) * nz + z;
                for (p, pos) in positions.iter().enumerate() {
                    let cell: Vec<f64> =
                        (0..3).map(|a| ((pos[a] - grid.origin[a]) / grid.voxel_size).floor()).collect();
                    if cell == [x as f64, y as f64, z as f64] {
                        for ch in 0..c {
                            out[ch * nx * ny * nz + v] += features.data()[p * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn lerp_axis(t: f64, n: usize) -> [(usize, f64); 2] {
    if n == 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    let i0 = (t.floor() as usize).min(n - 2);
    let f = t - i0 as f64;
    [(i0, 1.0 - f), (i0 + 1, f)]
}

/// Explicit loop over queries, heads, samples and the 8 corners.
pub fn deformable_3d_loop(value: &NdValue, locations: &NdValue, weights: &NdValue, l: DeformLayout) -> Vec<f64> {
    let s = value.shape();
    let (c, d) = (s[0], [s[1], s[2], s[3]]);
    let ch = c / l.heads;
    let mut out = vec![0.0; l.queries * c];
    for q in 0..l.queries {
        for h in 0..l.heads {
            for r in 0..l.samples {
                let k = (q * l.heads + h) * l.samples + r;
                let u = &locations.data()[k * 3..k * 3 + 3];
                if u.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    continue;
                }
                let w = weights.data()[k];
                let ax: Vec<[(usize, f64); 2]> = (0..3).map(|a| lerp_axis(u[a] * (d[a] - 1) as f64, d[a])).collect();
                for &(x, wx) in &ax[0] {
                    for &(y, wy) in &ax[1] {
                        for &(z, wz) in &ax[2] {
                            for cc in 0..ch {
                                let chan = h * ch + cc;
                                let v = value.data()[((chan * d[0] + x) * d[1] + y) * d[2] + z];
                                out[q * c + chan] += w * wx * wy * wz * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Explicit loop over queries, cameras, heads, samples and the 4 corners,
/// averaged over each query's valid cameras.
pub fn deformable_2d_loop(
    value: &NdValue,
    refs: &[CameraRef],
    offsets: &NdValue,
    weights: &NdValue,
    l: DeformLayout,
) -> Vec<f64> {
    let s = value.shape();
    let (c, ncam, hf, wf) = (s[0], s[1], s[2], s[3]);
    let ch = c / l.heads;
    let mut out = vec![0.0; l.queries * c];
    for q in 0..l.queries {
        let valid: Vec<usize> = (0..ncam).filter(|&cam| refs[q * ncam + cam].valid).collect();
        for &cam in &valid {
            let rf = refs[q * ncam + cam];
            for h in 0..l.heads {
                for r in 0..l.samples {
                    let k = (q * l.heads + h) * l.samples + r;
                    let x = rf.x + offsets.data()[k * 2];
                    let y = rf.y + offsets.data()[k * 2 + 1];
                    let (x0, y0) = (x.floor(), y.floor());
                    for (cy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
                        for (cx, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
                            if cx < 0.0 || cy < 0.0 || cx >= wf as f64 || cy >= hf as f64 {
                                continue;
                            }
                            for cc in 0..ch {
                                let chan = h * ch + cc;
                                let idx = ((chan * ncam + cam) * hf + cy as usize) * wf + cx as usize;
                                out[q * c + chan] +=
                                    weights.data()[k] * wx * wy * value.data()[idx] / valid.len() as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-voxel scan over queries and labels with explicit softmax.
pub fn semantic_inference_loop(class_logits: &NdValue, mask_logits: &NdValue, group: &LabelGroup) -> Vec<u16> {
    let (nq, width) = (class_logits.shape()[0], class_logits.shape()[1]);
    let v = mask_logits.shape()[1];
    let mut probs = vec![vec![0.0; width]; nq];
    for q in 0..nq {
        let row = &class_logits.data()[q * width..(q + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for k in 0..width {
            probs[q][k] = (row[k] - m).exp() / z;
        }
    }
    let mut out = vec![EMPTY; v];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut label = group.empty_label();
        for q in 0..nq {
            let argmax = (0..width).max_by(|&a, &b| probs[q][a].total_cmp(&probs[q][b]).then(b.cmp(&a))).unwrap();
            if argmax == width - 1 {
                continue;
            }
            let m = 1.0 / (1.0 + (-mask_logits.data()[q * v + j]).exp());
            for k in 0..width - 1 {
                if probs[q][k] * m > best {
                    best = probs[q][k] * m;
                    label = k as u16;
                }
            }
        }
        *slot = if label == group.empty_label() { EMPTY } else { label };
    }
    out
}

/// Minimum of `Σ_col cost[row(col), col]` over all injective `col → row` maps.
pub fn brute_force_assignment(cost: &[f64], n_rows: usize, n_cols: usize) -> f64 {
    fn go(cost: &[f64], n_rows: usize, n_cols: usize, col: usize, used: &mut Vec<bool>) -> f64 {
        if col == n_cols {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..n_rows {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[r * n_cols + col] + go(cost, n_rows, n_cols, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(cost, n_rows, n_cols, 0, &mut vec![false; n_rows])
}

/// Relative errors on one entry of each of five parameters spread over the
/// featurizer, IVT, seg head and decoder.
pub fn end_to_end_spot_check() -> Vec<(String, f64, f64, f64)> {
    let cfg = RunConfig::default();
    let data = Dataset::generate(&cfg).unwrap();
    let mut model = Model::for_dataset(&cfg, &data).unwrap();
    let p = model.prepare(&data.scenes[0]).unwrap();
    let names = ["featurizer.down0.w", "ivt0.sca.out.w", "seg_head.w", "decoder.g3.queries", "decoder.l0.cross.out.w"];
    let mut t = Tape::new();
    let (loss, _) = model.loss(&mut t, &p).unwrap();
    let grads = t.backward(loss).unwrap();
    let mut out = Vec::new();
    for name in names {
        let id = model.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let g = grads.param(id).unwrap().to_vec();
        // the entry with the largest gradient keeps the check away from noise
        let j = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        let x0 = model.store.value(id).data()[j];
        let h = 1e-5;
        let eval = |x: f64, model: &mut Model| {
            model.store.value_mut(id).data_mut()[j] = x;
            let mut t = Tape::inference();
            model.loss(&mut t, &p).unwrap().1.total
        };
        let fd = (eval(x0 + h, &mut model) - eval(x0 - h, &mut model)) / (2.0 * h);
        model.store.value_mut(id).data_mut()[j] = x0;
        let rel = (g[j] - fd).abs() / g[j].abs().max(fd.abs());
        out.push((name.to_string(), g[j], fd, rel));
    }
    out
}
