//! Built-in correctness checks run by `msfin selftest`.
//!
//! Each check compares an optimized path with a slow, independent
//! computation: finite differences for gradients, nested loops for
//! convolution and SSIM, a direct sum for PSNR, and inner products for the
//! transposed-convolution adjoint.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Msfin, NetworkConfig};
use crate::gradcheck::{check_inputs, check_params, project, random_tensor, CheckOptions, GradCheck};
use crate::image::{ColorSpace, PlanarImage};
use crate::tensor::{ParamStore, Shape, Tape, Tensor, TensorError};

/// Relative-error bound for gradient checks.
pub const GRAD_TOL: f64 = 1e-4;
/// Absolute bound for oracle comparisons.
pub const ORACLE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<28} {} ({:.1}s)", self.name, self.detail, self.seconds)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String), String>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

type OpFn = fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>;

fn operator_cases() -> Vec<(&'static str, Vec<Shape>, OpFn)> {
    vec![
        ("conv2d", vec![s(2, 3, 5, 6), s(4, 3, 3, 3), s(1, 4, 1, 1)], |t, x| {
            t.conv2d(&x[0], &x[1], Some(&x[2]), 1, 1, 1)
        }),
        ("conv2d stride 2", vec![s(1, 2, 7, 8), s(3, 2, 3, 3)], |t, x| {
            t.conv2d(&x[0], &x[1], None, 2, 1, 1)
        }),
        ("conv2d grouped", vec![s(2, 6, 5, 5), s(6, 2, 3, 3)], |t, x| {
            t.conv2d(&x[0], &x[1], None, 1, 1, 3)
        }),
        ("conv_transpose2d", vec![s(2, 3, 3, 4), s(3, 2, 4, 4), s(1, 2, 1, 1)], |t, x| {
            t.conv_transpose2d(&x[0], &x[1], Some(&x[2]), 2, 1)
        }),
        ("pixel_shuffle", vec![s(2, 8, 3, 2)], |t, x| t.pixel_shuffle(&x[0], 2)),
        ("channel_shuffle", vec![s(1, 6, 3, 3)], |t, x| t.channel_shuffle(&x[0], 3)),
        ("global_avg_pool", vec![s(2, 3, 4, 5)], |t, x| t.global_avg_pool(&x[0])),
        ("relu", vec![s(1, 3, 4, 4)], |t, x| t.relu(&x[0])),
        ("leaky_relu", vec![s(1, 3, 4, 4)], |t, x| t.leaky_relu(&x[0], 0.2)),
        ("sigmoid", vec![s(1, 3, 4, 4)], |t, x| t.sigmoid(&t.scale(&x[0], 3.0)?)),
        ("mul broadcast", vec![s(2, 3, 4, 4), s(2, 3, 1, 1)], |t, x| t.mul(&x[0], &x[1])),
        ("concat", vec![s(2, 1, 3, 3), s(2, 3, 3, 3)], |t, x| t.concat_channels(&[&x[0], &x[1]])),
        ("mean_abs_diff", vec![s(2, 3, 4, 4), s(2, 3, 4, 4)], |t, x| t.mean_abs_diff(&x[0], &x[1])),
        ("reflect_pad", vec![s(1, 2, 5, 6)], |t, x| t.reflect_pad(&x[0], 8, 9)),
    ]
}

/// Finite-difference check of every differentiable operator.
pub fn operator_gradients() -> CheckResult {
    timed("operator gradients", || {
        let mut total = GradCheck::default();
        let mut worst = String::new();
        for (k, (name, shapes, op)) in operator_cases().into_iter().enumerate() {
            let seed = 40 + k as u64;
            let inputs: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, &sh)| random_tensor(sh, seed + 100 * i as u64))
                .collect();
            let probe = op(&Tape::inference(), &inputs).map_err(|e| e.to_string())?;
            let r = random_tensor(probe.shape(), seed + 7);
            let opts = CheckOptions {
                seed,
                ..Default::default()
            };
            let g = check_inputs(&inputs, opts, |tape, xs| project(tape, &op(tape, xs)?, &r))
                .map_err(|e: TensorError| e.to_string())?;
            if g.max_rel_err >= total.max_rel_err {
                worst = name.to_string();
            }
            total.merge(g);
        }
        Ok((
            total.max_rel_err < GRAD_TOL,
            format!(
                "{} coordinates, max rel err {:.2e} ({worst})",
                total.checked, total.max_rel_err
            ),
        ))
    })
}

/// Settings under which the tiny network is gradient-checked.
///
/// Zero biases leave some ReLU inputs exactly at the kink, where the
/// subgradient and a central difference disagree by construction, so the
/// biases are randomised. A small step with refinement keeps kink crossings
/// of the random-weight network from masquerading as errors.
pub fn network_check_options(sample: Option<usize>) -> CheckOptions {
    CheckOptions {
        sample,
        seed: 3,
        step: 1e-5,
        refine: 4,
        tolerance: 1e-5,
    }
}

/// Tiny network (C=6, groups 3) with random weights and biases, plus a
/// 1x3x16x16 input and projection weights.
pub fn tiny_network() -> (Msfin, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = Msfin::new(NetworkConfig::tiny(6, 3), &mut store, &mut rng).expect("valid tiny config");
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        if store.get(id).name.ends_with(".bias") {
            let sh = store.get(id).value.shape();
            let b = random_tensor(sh, 1000 + k as u64).map(|v| 0.1 * v);
            store.set_value(id, b).expect("same shape");
        }
    }
    let x = random_tensor(s(1, 3, 16, 16), 1).map(|v| 0.5 + 0.5 * v);
    let w = random_tensor(s(1, 3, 16, 16), 2);
    (net, store, x, w)
}

/// Gradient check of the full tiny network with respect to its input and
/// every parameter. `sample` limits the coordinates per tensor.
pub fn network_gradients(sample: Option<usize>) -> CheckResult {
    timed("network gradients", || {
        let (net, store, x, w) = tiny_network();
        let opts = network_check_options(sample);
        let gi = check_inputs(std::slice::from_ref(&x), opts, |tape, xs| {
            Ok::<_, crate::arch::ArchError>(project(tape, &net.forward(tape, &store, &xs[0])?, &w)?)
        })
        .map_err(|e| e.to_string())?;
        let gp = check_params(&store, &net.param_ids(), opts, |tape, st| {
            Ok::<_, crate::arch::ArchError>(project(tape, &net.forward(tape, st, &x)?, &w)?)
        })
        .map_err(|e| e.to_string())?;
        let max = gi.max_rel_err.max(gp.max_rel_err);
        Ok((
            max < GRAD_TOL,
            format!(
                "input {} / params {} coordinates, max rel err {:.2e}",
                gi.checked, gp.checked, max
            ),
        ))
    })
}

/// Seven-loop direct convolution.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (cout, cin_g, k) = (ws.n(), ws.c(), ws.h());
    let cout_g = cout / groups;
    let oh = (xs.h() + 2 * pad - k) / stride + 1;
    let ow = (xs.w() + 2 * pad - k) / stride + 1;
    Tensor::from_fn(s(xs.n(), cout, oh, ow), |n, co, oy, ox| {
        let g = co / cout_g;
        let mut acc = bias.map_or(0.0, |b| b[co]);
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= xs.h() as isize || ix >= xs.w() as isize {
                        continue;
                    }
                    acc += x.get(n, g * cin_g + ci, iy as usize, ix as usize) * w.get(co, ci, ky, kx);
                }
            }
        }
        acc
    })
}

/// Optimized convolution (dense, strided, grouped) against [`naive_conv2d`].
pub fn conv_oracle() -> CheckResult {
    timed("conv2d vs naive loops", || {
        let cases = [
            (s(1, 2, 5, 5), s(3, 2, 3, 3), 1, 1, 1),
            (s(2, 6, 8, 7), s(6, 2, 3, 3), 1, 1, 3),
            (s(1, 6, 8, 8), s(6, 1, 3, 3), 1, 1, 6),
            (s(1, 4, 9, 9), s(4, 4, 3, 3), 2, 1, 1),
        ];
        let mut max = 0.0f64;
        for (i, &(xs, ws, stride, pad, groups)) in cases.iter().enumerate() {
            let x = random_tensor(xs, 10 + i as u64);
            let w = random_tensor(ws, 20 + i as u64);
            let b = random_tensor(s(1, ws.n(), 1, 1), 30 + i as u64);
            let fast = Tape::inference()
                .conv2d(&x, &w, Some(&b), stride, pad, groups)
                .map_err(|e| e.to_string())?;
            let slow = naive_conv2d(&x, &w, Some(b.data()), stride, pad, groups);
            max = max.max(fast.max_abs_diff(&slow));
        }
        Ok((max < ORACLE_TOL, format!("max abs diff {max:.2e}")))
    })
}

/// `<convT(x), y> == <x, conv(y)>` for the same weights.
pub fn transpose_adjoint() -> CheckResult {
    timed("conv_transpose2d adjoint", || {
        let x = random_tensor(s(2, 3, 5, 4), 50);
        let w = random_tensor(s(3, 2, 4, 4), 51);
        let y = random_tensor(s(2, 2, 10, 8), 52);
        let tape = Tape::inference();
        let up = tape.conv_transpose2d(&x, &w, None, 2, 1).map_err(|e| e.to_string())?;
        let down = naive_conv2d(&y, &w, None, 2, 1, 1);
        if up.shape() != y.shape() || down.shape() != x.shape() {
            return Ok((false, format!("shapes {} / {}", up.shape(), down.shape())));
        }
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let (lhs, rhs) = (dot(&up, &y), dot(&x, &down));
        let err = (lhs - rhs).abs() / lhs.abs().max(1.0);
        Ok((err < 1e-12, format!("<Tx,y>={lhs:.6} <x,T'y>={rhs:.6}")))
    })
}

fn luma(img: &PlanarImage, y: usize, x: usize) -> f64 {
    let (r, g, b) = (img.get(0, y, x), img.get(1, y, x), img.get(2, y, x));
    16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0
}

/// PSNR from a direct double loop over the shaved luminance.
pub fn direct_psnr(a: &PlanarImage, b: &PlanarImage, shave: usize) -> f64 {
    let (h, w) = (a.height(), a.width());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in shave..h - shave {
        for x in shave..w - shave {
            let d = luma(a, y, x) - luma(b, y, x);
            sum += d * d;
            n += 1;
        }
    }
    10.0 * (1.0 / (sum / n as f64)).log10()
}

/// Mean SSIM computed window by window with explicit Gaussian weights.
pub fn brute_ssim(a: &PlanarImage, b: &PlanarImage, shave: usize) -> f64 {
    const K: usize = 11;
    let sigma = 1.5f64;
    let mut weights = [[0.0; K]; K];
    let mut norm = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height() - 2 * shave, a.width() - 2 * shave);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - K {
        for x0 in 0..=w - K {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let wt = weights[i][j] / norm;
                    mx += wt * luma(a, shave + y0 + i, shave + x0 + j);
                    my += wt * luma(b, shave + y0 + i, shave + x0 + j);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..K {
                for j in 0..K {
                    let wt = weights[i][j] / norm;
                    let p = luma(a, shave + y0 + i, shave + x0 + j) - mx;
                    let q = luma(b, shave + y0 + i, shave + x0 + j) - my;
                    vx += wt * p * p;
                    vy += wt * q * q;
                    cov += wt * p * q;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn noisy_pair(seed: u64) -> (PlanarImage, PlanarImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr = PlanarImage::from_fn(ColorSpace::Rgb, 24, 26, |c, y, x| {
        (0.5 + 0.3 * ((x + 2 * c) as f64 * 0.4).sin() * ((y as f64) * 0.3).cos()).clamp(0.0, 1.0)
    })
    .expect("valid size");
    let sr = PlanarImage::from_fn(ColorSpace::Rgb, 24, 26, |c, y, x| {
        (hr.get(c, y, x) + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)
    })
    .expect("valid size");
    (sr, hr)
}

/// Library PSNR and SSIM against [`direct_psnr`] and [`brute_ssim`].
pub fn metric_oracles() -> CheckResult {
    timed("PSNR/SSIM vs direct", || {
        let (sr, hr) = noisy_pair(5);
        let shave = 4;
        let p = crate::eval::psnr_y(&sr, &hr, shave).map_err(|e| e.to_string())?;
        let q = crate::eval::ssim_y(&sr, &hr, shave).map_err(|e| e.to_string())?;
        let dp = (p - direct_psnr(&sr, &hr, shave)).abs();
        let dq = (q - brute_ssim(&sr, &hr, shave)).abs();
        Ok((
            dp < ORACLE_TOL && dq < ORACLE_TOL,
            format!("PSNR {p:.4} dB (diff {dp:.1e}), SSIM {q:.5} (diff {dq:.1e})"),
        ))
    })
}

/// Stage resolutions of the default model on a 1x3x48x48 input.
pub fn shape_ladder() -> CheckResult {
    timed("shape ladder", || {
        let cfg = NetworkConfig::tiny(6, 3);
        let c = cfg.channels;
        let mut store = ParamStore::<f32>::new();
        let net = Msfin::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
        let x = Tensor::<f32>::full(s(1, 3, 48, 48), 0.5);
        let tr = net
            .forward_traced(&Tape::inference(), &store, &x)
            .map_err(|e| e.to_string())?;
        let full = s(1, c, 48, 48);
        let half = s(1, c, 24, 24);
        let quarter = s(1, c, 12, 12);
        let mut expected = vec![full, full, full, full, half, quarter, full];
        let mut got = vec![tr.shallow.shape(), tr.l1.out.shape(), tr.l2.out.shape(), tr.l3.out.shape()];
        got.push(tr.l2.downsampled.shape());
        got.push(tr.l3.downsampled.shape());
        got.push(tr.deep.shape());
        expected.extend(std::iter::repeat_n(full, 5));
        got.extend(tr.l1.stages.iter().map(|t| t.shape()));
        expected.extend(std::iter::repeat_n(half, 5));
        got.extend(tr.l2.stages.iter().map(|t| t.shape()));
        expected.extend(std::iter::repeat_n(quarter, 5));
        expected.extend(std::iter::repeat_n(half, 5));
        got.extend(tr.l3.stages.iter().map(|t| t.shape()));
        expected.push(x.shape());
        got.push(tr.output.shape());
        let bad = expected.iter().zip(&got).filter(|(e, g)| e != g).count();
        Ok((
            bad == 0 && expected.len() == got.len(),
            format!("{} tensors, {} mismatched", got.len(), bad),
        ))
    })
}

/// Runs every check. `full` checks every network gradient coordinate
/// (minutes) instead of a sample (seconds).
pub fn run_all(full: bool) -> Vec<CheckResult> {
    vec![
        operator_gradients(),
        network_gradients(if full { None } else { Some(4) }),
        conv_oracle(),
        transpose_adjoint(),
        metric_oracles(),
        shape_ladder(),
    ]
}
