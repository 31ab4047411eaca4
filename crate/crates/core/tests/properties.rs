use msfin::arch::{count_parameters, NetworkConfig};
use msfin::config::RunConfig;
use msfin::eval::{psnr_y, ssim_y};
use msfin::image::{dihedral_tensor, resize_plane_unclamped, ColorSpace, Dihedral, PlanarImage};
use msfin::tensor::{kernels, Shape, Tape, Tensor};
use msfin::train::{cosine_lr, TrainConfig};
use proptest::prelude::*;

fn tensor(shape: Shape, vals: &[f64]) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|i| vals[i % vals.len()] + 0.001 * i as f64).collect();
    Tensor::new(shape, data).unwrap()
}

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (k, cpg, opg) = (ws.h(), ws.c(), ws.n() / groups);
    let oh = (xs.h() + 2 * pad - k) / stride + 1;
    let ow = (xs.w() + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for n in 0..xs.n() {
        for o in 0..ws.n() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for i in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (y, xx) = (oy * stride + ky, ox * stride + kx);
                                if y >= pad && xx >= pad && y - pad < xs.h() && xx - pad < xs.w() {
                                    s += x.get(n, (o / opg) * cpg + i, y - pad, xx - pad) * w.get(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resize_preserves_constants(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20,
                                  c in 0.0f64..1.0, aa in any::<bool>()) {
        let out = resize_plane_unclamped(&vec![c; h * w], h, w, oh, ow, aa);
        prop_assert!(out.iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn resize_is_linear(h in 2usize..10, w in 2usize..10, oh in 1usize..16, ow in 1usize..16,
                        a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let x: Vec<f64> = (0..h * w).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0).collect();
        let y: Vec<f64> = (0..h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) % 89) as f64 / 89.0).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = resize_plane_unclamped(&mix, h, w, oh, ow, true);
        let rx = resize_plane_unclamped(&x, h, w, oh, ow, true);
        let ry = resize_plane_unclamped(&y, h, w, oh, ow, true);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * rx[i] + b * ry[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_matches_direct_sum(n in 1usize..3, g in 1usize..4, cpg in 1usize..3, opg in 1usize..3,
                               h in 3usize..8, w in 3usize..8, k in prop::sample::select(vec![1usize, 3]),
                               stride in 1usize..3, vals in prop::collection::vec(-1.0f64..1.0, 8)) {
        let pad = k / 2;
        let x = tensor(Shape::new(n, g * cpg, h, w), &vals);
        let wt = tensor(Shape::new(g * opg, cpg, k, k), &vals[3..]);
        let y = Tape::inference().conv2d(&x, &wt, None, stride, pad, g).unwrap();
        let expect = direct_conv(&x, &wt, stride, pad, g);
        prop_assert_eq!(y.numel(), expect.len());
        for (p, q) in y.data().iter().zip(&expect) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_shuffle_round_trips(c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let s = Shape::new(2, c * r * r, h, w);
        let x: Vec<f64> = (0..s.numel()).map(|i| i as f64).collect();
        let y = kernels::pixel_shuffle(&x, s, r);
        let ys = kernels::pixel_shuffle_shape(s, r).unwrap();
        prop_assert_eq!(ys, Shape::new(2, c, h * r, w * r));
        prop_assert_eq!(kernels::pixel_unshuffle(&y, ys, r), x);
    }

    #[test]
    fn channel_shuffle_is_a_permutation(g in 1usize..5, per in 1usize..5) {
        let perm = kernels::channel_shuffle_perm(g * per, g);
        let mut sorted = perm.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..g * per).collect::<Vec<_>>());
        let inv = kernels::inverse_perm(&perm);
        prop_assert!((0..g * per).all(|i| inv[perm[i]] == i));
    }

    #[test]
    fn dihedral_inverse_restores_tensors(code in 0u8..8, h in 1usize..7, w in 1usize..7) {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, h, w), |n, c, y, xx| (n * 1000 + c * 100 + y * 10 + xx) as f64);
        let d = Dihedral::new(code);
        let t = dihedral_tensor(&x, d);
        let (th, tw) = d.out_dims(h, w);
        prop_assert_eq!((t.shape().h(), t.shape().w()), (th, tw));
        let back = dihedral_tensor(&t, d.inverse());
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn config_text_round_trips(c in 1usize..8, g in prop::sample::select(vec![1usize, 2, 3]),
                               loops in 0usize..3, ic in any::<bool>(), ns in any::<bool>(), ca in any::<bool>(),
                               lr in 1e-6f64..1e-2, steps in 1u64..100_000, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.network = NetworkConfig { channels: 3 * c * g, groups: g, rrcab_loops: loops, ic, ns, ca, cic: false,
                                      ..NetworkConfig::msfin() };
        cfg.train.lr_init = lr;
        cfg.train.lr_final = lr / 16.0;
        cfg.train.total_steps = steps;
        cfg.train.seed = seed;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn cosine_schedule_stays_in_range(total in 1u64..5000, frac in 0.0f64..=1.0) {
        let cfg = TrainConfig { total_steps: total, ..Default::default() };
        let s = ((total as f64) * frac).round() as u64;
        let lr = cosine_lr(s, &cfg).unwrap();
        prop_assert!((cfg.lr_final..=cfg.lr_init).contains(&lr));
        if s > 0 {
            prop_assert!(cosine_lr(s - 1, &cfg).unwrap() >= lr);
        }
        prop_assert!(cosine_lr(total + 1, &cfg).is_err());
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>(), amp in 0.01f64..0.5) {
        let a = PlanarImage::from_fn(ColorSpace::Rgb, 16, 16, |c, y, x| ((x * 7 + y * 3 + c) % 16) as f64 / 15.0).unwrap();
        let b = PlanarImage::from_fn(ColorSpace::Rgb, 16, 16, |c, y, x| {
            let h = (seed ^ ((c * 256 + y * 16 + x) as u64)).wrapping_mul(0x9E3779B97F4A7C15) >> 40;
            (a.get(c, y, x) + amp * ((h % 1000) as f64 / 500.0 - 1.0)).clamp(0.0, 1.0)
        }).unwrap();
        let (p, q) = (psnr_y(&a, &b, 0).unwrap(), psnr_y(&b, &a, 0).unwrap());
        prop_assert!(p == q || (p.is_infinite() && q.is_infinite()));
        let (s, t) = (ssim_y(&a, &b, 0).unwrap(), ssim_y(&b, &a, 0).unwrap());
        prop_assert!((s - t).abs() < 1e-12 && s <= 1.0 + 1e-12 && s > -1.0);
    }

    #[test]
    fn parameter_count_ignores_loops_and_shuffle(c in 1usize..5, loops in 0usize..4, cs in any::<bool>()) {
        let base = NetworkConfig::tiny(6 * c, 6);
        let with = NetworkConfig { rrcab_loops: loops, cs, ..base.clone() };
        prop_assert_eq!(count_parameters(&base).unwrap().total, count_parameters(&with).unwrap().total);
    }

    #[test]
    fn tensor_length_must_match_shape(n in 1usize..3, c in 1usize..3, h in 1usize..4, w in 1usize..4, extra in 1usize..3) {
        let s = Shape::new(n, c, h, w);
        prop_assert!(Tensor::<f32>::new(s, vec![0.0; s.numel()]).is_ok());
        prop_assert!(Tensor::<f32>::new(s, vec![0.0; s.numel() + extra]).is_err());
    }
}
