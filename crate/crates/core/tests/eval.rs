use msfin::arch::{Msfin, NetworkConfig};
use msfin::eval::{
    evaluate_bicubic, evaluate_dir, evaluate_images, psnr_y, self_ensemble, ssim_y, super_resolve, EvalError,
    EvalOptions,
};
use msfin::image::{save_png, ColorSpace, PlanarImage};
use msfin::tensor::{ParamStore, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn y_of(img: &PlanarImage) -> Vec<f64> {
    (0..img.height() * img.width())
        .map(|i| {
            let p = |c: usize| img.plane(c)[i];
            (16.0 + 65.481 * p(0) + 128.553 * p(1) + 24.966 * p(2)) / 255.0
        })
        .collect()
}

fn scene(h: usize, w: usize) -> PlanarImage {
    PlanarImage::from_fn(ColorSpace::Rgb, h, w, |c, y, x| {
        let (fy, fx) = (y as f64, x as f64);
        (0.45 + 0.3 * ((fx * 0.7 + fy * 0.2 + c as f64).sin()) + 0.2 * ((fy * 0.9).cos() * (fx * 0.15).sin()))
            .clamp(0.0, 1.0)
    })
    .unwrap()
}

fn noisy(img: &PlanarImage, amp: f64, seed: u64) -> PlanarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..img.data().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    PlanarImage::new(
        img.space(),
        img.height(),
        img.width(),
        img.data().iter().zip(&u).map(|(v, n)| (v + amp * n).clamp(0.0, 1.0)).collect(),
    )
    .unwrap()
}

/// Mean SSIM over every 11x11 window, each window summed directly.
fn ssim_oracle(a: &PlanarImage, b: &PlanarImage, shave: usize) -> f64 {
    let (ya, yb) = (y_of(a), y_of(b));
    let w = a.width();
    let (h0, w0) = (a.height() - 2 * shave, w - 2 * shave);
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut sum = 0.0;
    let mut n = 0.0;
    for y0 in 0..=h0 - 11 {
        for x0 in 0..=w0 - 11 {
            let at = |v: &[f64], i: usize, j: usize| v[(shave + y0 + i) * w + shave + x0 + j];
            let mut m = [0.0; 5];
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j] / (gs * gs);
                    let (p, q) = (at(&ya, i, j), at(&yb, i, j));
                    m[0] += k * p;
                    m[1] += k * q;
                    m[2] += k * p * p;
                    m[3] += k * q * q;
                    m[4] += k * p * q;
                }
            }
            let (vx, vy, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
            sum += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn psnr_matches_direct_mse() {
    let hr = scene(30, 34);
    let sr = noisy(&hr, 0.05, 1);
    for shave in [0, 2, 4] {
        let (ya, yb) = (y_of(&sr), y_of(&hr));
        let mut se = 0.0;
        let mut count = 0.0;
        for y in shave..30 - shave {
            for x in shave..34 - shave {
                se += (ya[y * 34 + x] - yb[y * 34 + x]).powi(2);
                count += 1.0;
            }
        }
        let expected = 10.0 * (count / se).log10();
        assert!((psnr_y(&sr, &hr, shave).unwrap() - expected).abs() < 1e-6);
    }
    assert_eq!(psnr_y(&hr, &hr, 0).unwrap(), f64::INFINITY);
}

#[test]
fn ssim_matches_windowed_oracle() {
    let hr = scene(27, 31);
    for (amp, shave) in [(0.02, 0), (0.1, 4), (0.3, 2)] {
        let sr = noisy(&hr, amp, 2);
        let got = ssim_y(&sr, &hr, shave).unwrap();
        assert!((got - ssim_oracle(&sr, &hr, shave)).abs() < 1e-6);
    }
    assert!((ssim_y(&hr, &hr, 4).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn metrics_degrade_monotonically_with_noise() {
    let hr = scene(32, 32);
    let mut last = (f64::INFINITY, 1.0 + 1e-12);
    for amp in [0.01, 0.03, 0.1, 0.3] {
        let sr = noisy(&hr, amp, 3);
        let cur = (psnr_y(&sr, &hr, 4).unwrap(), ssim_y(&sr, &hr, 4).unwrap());
        assert!(cur.0 < last.0 && cur.1 < last.1, "{amp}: {cur:?} after {last:?}");
        last = cur;
    }
}

#[test]
fn metric_errors() {
    let a = scene(20, 20);
    assert!(matches!(psnr_y(&a, &scene(20, 21), 0), Err(EvalError::SizeMismatch(..))));
    assert!(matches!(psnr_y(&a, &a, 10), Err(EvalError::Shave { .. })));
    assert!(matches!(ssim_y(&a, &a, 5), Err(EvalError::WindowTooLarge { .. })));
}

#[test]
fn self_ensemble_is_equivariant_in_f32() {
    let mut store = ParamStore::<f32>::new();
    let net = Msfin::new(NetworkConfig::tiny(6, 3), &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 16, 12), |_, _, _, _| rng.random_range(0.0..1.0));
    let base = super_resolve(&net, &store, &x, true).unwrap();
    for d in msfin::image::Dihedral::all() {
        let tx = msfin::image::dihedral_tensor(&x, d);
        let out = super_resolve(&net, &store, &tx, true).unwrap();
        let expected = msfin::image::dihedral_tensor(&base, d);
        assert!(out.max_abs_diff(&expected) < 1e-5, "code {}", d.code());
    }
}

#[test]
fn ensemble_of_an_equivariant_map_is_the_map() {
    let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 5, 7), |_, c, y, x| (c * 35 + y * 7 + x) as f64);
    let out = self_ensemble::<f64, EvalError, _>(&x, |t| Ok(t.map(|v| 2.0 * v + 1.0))).unwrap();
    assert!(out.max_abs_diff(&x.map(|v| 2.0 * v + 1.0)) < 1e-12);
}

#[test]
fn zero_network_reproduces_the_bicubic_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["a.png", "b.png"];
    let images = [scene(40, 36), noisy(&scene(44, 48), 0.1, 6)];
    for (n, img) in names.iter().zip(&images) {
        save_png(img, dir.path().join(n)).unwrap();
    }
    let mut store = ParamStore::<f32>::new();
    let net = Msfin::new(NetworkConfig::tiny(6, 3), &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    net.zero_reconstruction(&mut store);
    let out = dir.path().join("sr");
    let opts = EvalOptions {
        save_sr: Some(out.clone()),
        ..EvalOptions::new(4)
    };
    let zero = evaluate_dir(&net, &store, dir.path(), &opts).unwrap();
    let ds = msfin::image::Dataset::load(dir.path()).unwrap();
    let bicubic = evaluate_bicubic(&ds.names, &ds.hr, &EvalOptions::new(4)).unwrap();
    assert_eq!(zero.entries.len(), 2);
    for (z, b) in zero.entries.iter().zip(&bicubic.entries) {
        assert_eq!(z.name, b.name);
        assert!((z.psnr - b.psnr).abs() < 1e-4, "{} vs {}", z.psnr, b.psnr);
        assert!((z.ssim - b.ssim).abs() < 1e-6);
    }
    assert!(out.join("a.png").exists() && out.join("b.png").exists());

    let ensembled = evaluate_images(
        &net,
        &store,
        &ds.names,
        &ds.hr,
        &EvalOptions {
            ensemble: true,
            ..EvalOptions::new(4)
        },
    )
    .unwrap();
    assert!((ensembled.mean_psnr - bicubic.mean_psnr).abs() < 1e-4);
    assert!(ensembled.to_csv().contains("# ensemble = true"));
}

#[test]
fn random_network_inference_runs_on_odd_sizes() {
    let mut store = ParamStore::<f32>::new();
    let net = Msfin::new(NetworkConfig::tiny(6, 3), &mut store, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let x = scene(22, 27).to_tensor::<f32>();
    let y = net.forward(&Tape::inference(), &store, &x).unwrap();
    assert_eq!(y.shape(), x.shape());
}
