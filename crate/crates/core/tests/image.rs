use msfin::image::{
    bicubic_resize, degrade, load_png, resize_plane, resize_plane_unclamped, rgb_to_ycbcr_y, sample_patch_pair,
    save_png, save_png16, ColorSpace, Dataset, Dihedral, ImageError, PlanarImage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn keys(x: f64) -> f64 {
    let t = x.abs();
    match t {
        t if t <= 1.0 => 1.5 * t * t * t - 2.5 * t * t + 1.0,
        t if t < 2.0 => -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0,
        _ => 0.0,
    }
}

fn random_image(h: usize, w: usize, seed: u64) -> PlanarImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PlanarImage::from_fn(ColorSpace::Rgb, h, w, |_, _, _| rng.random_range(0.0..1.0)).unwrap()
}

#[test]
fn ramp_downscale_matches_widened_kernel_sum() {
    let src: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
    let out = resize_plane_unclamped(&src, 1, 8, 1, 2, true);
    for (o, got) in out.iter().enumerate() {
        // Output sample o sits at input coordinate 4o + 1.5; the kernel is
        // stretched by 4 and edge samples are repeated.
        let centre = 4.0 * o as f64 + 1.5;
        let (mut num, mut den) = (0.0, 0.0);
        for i in -12i64..20 {
            let w = keys((centre - i as f64) / 4.0);
            num += w * src[i.clamp(0, 7) as usize];
            den += w;
        }
        assert!((got - num / den).abs() < 1e-12, "output {o}: {got} vs {}", num / den);
    }
    assert!(out[0] < out[1]);
}

#[test]
fn identity_resize_is_bit_exact() {
    let img = random_image(13, 9, 1);
    let same = bicubic_resize(&img, 13, 9, true).unwrap();
    assert_eq!(same.data(), img.data());
}

#[test]
fn constants_survive_down_and_up() {
    for v in [0.0, 0.3, 17.0 / 255.0, 1.0] {
        let img = PlanarImage::from_fn(ColorSpace::Rgb, 24, 20, |_, _, _| v).unwrap();
        let d = degrade(&img, 4).unwrap();
        assert!(d.lr.data().iter().all(|&x| x == v));
        assert!(d.lr_up.data().iter().all(|&x| x == v));
    }
}

#[test]
fn resampling_is_clamped_to_unit_range() {
    let mut src = vec![0.0; 64];
    src[27] = 1.0;
    src[36] = 1.0;
    let raw = resize_plane_unclamped(&src, 8, 8, 20, 20, true);
    assert!(raw.iter().any(|&v| v < 0.0));
    let clamped = resize_plane(&src, 8, 8, 20, 20, true);
    assert!(clamped.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn luminance_reference_values() {
    let y = |v: f64| {
        let img = PlanarImage::from_fn(ColorSpace::Rgb, 1, 1, |_, _, _| v).unwrap();
        rgb_to_ycbcr_y(&img).unwrap().data()[0]
    };
    assert!((y(0.0) - 16.0 / 255.0).abs() < 1e-12);
    assert!((y(1.0) - 235.0 / 255.0).abs() < 1e-12);
    assert!((y(0.5) - 125.5 / 255.0).abs() < 1e-12);
    let gray = PlanarImage::new(ColorSpace::Y, 1, 1, vec![0.5]).unwrap();
    assert_eq!(rgb_to_ycbcr_y(&gray).unwrap().data(), &[0.5]);
}

#[test]
fn patch_sizes_for_the_training_setting() {
    let hr = random_image(200, 210, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = sample_patch_pair(&hr, None, 0, 4, 48, &mut rng).unwrap();
    assert_eq!((p.hr.height(), p.hr.width()), (192, 192));
    assert_eq!((p.lr_up.height(), p.lr_up.width()), (192, 192));
    assert_eq!(p.provenance.y % 4, 0);
    assert_eq!(p.provenance.x % 4, 0);
    let small = random_image(100, 300, 4);
    assert!(matches!(
        sample_patch_pair(&small, None, 0, 4, 48, &mut rng),
        Err(ImageError::TooSmall { need: 192, .. })
    ));
}

#[test]
fn patches_are_seed_reproducible_and_consistently_augmented() {
    let hr = random_image(40, 44, 5);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..12)
            .map(|_| sample_patch_pair(&hr, None, 0, 2, 8, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (draw(9), draw(9));
    let mut codes = std::collections::HashSet::new();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.provenance, q.provenance);
        assert_eq!(p.hr.data(), q.hr.data());
        assert_eq!(p.lr_up.data(), q.lr_up.data());
        let pv = p.provenance;
        codes.insert(pv.transform.code());
        let crop = hr.crop(pv.y, pv.x, 16, 16).unwrap();
        assert_eq!(p.hr.dihedral(pv.transform.inverse()).data(), crop.data());
        let plain = bicubic_resize(&bicubic_resize(&crop, 8, 8, true).unwrap(), 16, 16, true).unwrap();
        let back = p.lr_up.dihedral(pv.transform.inverse());
        let diff = back.data().iter().zip(plain.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "code {}: {diff}", pv.transform.code());
    }
    assert!(codes.len() > 3);
}

#[test]
fn dihedral_codes_form_a_group_of_order_eight() {
    let img = random_image(3, 5, 6);
    let images: Vec<_> = Dihedral::all().map(|d| img.dihedral(d)).collect();
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            assert_ne!(a.data(), b.data());
        }
    }
    for d in Dihedral::all() {
        for e in Dihedral::all() {
            let composed = img.dihedral(d).dihedral(e);
            let matches = images.iter().filter(|m| m.data() == composed.data() && m.height() == composed.height());
            assert_eq!(matches.count(), 1);
        }
        assert_eq!(img.dihedral(d).dihedral(d.inverse()).data(), img.data());
    }
    assert_eq!(img.dihedral(Dihedral::IDENTITY).data(), img.data());
}

#[test]
fn png_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = PlanarImage::from_fn(ColorSpace::Rgb, 9, 11, |_, _, _| rng.random_range(0..=255u8) as f64 / 255.0)
        .unwrap();
    let p8 = dir.path().join("a.png");
    save_png(&img, &p8).unwrap();
    assert_eq!(load_png(&p8).unwrap().data(), img.data());

    let mid = PlanarImage::from_fn(ColorSpace::Rgb, 2, 2, |_, _, _| 128.0 / 255.0).unwrap();
    save_png(&mid, &p8).unwrap();
    assert!(load_png(&p8).unwrap().data().iter().all(|&v| v == 128.0 / 255.0));

    let top = PlanarImage::from_fn(ColorSpace::Rgb, 2, 3, |c, _, _| [1.0, 0.0, 0.5][c]).unwrap();
    let p16 = dir.path().join("b.png");
    save_png16(&top, &p16).unwrap();
    let back = load_png(&p16).unwrap();
    assert_eq!(back.get(0, 1, 2), 1.0);
    assert_eq!(back.get(1, 0, 0), 0.0);
    assert!((back.get(2, 0, 0) - 0.5).abs() < 1.0 / 65535.0);
}

#[test]
fn dataset_directory_loading() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(ImageError::EmptyDir(_))));
    save_png(&random_image(8, 8, 1), dir.path().join("b.png")).unwrap();
    save_png(&random_image(8, 8, 2), dir.path().join("a.png")).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.names, vec!["a.png", "b.png"]);
    assert_eq!(ds.len(), 2);
    assert!(matches!(load_png(dir.path().join("missing.png")), Err(ImageError::Io { .. })));
}
