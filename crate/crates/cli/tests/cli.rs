use std::path::Path;
use std::process::{Command, Output};

use msfin::image::{load_png, save_png, ColorSpace, PlanarImage};
use msfin::train::Checkpoint;

fn msfin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msfin"))
        .args(args)
        .env("MSFIN_THREADS", "1")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn toy(h: usize, w: usize) -> PlanarImage {
    PlanarImage::from_fn(ColorSpace::Rgb, h, w, |c, y, x| {
        let stripe = (((x as f64 + 0.5 * y as f64) / 10.0).fract() < 0.5) as u8 as f64;
        (0.2 + 0.6 * stripe + 0.05 * c as f64).min(1.0)
    })
    .unwrap()
}

fn toy_dir(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    save_png(&toy(40, 44), dir.join("toy.png")).unwrap();
}

const TINY: [&str; 12] = [
    "--channels", "6", "--groups", "3", "--set", "batch=2", "--set", "lr_patch=6", "--set", "lr_init=1e-3", "--set",
    "lr_final=6.25e-5",
];

fn loss_column(csv: &str) -> Vec<(u64, f64)> {
    csv.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let o = msfin(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert_eq!(msfin(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn parameter_targets() {
    let o = msfin(&["params", "--target", "682"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("682473"));
    assert!(msfin(&["params", "--variant", "msfin-s", "--target", "351"]).status.success());
    let o = msfin(&["params", "--target", "400"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("400K"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "variant = msfin-s\nchannels = 24\n").unwrap();
    let o = msfin(&["params", "--config", cfg.to_str().unwrap()]);
    assert!(text(&o).contains("# channels = 24"), "{}", text(&o));
    let o = msfin(&["params", "--config", cfg.to_str().unwrap(), "--channels", "18"]);
    let out = text(&o);
    assert!(out.contains("# channels = 18") && out.contains("# variant = msfin-s"), "{out}");
    let o = msfin(&["params", "--set", "nonsense=3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_resume_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    toy_dir(&data);
    let (d, o) = (data.to_str().unwrap(), out.to_str().unwrap());

    let mut first = vec!["train", "--data", d, "--out", o, "--steps", "60", "--seed", "3", "--stop-at", "30"];
    first.extend(TINY);
    let r = msfin(&first);
    assert!(r.status.success(), "{}", text(&r));
    let latest = out.join("latest.msfn");
    assert_eq!(Checkpoint::<f32>::load(&latest).unwrap().step, 30);

    let r = msfin(&["train", "--data", d, "--out", o, "--resume", latest.to_str().unwrap()]);
    assert!(r.status.success(), "{}", text(&r));
    assert!(text(&r).contains("trained steps 31..60"), "{}", text(&r));
    let ck = Checkpoint::<f32>::load(&latest).unwrap();
    assert_eq!((ck.step, ck.config.network.channels), (60, 6));

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.contains("# channels = 6"));
    let losses = loss_column(&csv);
    assert_eq!(losses.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=60).collect::<Vec<_>>());
    let mean = |s: &[(u64, f64)]| s.iter().map(|r| r.1).sum::<f64>() / s.len() as f64;
    assert!(mean(&losses[50..]) < mean(&losses[..10]), "{csv}");

    let lr = dir.path().join("lr.png");
    save_png(&toy(13, 17), &lr).unwrap();
    for ensemble in [false, true] {
        let sr = dir.path().join(format!("sr_{ensemble}.png"));
        let mut args = vec!["infer", "--ckpt", latest.to_str().unwrap(), "--in", lr.to_str().unwrap()];
        args.extend(["--out", sr.to_str().unwrap()]);
        if ensemble {
            args.push("--ensemble");
        }
        let r = msfin(&args);
        assert!(r.status.success(), "{}", text(&r));
        let img = load_png(&sr).unwrap();
        assert_eq!((img.height(), img.width()), (52, 68));
    }

    let report = dir.path().join("report.csv");
    let r = msfin(&["eval", "--ckpt", latest.to_str().unwrap(), "--hr", d, "--csv", report.to_str().unwrap()]);
    assert!(r.status.success(), "{}", text(&r));
    assert!(text(&r).contains("toy.png"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.contains("# step = 60") && csv.contains("# channels = 6"), "{csv}");
    let r = msfin(&["eval", "--bicubic", "--hr", d]);
    assert!(r.status.success(), "{}", text(&r));
}

#[test]
fn corrupt_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.msfn");
    std::fs::write(&bad, b"MSFN\x01garbage").unwrap();
    let img = dir.path().join("lr.png");
    save_png(&toy(8, 8), &img).unwrap();
    let out = dir.path().join("sr.png");
    let r = msfin(&["infer", "--ckpt", bad.to_str().unwrap(), "--in", img.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(text(&r).contains("broken.msfn"), "{}", text(&r));
    assert!(!out.exists());
}

#[test]
fn invalid_thread_count_is_rejected() {
    let r = Command::new(env!("CARGO_BIN_EXE_msfin"))
        .args(["params"])
        .env("MSFIN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
    assert!(text(&r).contains("MSFIN_THREADS"));
}
