use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use msfin::arch::{count_parameters, Msfin};
use msfin::config::{parse_pairs, RunConfig};
use msfin::eval::{evaluate_bicubic, evaluate_images, super_resolve_image, EvalOptions};
use msfin::image::{load_png, save_png, upsample, Dataset};
use msfin::train::{train_loop, Checkpoint, LoopOptions, Trainer};

/// Multi-scale feature interaction network for single-image super-resolution.
#[derive(Parser)]
#[command(name = "msfin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory of HR PNGs.
    Train(TrainArgs),
    /// Super-resolve one LR image.
    Infer(InferArgs),
    /// Score a checkpoint (or bicubic) on a directory of HR PNGs.
    Eval(EvalArgs),
    /// Per-layer parameter counts of a configuration.
    Params(ParamsArgs),
    /// Gradient, adjoint, shape and metric self-checks.
    Selftest(SelftestArgs),
}

/// Configuration sources. Flags win over the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: msfin or msfin-s.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    /// Total training steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            pairs.extend(parse_pairs(&text).with_context(|| format!("parsing {}", path.display()))?);
        }
        let named = [
            ("variant", self.variant.clone()),
            ("channels", self.channels.map(|v| v.to_string())),
            ("groups", self.groups.map(|v| v.to_string())),
            ("scale", self.scale.map(|v| v.to_string())),
            ("total_steps", self.steps.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        pairs.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    fn apply(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        cfg.apply_pairs(&self.pairs()?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&self) -> Result<RunConfig> {
        self.apply(RunConfig::default())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of HR training PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Receives checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its configuration is the base.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Matching LR PNGs (same file names) instead of bicubic degradation.
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    /// HR PNGs for periodic validation PSNR.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    stop_at: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Average over the eight flips and rotations.
    #[arg(long)]
    ensemble: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; omitted means the bicubic baseline.
    #[arg(long, required_unless_present = "bicubic")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    hr: PathBuf,
    #[arg(long)]
    bicubic: bool,
    /// Scale for the bicubic baseline (a checkpoint carries its own).
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long)]
    ensemble: bool,
    /// Border pixels dropped before scoring; defaults to the scale.
    #[arg(long)]
    shave: Option<usize>,
    #[arg(long)]
    save_sr: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Fail unless the total is within 2% of this many thousand parameters.
    #[arg(long)]
    target: Option<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SelftestArgs {
    /// Check every network gradient coordinate instead of a sample.
    #[arg(long)]
    full: bool,
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let config = args.config.apply(ck.config.clone())?;
            Trainer::from_checkpoint(Checkpoint { config, ..ck })?
        }
        None => Trainer::<f32>::new(args.config.resolve()?)?,
    };
    let mut data = Dataset::load(&args.data)?;
    if let Some(dir) = &args.lr_dir {
        data = data.with_lr_dir(dir, trainer.config.network.scale)?;
    }
    let validation = match &args.val {
        Some(dir) => Dataset::load(dir)?.hr,
        None => Vec::new(),
    };
    eprint!("{}", trainer.config.to_text());
    let total = trainer.config.train.total_steps;
    let every = (total / 20).max(1);
    let opts = LoopOptions {
        out_dir: Some(args.out.clone()),
        validation,
        stop_at: args.stop_at,
    };
    let logs = train_loop(&mut trainer, &data, &opts, |s| {
        if s.step % every == 0 || s.step == 1 {
            let val = s.val_psnr.map(|v| format!(" val {v:.3} dB")).unwrap_or_default();
            eprintln!("step {}/{} loss {:.6} lr {:.3e}{val}", s.step, total, s.loss, s.lr);
        }
    })?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        println!(
            "trained steps {}..{}: loss {:.6} -> {:.6}; checkpoint {}",
            first.step,
            last.step,
            first.loss,
            last.loss,
            args.out.join("latest.msfn").display()
        );
    } else {
        println!("nothing to do: already at step {}", trainer.step);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Msfin, Checkpoint<f32>)> {
    let ck = Checkpoint::<f32>::load(path)?;
    let net = Msfin::bind(ck.config.network.clone(), &ck.params)
        .with_context(|| format!("{}: checkpoint does not match its configuration", path.display()))?;
    Ok((net, ck))
}

fn infer(args: &InferArgs) -> Result<()> {
    let (net, ck) = load_model(&args.ckpt)?;
    let lr = load_png(&args.input)?;
    let lr_up = upsample(&lr, ck.config.network.scale)?;
    let sr = super_resolve_image(&net, &ck.params, &lr_up, args.ensemble)?;
    save_png(&sr, &args.out)?;
    println!(
        "{}x{} -> {}x{}: {}",
        lr.width(),
        lr.height(),
        sr.width(),
        sr.height(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ds = Dataset::load(&args.hr)?;
    let report = if args.bicubic {
        let opts = eval_options(args, args.scale);
        evaluate_bicubic(&ds.names, &ds.hr, &opts)?.with_config(format!("method = bicubic\nscale = {}", args.scale))
    } else {
        let path = args.ckpt.as_ref().context("--ckpt is required")?;
        let (net, ck) = load_model(path)?;
        let opts = eval_options(args, ck.config.network.scale);
        evaluate_images(&net, &ck.params, &ds.names, &ds.hr, &opts)?
            .with_config(format!("checkpoint = {}\nstep = {}\n{}", path.display(), ck.step, ck.config.to_text()))
    };
    print!("{}", report.to_table());
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

fn eval_options(args: &EvalArgs, scale: usize) -> EvalOptions {
    EvalOptions {
        shave: args.shave.unwrap_or(scale),
        ensemble: args.ensemble,
        save_sr: args.save_sr.clone(),
        ..EvalOptions::new(scale)
    }
}

fn params(args: &ParamsArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let report = count_parameters(&cfg.network)?;
    for line in cfg.to_text().lines().take(14) {
        println!("# {line}");
    }
    println!("{report}");
    if let Some(k) = args.target {
        let off = report.total_k() / k - 1.0;
        if off.abs() > 0.02 {
            bail!("total {:.1}K is {:+.2}% from the {k}K target", report.total_k(), 100.0 * off);
        }
        println!("within {:+.2}% of {k}K", 100.0 * off);
    }
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<()> {
    let mut failed = 0;
    for check in msfin::selftest::run_all(args.full) {
        println!("{check}");
        failed += usize::from(!check.passed);
    }
    if failed > 0 {
        bail!("{failed} self-check(s) failed");
    }
    println!("all self-checks passed");
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MSFIN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("MSFIN_THREADS must be a positive integer, got `{v}`"))?;
        msfin::par::init_threads(n);
        if n == 1 {
            msfin::par::set_parallel(false);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Params(a) => params(a),
        Command::Selftest(a) => selftest(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
