use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, cosine_lr, l1_loss, AdamConfig, Checkpoint, Result, RngState, TrainError};
use crate::arch::Msfin;
use crate::config::RunConfig;
use crate::eval::{evaluate_images, EvalOptions};
use crate::image::{Dataset, PatchPair, PlanarImage};
use crate::tensor::{ParamStore, Scalar, Tape};

/// One optimizer step: the loss before the update and the rate used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// Steps completed, counting this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_psnr: Option<f64>,
}

/// Network, parameters, optimizer state and sampling generator.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub net: Msfin,
    pub params: ParamStore<T>,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters drawn from the seeded generator, which then drives
    /// patch sampling. The reconstruction conv starts at zero, so with the
    /// global skip the untrained network reproduces its bicubic input.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut params = ParamStore::new();
        let net = Msfin::new(config.network.clone(), &mut params, &mut rng)?;
        net.zero_reconstruction(&mut params);
        Ok(Self {
            config,
            net,
            params,
            step: 0,
            rng,
        })
    }

    /// Restores a trainer; parameter names and shapes are audited against
    /// the stored configuration.
    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let net = Msfin::bind(ck.config.network.clone(), &ck.params)?;
        Ok(Self {
            config: ck.config,
            net,
            params: ck.params,
            step: ck.step,
            rng: ck.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
        }
    }

    /// Samples a batch, computes the L1 loss, and applies one Adam update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepLog> {
        let tc = &self.config.train;
        if data.is_empty() {
            return Err(TrainError::Config("empty dataset".into()));
        }
        let lr = cosine_lr(self.step, tc)?;
        if self.step == tc.total_steps {
            return Err(TrainError::Config(format!("all {} steps already done", tc.total_steps)));
        }
        let batch = data.sample_batch(tc.batch, self.config.network.scale, tc.lr_patch, &mut self.rng)?;
        let (input, target) = PatchPair::batch::<T>(&batch);
        let tape = Tape::new();
        let out = self.net.forward(&tape, &self.params, &input)?;
        let loss = l1_loss(&tape, &out, &target)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step: self.step + 1,
                loss: value,
            });
        }
        let grads = tape.backward(&loss)?;
        drop(tape);
        self.params.zero_grad();
        self.params.accumulate(&grads);
        adam_step(&mut self.params, lr, AdamConfig::from(tc), self.step + 1)?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss: value,
            lr,
            val_psnr: None,
        })
    }

    /// Mean Y-channel PSNR over `images`, shaved by the scale.
    pub fn validate(&self, images: &[PlanarImage]) -> Result<f64> {
        let names: Vec<String> = (0..images.len()).map(|i| i.to_string()).collect();
        let opts = EvalOptions::new(self.config.network.scale);
        Ok(evaluate_images(&self.net, &self.params, &names, images, &opts)?.mean_psnr)
    }
}

/// Where and how far [`train_loop`] runs.
#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Receives `metrics.csv`, `ckpt_<step>.msfn` and `latest.msfn`.
    pub out_dir: Option<PathBuf>,
    /// Held-out HR images for periodic PSNR.
    pub validation: Vec<PlanarImage>,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn open_log(dir: &Path, config: &RunConfig, fresh: bool) -> Result<fs::File> {
    let path = dir.join("metrics.csv");
    let exists = path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .map_err(io_err(&path))?;
    if fresh || !exists {
        let mut head = String::new();
        for line in config.to_text().lines() {
            head.push_str("# ");
            head.push_str(line);
            head.push('\n');
        }
        head.push_str("step,loss,lr,val_psnr\n");
        f.write_all(head.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(f)
}

/// Runs [`Trainer::train_step`] until `stop_at` (or `total_steps`),
/// logging, validating and checkpointing as configured. `on_step` sees
/// every step as it completes.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &Dataset,
    opts: &LoopOptions,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    let tc = trainer.config.train.clone();
    let stop = opts.stop_at.unwrap_or(tc.total_steps).min(tc.total_steps);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Some(open_log(dir, &trainer.config, trainer.step == 0)?)
        }
        None => None,
    };
    let mut logs = Vec::new();
    while trainer.step < stop {
        let mut entry = trainer.train_step(data)?;
        let s = entry.step;
        if tc.validate_every > 0 && s % tc.validate_every == 0 && !opts.validation.is_empty() {
            entry.val_psnr = Some(trainer.validate(&opts.validation)?);
        }
        if let (Some(f), Some(dir)) = (log.as_mut(), &opts.out_dir) {
            let val = entry.val_psnr.map(|v| v.to_string()).unwrap_or_default();
            let path = dir.join("metrics.csv");
            writeln!(f, "{},{},{},{}", s, entry.loss, entry.lr, val).map_err(io_err(&path))?;
            if tc.checkpoint_every > 0 && s % tc.checkpoint_every == 0 {
                trainer.checkpoint().save(dir.join(format!("ckpt_{s:08}.msfn")))?;
            }
        }
        on_step(&entry);
        logs.push(entry);
    }
    if let Some(dir) = &opts.out_dir {
        trainer.checkpoint().save(dir.join("latest.msfn"))?;
    }
    Ok(logs)
}
