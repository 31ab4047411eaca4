//! L1 training with Adam and a cosine learning-rate schedule, plus
//! checkpointing.

mod checkpoint;
mod trainer;

use std::path::PathBuf;

use thiserror::Error;

use crate::arch::ArchError;
use crate::image::ImageError;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, TensorError};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trainer::{train_loop, LoopOptions, StepLog, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad checkpoint field `{field}`: {detail}")]
    Checkpoint {
        path: PathBuf,
        field: String,
        detail: String,
    },
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// LR patch edge; HR patches are `scale` times larger.
    pub lr_patch: usize,
    /// Validation period in steps; 0 disables validation.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            lr_init: 1e-4,
            lr_final: 6.25e-6,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            checkpoint_every: 1000,
            lr_patch: 48,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.total_steps == 0 {
            return Err("total_steps must be at least 1".into());
        }
        if self.batch == 0 || self.lr_patch == 0 {
            return Err("batch and lr_patch must be positive".into());
        }
        if !(self.lr_final <= self.lr_init && self.lr_final >= 0.0) {
            return Err(format!(
                "need 0 <= lr_final ({}) <= lr_init ({})",
                self.lr_final, self.lr_init
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("eps must be positive".into());
        }
        Ok(())
    }
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Scalar>(tape: &Tape<T>, pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(tape.mean_abs_diff(pred, target)?)
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at
/// `total_steps`. Both endpoints are returned exactly.
pub fn cosine_lr(step: u64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps;
    if step > total {
        return Err(TrainError::Config(format!("step {step} beyond total_steps {total}")));
    }
    if step == 0 {
        return Ok(cfg.lr_init);
    }
    if step == total {
        return Ok(cfg.lr_final);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + phase.cos()))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter at step `t >= 1`.
pub fn adam_update<T: Scalar>(
    value: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    hp: AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(TrainError::Config("adam step counter starts at 1".into()));
    }
    let n = value.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(TrainError::Config(format!(
            "adam buffers of lengths {n}, {}, {}, {}",
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - hp.beta1.powi(exp);
    let c2 = 1.0 - hp.beta2.powi(exp);
    for i in 0..n {
        let g = grad[i].as_f64();
        let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
        value[i] = T::from_f64(value[i].as_f64() - step);
    }
    Ok(())
}

/// Applies [`adam_update`] to every trainable parameter using its
/// accumulated gradient and stored moments.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, hp: AdamConfig, t: u64) -> Result<()> {
    for p in store.iter_mut().filter(|p| p.requires_grad) {
        let shape = p.value.shape();
        let mut value = p.value.data().to_vec();
        adam_update(&mut value, &p.grad, &mut p.moment1, &mut p.moment2, lr, hp, t)?;
        p.value = Tensor::new(shape, value)?;
    }
    Ok(())
}
