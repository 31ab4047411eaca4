//! Central finite-difference checks of tape gradients (64-bit only).

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Shape, Tape, Tensor, TensorError};

/// Denominator floor of [`rel_err`]; below it the error is effectively
/// absolute.
pub const REL_FLOOR: f64 = 1e-3;
/// Default central-difference step.
pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Coordinates checked per tensor; `None` checks all of them.
    pub sample: Option<usize>,
    /// Seed for choosing sampled coordinates.
    pub seed: u64,
    /// Central-difference step. Deep ReLU networks want a smaller step
    /// than [`STEP`] so perturbations do not cross activation kinks.
    pub step: f64,
    /// A coordinate whose error reaches `tolerance` is re-measured with
    /// steps divided by 5, up to `refine` times, keeping the smallest
    /// error. Crossing a ReLU kink inflates the difference quotient only
    /// at larger steps; a wrong gradient stays wrong at every step.
    pub refine: usize,
    pub tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            sample: None,
            seed: 0,
            step: STEP,
            refine: 0,
            tolerance: 1e-4,
        }
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (label, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheck {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

/// Uniform [-1, 1) tensor used to reduce a tensor output to a scalar loss.
pub fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// `sum(out * weights)` on `tape`.
pub fn project(tape: &Tape<f64>, out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    tape.sum(&tape.mul(out, weights)?)
}

fn coordinates(numel: usize, sample: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match sample {
        Some(k) if k < numel => {
            let mut v = index::sample(rng, numel, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..numel).collect(),
    }
}

/// Difference quotient at `opts.step`, refined as documented on
/// [`CheckOptions::refine`]. Returns the numeric value with the smallest
/// error.
fn measure<E>(analytic: f64, opts: &CheckOptions, mut eval: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
    let mut h = opts.step;
    let mut best = (eval(h)? - eval(-h)?) / (2.0 * h);
    for _ in 0..opts.refine {
        if rel_err(analytic, best) < opts.tolerance {
            break;
        }
        h /= 5.0;
        let n = (eval(h)? - eval(-h)?) / (2.0 * h);
        if rel_err(analytic, n) < rel_err(analytic, best) {
            best = n;
        }
    }
    Ok(best)
}

/// Checks the gradient of the scalar `f` with respect to every input
/// tensor.
pub fn check_inputs<E, F>(inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<GradCheck, E>
where
    E: From<TensorError>,
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, E>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(&loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheck::default();
    for (i, input) in inputs.iter().enumerate() {
        let zero = vec![0.0; input.numel()];
        let analytic = grads.wrt(&leaves[i]).unwrap_or(&zero);
        for j in coordinates(input.numel(), opts.sample, &mut rng) {
            let eval = |delta: f64| -> Result<f64, E> {
                let mut moved = inputs.to_vec();
                let mut v = input.data().to_vec();
                v[j] += delta;
                moved[i] = Tensor::new(input.shape(), v)?;
                Ok(f(&Tape::inference(), &moved)?.item())
            };
            let numeric = measure(analytic[j], &opts, eval)?;
            report.record(&format!("input{i}"), j, analytic[j], numeric);
        }
    }
    Ok(report)
}

/// Checks the gradient of the scalar `f` with respect to the listed
/// parameters of `store`.
pub fn check_params<E, F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    opts: CheckOptions,
    f: F,
) -> Result<GradCheck, E>
where
    E: From<TensorError>,
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Tensor<f64>, E>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(&loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheck::default();
    let mut scratch = store.clone();
    for &id in ids {
        let p = store.get(id);
        let zero = vec![0.0; p.numel()];
        let analytic = grads.param(id).unwrap_or(&zero);
        for j in coordinates(p.numel(), opts.sample, &mut rng) {
            let eval = |delta: f64| -> Result<f64, E> {
                let mut v = p.value.data().to_vec();
                v[j] += delta;
                scratch.set_value(id, Tensor::new(p.value.shape(), v)?)?;
                Ok(f(&Tape::inference(), &scratch)?.item())
            };
            let numeric = measure(analytic[j], &opts, eval)?;
            report.record(&p.name, j, analytic[j], numeric);
        }
        scratch.set_value(id, p.value.clone())?;
    }
    Ok(report)
}
