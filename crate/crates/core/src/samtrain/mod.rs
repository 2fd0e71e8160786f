//! Sharpness-aware minimization.
//!
//! Every step takes the batch gradient, moves to the worst-case point
//! `ω + ε̂(ω)` inside the `ρ`-ball of the chosen norm, and descends along the
//! gradient found there plus the L2 term `λω`. The derivative of `ε̂` with
//! respect to `ω` is not propagated into the update.

mod trajectory;

pub use trajectory::{read_trajectory, write_trajectory, Checkpoint, Trajectory, TrajectoryHeader};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{self, Dataset, ModelSpec};
use crate::numcore::{dual_exponent, sample_batches_with, ParamVector, SamplingMode};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Piecewise-constant rates as `(first step, eta)`, sorted by step; the
    /// first entry must start at step 0.
    StepDecay(Vec<(usize, f64)>),
}

impl LrSchedule {
    pub fn eta(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(eta) => *eta,
            LrSchedule::StepDecay(points) => points
                .iter()
                .take_while(|(start, _)| *start <= step)
                .last()
                .map_or(points[0].1, |p| p.1),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant(eta) if !(*eta > 0.0 && eta.is_finite()) => {
                Err(Error::config(format!("learning rate must be positive, got {eta}")))
            }
            LrSchedule::Constant(_) => Ok(()),
            LrSchedule::StepDecay(points) => {
                if points.first().map(|p| p.0) != Some(0) {
                    return Err(Error::config("step-decay schedule must start at step 0"));
                }
                if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::config("step-decay boundaries must increase"));
                }
                if points.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
                    return Err(Error::config("learning rates must be positive"));
                }
                Ok(())
            }
        }
    }

    fn canonical(&self) -> String {
        match self {
            LrSchedule::Constant(eta) => format!("constant:{eta:e}"),
            LrSchedule::StepDecay(points) => {
                let parts: Vec<String> = points.iter().map(|(s, e)| format!("{s}@{e:e}")).collect();
                format!("steps:{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamConfig {
    /// Neighborhood radius.
    pub rho: f64,
    /// Norm exponent of the neighborhood; `f64::INFINITY` is allowed.
    pub p: f64,
    /// L2 weight.
    pub lambda: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Record every `record_stride`-th step (steps 0 and T are always kept).
    pub record_stride: usize,
    pub sampling: SamplingMode,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.05,
            p: 2.0,
            lambda: 0.0,
            lr: LrSchedule::Constant(0.1),
            batch_size: 32,
            steps: 1000,
            seed: 0,
            record_stride: 1,
            sampling: SamplingMode::PerStep,
        }
    }
}

impl SamConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.p.is_nan() || self.p < 1.0 {
            return Err(Error::config(format!("norm exponent must be >= 1, got {}", self.p)));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::config(format!(
                "batch size {} must lie in 1..={n_train}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("at least one step is required"));
        }
        if self.record_stride == 0 {
            return Err(Error::config("record stride must be positive"));
        }
        self.lr.validate()
    }

    /// Seed of the batch schedule, kept apart from the initialization seed.
    pub fn schedule_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }

    /// Stable textual form used for digests.
    pub fn canonical(&self) -> String {
        let sampling = match self.sampling {
            SamplingMode::PerStep => "per-step",
            SamplingMode::EpochShuffle => "epoch",
        };
        format!(
            "rho={:e};p={:e};lambda={:e};lr={};batch={};steps={};seed={};stride={};sampling={}",
            self.rho,
            self.p,
            self.lambda,
            self.lr.canonical(),
            self.batch_size,
            self.steps,
            self.seed,
            self.record_stride,
            sampling
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Closed-form worst-case perturbation
/// `ε̂ = ρ·sign(g)·|g|^(q−1) / (‖g‖_q^q)^(1/p)` with `1/p + 1/q = 1`.
///
/// Lands on the boundary `‖ε̂‖_p = ρ`. Returns zero when `g = 0` or
/// `ρ = 0`. `p = 2` uses `ρ g/‖g‖₂`; `p = ∞` gives `ρ·sign(g)`; `p = 1`
/// puts all of `ρ` on the largest-magnitude coordinate.
pub fn worst_perturbation(grad: &[f64], rho: f64, p: f64) -> ParamVector {
    let mut out = vec![0.0; grad.len()];
    let max = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    if rho == 0.0 || max == 0.0 {
        return ParamVector::from_vec_unchecked(out);
    }
    if p == 2.0 {
        let norm = max * grad.iter().map(|g| (g / max).powi(2)).sum::<f64>().sqrt();
        for (e, g) in out.iter_mut().zip(grad) {
            *e = rho * g / norm;
        }
    } else if p.is_infinite() {
        for (e, g) in out.iter_mut().zip(grad) {
            *e = if *g == 0.0 { 0.0 } else { rho * g.signum() };
        }
    } else if p <= 1.0 {
        let j = grad.iter().position(|g| g.abs() == max).unwrap();
        out[j] = rho * grad[j].signum();
    } else {
        let q = dual_exponent(p).expect("p > 1");
        // ε̂ is invariant to positive rescaling of g, so work with g/max.
        let norm_q_q: f64 = grad.iter().map(|g| (g.abs() / max).powf(q)).sum();
        let denom = norm_q_q.powf(1.0 / p);
        for (e, g) in out.iter_mut().zip(grad) {
            let a = g.abs() / max;
            *e = if a == 0.0 {
                0.0
            } else {
                rho * g.signum() * a.powf(q - 1.0) / denom
            };
        }
    }
    ParamVector::from_vec_unchecked(out)
}

/// `∇L_B(ω + ε̂(ω)) + λω` with `L_B` the mean loss over `indices` and `ε̂`
/// built from `∇L_B(ω)`.
pub fn sam_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    rho: f64,
    p: f64,
    lambda: f64,
) -> Result<ParamVector> {
    let scale = 1.0 / indices.len().max(1) as f64;
    let (_, g) = model::subset_loss_grad(spec, params, data, indices, scale)?;
    let eps = worst_perturbation(&g, rho, p);
    let perturbed = params + &eps;
    let (_, mut out) = model::subset_loss_grad(spec, &perturbed, data, indices, scale)?;
    for (o, w) in out.as_mut_slice().iter_mut().zip(params.iter()) {
        *o += lambda * w;
    }
    ParamVector::new(out.into_vec())
}

/// Norms of the perturbed full-data gradient with and without the L2 term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stationarity {
    /// `‖∇L_S(ω + ε̂(ω))‖₂`
    pub perturbed: f64,
    /// `‖∇L_S(ω + ε̂(ω)) + λω‖₂`
    pub regularized: f64,
}

pub fn stationarity(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    rho: f64,
    p: f64,
    lambda: f64,
) -> Result<Stationarity> {
    let idx = data.train_indices();
    let full = sam_gradient(spec, params, data, &idx, rho, p, 0.0)?;
    let mut reg = full.clone();
    reg.axpy(lambda, params);
    Ok(Stationarity {
        perturbed: full.norm2(),
        regularized: reg.norm2(),
    })
}

/// Batches of training-row indices for every step of `config`.
pub fn batch_rows(data: &Dataset, config: &SamConfig) -> Result<Vec<Vec<usize>>> {
    let rows = data.train_indices();
    config.validate(rows.len())?;
    let schedule = sample_batches_with(
        rows.len(),
        config.batch_size,
        config.steps,
        config.schedule_seed(),
        config.sampling,
    )?;
    Ok(schedule
        .steps
        .into_iter()
        .map(|b| b.into_iter().map(|pos| rows[pos]).collect())
        .collect())
}

/// Trains on the training split, recording the trajectory.
pub fn train_sam(
    spec: &ModelSpec,
    data: &Dataset,
    config: &SamConfig,
) -> Result<(ParamVector, Trajectory)> {
    spec.validate()?;
    let batches = batch_rows(data, config)?;
    let init = model::init_params(spec, config.seed)?;
    run_schedule(spec, data, config, init, &batches, 1.0 / config.batch_size as f64)
}

/// Runs SAM over explicit batches of row indices, weighting each member's
/// loss by `loss_scale` (normally `1/b`). Shared by training and
/// leave-one-out retraining.
pub(crate) fn run_schedule(
    spec: &ModelSpec,
    data: &Dataset,
    config: &SamConfig,
    init: ParamVector,
    batches: &[Vec<usize>],
    loss_scale: f64,
) -> Result<(ParamVector, Trajectory)> {
    let mut w = init.into_vec();
    let mut checkpoints = Vec::new();
    let steps = batches.len();
    for (t, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            return Err(Error::input(format!("step {t} has an empty batch")));
        }
        let eta = config.lr.eta(t);
        let (loss, g) = model::loss_grad_raw(spec, &w, data, batch, loss_scale);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step: t, loss });
        }
        let eps = worst_perturbation(&g, config.rho, config.p);
        let g_sam = if eps.iter().all(|&e| e == 0.0) {
            g
        } else {
            let perturbed: Vec<f64> = w.iter().zip(eps.iter()).map(|(a, b)| a + b).collect();
            model::loss_grad_raw(spec, &perturbed, data, batch, loss_scale).1
        };
        if t % config.record_stride == 0 {
            checkpoints.push(Checkpoint {
                step: t,
                params: ParamVector::from_vec_unchecked(w.clone()),
                eta,
                batch: batch.clone(),
                per_example_weight: eta * loss_scale,
            });
        }
        for (wi, gi) in w.iter_mut().zip(&g_sam) {
            let step = gi + config.lambda * *wi;
            *wi -= eta * step;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: t,
                loss: f64::NAN,
            });
        }
    }
    let final_params = ParamVector::from_vec_unchecked(w);
    checkpoints.push(Checkpoint {
        step: steps,
        params: final_params.clone(),
        eta: 0.0,
        batch: Vec::new(),
        per_example_weight: 0.0,
    });
    let header = TrajectoryHeader {
        param_count: spec.param_count(),
        n: data.len(),
        steps,
        config_digest: config.digest(),
    };
    Ok((final_params, Trajectory::new(header, checkpoints)?))
}
