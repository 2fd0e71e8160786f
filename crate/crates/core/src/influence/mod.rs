//! Influence of individual training points on a trained model.
//!
//! Every estimator returns a removal influence `IF(k)` in parameter space
//! with the convention `ω_{−k} ≈ ω* − IF(k)`. Scores project it onto the
//! validation gradient so that a positive score predicts that removing the
//! point raises validation loss.

mod gif;
mod hessian;
mod neumann;

pub use gif::{sam_gif, GifMode, TrajectoryInfluence};
pub use hessian::{eps_jacobian_vec, sam_hif, sam_if_fast, PerturbedOptimum};
pub use neumann::{
    neumann_ihvp, neumann_solve, spectral_radius_estimate, FnOperator, LinearOperator,
    NeumannConfig, NeumannSolution,
};

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, Dataset, ModelSpec};
use crate::numcore::ParamVector;
use crate::samtrain::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    IfFast,
    Hif,
    Gif,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::IfFast, Estimator::Hif, Estimator::Gif];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::IfFast => "if-fast",
            Estimator::Hif => "hif",
            Estimator::Gif => "gif",
        }
    }

    pub fn parse(s: &str) -> Option<Estimator> {
        match s.trim() {
            "if-fast" | "if_fast" | "if" => Some(Estimator::IfFast),
            "hif" => Some(Estimator::Hif),
            "gif" => Some(Estimator::Gif),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceRequest {
    pub k: usize,
    pub estimator: Estimator,
    /// Weight added to the point's loss; `-1` removes it.
    pub delta: f64,
}

impl InfluenceRequest {
    pub fn removal(k: usize, estimator: Estimator) -> Self {
        Self {
            k,
            estimator,
            delta: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRecord {
    pub k: usize,
    pub estimator: Estimator,
    /// `ω_δ ≈ ω* − influence`.
    pub influence: ParamVector,
    pub score: f64,
    /// Seconds spent on this record.
    pub wall_time: f64,
}

/// `Σ_{i∈val} ∇ℓ_i(ω*)`.
pub fn validation_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    val_indices: &[usize],
) -> Result<ParamVector> {
    if val_indices.is_empty() {
        return Err(Error::input("validation set is empty"));
    }
    Ok(model::subset_loss_grad(spec, params, data, val_indices, 1.0)?.1)
}

/// Score against a precomputed validation gradient.
pub fn score_with(val_grad: &ParamVector, ifvec: &ParamVector) -> f64 {
    -val_grad.dot(ifvec)
}

/// `IS = −(Σ_{i∈val} ∇ℓ_i(ω*))·IF`: the first-order change of validation
/// loss when the point is removed.
pub fn influence_score(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    val_indices: &[usize],
    ifvec: &ParamVector,
) -> Result<f64> {
    if ifvec.len() != params.len() {
        return Err(Error::input("influence and parameter lengths differ"));
    }
    let g = validation_gradient(spec, params, data, val_indices)?;
    Ok(score_with(&g, ifvec))
}

/// `ω* − IF`.
pub fn edit_model(params: &ParamVector, ifvec: &ParamVector) -> Result<ParamVector> {
    if ifvec.len() != params.len() {
        return Err(Error::input(format!(
            "influence has length {}, parameters have {}",
            ifvec.len(),
            params.len()
        )));
    }
    Ok(params - ifvec)
}

/// Removes several points at once by subtracting the sum of their
/// influences.
pub fn edit_model_batch(params: &ParamVector, ifvecs: &[&ParamVector]) -> Result<ParamVector> {
    let mut total = ParamVector::zeros(params.len());
    for v in ifvecs {
        if v.len() != params.len() {
            return Err(Error::input("influence and parameter lengths differ"));
        }
        total.axpy(1.0, v);
    }
    edit_model(params, &total)
}

/// Settings shared by all estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    pub rho: f64,
    pub p: f64,
    pub lambda: f64,
    pub neumann: NeumannConfig,
    pub gif_mode: GifMode,
}

enum Backend<'a> {
    Hessian(PerturbedOptimum<'a>, NeumannConfig),
    Trajectory(TrajectoryInfluence<'a>, GifMode),
}

/// One trained model prepared for repeated influence queries. Queries for
/// different points run in parallel.
pub struct Attributor<'a> {
    estimator: Estimator,
    backend: Backend<'a>,
    val_grad: ParamVector,
}

impl<'a> Attributor<'a> {
    /// `trajectory` is required for [`Estimator::Gif`] and ignored
    /// otherwise. `val_indices` defines the scoring set.
    pub fn new(
        estimator: Estimator,
        spec: &'a ModelSpec,
        data: &'a Dataset,
        params: &ParamVector,
        trajectory: Option<&Trajectory>,
        cfg: &AttributionConfig,
        val_indices: &[usize],
    ) -> Result<Self> {
        let val_grad = validation_gradient(spec, params, data, val_indices)?;
        let backend = match estimator {
            Estimator::IfFast | Estimator::Hif => {
                let opt = PerturbedOptimum::new(spec, data, params, cfg.rho, cfg.p, cfg.lambda)?;
                let resolved = if estimator == Estimator::IfFast {
                    opt.resolve_if(&cfg.neumann)?
                } else {
                    opt.resolve_hif(&cfg.neumann)?
                };
                Backend::Hessian(opt, resolved)
            }
            Estimator::Gif => {
                let traj = trajectory
                    .ok_or_else(|| Error::config("the trajectory estimator needs a recorded trajectory"))?;
                let ctx = TrajectoryInfluence::new(spec, data, traj, cfg.rho, cfg.p)?;
                Backend::Trajectory(ctx, cfg.gif_mode)
            }
        };
        Ok(Self {
            estimator,
            backend,
            val_grad,
        })
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    /// `Σ_{i∈val} ∇ℓ_i(ω*)`.
    pub fn validation_gradient(&self) -> &ParamVector {
        &self.val_grad
    }

    /// Removal influence of `k`.
    pub fn removal_influence(&self, k: usize) -> Result<ParamVector> {
        match &self.backend {
            Backend::Hessian(opt, cfg) => match self.estimator {
                Estimator::Hif => opt.hif(k, cfg),
                _ => opt.if_fast(k, cfg),
            },
            Backend::Trajectory(ctx, mode) => ctx.influence(k, *mode),
        }
    }

    pub fn record(&self, req: &InfluenceRequest) -> Result<InfluenceRecord> {
        if req.estimator != self.estimator {
            return Err(Error::input(format!(
                "request asks for {}, attributor computes {}",
                req.estimator.as_str(),
                self.estimator.as_str()
            )));
        }
        if !req.delta.is_finite() {
            return Err(Error::input("upweight must be finite"));
        }
        let start = Instant::now();
        let removal = self.removal_influence(req.k)?;
        // Linear in the weight: removal is delta = -1.
        let influence = if req.delta == -1.0 {
            removal
        } else {
            removal.scaled(-req.delta)
        };
        let score = score_with(&self.val_grad, &influence);
        if !score.is_finite() {
            return Err(Error::input(format!("score for point {} is not finite", req.k)));
        }
        Ok(InfluenceRecord {
            k: req.k,
            estimator: self.estimator,
            influence,
            score,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    /// Removal records for every index in `ks`, in order.
    pub fn removal_records(&self, ks: &[usize]) -> Result<Vec<InfluenceRecord>> {
        ks.par_iter()
            .map(|&k| self.record(&InfluenceRequest::removal(k, self.estimator)))
            .collect()
    }
}
