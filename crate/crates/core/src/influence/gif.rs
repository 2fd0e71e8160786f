//! Trajectory-based estimator: learning-rate-weighted gradients of one
//! example summed over the recorded training path.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{self, Dataset, ModelSpec};
use crate::numcore::ParamVector;
use crate::samtrain::{worst_perturbation, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GifMode {
    /// Every step counts for every example.
    Gd,
    /// A step counts only for the members of its batch.
    #[default]
    Sgd,
}

#[derive(Debug, Clone)]
struct Term {
    perturbed: ParamVector,
    weight: f64,
    batch: Vec<usize>,
}

/// A trajectory with the perturbed point `ω_t + ε̂(ω_t)` precomputed for
/// every checkpoint that produced an update.
#[derive(Debug, Clone)]
pub struct TrajectoryInfluence<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    terms: Vec<Term>,
    param_count: usize,
}

impl<'a> TrajectoryInfluence<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        data: &'a Dataset,
        traj: &Trajectory,
        rho: f64,
        p: f64,
    ) -> Result<Self> {
        spec.validate()?;
        traj.check_model(spec)?;
        spec.check_dataset(data)?;
        if traj.header.n != data.len() {
            return Err(Error::input(format!(
                "trajectory was recorded on {} rows, dataset has {}",
                traj.header.n,
                data.len()
            )));
        }
        if !(rho.is_finite() && rho >= 0.0) || p.is_nan() || p < 1.0 {
            return Err(Error::config(format!("need rho >= 0 and p >= 1 (got {rho}, {p})")));
        }
        check_coverage(traj)?;
        let terms = traj
            .checkpoints
            .par_iter()
            .filter(|c| !c.batch.is_empty() && c.per_example_weight != 0.0)
            .map(|c| {
                let scale = c.per_example_weight / c.eta;
                let (_, g) = model::loss_grad_raw(spec, c.params.as_slice(), data, &c.batch, scale);
                let eps = worst_perturbation(&g, rho, p);
                Term {
                    perturbed: &c.params + &eps,
                    weight: c.per_example_weight,
                    batch: c.batch.clone(),
                }
            })
            .collect();
        Ok(Self {
            spec,
            data,
            terms,
            param_count: traj.header.param_count,
        })
    }

    /// `IF(k) = −Σ_t w_t·[k ∈ B_t or gd]·∇ℓ_k(ω_t + ε̂(ω_t))`, so that
    /// `ω_{−k} ≈ ω_T − IF(k)`.
    pub fn influence(&self, k: usize, mode: GifMode) -> Result<ParamVector> {
        if k >= self.data.len() {
            return Err(Error::input(format!(
                "index {k} out of range for {} rows",
                self.data.len()
            )));
        }
        let mut acc = vec![0.0; self.param_count];
        for term in &self.terms {
            if mode == GifMode::Sgd && !term.batch.contains(&k) {
                continue;
            }
            let (_, g) = model::loss_grad_raw(
                self.spec,
                term.perturbed.as_slice(),
                self.data,
                &[k],
                term.weight,
            );
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a -= gi;
            }
        }
        ParamVector::new(acc)
    }
}

/// Checkpoints must sit at every multiple of one stride and end at `T`;
/// otherwise steps would silently drop out of the sum.
fn check_coverage(traj: &Trajectory) -> Result<()> {
    let cps = &traj.checkpoints;
    let last = cps.last().unwrap().step;
    if last != traj.header.steps {
        return Err(Error::input(format!(
            "trajectory is missing checkpoints: last recorded step is {last}, T = {}",
            traj.header.steps
        )));
    }
    if cps.len() < 2 {
        return Ok(());
    }
    let stride = cps[1].step;
    for (i, c) in cps[..cps.len() - 1].iter().enumerate() {
        if c.step != i * stride {
            return Err(Error::input(format!(
                "trajectory is missing checkpoints: expected step {}, found {}",
                i * stride,
                c.step
            )));
        }
    }
    if last - cps[cps.len() - 2].step > stride {
        return Err(Error::input("trajectory is missing checkpoints before step T"));
    }
    Ok(())
}

/// Removal influence of row `k` from a recorded trajectory.
pub fn sam_gif(
    traj: &Trajectory,
    spec: &ModelSpec,
    data: &Dataset,
    k: usize,
    mode: GifMode,
    rho: f64,
    p: f64,
) -> Result<ParamVector> {
    TrajectoryInfluence::new(spec, data, traj, rho, p)?.influence(k, mode)
}
