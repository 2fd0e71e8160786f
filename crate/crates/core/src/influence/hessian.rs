//! Hessian-based estimators evaluated at the perturbed optimum.

use crate::error::{Error, Result};
use crate::model::{self, Dataset, ModelSpec};
use crate::numcore::{dot, ParamVector};
use crate::samtrain::worst_perturbation;

use super::neumann::{neumann_ihvp, FnOperator, LinearOperator, NeumannConfig};

/// Quantities shared by every per-point query against one trained model:
/// the full training gradient at `ω*`, the perturbation built from it and
/// the perturbed point `ω* + ε̂(ω*)`.
#[derive(Debug, Clone)]
pub struct PerturbedOptimum<'a> {
    spec: &'a ModelSpec,
    data: &'a Dataset,
    rows: Vec<usize>,
    scale: f64,
    params: ParamVector,
    perturbed: ParamVector,
    grad: ParamVector,
    rho: f64,
    p: f64,
    lambda: f64,
}

impl<'a> PerturbedOptimum<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        data: &'a Dataset,
        params: &ParamVector,
        rho: f64,
        p: f64,
        lambda: f64,
    ) -> Result<Self> {
        spec.validate()?;
        if !(rho.is_finite() && rho >= 0.0) || p.is_nan() || p < 1.0 || !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!(
                "need rho >= 0, p >= 1, lambda >= 0 (got {rho}, {p}, {lambda})"
            )));
        }
        let rows = data.train_indices();
        if rows.is_empty() {
            return Err(Error::input("dataset has no training rows"));
        }
        let scale = 1.0 / rows.len() as f64;
        let (_, grad) = model::subset_loss_grad(spec, params, data, &rows, scale)?;
        let eps = worst_perturbation(&grad, rho, p);
        let perturbed = ParamVector::new((params + &eps).into_vec())?;
        Ok(Self {
            spec,
            data,
            rows,
            scale,
            params: params.clone(),
            perturbed,
            grad,
            rho,
            p,
            lambda,
        })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// `ω* + ε̂(ω*)`.
    pub fn perturbed(&self) -> &ParamVector {
        &self.perturbed
    }

    /// `∇L_S(ω*)`.
    pub fn full_gradient(&self) -> &ParamVector {
        &self.grad
    }

    fn check_row(&self, k: usize) -> Result<()> {
        if k >= self.data.len() {
            return Err(Error::input(format!(
                "index {k} out of range for {} rows",
                self.data.len()
            )));
        }
        Ok(())
    }

    /// `∇L_S^k(ω* + ε̂) = ∇ℓ_k(ω* + ε̂) / n`.
    pub fn target_gradient(&self, k: usize) -> Result<ParamVector> {
        self.check_row(k)?;
        let (_, g) = model::subset_loss_grad(self.spec, &self.perturbed, self.data, &[k], self.scale)?;
        Ok(g)
    }

    fn hvp_at(&self, at: &ParamVector, v: &[f64]) -> Vec<f64> {
        model::hvp_raw(self.spec, at.as_slice(), self.data, &self.rows, v, self.scale)
    }

    /// `v ↦ ∇²L_S(ω* + ε̂) v + λ v`.
    pub fn hessian_operator(&self) -> impl LinearOperator + '_ {
        FnOperator::new(self.params.len(), move |v: &[f64]| {
            let mut out = self.hvp_at(&self.perturbed, v);
            for (o, x) in out.iter_mut().zip(v) {
                *o += self.lambda * x;
            }
            out
        })
    }

    fn check_nonsingular(&self) -> Result<()> {
        if self.rho > 0.0 && self.grad.iter().all(|&g| g == 0.0) {
            return Err(Error::SingularPerturbation);
        }
        Ok(())
    }

    /// `(dε̂/dω)·v` at `ω*`.
    pub fn eps_jacobian_vec(&self, v: &ParamVector) -> Result<ParamVector> {
        if v.len() != self.params.len() {
            return Err(Error::input(format!(
                "direction has length {}, expected {}",
                v.len(),
                self.params.len()
            )));
        }
        self.check_nonsingular()?;
        ParamVector::new(self.eps_jacobian_raw(v.as_slice()))
    }

    fn eps_jacobian_raw(&self, v: &[f64]) -> Vec<f64> {
        if self.rho == 0.0 {
            return vec![0.0; v.len()];
        }
        if self.p == 2.0 {
            let hv = self.hvp_at(&self.params, v);
            let g = self.grad.as_slice();
            let gn = self.grad.norm2();
            let ghv = dot(g, &hv);
            hv.iter()
                .zip(g)
                .map(|(h, gi)| self.rho * (h / gn - gi * ghv / (gn * gn * gn)))
                .collect()
        } else {
            self.eps_jacobian_fd(v)
        }
    }

    /// Central difference of `ε̂` along `v` with `h = 1e-4·‖ω‖/‖v‖`.
    pub(crate) fn eps_jacobian_fd(&self, v: &[f64]) -> Vec<f64> {
        let vn = dot(v, v).sqrt();
        if vn == 0.0 {
            return vec![0.0; v.len()];
        }
        let wn = self.params.norm2();
        let h = 1e-4 * if wn > 0.0 { wn } else { 1.0 } / vn;
        let eps_at = |sign: f64| {
            let w: Vec<f64> = self.params.iter().zip(v).map(|(a, b)| a + sign * h * b).collect();
            let (_, g) = model::loss_grad_raw(self.spec, &w, self.data, &self.rows, self.scale);
            worst_perturbation(&g, self.rho, self.p)
        };
        let (plus, minus) = (eps_at(1.0), eps_at(-1.0));
        plus.iter().zip(minus.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    /// `v ↦ H v + H (dε̂/dω) v + λ v` with `H` the Hessian at the
    /// perturbed point.
    pub fn total_operator(&self) -> Result<impl LinearOperator + '_> {
        self.check_nonsingular()?;
        Ok(FnOperator::new(self.params.len(), move |v: &[f64]| {
            let mut out = self.hvp_at(&self.perturbed, v);
            if self.rho > 0.0 {
                let jv = self.eps_jacobian_raw(v);
                let hjv = self.hvp_at(&self.perturbed, &jv);
                for (o, x) in out.iter_mut().zip(&hjv) {
                    *o += x;
                }
            }
            for (o, x) in out.iter_mut().zip(v) {
                *o += self.lambda * x;
            }
            out
        }))
    }

    /// Fixes the Neumann scale for the first-order operator so that
    /// repeated queries skip the spectral estimate.
    pub fn resolve_if(&self, cfg: &NeumannConfig) -> Result<NeumannConfig> {
        cfg.resolved(&self.hessian_operator())
    }

    pub fn resolve_hif(&self, cfg: &NeumannConfig) -> Result<NeumannConfig> {
        cfg.resolved(&self.total_operator()?)
    }

    /// Removal influence with `ω_{−k} ≈ ω* − IF`, ignoring how `ε̂` moves.
    pub fn if_fast(&self, k: usize, cfg: &NeumannConfig) -> Result<ParamVector> {
        let g = self.target_gradient(k)?;
        if g.iter().all(|&x| x == 0.0) {
            return Ok(ParamVector::zeros(g.len()));
        }
        let x = neumann_ihvp(&self.hessian_operator(), g.as_slice(), cfg)?;
        Ok(-&x)
    }

    /// Removal influence through the total Hessian that includes `dε̂/dω`.
    pub fn hif(&self, k: usize, cfg: &NeumannConfig) -> Result<ParamVector> {
        let op = self.total_operator()?;
        let g = self.target_gradient(k)?;
        if g.iter().all(|&x| x == 0.0) {
            return Ok(ParamVector::zeros(g.len()));
        }
        let x = neumann_ihvp(&op, g.as_slice(), cfg)?;
        Ok(-&x)
    }
}

/// Removal influence of row `k` from the Hessian at `ω* + ε̂(ω*)`.
#[allow(clippy::too_many_arguments)]
pub fn sam_if_fast(
    spec: &ModelSpec,
    data: &Dataset,
    params: &ParamVector,
    rho: f64,
    p: f64,
    lambda: f64,
    k: usize,
    cfg: &NeumannConfig,
) -> Result<ParamVector> {
    PerturbedOptimum::new(spec, data, params, rho, p, lambda)?.if_fast(k, cfg)
}

/// `(dε̂/dω)·v` at `params`.
pub fn eps_jacobian_vec(
    spec: &ModelSpec,
    data: &Dataset,
    params: &ParamVector,
    rho: f64,
    p: f64,
    v: &ParamVector,
) -> Result<ParamVector> {
    PerturbedOptimum::new(spec, data, params, rho, p, 0.0)?.eps_jacobian_vec(v)
}

/// Removal influence of row `k` through the total Hessian.
#[allow(clippy::too_many_arguments)]
pub fn sam_hif(
    spec: &ModelSpec,
    data: &Dataset,
    params: &ParamVector,
    rho: f64,
    p: f64,
    lambda: f64,
    k: usize,
    cfg: &NeumannConfig,
) -> Result<ParamVector> {
    PerturbedOptimum::new(spec, data, params, rho, p, lambda)?.hif(k, cfg)
}
