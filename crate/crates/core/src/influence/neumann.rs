//! Inverse-operator products by a truncated Neumann series.
//!
//! With `B = A + damp·I` and a scale `α`, the iteration
//! `v₀ = α g`, `v_{j+1} = α g + v_j − α B v_j` sums `α Σ_j (I − α B)^j g`,
//! which tends to `B⁻¹ g` whenever the spectral radius of `I − α B` is
//! below one.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::ParamVector;

/// A square linear map applied without materializing its matrix.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (self * x).as_slice().to_vec()
    }
}

/// Wraps a closure as an operator of the given dimension.
pub struct FnOperator<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.f)(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeumannConfig {
    /// Maximum number of iterations `J`.
    pub order: usize,
    /// Scale `α`; `None` picks `1/λ̂` with `λ̂` a power-iteration estimate
    /// of the largest eigenvalue magnitude of `A + damp·I`.
    pub alpha: Option<f64>,
    /// Added to the operator diagonal.
    pub damp: f64,
    /// Stop once `‖v_{j+1} − v_j‖₁ ≤ zeta`.
    pub zeta: f64,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        Self {
            order: 5000,
            alpha: None,
            damp: 0.01,
            zeta: 1e-10,
        }
    }
}

impl NeumannConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::config("Neumann order must be at least 1"));
        }
        if self.zeta.is_nan() || self.zeta <= 0.0 {
            return Err(Error::config("Neumann threshold zeta must be positive"));
        }
        if !(self.damp >= 0.0 && self.damp.is_finite()) {
            return Err(Error::config("Neumann damping must be >= 0"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("Neumann scale alpha must be positive"));
            }
        }
        Ok(())
    }

    /// Copy with `alpha` fixed, estimating it from `op` when unset.
    pub fn resolved(&self, op: &dyn LinearOperator) -> Result<NeumannConfig> {
        self.validate()?;
        let alpha = match self.alpha {
            Some(a) => a,
            None => {
                let top = spectral_radius_estimate(op, self.damp, 50);
                if top > 0.0 && top.is_finite() {
                    1.0 / top
                } else {
                    1.0
                }
            }
        };
        Ok(NeumannConfig {
            alpha: Some(alpha),
            ..*self
        })
    }
}

/// Power-iteration estimate of the largest eigenvalue magnitude of
/// `A + damp·I`, from a fixed pseudo-random start.
pub fn spectral_radius_estimate(op: &dyn LinearOperator, damp: f64, iterations: usize) -> f64 {
    let n = op.dim();
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let mut w = op.apply(&v);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi += damp * vi;
        }
        estimate = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w;
    }
    estimate
}

/// Outcome of a Neumann solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NeumannSolution {
    pub value: ParamVector,
    /// Iterations performed.
    pub iterations: usize,
    /// Whether the `zeta` criterion fired before the order cap.
    pub converged: bool,
    pub alpha: f64,
}

/// Approximates `(A + damp·I)⁻¹ g`.
pub fn neumann_ihvp(op: &dyn LinearOperator, g: &[f64], cfg: &NeumannConfig) -> Result<ParamVector> {
    neumann_solve(op, g, cfg).map(|s| s.value)
}

pub fn neumann_solve(
    op: &dyn LinearOperator,
    g: &[f64],
    cfg: &NeumannConfig,
) -> Result<NeumannSolution> {
    if g.len() != op.dim() {
        return Err(Error::input(format!(
            "right-hand side has length {}, operator dimension is {}",
            g.len(),
            op.dim()
        )));
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::input("right-hand side is not finite"));
    }
    let cfg = cfg.resolved(op)?;
    let alpha = cfg.alpha.unwrap();
    let ag: Vec<f64> = g.iter().map(|x| alpha * x).collect();
    let mut v = ag.clone();
    let mut iterations = 0;
    let mut converged = false;
    for j in 1..=cfg.order {
        let av = op.apply(&v);
        let mut diff = 0.0;
        let mut next = Vec::with_capacity(v.len());
        for ((&vi, &avi), &agi) in v.iter().zip(&av).zip(&ag) {
            let step = agi - alpha * (avi + cfg.damp * vi);
            diff += step.abs();
            next.push(vi + step);
        }
        if !diff.is_finite() || next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NeumannDivergence { iteration: j });
        }
        v = next;
        iterations = j;
        if diff <= cfg.zeta {
            converged = true;
            break;
        }
    }
    Ok(NeumannSolution {
        value: ParamVector::from_vec_unchecked(v),
        iterations,
        converged,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_converges_after_one_step() {
        let a = DMatrix::<f64>::identity(3, 3);
        let cfg = NeumannConfig {
            order: 10,
            alpha: Some(1.0),
            damp: 0.0,
            zeta: 1e-12,
        };
        let s = neumann_solve(&a, &[1.0, -2.0, 0.5], &cfg).unwrap();
        assert_eq!(s.value.as_slice(), &[1.0, -2.0, 0.5]);
        assert_eq!(s.iterations, 1);
        assert!(s.converged);
    }

    #[test]
    fn geometric_series() {
        let a = DMatrix::from_diagonal_element(2, 2, 0.5);
        let one = NeumannConfig {
            order: 1,
            alpha: Some(1.0),
            damp: 0.0,
            zeta: 1e-300,
        };
        let v1 = neumann_ihvp(&a, &[1.0, 0.0], &one).unwrap();
        assert_eq!(v1.as_slice(), &[1.5, 0.0]);
        let many = NeumannConfig { order: 200, ..one };
        let v = neumann_ihvp(&a, &[1.0, 0.0], &many).unwrap();
        assert_relative_eq!(v[0], 2.0, epsilon = 1e-14);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let a = DMatrix::from_diagonal_element(2, 2, 5.0);
        let cfg = NeumannConfig {
            order: 100_000,
            alpha: Some(1.0),
            damp: 0.0,
            zeta: 1e-12,
        };
        assert!(matches!(
            neumann_ihvp(&a, &[1.0, 1.0], &cfg),
            Err(Error::NeumannDivergence { .. })
        ));
    }

    #[test]
    fn automatic_scale_contracts() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![40.0, 2.0, 0.5]));
        let cfg = NeumannConfig {
            order: 10_000,
            alpha: None,
            damp: 0.0,
            zeta: 1e-14,
        };
        let s = neumann_solve(&a, &[40.0, 2.0, 0.5], &cfg).unwrap();
        assert!(s.converged);
        for x in s.value.iter() {
            assert_relative_eq!(*x, 1.0, epsilon = 1e-10);
        }
        assert_relative_eq!(s.alpha, 1.0 / 40.0, max_relative = 1e-6);
    }

    #[test]
    fn bad_config_rejected() {
        let a = DMatrix::<f64>::identity(2, 2);
        let bad = NeumannConfig {
            order: 0,
            ..NeumannConfig::default()
        };
        assert!(neumann_ihvp(&a, &[1.0, 1.0], &bad).is_err());
        assert!(neumann_ihvp(&a, &[1.0], &NeumannConfig::default()).is_err());
    }
}
