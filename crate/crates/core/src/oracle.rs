//! Ground truth for the estimators: leave-one-out retraining, dense
//! Hessians, finite-difference checks and calibration statistics.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::influence::{AttributionConfig, Attributor, Estimator, GifMode, NeumannConfig};
use crate::model::{self, Dataset, ModelSpec, Split};
use crate::numcore::ParamVector;
use crate::samtrain::{self, batch_rows, SamConfig};
use crate::stats;

/// Largest parameter count [`dense_hessian`] will materialize.
pub const DENSE_LIMIT: usize = 2000;

/// Retrains with row `k` removed; see [`retrain_without`].
pub fn loo_retrain(
    spec: &ModelSpec,
    data: &Dataset,
    k: usize,
    config: &SamConfig,
) -> Result<ParamVector> {
    retrain_without(spec, data, &[k], config)
}

/// Retrains from the same initialization over the original batch schedule
/// with every slot of a removed row refilled by a point drawn from the
/// remaining rows not already in that batch. A slot with no candidate left
/// (full batches) is dropped. Losses keep the original `1/b` weight, so the
/// removed rows simply stop contributing.
pub fn retrain_without(
    spec: &ModelSpec,
    data: &Dataset,
    removed: &[usize],
    config: &SamConfig,
) -> Result<ParamVector> {
    spec.validate()?;
    if let Some(&k) = removed.iter().find(|&&k| k >= data.len()) {
        return Err(Error::input(format!(
            "index {k} out of range for {} rows",
            data.len()
        )));
    }
    let batches = batch_rows(data, config)?;
    let remaining: Vec<usize> = data
        .train_indices()
        .into_iter()
        .filter(|i| !removed.contains(i))
        .collect();
    if remaining.is_empty() {
        return Err(Error::input("no training rows left after removal"));
    }
    let seed = config.schedule_seed().wrapping_add(0x51ed_270b);
    let batches: Vec<Vec<usize>> = batches
        .into_iter()
        .enumerate()
        .map(|(t, batch)| refill(batch, removed, &remaining, seed, t))
        .collect();
    let init = model::init_params(spec, config.seed)?;
    let (w, _) = samtrain::run_schedule(
        spec,
        data,
        config,
        init,
        &batches,
        1.0 / config.batch_size as f64,
    )?;
    Ok(w)
}

fn refill(batch: Vec<usize>, removed: &[usize], remaining: &[usize], seed: u64, t: usize) -> Vec<usize> {
    if !batch.iter().any(|i| removed.contains(i)) {
        return batch;
    }
    let mut kept: Vec<usize> = batch.iter().copied().filter(|i| !removed.contains(i)).collect();
    let slots = batch.len() - kept.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    for _ in 0..slots {
        let free = remaining.iter().filter(|i| !kept.contains(i)).count();
        if free == 0 {
            break;
        }
        let pick = rng.random_range(0..free);
        let row = *remaining
            .iter()
            .filter(|i| !kept.contains(i))
            .nth(pick)
            .unwrap();
        kept.push(row);
    }
    kept.sort_unstable();
    kept
}

/// `∇²L_S(params) + λI` over the training rows, one Hessian-vector
/// product per column.
pub fn dense_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    let p = spec.param_count();
    if p > DENSE_LIMIT {
        return Err(Error::Refused(format!(
            "dense Hessian of {p} parameters exceeds the limit of {DENSE_LIMIT}"
        )));
    }
    spec.check_params(params)?;
    spec.check_dataset(data)?;
    let rows = data.train_indices();
    if rows.is_empty() {
        return Err(Error::input("dataset has no training rows"));
    }
    let scale = 1.0 / rows.len() as f64;
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            model::hvp_raw(spec, params.as_slice(), data, &rows, &e, scale)
        })
        .collect();
    let mut h = DMatrix::from_fn(p, p, |r, c| columns[c][r]);
    for i in 0..p {
        h[(i, i)] += lambda;
    }
    Ok(h)
}

/// Central-difference gradient of `scale·Σ ℓ_i` over `indices`.
pub fn finite_difference_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    scale: f64,
    h: f64,
) -> Result<ParamVector> {
    let mut out = Vec::with_capacity(params.len());
    let mut w = params.clone().into_vec();
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = model::subset_loss(spec, &ParamVector::new(w.clone())?, data, indices, scale)?;
        w[i] = orig - h;
        let down = model::subset_loss(spec, &ParamVector::new(w.clone())?, data, indices, scale)?;
        w[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    ParamVector::new(out)
}

/// Hessian of the mean training loss by central differences of gradients.
pub fn finite_difference_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    h: f64,
) -> Result<DMatrix<f64>> {
    let rows = data.train_indices();
    let scale = 1.0 / rows.len().max(1) as f64;
    let p = params.len();
    let mut out = DMatrix::zeros(p, p);
    let mut w = params.clone().into_vec();
    for i in 0..p {
        let orig = w[i];
        w[i] = orig + h;
        let (_, up) = model::subset_loss_grad(spec, &ParamVector::new(w.clone())?, data, &rows, scale)?;
        w[i] = orig - h;
        let (_, down) = model::subset_loss_grad(spec, &ParamVector::new(w.clone())?, data, &rows, scale)?;
        w[i] = orig;
        for r in 0..p {
            out[(r, i)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `Σ_{i∈val} ℓ_i(params)`.
pub fn validation_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    val_indices: &[usize],
) -> Result<f64> {
    model::subset_loss(spec, params, data, val_indices, 1.0)
}

/// Measured validation-loss change `Σ_val ℓ(ω_{−k}) − Σ_val ℓ(ω*)` for
/// each `k`, retraining in parallel.
pub fn loo_validation_deltas(
    spec: &ModelSpec,
    data: &Dataset,
    config: &SamConfig,
    base: &ParamVector,
    ks: &[usize],
    val_indices: &[usize],
) -> Result<Vec<f64>> {
    let base_loss = validation_loss(spec, base, data, val_indices)?;
    ks.par_iter()
        .map(|&k| {
            let w = loo_retrain(spec, data, k, config)?;
            Ok(validation_loss(spec, &w, data, val_indices)? - base_loss)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub estimator: String,
    pub pearson: f64,
    pub spearman: f64,
    pub sign_agreement: f64,
    pub n_points: usize,
}

/// Agreement between predicted and measured effects.
pub fn calibrate_scores(predicted: &[f64], actual: &[f64], estimator: &str) -> Result<CalibrationReport> {
    if predicted.len() != actual.len() {
        return Err(Error::input("predicted and actual lengths differ"));
    }
    Ok(CalibrationReport {
        estimator: estimator.to_string(),
        pearson: stats::pearson(predicted, actual),
        spearman: stats::spearman(predicted, actual),
        sign_agreement: stats::sign_agreement(predicted, actual),
        n_points: predicted.len(),
    })
}

/// Estimator settings and point sampling for [`calibrate_estimator`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub neumann: NeumannConfig,
    pub gif_mode: GifMode,
    /// Seed for choosing which training points to retrain without.
    pub sample_seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            neumann: NeumannConfig::default(),
            gif_mode: GifMode::Sgd,
            sample_seed: 0,
        }
    }
}

/// Trains once, scores `sample_size` training points with `estimator` and
/// compares the scores with leave-one-out retraining on the validation
/// split.
pub fn calibrate_estimator(
    spec: &ModelSpec,
    data: &Dataset,
    config: &SamConfig,
    estimator: Estimator,
    sample_size: usize,
    options: &CalibrationOptions,
) -> Result<CalibrationReport> {
    let train = data.train_indices();
    if sample_size == 0 || sample_size > train.len() {
        return Err(Error::config(format!(
            "sample size {sample_size} must lie in 1..={}",
            train.len()
        )));
    }
    let val = data.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::input("calibration needs validation rows"));
    }
    let ks: Vec<usize> = if sample_size == train.len() {
        train.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.sample_seed);
        let mut picked: Vec<usize> = index::sample(&mut rng, train.len(), sample_size)
            .into_iter()
            .map(|i| train[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let (params, traj) = samtrain::train_sam(spec, data, config)?;
    let cfg = AttributionConfig {
        rho: config.rho,
        p: config.p,
        lambda: config.lambda,
        neumann: options.neumann,
        gif_mode: options.gif_mode,
    };
    let attributor = Attributor::new(estimator, spec, data, &params, Some(&traj), &cfg, &val)?;
    let predicted: Vec<f64> = attributor
        .removal_records(&ks)?
        .into_iter()
        .map(|r| r.score)
        .collect();
    let actual = loo_validation_deltas(spec, data, config, &params, &ks, &val)?;
    calibrate_scores(&predicted, &actual, estimator.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{blobs, Activation, LossKind};
    use approx::assert_relative_eq;

    fn small() -> (ModelSpec, Dataset) {
        (
            ModelSpec::mlp(vec![2, 3, 2], Activation::Tanh),
            blobs(15, 2, 2, 1.0, 3).unwrap(),
        )
    }

    #[test]
    fn dense_hessian_matches_finite_differences() {
        let spec = ModelSpec::logistic(2, 2).with_loss(LossKind::CrossEntropy);
        let data = blobs(20, 2, 2, 1.0, 5).unwrap();
        let w = model::init_params(&spec, 2).unwrap();
        assert_eq!(w.len(), 6);
        let h = dense_hessian(&spec, &w, &data, 0.0).unwrap();
        let fd = finite_difference_hessian(&spec, &w, &data, 1e-5).unwrap();
        assert!((&h - &fd).amax() < 1e-4);
        assert!((&h - h.transpose()).amax() < 1e-8);

        let (spec, data) = small();
        let w = model::init_params(&spec, 1).unwrap();
        let h = dense_hessian(&spec, &w, &data, 0.3).unwrap();
        let fd = finite_difference_hessian(&spec, &w, &data, 1e-5).unwrap();
        let shifted = &h - DMatrix::<f64>::identity(h.nrows(), h.ncols()) * 0.3;
        assert!((&shifted - &fd).amax() < 1e-4);
        assert_relative_eq!(h[(0, 0)] - 0.3, fd[(0, 0)], epsilon = 1e-4);
    }

    #[test]
    fn dense_hessian_of_squared_loss_is_constant() {
        // Squared loss on a linear head: H = (1/n) Σ [x;1][x;1]ᵀ per output.
        let spec = ModelSpec::logistic(1, 2).with_loss(LossKind::Squared);
        let data = Dataset::from_rows(&[vec![1.0], vec![3.0]], vec![0, 1], 2).unwrap();
        let a = dense_hessian(&spec, &ParamVector::zeros(4), &data, 0.5).unwrap();
        let b = dense_hessian(&spec, &ParamVector::new(vec![1.0, -2.0, 0.3, 4.0]).unwrap(), &data, 0.5).unwrap();
        assert_eq!(a, b);
        // layout: W (2x1) then bias (2)
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                5.5, 0.0, 2.0, 0.0, //
                0.0, 5.5, 0.0, 2.0, //
                2.0, 0.0, 1.5, 0.0, //
                0.0, 2.0, 0.0, 1.5,
            ],
        );
        assert!((&a - &expected).amax() < 1e-14);
    }

    #[test]
    fn dense_hessian_refuses_large_models() {
        let spec = ModelSpec::mlp(vec![100, 30, 2], Activation::Tanh);
        let data = blobs(3, 100, 2, 1.0, 0).unwrap();
        let w = ParamVector::zeros(spec.param_count());
        assert!(matches!(dense_hessian(&spec, &w, &data, 0.0), Err(Error::Refused(_))));
    }

    #[test]
    fn refill_replaces_and_drops() {
        let remaining = [0, 1, 3];
        let b = refill(vec![1, 2, 3], &[2], &remaining, 9, 0);
        assert_eq!(b, vec![0, 1, 3]);
        let full = refill(vec![0, 1, 2, 3], &[2], &remaining, 9, 0);
        assert_eq!(full, vec![0, 1, 3]);
        assert_eq!(refill(vec![0, 3], &[2], &remaining, 9, 0), vec![0, 3]);
    }

    #[test]
    fn loo_is_deterministic() {
        let (spec, data) = small();
        let cfg = SamConfig {
            batch_size: 4,
            steps: 30,
            ..SamConfig::default()
        };
        let a = loo_retrain(&spec, &data, 3, &cfg).unwrap();
        let b = loo_retrain(&spec, &data, 3, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loo_of_identical_pair_equals_single_point_training() {
        let spec = ModelSpec::logistic(2, 2);
        let two = Dataset::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0]], vec![1, 1], 2).unwrap();
        let one = Dataset::from_rows(&[vec![0.5, -1.0]], vec![1], 2).unwrap();
        let cfg = SamConfig {
            batch_size: 1,
            steps: 40,
            ..SamConfig::default()
        };
        let loo = loo_retrain(&spec, &two, 1, &cfg).unwrap();
        let (single, _) = samtrain::train_sam(&spec, &one, &cfg).unwrap();
        assert_eq!(loo, single);
    }

    #[test]
    fn null_estimator_is_a_coin_flip() {
        let actual = [0.3, -0.2, 0.1, -0.5];
        let r = calibrate_scores(&[0.0; 4], &actual, "null").unwrap();
        assert_eq!(r.sign_agreement, 0.5);
        assert_eq!(r.pearson, 0.0);
        assert_eq!(r.spearman, 0.0);
        assert_eq!(r.n_points, 4);
    }
}
