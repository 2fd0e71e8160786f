use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samattr::model::{self, blobs, init_params, Activation, LossKind, ModelSpec};
use samattr::oracle::{dense_hessian, finite_difference_gradient};
use samattr::{Dataset, ParamVector};

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> ParamVector {
    ParamVector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn suite(seed: u64) -> (ModelSpec, Dataset) {
    let spec = match seed % 4 {
        0 => ModelSpec::logistic(4, 3),
        1 => ModelSpec::mlp(vec![3, 5, 2], Activation::Tanh),
        2 => ModelSpec::mlp(vec![4, 4, 3, 3], Activation::Tanh),
        _ => ModelSpec::logistic(3, 2).with_loss(LossKind::Squared),
    };
    let data = blobs(12, spec.inputs(), spec.classes(), 1.0, seed).unwrap();
    (spec, data)
}

#[test]
fn reverse_mode_gradient_matches_central_differences() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (spec, data) = suite(seed);
        let w = init_params(&spec, seed + 100).unwrap();
        let idx = data.train_indices();
        let (_, g) = model::subset_loss_grad(&spec, &w, &data, &idx, 1.0 / 12.0).unwrap();
        let fd = finite_difference_gradient(&spec, &w, &data, &idx, 1.0 / 12.0, 1e-6).unwrap();
        for (a, b) in g.iter().zip(fd.iter()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn relu_gradient_away_from_kinks() {
    let spec = ModelSpec::mlp(vec![2, 6, 2], Activation::Relu);
    let data = blobs(10, 2, 2, 1.0, 3).unwrap();
    let w = init_params(&spec, 4).unwrap();
    let (_, g) = model::subset_loss_grad(&spec, &w, &data, &[0, 1, 2, 3], 1.0).unwrap();
    let fd = finite_difference_gradient(&spec, &w, &data, &[0, 1, 2, 3], 1.0, 1e-7).unwrap();
    for (a, b) in g.iter().zip(fd.iter()) {
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
    }
}

/// `H v` from gradients alone: central differences along `v` with two
/// rounds of Richardson extrapolation.
fn richardson_hvp(spec: &ModelSpec, w: &ParamVector, data: &Dataset, v: &ParamVector) -> Vec<f64> {
    let idx = data.train_indices();
    let scale = 1.0 / idx.len() as f64;
    let d = |h: f64| -> Vec<f64> {
        let up = w + &v.scaled(h);
        let down = w - &v.scaled(h);
        let (_, gu) = model::subset_loss_grad(spec, &up, data, &idx, scale).unwrap();
        let (_, gd) = model::subset_loss_grad(spec, &down, data, &idx, scale).unwrap();
        gu.iter().zip(gd.iter()).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    };
    let h = 2e-2;
    let (d1, d2, d3) = (d(h), d(h / 2.0), d(h / 4.0));
    (0..d1.len())
        .map(|i| {
            let r1 = (4.0 * d2[i] - d1[i]) / 3.0;
            let r2 = (4.0 * d3[i] - d2[i]) / 3.0;
            (16.0 * r2 - r1) / 15.0
        })
        .collect()
}

#[test]
fn hvp_matches_dense_hessian_from_gradient_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..4 {
        let (spec, data) = suite(seed);
        let p = spec.param_count();
        assert!(p <= 50);
        let w = init_params(&spec, seed).unwrap();
        // Oracle Hessian, column by column.
        let mut cols = Vec::new();
        for i in 0..p {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            cols.push(richardson_hvp(&spec, &w, &data, &ParamVector::new(e).unwrap()));
        }
        let dense = DMatrix::from_fn(p, p, |r, c| cols[c][r]);
        for _ in 0..5 {
            let v = random_vec(&mut rng, p);
            let idx = data.train_indices();
            let hv = model::hvp(&spec, &w, &data, &idx, &v, 1.0 / idx.len() as f64).unwrap();
            let want = &dense * DVector::from_column_slice(v.as_slice());
            let err = (DVector::from_column_slice(hv.as_slice()) - &want).norm() / want.norm();
            assert!(err < 1e-8, "seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn hvp_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..4 {
        let (spec, data) = suite(seed);
        let w = init_params(&spec, seed).unwrap();
        let idx = data.train_indices();
        let p = spec.param_count();
        for _ in 0..5 {
            let u = random_vec(&mut rng, p);
            let v = random_vec(&mut rng, p);
            let hv = model::hvp(&spec, &w, &data, &idx, &v, 0.1).unwrap();
            let hu = model::hvp(&spec, &w, &data, &idx, &u, 0.1).unwrap();
            assert!((u.dot(&hv) - v.dot(&hu)).abs() < 1e-10);
        }
    }
}

#[test]
fn dense_hessian_columns_agree_with_hvp() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (spec, data) = suite(1);
    let w = init_params(&spec, 1).unwrap();
    let h = dense_hessian(&spec, &w, &data, 0.0).unwrap();
    assert!((&h - h.transpose()).amax() < 1e-8);
    let idx = data.train_indices();
    for _ in 0..20 {
        let v = random_vec(&mut rng, spec.param_count());
        let v = v.scaled(1.0 / v.norm2());
        let hv = model::hvp(&spec, &w, &data, &idx, &v, 1.0 / idx.len() as f64).unwrap();
        let dense = &h * DVector::from_column_slice(v.as_slice());
        for (a, b) in hv.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn squared_loss_dense_hessian_is_analytic() {
    // ½‖Wx + b − e_y‖² has Hessian (1/n)Σ [x;1][x;1]ᵀ for every output row.
    let spec = ModelSpec::logistic(2, 2).with_loss(LossKind::Squared);
    let data = blobs(9, 2, 2, 1.0, 1).unwrap();
    let h = dense_hessian(&spec, &init_params(&spec, 3).unwrap(), &data, 0.25).unwrap();
    let mut want = DMatrix::<f64>::zeros(6, 6);
    for i in 0..9 {
        let x = data.row(i);
        let aug = [x[0], x[1], 1.0];
        for out in 0..2 {
            let pos = |j: usize| if j < 2 { out * 2 + j } else { 4 + out };
            for a in 0..3 {
                for b in 0..3 {
                    want[(pos(a), pos(b))] += aug[a] * aug[b] / 9.0;
                }
            }
        }
    }
    for i in 0..6 {
        want[(i, i)] += 0.25;
    }
    assert!((&h - &want).amax() < 1e-13);
}
