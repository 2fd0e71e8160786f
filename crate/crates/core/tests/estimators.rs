use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samattr::influence::{
    neumann_solve, AttributionConfig, Attributor, Estimator, GifMode, NeumannConfig,
    PerturbedOptimum,
};
use samattr::model::{blobs, Blobs, Dataset, ModelSpec, Split};
use samattr::oracle::{loo_retrain, retrain_without};
use samattr::samtrain::train_sam;
use samattr::stats::spearman;
use samattr::{LrSchedule, SamConfig};

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let a = &m * m.transpose();
    let top = a.clone().symmetric_eigenvalues().max();
    a / top
}

#[test]
fn neumann_matches_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = NeumannConfig {
        order: 500,
        alpha: None,
        damp: 0.1,
        zeta: 1e-12,
    };
    for _ in 0..5 {
        let a = random_spd(&mut rng, 20);
        let g: DVector<f64> = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
        let g: DVector<f64> = &g / g.norm();
        let s = neumann_solve(&a, g.as_slice(), &cfg).unwrap();
        let damped = &a + DMatrix::<f64>::identity(20, 20) * 0.1;
        let want = damped.clone().cholesky().unwrap().solve(&g);
        let got = DVector::from_column_slice(s.value.as_slice());
        assert!((&got - &want).norm() / want.norm() < 1e-3);
        if s.converged {
            let residual = (&damped * &got - &g).norm();
            assert!(residual < 10.0 * cfg.zeta, "residual {residual}");
        }
    }
}

fn convex_suite() -> (ModelSpec, Dataset, SamConfig) {
    let data = Blobs::new(10, 2, 3.0, 1).unwrap().with_splits(200, 100, 0).unwrap();
    let cfg = SamConfig {
        rho: 0.05,
        lambda: 0.01,
        lr: LrSchedule::Constant(0.5),
        batch_size: 200,
        steps: 3000,
        seed: 1,
        ..SamConfig::default()
    };
    (ModelSpec::logistic(10, 2), data, cfg)
}

fn neumann() -> NeumannConfig {
    NeumannConfig {
        order: 100_000,
        alpha: None,
        damp: 0.0,
        zeta: 1e-13,
    }
}

#[test]
fn hif_and_if_rank_points_alike() {
    let (spec, data, cfg) = convex_suite();
    let (w, _) = train_sam(&spec, &data, &cfg).unwrap();
    let opt = PerturbedOptimum::new(&spec, &data, &w, cfg.rho, cfg.p, cfg.lambda).unwrap();
    let nc = neumann();
    let if_cfg = opt.resolve_if(&nc).unwrap();
    let hif_cfg = opt.resolve_hif(&nc).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in data.train_indices() {
        a.push(opt.if_fast(k, &if_cfg).unwrap().norm2());
        b.push(opt.hif(k, &hif_cfg).unwrap().norm2());
    }
    assert!(spearman(&a, &b) > 0.9);
}

#[test]
fn hif_equals_if_at_rho_zero_on_convex_suite() {
    let (spec, data, cfg) = convex_suite();
    let cfg = SamConfig { rho: 0.0, steps: 1000, ..cfg };
    let (w, _) = train_sam(&spec, &data, &cfg).unwrap();
    let opt = PerturbedOptimum::new(&spec, &data, &w, 0.0, 2.0, cfg.lambda).unwrap();
    let nc = opt.resolve_if(&NeumannConfig { order: 20_000, ..neumann() }).unwrap();
    for k in [0, 50, 123, 199] {
        let a = opt.if_fast(k, &nc).unwrap();
        let b = opt.hif(k, &nc).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

/// Blobs plus one far-out training point labelled as the other class.
fn with_outlier() -> (ModelSpec, Dataset, SamConfig, usize) {
    let base = Blobs::new(4, 2, 2.0, 5).unwrap().with_splits(60, 60, 0).unwrap();
    let far = Dataset::from_rows(&[vec![4.0; 4]], vec![0], 2).unwrap();
    let data = base.concat(&far).unwrap();
    let cfg = SamConfig {
        rho: 0.05,
        lambda: 0.05,
        lr: LrSchedule::Constant(0.5),
        batch_size: 61,
        steps: 1500,
        ..SamConfig::default()
    };
    let k = data.len() - 1;
    (ModelSpec::logistic(4, 2), data, cfg, k)
}

#[test]
fn gross_outlier_has_the_lowest_score_for_every_estimator() {
    let (spec, data, cfg, outlier) = with_outlier();
    let (w, traj) = train_sam(&spec, &data, &cfg).unwrap();
    let val = data.indices(Split::Val);
    let ac = AttributionConfig {
        rho: cfg.rho,
        p: cfg.p,
        lambda: cfg.lambda,
        neumann: neumann(),
        gif_mode: GifMode::Sgd,
    };
    for est in Estimator::ALL {
        let a = Attributor::new(est, &spec, &data, &w, Some(&traj), &ac, &val).unwrap();
        let scores: Vec<f64> = a
            .removal_records(&data.train_indices())
            .unwrap()
            .iter()
            .map(|r| r.score)
            .collect();
        let argmin = data
            .train_indices()
            .into_iter()
            .zip(&scores)
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmin, outlier, "{}", est.as_str());
    }
}

#[test]
fn removing_a_duplicate_moves_less_than_removing_an_outlier() {
    let (spec, base, cfg, outlier) = with_outlier();
    let dup = Dataset::from_rows(&[base.row(3).to_vec()], vec![base.label(3)], 2).unwrap();
    let data = base.concat(&dup).unwrap();
    let cfg = SamConfig { batch_size: 62, ..cfg };
    let (w, _) = train_sam(&spec, &data, &cfg).unwrap();
    let d_dup = (&loo_retrain(&spec, &data, data.len() - 1, &cfg).unwrap() - &w).norm2();
    let d_out = (&loo_retrain(&spec, &data, outlier, &cfg).unwrap() - &w).norm2();
    assert!(d_dup < d_out, "{d_dup} vs {d_out}");
}

#[test]
fn loo_is_seed_independent_on_strongly_convex_problems() {
    let data = blobs(40, 3, 2, 1.0, 2).unwrap();
    let spec = ModelSpec::logistic(3, 2);
    let cfg = |seed| SamConfig {
        rho: 0.05,
        lambda: 0.1,
        lr: LrSchedule::Constant(1.0),
        batch_size: 40,
        steps: 3000,
        seed,
        ..SamConfig::default()
    };
    let a = loo_retrain(&spec, &data, 7, &cfg(1)).unwrap();
    let b = loo_retrain(&spec, &data, 7, &cfg(99)).unwrap();
    assert!((&a - &b).norm2() < 1e-6);
    let c = retrain_without(&spec, &data, &[7], &cfg(1)).unwrap();
    assert_eq!(a, c);
}
