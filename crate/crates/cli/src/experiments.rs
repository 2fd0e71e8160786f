//! Experiment drivers. Each one turns an [`ExperimentConfig`] into a
//! [`Report`]; all randomness derives from the configured seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use samattr::influence::{
    edit_model, edit_model_batch, AttributionConfig, Attributor, InfluenceRecord,
};
use samattr::model::{self, ModelSpec};
use samattr::oracle::{calibrate_scores, loo_retrain, loo_validation_deltas, retrain_without};
use samattr::samtrain::{read_trajectory, train_sam, write_trajectory, Trajectory};
use samattr::{Dataset, ParamVector, Split};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::ingest;
use crate::report::{emit_report, file_stem, Report, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attribute,
    Valuate,
    DetectNoise,
    Trace,
    Edit,
    Calibrate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attribute => "attribute",
            Command::Valuate => "valuate",
            Command::DetectNoise => "detect-noise",
            Command::Trace => "trace",
            Command::Edit => "edit",
            Command::Calibrate => "calibrate",
        }
    }
}

/// A trained model together with the data it was trained on.
pub struct Prepared {
    pub digest: String,
    pub spec: ModelSpec,
    pub data: Dataset,
    pub params: ParamVector,
    pub trajectory: Trajectory,
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    prepare_with_data(cfg, ingest(cfg)?)
}

/// Trains on `data`, or reuses the configured trajectory when it was
/// recorded with the same training settings.
pub fn prepare_with_data(cfg: &ExperimentConfig, data: Dataset) -> CliResult<Prepared> {
    let spec = cfg.model_spec(data.dim(), data.num_classes());
    let (params, trajectory) = match &cfg.trajectory {
        Some(path) => {
            let traj = read_trajectory(path)?;
            if traj.header.config_digest != cfg.sam.digest() {
                return Err(CliError::config(format!(
                    "{} was recorded with different training settings",
                    path.display()
                )));
            }
            if traj.header.n != data.len() {
                return Err(CliError::config(format!(
                    "{} was recorded on {} rows, dataset has {}",
                    path.display(),
                    traj.header.n,
                    data.len()
                )));
            }
            traj.check_model(&spec)?;
            (traj.final_params().clone(), traj)
        }
        None => train_sam(&spec, &data, &cfg.sam)?,
    };
    Ok(Prepared {
        digest: cfg.digest(),
        spec,
        data,
        params,
        trajectory,
    })
}

fn rows(data: &Dataset, split: Split) -> CliResult<Vec<usize>> {
    let r = data.indices(split);
    if r.is_empty() {
        return Err(CliError::config(format!("dataset has no {} rows", split.as_str())));
    }
    Ok(r)
}

fn io_at(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn derive(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17)
}

fn count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn random_subset(rows: &[usize], m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = index::sample(&mut rng, rows.len(), m)
        .into_iter()
        .map(|i| rows[i])
        .collect();
    out.sort_unstable();
    out
}

pub fn attribution_config(cfg: &ExperimentConfig) -> AttributionConfig {
    AttributionConfig {
        rho: cfg.sam.rho,
        p: cfg.sam.p,
        lambda: cfg.sam.lambda,
        neumann: cfg.neumann,
        gif_mode: cfg.gif_mode,
    }
}

/// Removal records for `ks`, scored against the validation rows.
pub fn score_points(prep: &Prepared, cfg: &ExperimentConfig, ks: &[usize]) -> CliResult<Vec<InfluenceRecord>> {
    let val = rows(&prep.data, Split::Val)?;
    let attributor = Attributor::new(
        cfg.estimator,
        &prep.spec,
        &prep.data,
        &prep.params,
        Some(&prep.trajectory),
        &attribution_config(cfg),
        &val,
    )?;
    Ok(attributor.removal_records(ks)?)
}

/// Record positions ordered by descending score; ties go to the lower
/// training index.
pub fn rank_descending(records: &[InfluenceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .score
            .total_cmp(&records[a].score)
            .then(records[a].k.cmp(&records[b].k))
    });
    order
}

/// Record positions ordered by ascending score, ties by training index.
pub fn rank_ascending(records: &[InfluenceRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .score
            .total_cmp(&records[b].score)
            .then(records[a].k.cmp(&records[b].k))
    });
    order
}

fn accuracy(prep: &Prepared, params: &ParamVector, rows: &[usize]) -> CliResult<f64> {
    Ok(model::accuracy(&prep.spec, params, &prep.data, rows)?)
}

fn retrained_accuracy(prep: &Prepared, cfg: &ExperimentConfig, removed: &[usize], test: &[usize]) -> CliResult<f64> {
    if removed.is_empty() {
        return accuracy(prep, &prep.params, test);
    }
    let w = retrain_without(&prep.spec, &prep.data, removed, &cfg.sam)?;
    accuracy(prep, &w, test)
}

/// Mean test accuracy after retraining without `m` random training rows,
/// over `random_trials` draws.
fn random_removal_accuracy(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    m: usize,
    test: &[usize],
    tag: u64,
) -> CliResult<f64> {
    let train = prep.data.train_indices();
    let accs = (0..cfg.random_trials)
        .into_par_iter()
        .map(|trial| {
            let removed = random_subset(&train, m, derive(cfg.seed, tag + 1000 * trial as u64 + m as u64));
            retrained_accuracy(prep, cfg, &removed, test)
        })
        .collect::<CliResult<Vec<f64>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Train.as_str();
    fs::create_dir_all(&cfg.out).map_err(|e| io_at(&cfg.out, e))?;
    let path = cfg.out.join(format!("{}.samt", file_stem(id, &prep.digest)));
    write_trajectory(&prep.trajectory, &path)?;
    let train = prep.data.train_indices();
    let scale = 1.0 / train.len() as f64;
    let (steps, losses): (Vec<f64>, Vec<f64>) = prep
        .trajectory
        .checkpoints
        .par_iter()
        .map(|c| {
            let loss = model::subset_loss(&prep.spec, &c.params, &prep.data, &train, scale)?;
            Ok((c.step as f64, loss))
        })
        .collect::<samattr::Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let mut report = Report::default();
    report.push(Run::new(id, &prep.digest, "train_loss", steps, losses));
    let t = cfg.sam.steps as f64;
    report.push(Run::new(id, &prep.digest, "train_accuracy", vec![t], vec![accuracy(&prep, &prep.params, &train)?]));
    for split in [Split::Val, Split::Test] {
        let r = prep.data.indices(split);
        if !r.is_empty() {
            let metric = format!("{}_accuracy", split.as_str());
            report.push(Run::new(id, &prep.digest, metric, vec![t], vec![accuracy(&prep, &prep.params, &r)?]));
        }
    }
    Ok(report)
}

pub fn cmd_attribute(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Attribute.as_str();
    let records = score_points(&prep, cfg, &prep.data.train_indices())?;
    let ks: Vec<f64> = records.iter().map(|r| r.k as f64).collect();
    let mut report = Report::default();
    report.push(
        Run::new(id, &prep.digest, "score", ks.clone(), records.iter().map(|r| r.score).collect())
            .with_wall(records.iter().map(|r| r.wall_time).collect()),
    );
    report.push(Run::new(
        id,
        &prep.digest,
        "influence_norm",
        ks,
        records.iter().map(|r| r.influence.norm2()).collect(),
    ));
    Ok(report)
}

pub fn cmd_valuate(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Valuate.as_str();
    let test = rows(&prep.data, Split::Test)?;
    let train = prep.data.train_indices();
    let records = score_points(&prep, cfg, &train)?;
    let order = rank_descending(&records);
    let curves = cfg
        .fractions
        .par_iter()
        .map(|&f| {
            let m = count(f, train.len());
            let top: Vec<usize> = order[..m].iter().map(|&i| records[i].k).collect();
            let retrained = retrained_accuracy(&prep, cfg, &top, &test)?;
            let ifs: Vec<&ParamVector> = order[..m].iter().map(|&i| &records[i].influence).collect();
            let edited = accuracy(&prep, &edit_model_batch(&prep.params, &ifs)?, &test)?;
            let random = if m == 0 {
                retrained
            } else {
                random_removal_accuracy(&prep, cfg, m, &test, 1)?
            };
            Ok((retrained, edited, random))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let x = cfg.fractions.clone();
    let mut report = Report::default();
    report.push(Run::new(id, &prep.digest, "valuable_retrain_accuracy", x.clone(), curves.iter().map(|c| c.0).collect()));
    report.push(Run::new(id, &prep.digest, "valuable_edit_accuracy", x.clone(), curves.iter().map(|c| c.1).collect()));
    report.push(Run::new(id, &prep.digest, "random_retrain_accuracy", x, curves.iter().map(|c| c.2).collect()));
    Ok(report)
}

/// Share of `flipped` among the first `m` entries of `ranking`.
fn recall(ranking: &[usize], flipped: &[usize], m: usize) -> f64 {
    let hits = ranking[..m].iter().filter(|k| flipped.binary_search(k).is_ok()).count();
    hits as f64 / flipped.len() as f64
}

pub fn cmd_detect_noise(cfg: &ExperimentConfig) -> CliResult<Report> {
    if cfg.flip_fraction <= 0.0 {
        return Err(CliError::config("detect-noise needs flip_fraction > 0"));
    }
    let id = Command::DetectNoise.as_str();
    let data = ingest(cfg)?;
    let train = data.train_indices();
    let m = count(cfg.flip_fraction, train.len());
    if m == 0 {
        return Err(CliError::config("flip_fraction selects no training rows"));
    }
    let flipped = random_subset(&train, m, derive(cfg.seed, 7));
    let prep = prepare_with_data(cfg, data.with_flipped_labels(&flipped))?;
    let test = rows(&prep.data, Split::Test)?;
    let records = score_points(&prep, cfg, &train)?;
    let by_score: Vec<usize> = rank_ascending(&records).iter().map(|&i| records[i].k).collect();
    let shuffles: Vec<Vec<usize>> = (0..cfg.random_trials)
        .map(|trial| {
            let mut order = train.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(cfg.seed, 8 + trial as u64)));
            order
        })
        .collect();
    let n = train.len();
    let qs = cfg.inspect_fractions.clone();
    let mut report = Report::default();
    report.push(Run::new(
        id,
        &prep.digest,
        "recall_by_score",
        qs.clone(),
        qs.iter().map(|&q| recall(&by_score, &flipped, count(q, n))).collect(),
    ));
    report.push(Run::new(
        id,
        &prep.digest,
        "recall_random",
        qs.clone(),
        qs.iter()
            .map(|&q| {
                let total: f64 = shuffles.iter().map(|o| recall(o, &flipped, count(q, n))).sum();
                total / shuffles.len() as f64
            })
            .collect(),
    ));
    let curves = cfg
        .fractions
        .par_iter()
        .map(|&f| {
            let r = count(f, n);
            let removed: Vec<usize> = by_score[..r].to_vec();
            let scored = retrained_accuracy(&prep, cfg, &removed, &test)?;
            let random = if r == 0 {
                scored
            } else {
                random_removal_accuracy(&prep, cfg, r, &test, 2)?
            };
            Ok((scored, random))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let x = cfg.fractions.clone();
    report.push(Run::new(id, &prep.digest, "accuracy_lowest_removed", x.clone(), curves.iter().map(|c| c.0).collect()));
    report.push(Run::new(id, &prep.digest, "accuracy_random_removed", x, curves.iter().map(|c| c.1).collect()));
    Ok(report)
}

/// Scores of every record against a single point `t`: the first-order
/// change of `ℓ_t` when each training point is removed.
pub fn per_point_scores(prep: &Prepared, records: &[InfluenceRecord], t: usize) -> CliResult<Vec<f64>> {
    let g = model::example_grad(&prep.spec, &prep.params, &prep.data, t)?;
    Ok(records.iter().map(|r| -g.dot(&r.influence)).collect())
}

/// `(helpful, harmful)`: up to `m` `(training index, score)` pairs with the
/// largest and the smallest scores for point `t`.
pub type TraceLists = (Vec<(usize, f64)>, Vec<(usize, f64)>);

pub fn trace_lists(prep: &Prepared, records: &[InfluenceRecord], t: usize, m: usize) -> CliResult<TraceLists> {
    let scores = per_point_scores(prep, records, t)?;
    let scored: Vec<InfluenceRecord> = records
        .iter()
        .zip(&scores)
        .map(|(r, &s)| InfluenceRecord {
            score: s,
            ..r.clone()
        })
        .collect();
    let m = m.min(records.len());
    let pick = |order: Vec<usize>| order[..m].iter().map(|&i| (scored[i].k, scored[i].score)).collect();
    Ok((pick(rank_descending(&scored)), pick(rank_ascending(&scored))))
}

pub fn cmd_trace(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Trace.as_str();
    let test = rows(&prep.data, Split::Test)?;
    let mut wrong = Vec::new();
    for &t in &test {
        if model::predict(&prep.spec, &prep.params, prep.data.row(t))?.0 != prep.data.label(t) {
            wrong.push(t);
        }
    }
    let mut report = Report::default();
    if wrong.is_empty() {
        return Ok(report);
    }
    let records = score_points(&prep, cfg, &prep.data.train_indices())?;
    for t in wrong {
        let (helpful, harmful) = trace_lists(&prep, &records, t, cfg.top_m)?;
        for (name, list) in [("helpful", helpful), ("harmful", harmful)] {
            report.push(Run::new(
                id,
                &prep.digest,
                format!("{name}:{t}"),
                list.iter().map(|p| p.0 as f64).collect(),
                list.iter().map(|p| p.1).collect(),
            ));
        }
    }
    Ok(report)
}

pub fn cmd_edit(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Edit.as_str();
    let test = rows(&prep.data, Split::Test)?;
    let train = prep.data.train_indices();
    if let Some(k) = cfg.edit_points.iter().find(|k| !train.contains(k)) {
        return Err(CliError::config(format!("edit point {k} is not a training row")));
    }
    let records = score_points(&prep, cfg, &train)?;
    let position = |k: usize| train.binary_search(&k).unwrap();
    let norm = prep.params.norm2().max(f64::MIN_POSITIVE);
    let singles = cfg
        .edit_points
        .par_iter()
        .map(|&k| {
            let edited = edit_model(&prep.params, &records[position(k)].influence)?;
            let loo = loo_retrain(&prep.spec, &prep.data, k, &cfg.sam)?;
            Ok(((&edited - &loo).norm2() / norm, (&prep.params - &loo).norm2() / norm))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let ks: Vec<f64> = cfg.edit_points.iter().map(|&k| k as f64).collect();
    let mut report = Report::default();
    report.push(Run::new(id, &prep.digest, "edit_distance", ks.clone(), singles.iter().map(|s| s.0).collect()));
    report.push(Run::new(id, &prep.digest, "loo_displacement", ks, singles.iter().map(|s| s.1).collect()));

    let m = count(cfg.edit_fraction, train.len());
    let lowest: Vec<usize> = rank_ascending(&records)[..m].to_vec();
    let removed: Vec<usize> = lowest.iter().map(|&i| records[i].k).collect();
    let ifs: Vec<&ParamVector> = lowest.iter().map(|&i| &records[i].influence).collect();
    let edited = accuracy(&prep, &edit_model_batch(&prep.params, &ifs)?, &test)?;
    let retrained = retrained_accuracy(&prep, cfg, &removed, &test)?;
    let f = vec![cfg.edit_fraction];
    report.push(Run::new(id, &prep.digest, "batch_edit_accuracy", f.clone(), vec![edited]));
    report.push(Run::new(id, &prep.digest, "batch_retrain_accuracy", f, vec![retrained]));
    Ok(report)
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> CliResult<Report> {
    let prep = prepare(cfg)?;
    let id = Command::Calibrate.as_str();
    let train = prep.data.train_indices();
    let size = cfg.calibration_sample.unwrap_or(train.len());
    if size == 0 || size > train.len() {
        return Err(CliError::config(format!(
            "calibration_sample must lie in 1..={}",
            train.len()
        )));
    }
    let ks = if size == train.len() {
        train.clone()
    } else {
        random_subset(&train, size, derive(cfg.seed, 3))
    };
    let val = rows(&prep.data, Split::Val)?;
    let records = score_points(&prep, cfg, &ks)?;
    let predicted: Vec<f64> = records.iter().map(|r| r.score).collect();
    let actual = loo_validation_deltas(&prep.spec, &prep.data, &cfg.sam, &prep.params, &ks, &val)?;
    let summary = calibrate_scores(&predicted, &actual, cfg.estimator.as_str())?;
    let n = vec![summary.n_points as f64];
    let mut report = Report::default();
    report.push(Run::new(id, &prep.digest, "predicted_vs_actual", predicted, actual));
    report.push(Run::new(id, &prep.digest, "pearson", n.clone(), vec![summary.pearson]));
    report.push(Run::new(id, &prep.digest, "spearman", n.clone(), vec![summary.spearman]));
    report.push(Run::new(id, &prep.digest, "sign_agreement", n, vec![summary.sign_agreement]));
    Ok(report)
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> CliResult<Report> {
    match cmd {
        Command::Train => cmd_train(cfg),
        Command::Attribute => cmd_attribute(cfg),
        Command::Valuate => cmd_valuate(cfg),
        Command::DetectNoise => cmd_detect_noise(cfg),
        Command::Trace => cmd_trace(cfg),
        Command::Edit => cmd_edit(cfg),
        Command::Calibrate => cmd_calibrate(cfg),
    }
}

/// Runs `cmd` and writes its report, plot data and the resolved
/// configuration under `cfg.out`.
pub fn run_and_emit(cmd: Command, cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let report = run(cmd, cfg)?;
    let mut paths = emit_report(&report, &cfg.out)?;
    let config_path = cfg.out.join(format!("{}.config", file_stem(cmd.as_str(), &cfg.digest())));
    fs::write(&config_path, cfg.to_text()).map_err(|e| io_at(&config_path, e))?;
    paths.push(config_path);
    Ok(paths)
}
