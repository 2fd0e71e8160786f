use std::fs;

use samattr::model::{self, Split};
use samattr::Dataset;
use samattr_cli::config::ExperimentConfig;
use samattr_cli::error::CliError;
use samattr_cli::experiments::{
    cmd_detect_noise, cmd_valuate, per_point_scores, prepare, prepare_with_data, run_and_emit,
    score_points, trace_lists, Command,
};
use samattr_cli::ingest::ingest;
use samattr_cli::report::Report;

fn small(extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "n_train = 60\nn_val = 30\nn_test = 60\ndim = 4\nsep = 1.5\nbatch_size = 60\nsteps = 400\n\
         neumann_damp = 0\nrandom_trials = 2",
    )
    .unwrap();
    for line in extra.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn blobs_suite_is_separable_by_a_trained_logistic_model() {
    let cfg = ExperimentConfig::parse(
        "n_train = 200\nn_val = 0\nn_test = 0\ndim = 10\nclasses = 2\nsep = 3\ndata_seed = 1",
    )
    .unwrap();
    let data = ingest(&cfg).unwrap();
    assert_eq!((data.len(), data.dim()), (200, 10));
    let prep = prepare_with_data(&cfg, data).unwrap();
    let train = prep.data.train_indices();
    assert!(model::accuracy(&prep.spec, &prep.params, &prep.data, &train).unwrap() > 0.99);
}

#[test]
fn valuate_without_removal_reports_the_baseline() {
    let cfg = small("fractions = 0, 0.05, 0.1");
    let report = cmd_valuate(&cfg).unwrap();
    let prep = prepare(&cfg).unwrap();
    let test = prep.data.indices(Split::Test);
    let base = model::accuracy(&prep.spec, &prep.params, &prep.data, &test).unwrap();
    for metric in ["valuable_retrain_accuracy", "valuable_edit_accuracy", "random_retrain_accuracy"] {
        let run = report.find(metric).unwrap();
        assert_eq!(run.x, vec![0.0, 0.05, 0.1]);
        assert_eq!(run.y[0], base, "{metric}");
    }
}

#[test]
fn curve_files_have_one_row_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("fractions = 0, 0.02, 0.04, 0.06");
    cfg.out = dir.path().to_path_buf();
    let paths = run_and_emit(Command::Valuate, &cfg).unwrap();
    let curves: Vec<_> = paths.iter().filter(|p| p.extension().unwrap() == "tsv").collect();
    assert_eq!(curves.len(), 3);
    for p in curves {
        assert!(p.file_name().unwrap().to_str().unwrap().contains(&cfg.digest()[..16]));
        assert_eq!(fs::read_to_string(p).unwrap().lines().count(), 4);
    }
    let report_path = paths.iter().find(|p| p.extension().unwrap() == "report").unwrap();
    let report = Report::parse(&fs::read_to_string(report_path).unwrap()).unwrap();
    assert!(report.runs.iter().all(|r| r.digest == cfg.digest()));
}

#[test]
fn noise_detection_refuses_zero_flips() {
    let cfg = small("flip_fraction = 0");
    assert!(matches!(cmd_detect_noise(&cfg), Err(CliError::Config(_))));
}

#[test]
fn random_recall_tracks_the_inspected_fraction() {
    let cfg = small("flip_fraction = 0.2\nrandom_trials = 20\nfractions = 0\ninspect_fractions = 0.2, 0.5, 0.8");
    let report = cmd_detect_noise(&cfg).unwrap();
    let run = report.find("recall_random").unwrap();
    for (q, r) in run.x.iter().zip(&run.y) {
        assert!((q - r).abs() <= 0.1, "q {q} recall {r}");
    }
    let scored = report.find("recall_by_score").unwrap();
    assert_eq!(*scored.y.last().unwrap(), 1.0);
}

/// Blobs data with two extra test rows copying training row `j`: one with
/// its label and one with the other label.
fn with_planted_copies(data: &Dataset, j: usize) -> (Dataset, usize, usize) {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for i in 0..data.len() {
        features.extend_from_slice(data.row(i));
        labels.push(data.label(i));
        split.push(data.split(i));
    }
    for label in [data.label(j), 1 - data.label(j)] {
        features.extend_from_slice(data.row(j));
        labels.push(label);
        split.push(Split::Test);
    }
    let n = data.len();
    let planted = Dataset::new(features, data.dim(), labels, split, 2).unwrap();
    (planted, n, n + 1)
}

#[test]
fn planted_duplicate_shows_up_in_trace_lists() {
    let cfg = small("sep = 1.0");
    let base = prepare(&cfg).unwrap();
    let train = base.data.train_indices();
    // The hardest training point has the largest gradient, so its copy
    // dominates the lists.
    let j = *train
        .iter()
        .max_by(|&&a, &&b| {
            let la = model::example_loss(&base.spec, &base.params, base.data.row(a), base.data.label(a)).unwrap();
            let lb = model::example_loss(&base.spec, &base.params, base.data.row(b), base.data.label(b)).unwrap();
            la.total_cmp(&lb)
        })
        .unwrap();
    let (data, same, conflict) = with_planted_copies(&base.data, j);
    let prep = prepare_with_data(&cfg, data).unwrap();
    let records = score_points(&prep, &cfg, &train).unwrap();
    let (helpful, _) = trace_lists(&prep, &records, same, 5).unwrap();
    assert!(helpful.iter().any(|&(k, s)| k == j && s > 0.0), "{helpful:?}");
    let (_, harmful) = trace_lists(&prep, &records, conflict, 5).unwrap();
    assert!(harmful.iter().any(|&(k, s)| k == j && s < 0.0), "{harmful:?}");
}

#[test]
fn trace_lists_truncate_and_scores_add_up() {
    let cfg = small("");
    let prep = prepare(&cfg).unwrap();
    let train = prep.data.train_indices();
    let records = score_points(&prep, &cfg, &train).unwrap();
    let (helpful, harmful) = trace_lists(&prep, &records, prep.data.indices(Split::Test)[0], 10_000).unwrap();
    assert_eq!((helpful.len(), harmful.len()), (train.len(), train.len()));
    assert!(helpful.windows(2).all(|w| w[0].1 >= w[1].1));
    let mut summed = vec![0.0; records.len()];
    for t in prep.data.indices(Split::Val) {
        for (acc, s) in summed.iter_mut().zip(per_point_scores(&prep, &records, t).unwrap()) {
            *acc += s;
        }
    }
    for (r, s) in records.iter().zip(&summed) {
        assert!((r.score - s).abs() <= 1e-10, "{} vs {s}", r.score);
    }
}

#[test]
fn saved_trajectory_is_reused_only_with_matching_settings() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("");
    cfg.out = dir.path().to_path_buf();
    run_and_emit(Command::Train, &cfg).unwrap();
    let samt = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().unwrap() == "samt")
        .unwrap();
    let fresh = prepare(&cfg).unwrap();
    let mut reuse = cfg.clone();
    reuse.trajectory = Some(samt.clone());
    let loaded = prepare(&reuse).unwrap();
    assert_eq!(loaded.params, fresh.params);
    reuse.set("steps", "401").unwrap();
    assert!(matches!(prepare(&reuse), Err(CliError::Config(_))));
}

#[test]
fn every_experiment_is_seed_deterministic() {
    let cfg = small("fractions = 0, 0.1\nedit_points = 0, 3\ncalibration_sample = 20\nsep = 0.7");
    for cmd in [
        Command::Train,
        Command::Attribute,
        Command::Valuate,
        Command::DetectNoise,
        Command::Trace,
        Command::Edit,
        Command::Calibrate,
    ] {
        let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut c = cfg.clone();
                c.out = dir.path().to_path_buf();
                let mut files: Vec<_> = run_and_emit(cmd, &c)
                    .unwrap()
                    .into_iter()
                    .filter(|p| p.extension().unwrap() == "tsv")
                    .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
                    .collect();
                files.sort();
                files
            })
            .collect();
        assert!(!runs[0].is_empty(), "{cmd:?} wrote no curves");
        assert_eq!(runs[0], runs[1], "{cmd:?}");
    }
}
