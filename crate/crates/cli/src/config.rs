//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Every key has a default, so an empty file is a valid
//! configuration (the synthetic convex suite).
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `source` | `blobs`, `csv` or `idx` | `blobs` |
//! | `n_train`, `n_val`, `n_test` | blobs split sizes | 200, 100, 200 |
//! | `dim`, `classes`, `sep` | blobs shape and class separation | 10, 2, 3 |
//! | `data_seed` | blobs seed; empty means `seed` | empty |
//! | `csv_path`, `label_column`, `split_column` | CSV source | `label`, no split column |
//! | `idx_images`, `idx_labels`, `idx_limit` | IDX source | no limit |
//! | `val_fraction`, `test_fraction` | split for sources without split tags | 0.2, 0.2 |
//! | `model` | `logistic` or `mlp` | `logistic` |
//! | `hidden`, `activation` | MLP hidden widths and `tanh`/`relu` | empty, `tanh` |
//! | `rho`, `p`, `lambda` | SAM radius, norm exponent (`inf` allowed), L2 weight | 0.05, 2, 0.01 |
//! | `lr` | `0.5` or step decay `0:0.5,1000:0.1` | 0.5 |
//! | `batch_size`, `steps`, `record_stride`, `sampling` | schedule (`per-step` or `epoch`) | 200, 3000, 1, `per-step` |
//! | `estimator`, `gif_mode` | `if-fast`/`hif`/`gif`, `sgd`/`gd` | `if-fast`, `sgd` |
//! | `neumann_order`, `neumann_alpha`, `neumann_damp`, `neumann_zeta` | solver; `auto` alpha | 100000, `auto`, 0.01, 1e-13 |
//! | `fractions` | removal fractions | 0,0.02,0.04,0.06,0.08,0.1 |
//! | `flip_fraction` | label-noise fraction | 0.1 |
//! | `inspect_fractions` | inspection fractions for noise recall | 0.1,0.2,...,1 |
//! | `random_trials` | random-removal repetitions | 5 |
//! | `top_m` | list length for tracing | 5 |
//! | `calibration_sample` | points retrained in `calibrate`; empty means all | empty |
//! | `edit_points`, `edit_fraction` | single-point edits and batch-edit fraction | 0, 0.1 |
//! | `trajectory` | reuse a recorded trajectory instead of training | empty |
//! | `out` | output directory | `out` |
//! | `seed` | experiment seed | 0 |

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use samattr::influence::{Estimator, GifMode, NeumannConfig};
use samattr::{Activation, LrSchedule, ModelSpec, SamConfig, SamplingMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Blobs {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        sep: f64,
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        split_column: Option<String>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub mlp: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sam: SamConfig,
    pub estimator: Estimator,
    pub gif_mode: GifMode,
    pub neumann: NeumannConfig,
    pub fractions: Vec<f64>,
    pub flip_fraction: f64,
    pub inspect_fractions: Vec<f64>,
    pub random_trials: usize,
    pub top_m: usize,
    pub calibration_sample: Option<usize>,
    pub edit_points: Vec<usize>,
    pub edit_fraction: f64,
    pub trajectory: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: Source::Blobs {
                n_train: 200,
                n_val: 100,
                n_test: 200,
                dim: 10,
                classes: 2,
                sep: 3.0,
                seed: None,
            },
            val_fraction: 0.2,
            test_fraction: 0.2,
            mlp: false,
            hidden: Vec::new(),
            activation: Activation::Tanh,
            sam: SamConfig {
                rho: 0.05,
                p: 2.0,
                lambda: 0.01,
                lr: LrSchedule::Constant(0.5),
                batch_size: 200,
                steps: 3000,
                seed: 0,
                record_stride: 1,
                sampling: SamplingMode::PerStep,
            },
            estimator: Estimator::IfFast,
            gif_mode: GifMode::Sgd,
            neumann: NeumannConfig {
                order: 100_000,
                alpha: None,
                damp: 0.01,
                zeta: 1e-13,
            },
            fractions: vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1],
            flip_fraction: 0.1,
            inspect_fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            random_trials: 5,
            top_m: 5,
            calibration_sample: None,
            edit_points: vec![0],
            edit_fraction: 0.1,
            trajectory: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("{key}: cannot parse {value:?}")))
}

fn real(key: &str, value: &str) -> CliResult<f64> {
    let v = match value.trim() {
        "inf" | "infinity" => f64::INFINITY,
        s => num(key, s)?,
    };
    if v.is_nan() {
        return Err(CliError::config(format!("{key}: NaN is not allowed")));
    }
    Ok(v)
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn optional(value: &str) -> Option<&str> {
    let v = value.trim();
    (!v.is_empty()).then_some(v)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_lr(value: &str) -> CliResult<LrSchedule> {
    if value.contains(':') {
        let mut points = Vec::new();
        for part in value.split(',') {
            let (s, e) = part
                .split_once(':')
                .ok_or_else(|| CliError::config(format!("lr: bad segment {part:?}")))?;
            points.push((num("lr", s)?, real("lr", e)?));
        }
        Ok(LrSchedule::StepDecay(points))
    } else {
        Ok(LrSchedule::Constant(real("lr", value)?))
    }
}

fn format_lr(lr: &LrSchedule) -> String {
    match lr {
        LrSchedule::Constant(e) => e.to_string(),
        LrSchedule::StepDecay(points) => points
            .iter()
            .map(|(s, e)| format!("{s}:{e}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            entries.push((lineno + 1, key, value.trim()));
        }
        // The source kind decides which other keys are valid.
        entries.sort_by_key(|e| e.1 != "source");
        for (lineno, key, value) in entries {
            cfg.set(key, value)
                .map_err(|e| CliError::config(format!("line {lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "source" => {
                self.source = match value {
                    "blobs" => Self::default().source,
                    "csv" => Source::Csv {
                        path: PathBuf::new(),
                        label_column: "label".into(),
                        split_column: None,
                    },
                    "idx" => Source::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                        limit: None,
                    },
                    other => return Err(CliError::config(format!("unknown source {other:?}"))),
                }
            }
            "n_train" | "n_val" | "n_test" | "dim" | "classes" | "sep" | "data_seed" => {
                let Source::Blobs {
                    n_train,
                    n_val,
                    n_test,
                    dim,
                    classes,
                    sep,
                    seed,
                } = &mut self.source
                else {
                    return Err(CliError::config(format!("{key} only applies to source = blobs")));
                };
                match key {
                    "n_train" => *n_train = num(key, value)?,
                    "n_val" => *n_val = num(key, value)?,
                    "n_test" => *n_test = num(key, value)?,
                    "dim" => *dim = num(key, value)?,
                    "classes" => *classes = num(key, value)?,
                    "sep" => *sep = real(key, value)?,
                    _ => *seed = optional(value).map(|v| num(key, v)).transpose()?,
                }
            }
            "csv_path" | "label_column" | "split_column" => {
                let Source::Csv {
                    path,
                    label_column,
                    split_column,
                } = &mut self.source
                else {
                    return Err(CliError::config(format!("{key} only applies to source = csv")));
                };
                match key {
                    "csv_path" => *path = PathBuf::from(value),
                    "label_column" => *label_column = value.to_string(),
                    _ => *split_column = optional(value).map(String::from),
                }
            }
            "idx_images" | "idx_labels" | "idx_limit" => {
                let Source::Idx {
                    images,
                    labels,
                    limit,
                } = &mut self.source
                else {
                    return Err(CliError::config(format!("{key} only applies to source = idx")));
                };
                match key {
                    "idx_images" => *images = PathBuf::from(value),
                    "idx_labels" => *labels = PathBuf::from(value),
                    _ => *limit = optional(value).map(|v| num(key, v)).transpose()?,
                }
            }
            "val_fraction" => self.val_fraction = real(key, value)?,
            "test_fraction" => self.test_fraction = real(key, value)?,
            "model" => {
                self.mlp = match value {
                    "logistic" => false,
                    "mlp" => true,
                    other => return Err(CliError::config(format!("unknown model {other:?}"))),
                }
            }
            "hidden" => self.hidden = list(key, value)?,
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    other => return Err(CliError::config(format!("unknown activation {other:?}"))),
                }
            }
            "rho" => self.sam.rho = real(key, value)?,
            "p" => self.sam.p = real(key, value)?,
            "lambda" => self.sam.lambda = real(key, value)?,
            "lr" => self.sam.lr = parse_lr(value)?,
            "batch_size" => self.sam.batch_size = num(key, value)?,
            "steps" => self.sam.steps = num(key, value)?,
            "record_stride" => self.sam.record_stride = num(key, value)?,
            "sampling" => {
                self.sam.sampling = match value {
                    "per-step" => SamplingMode::PerStep,
                    "epoch" => SamplingMode::EpochShuffle,
                    other => return Err(CliError::config(format!("unknown sampling {other:?}"))),
                }
            }
            "estimator" => {
                self.estimator = Estimator::parse(value)
                    .ok_or_else(|| CliError::config(format!("unknown estimator {value:?}")))?
            }
            "gif_mode" => {
                self.gif_mode = match value {
                    "sgd" => GifMode::Sgd,
                    "gd" => GifMode::Gd,
                    other => return Err(CliError::config(format!("unknown gif mode {other:?}"))),
                }
            }
            "neumann_order" => self.neumann.order = num(key, value)?,
            "neumann_alpha" => {
                self.neumann.alpha = match value {
                    "auto" | "" => None,
                    v => Some(real(key, v)?),
                }
            }
            "neumann_damp" => self.neumann.damp = real(key, value)?,
            "neumann_zeta" => self.neumann.zeta = real(key, value)?,
            "fractions" => self.fractions = list(key, value)?,
            "flip_fraction" => self.flip_fraction = real(key, value)?,
            "inspect_fractions" => self.inspect_fractions = list(key, value)?,
            "random_trials" => self.random_trials = num(key, value)?,
            "top_m" => self.top_m = num(key, value)?,
            "calibration_sample" => {
                self.calibration_sample = optional(value).map(|v| num(key, v)).transpose()?
            }
            "edit_points" => self.edit_points = list(key, value)?,
            "edit_fraction" => self.edit_fraction = real(key, value)?,
            "trajectory" => self.trajectory = optional(value).map(PathBuf::from),
            "out" => self.out = PathBuf::from(value),
            "seed" => {
                self.seed = num(key, value)?;
                self.sam.seed = self.seed;
            }
            other => return Err(CliError::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(CliError::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        for &f in &self.fractions {
            unit("fractions", f)?;
        }
        for &f in &self.inspect_fractions {
            unit("inspect_fractions", f)?;
        }
        unit("edit_fraction", self.edit_fraction)?;
        unit("val_fraction", self.val_fraction)?;
        unit("test_fraction", self.test_fraction)?;
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(CliError::config("val_fraction + test_fraction must be below 1"));
        }
        if !(0.0..=0.5).contains(&self.flip_fraction) {
            return Err(CliError::config(format!(
                "flip_fraction must lie in [0, 0.5], got {}",
                self.flip_fraction
            )));
        }
        if self.mlp && self.hidden.is_empty() {
            return Err(CliError::config("model = mlp needs at least one hidden width"));
        }
        if self.random_trials == 0 {
            return Err(CliError::config("random_trials must be positive"));
        }
        self.neumann.validate()?;
        Ok(())
    }

    pub fn model_spec(&self, inputs: usize, classes: usize) -> ModelSpec {
        if self.mlp {
            let mut sizes = vec![inputs];
            sizes.extend_from_slice(&self.hidden);
            sizes.push(classes);
            ModelSpec::mlp(sizes, self.activation)
        } else {
            ModelSpec::logistic(inputs, classes)
        }
    }

    /// Every setting except `out` as sorted `(key, value)` pairs; parsing
    /// them back yields an equal configuration.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = Vec::new();
        match &self.source {
            Source::Blobs {
                n_train,
                n_val,
                n_test,
                dim,
                classes,
                sep,
                seed,
            } => {
                out.push(("source", "blobs".into()));
                out.push(("n_train", n_train.to_string()));
                out.push(("n_val", n_val.to_string()));
                out.push(("n_test", n_test.to_string()));
                out.push(("dim", dim.to_string()));
                out.push(("classes", classes.to_string()));
                out.push(("sep", sep.to_string()));
                out.push(("data_seed", seed.map(|s| s.to_string()).unwrap_or_default()));
            }
            Source::Csv {
                path,
                label_column,
                split_column,
            } => {
                out.push(("source", "csv".into()));
                out.push(("csv_path", path.display().to_string()));
                out.push(("label_column", label_column.clone()));
                out.push(("split_column", split_column.clone().unwrap_or_default()));
            }
            Source::Idx {
                images,
                labels,
                limit,
            } => {
                out.push(("source", "idx".into()));
                out.push(("idx_images", images.display().to_string()));
                out.push(("idx_labels", labels.display().to_string()));
                out.push(("idx_limit", limit.map(|l| l.to_string()).unwrap_or_default()));
            }
        }
        let sam = &self.sam;
        out.extend([
            ("val_fraction", self.val_fraction.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("model", if self.mlp { "mlp" } else { "logistic" }.into()),
            ("hidden", join(&self.hidden)),
            (
                "activation",
                match self.activation {
                    Activation::Tanh => "tanh",
                    Activation::Relu => "relu",
                }
                .into(),
            ),
            ("rho", sam.rho.to_string()),
            ("p", if sam.p.is_infinite() { "inf".into() } else { sam.p.to_string() }),
            ("lambda", sam.lambda.to_string()),
            ("lr", format_lr(&sam.lr)),
            ("batch_size", sam.batch_size.to_string()),
            ("steps", sam.steps.to_string()),
            ("record_stride", sam.record_stride.to_string()),
            (
                "sampling",
                match sam.sampling {
                    SamplingMode::PerStep => "per-step",
                    SamplingMode::EpochShuffle => "epoch",
                }
                .into(),
            ),
            ("estimator", self.estimator.as_str().into()),
            (
                "gif_mode",
                match self.gif_mode {
                    GifMode::Sgd => "sgd",
                    GifMode::Gd => "gd",
                }
                .into(),
            ),
            ("neumann_order", self.neumann.order.to_string()),
            (
                "neumann_alpha",
                self.neumann.alpha.map_or("auto".into(), |a| a.to_string()),
            ),
            ("neumann_damp", self.neumann.damp.to_string()),
            ("neumann_zeta", self.neumann.zeta.to_string()),
            ("fractions", join(&self.fractions)),
            ("flip_fraction", self.flip_fraction.to_string()),
            ("inspect_fractions", join(&self.inspect_fractions)),
            ("random_trials", self.random_trials.to_string()),
            ("top_m", self.top_m.to_string()),
            (
                "calibration_sample",
                self.calibration_sample.map(|s| s.to_string()).unwrap_or_default(),
            ),
            ("edit_points", join(&self.edit_points)),
            ("edit_fraction", self.edit_fraction.to_string()),
            (
                "trajectory",
                self.trajectory
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("seed", self.seed.to_string()),
        ]);
        let mut pairs: Vec<(String, String)> =
            out.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        pairs.sort();
        pairs
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Hex SHA-256 of the canonical settings. The output directory is not
    /// part of it, so reruns into different directories share a digest.
    pub fn digest(&self) -> String {
        let bytes = Sha256::digest(self.to_text().as_bytes());
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }
}
