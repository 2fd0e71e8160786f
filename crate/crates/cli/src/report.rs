//! Experiment reports and their on-disk form.
//!
//! A report file holds one run per line as space-separated `key=value`
//! fields; list values are comma separated:
//!
//! ```text
//! experiment=valuate digest=3f2a... metric=random_retrain_accuracy x=0,0.1 y=0.95,0.94 wall=0.2,0.3
//! ```
//!
//! Each run also gets a plot-data file holding its `x` and `y` columns
//! separated by a tab. Wall times stay out of plot data so that reruns
//! produce identical files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub experiment: String,
    pub digest: String,
    pub metric: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Seconds spent per point, or empty.
    pub wall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub runs: Vec<Run>,
}

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|t| t.parse().ok()).collect()
}

impl Run {
    pub fn new(experiment: &str, digest: &str, metric: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        Self {
            experiment: experiment.to_string(),
            digest: digest.to_string(),
            metric: metric.into(),
            x,
            y,
            wall: Vec::new(),
        }
    }

    pub fn with_wall(mut self, wall: Vec<f64>) -> Self {
        self.wall = wall;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        for (name, s) in [
            ("experiment", &self.experiment),
            ("digest", &self.digest),
            ("metric", &self.metric),
        ] {
            if !valid_token(s) {
                return Err(CliError::Data(format!("run {name} {s:?} is not a plain token")));
            }
        }
        if self.x.len() != self.y.len() {
            return Err(CliError::Data(format!(
                "run {}: {} x values but {} y values",
                self.metric,
                self.x.len(),
                self.y.len()
            )));
        }
        if self.x.iter().chain(&self.y).chain(&self.wall).any(|v| !v.is_finite()) {
            return Err(CliError::Numerical(format!("run {} has non-finite values", self.metric)));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "experiment={} digest={} metric={} x={} y={} wall={}",
            self.experiment,
            self.digest,
            self.metric,
            fmt_list(&self.x),
            fmt_list(&self.y),
            fmt_list(&self.wall)
        )
    }

    fn from_line(line: &str, lineno: usize) -> CliResult<Run> {
        let bad = |what: &str| CliError::Data(format!("report line {lineno}: {what}"));
        let mut run = Run::new("", "", "", Vec::new(), Vec::new());
        let mut seen = [false; 6];
        for field in line.split(' ') {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("field without '='"))?;
            let slot = match k {
                "experiment" => {
                    run.experiment = v.to_string();
                    0
                }
                "digest" => {
                    run.digest = v.to_string();
                    1
                }
                "metric" => {
                    run.metric = v.to_string();
                    2
                }
                "x" => {
                    run.x = parse_list(v).ok_or_else(|| bad("bad x list"))?;
                    3
                }
                "y" => {
                    run.y = parse_list(v).ok_or_else(|| bad("bad y list"))?;
                    4
                }
                "wall" => {
                    run.wall = parse_list(v).ok_or_else(|| bad("bad wall list"))?;
                    5
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            };
            if std::mem::replace(&mut seen[slot], true) {
                return Err(bad(&format!("duplicate key {k:?}")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("missing keys"));
        }
        run.validate()?;
        Ok(run)
    }

    /// `x<TAB>y` lines.
    pub fn plot_data(&self) -> String {
        self.x
            .iter()
            .zip(&self.y)
            .map(|(x, y)| format!("{x}\t{y}\n"))
            .collect()
    }
}

impl Report {
    pub fn push(&mut self, run: Run) {
        self.runs.push(run);
    }

    pub fn to_text(&self) -> String {
        self.runs.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn parse(text: &str) -> CliResult<Report> {
        let runs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| Run::from_line(l, i + 1))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Report { runs })
    }

    pub fn find(&self, metric: &str) -> Option<&Run> {
        self.runs.iter().find(|r| r.metric == metric)
    }
}

/// Short digest prefix used in file names.
pub fn file_stem(experiment: &str, digest: &str) -> String {
    format!("{experiment}-{}", &digest[..digest.len().min(16)])
}

/// Writes one report file per experiment id and one plot-data file per
/// run. Returns the written paths in order.
pub fn emit_report(report: &Report, dir: &Path) -> CliResult<Vec<PathBuf>> {
    for run in &report.runs {
        run.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let write = |path: PathBuf, text: String| -> CliResult<PathBuf> {
        fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    };
    let mut written = Vec::new();
    let mut groups: Vec<(&str, &str)> = Vec::new();
    for run in &report.runs {
        let key = (run.experiment.as_str(), run.digest.as_str());
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (experiment, digest) in groups {
        let part = Report {
            runs: report
                .runs
                .iter()
                .filter(|r| r.experiment == experiment && r.digest == digest)
                .cloned()
                .collect(),
        };
        let stem = file_stem(experiment, digest);
        written.push(write(dir.join(format!("{stem}.report")), part.to_text())?);
        for run in &part.runs {
            let name = format!("{stem}-{}.tsv", run.metric.replace(':', "_"));
            written.push(write(dir.join(name), run.plot_data())?);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        Report {
            runs: vec![
                Run::new("valuate", "abcdef0123456789ff", "acc", vec![0.0, 0.1], vec![0.95, 1.0 / 3.0])
                    .with_wall(vec![1e-7, 2.5]),
                Run::new("valuate", "abcdef0123456789ff", "empty", vec![], vec![]),
            ],
        }
    }

    #[test]
    fn text_round_trip() {
        let r = sample();
        assert_eq!(Report::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Report::parse("experiment=a digest=b metric=c x=1 y=1,2 wall=").is_err());
        assert!(Report::parse("experiment=a digest=b metric=c x=1 y=z wall=").is_err());
        assert!(Report::parse("experiment=a digest=b metric=c x=1 y=1").is_err());
        let mut bad = sample();
        bad.runs[0].y[0] = f64::NAN;
        assert!(bad.runs[0].validate().is_err());
    }

    #[test]
    fn emits_report_and_curves() {
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(&sample(), dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let name = paths[0].file_name().unwrap().to_str().unwrap();
        assert_eq!(name, "valuate-abcdef0123456789.report");
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(Report::parse(&text).unwrap(), sample());
        let curve = fs::read_to_string(&paths[1]).unwrap();
        assert_eq!(curve.lines().count(), 2);
        assert_eq!(curve.lines().next().unwrap(), "0\t0.95");
    }
}
