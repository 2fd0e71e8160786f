//! Dataset loading: CSV tables, IDX image/label pairs and synthetic blobs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use samattr::model::Blobs;
use samattr::{Dataset, Split};

use crate::config::{ExperimentConfig, Source};
use crate::error::{CliError, CliResult};

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Parses a CSV table with a header row. `label_column` holds integer
/// class labels; `split_column`, when given, holds `train`/`val`/`test`.
/// Every other column is a numeric feature.
pub fn parse_csv(text: &str, label_column: &str, split_column: Option<&str>) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| data_err(format!("malformed header: {e}")))?
        .clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| data_err(format!("header has no label column {label_column:?}")))?;
    let split_at = match split_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| data_err(format!("header has no split column {name:?}")))?,
        ),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_at && Some(c) != split_at)
        .collect();
    if feature_cols.is_empty() {
        return Err(data_err("table has no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| data_err(format!("row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(data_err(format!(
                "row {row}: {} cells, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| {
                data_err(format!(
                    "row {row}, column {:?}: non-numeric cell {cell:?}",
                    &headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(data_err(format!(
                    "row {row}, column {:?}: non-finite value",
                    &headers[c]
                )));
            }
            features.push(v);
        }
        let cell = &record[label_at];
        labels.push(cell.parse::<usize>().map_err(|_| {
            data_err(format!(
                "row {row}, column {label_column:?}: label {cell:?} is not a class index"
            ))
        })?);
        splits.push(match split_at {
            Some(c) => Split::parse(&record[c]).ok_or_else(|| {
                data_err(format!("row {row}: unknown split {:?}", &record[c]))
            })?,
            None => Split::Train,
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset::new(features, feature_cols.len(), labels, splits, classes)?)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> CliResult<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| data_err(format!("{what}: truncated header")))
}

/// Parses an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`; every row is tagged as
/// training data.
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> CliResult<Dataset> {
    let magic = be_u32(images, 0, "images")?;
    if magic != 0x0803 {
        return Err(data_err(format!("images: magic {magic:#010x}, expected 0x00000803")));
    }
    let magic = be_u32(labels, 0, "labels")?;
    if magic != 0x0801 {
        return Err(data_err(format!("labels: magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(data_err(format!("{n} images but {n_labels} labels")));
    }
    let dim = rows * cols;
    if images.len() != 16 + n * dim {
        return Err(data_err(format!(
            "images: {} payload bytes, expected {}",
            images.len().saturating_sub(16),
            n * dim
        )));
    }
    if labels.len() != 8 + n {
        return Err(data_err(format!(
            "labels: {} payload bytes, expected {n}",
            labels.len().saturating_sub(8)
        )));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let features: Vec<f64> = images[16..16 + keep * dim]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = labels[8..8 + keep].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset::new(features, dim, labels, vec![Split::Train; keep], classes)?)
}

/// Retags a seeded random share of the rows as validation and test data
/// when the source carried no held-out rows.
pub fn assign_splits(data: &Dataset, val_fraction: f64, test_fraction: f64, seed: u64) -> CliResult<Dataset> {
    if !data.indices(Split::Val).is_empty() || !data.indices(Split::Test).is_empty() {
        return Ok(data.clone());
    }
    let n = data.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_val] {
        split[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        split[i] = Split::Test;
    }
    Ok(data.with_split(split)?)
}

/// Loads the dataset described by `cfg`.
pub fn ingest(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let data = match &cfg.source {
        Source::Blobs {
            n_train,
            n_val,
            n_test,
            dim,
            classes,
            sep,
            seed,
        } => {
            let blobs = Blobs::new(*dim, *classes, *sep, seed.unwrap_or(cfg.seed))?;
            return Ok(blobs.with_splits(*n_train, *n_val, *n_test)?);
        }
        Source::Csv {
            path,
            label_column,
            split_column,
        } => {
            let bytes = read(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| data_err(format!("{}: not UTF-8", path.display())))?;
            parse_csv(&text, label_column, split_column.as_deref())?
        }
        Source::Idx {
            images,
            labels,
            limit,
        } => parse_idx(&read(images)?, &read(labels)?, *limit)?,
    };
    assign_splits(&data, cfg.val_fraction, cfg.test_fraction, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_split_column() {
        let text = "a,b,label,split\n1,2,0,train\n3,4.5,1,val\n-1,0,1,test\n";
        let ds = parse_csv(text, "label", Some("split")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.row(1), &[3.0, 4.5]);
        assert_eq!(ds.split(2), Split::Test);
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let err = parse_csv("x,y,label\n1,2,0\n1,oops,1\n", "label", None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("\"y\""), "{msg}");
        assert!(parse_csv("x,y\n1,2\n", "label", None).is_err());
        assert!(parse_csv("x,label\n1,2,3\n", "label", None).is_err());
        assert!(parse_csv("x,label\n1,-1\n", "label", None).is_err());
    }

    fn idx_pair(n: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&0x0803u32.to_be_bytes());
        for v in [n, rows, cols] {
            images.extend_from_slice(&(v as u32).to_be_bytes());
        }
        images.extend((0..n * rows * cols).map(|i| (i % 256) as u8));
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0801u32.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        labels.extend((0..n).map(|i| (i % 10) as u8));
        (images, labels)
    }

    #[test]
    fn idx_counts_and_scaling() {
        let (images, labels) = idx_pair(10, 28, 28);
        let ds = parse_idx(&images, &labels, None).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (10, 784, 10));
        assert_eq!(ds.row(0)[255], 1.0);
        assert_eq!(parse_idx(&images, &labels, Some(4)).unwrap().len(), 4);
    }

    #[test]
    fn idx_rejects_bad_magic_and_counts() {
        let (mut images, labels) = idx_pair(3, 2, 2);
        assert!(parse_idx(&labels, &labels, None).is_err());
        images.pop();
        assert!(parse_idx(&images, &labels, None).is_err());
        let (images, _) = idx_pair(3, 2, 2);
        let (_, labels) = idx_pair(4, 2, 2);
        assert!(parse_idx(&images, &labels, None).is_err());
    }

    #[test]
    fn splits_are_assigned_once() {
        let text = "x,label\n".to_string() + &(0..20).map(|i| format!("{i},{}\n", i % 2)).collect::<String>();
        let ds = parse_csv(&text, "label", None).unwrap();
        let a = assign_splits(&ds, 0.2, 0.1, 3).unwrap();
        assert_eq!(a.indices(Split::Val).len(), 4);
        assert_eq!(a.indices(Split::Test).len(), 2);
        assert_eq!(assign_splits(&a, 0.5, 0.0, 9).unwrap(), a);
    }
}
