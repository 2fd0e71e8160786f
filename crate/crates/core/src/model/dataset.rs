use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Row-major feature matrix with integer labels and a split tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    split: Vec<Split>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        split: Vec<Split>,
        classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::input("dataset must contain at least one row"));
        }
        if dim == 0 || features.len() != n * dim {
            return Err(Error::input(format!(
                "feature matrix has {} values, expected {n} rows x {dim} columns",
                features.len()
            )));
        }
        if split.len() != n {
            return Err(Error::input(format!(
                "{} split tags for {n} rows",
                split.len()
            )));
        }
        if classes < 2 {
            return Err(Error::input("need at least two classes"));
        }
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::input(format!(
                "row {i} has label {} outside 0..{classes}",
                labels[i]
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("row {} has a non-finite feature", i / dim)));
        }
        Ok(Self {
            features,
            dim,
            labels,
            split,
            classes,
        })
    }

    /// Convenience constructor tagging every row as training data.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("rows have differing lengths"));
        }
        let split = vec![Split::Train; rows.len()];
        Self::new(rows.concat(), dim, labels, split, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.split[i]
    }

    /// Row indices carrying the given split tag, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    /// Maps label `y` to `(y + 1) mod C` on the given rows.
    pub fn with_flipped_labels(&self, rows: &[usize]) -> Dataset {
        let mut out = self.clone();
        for &i in rows {
            out.labels[i] = (out.labels[i] + 1) % self.classes;
        }
        out
    }

    pub fn with_split(&self, split: Vec<Split>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            self.dim,
            self.labels.clone(),
            split,
            self.classes,
        )
    }

    /// Rows of `other` appended below `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim || self.classes != other.classes {
            return Err(Error::input("cannot concatenate datasets of different shape"));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut split = self.split.clone();
        split.extend_from_slice(&other.split);
        Dataset::new(features, self.dim, labels, split, self.classes)
    }
}

/// Isotropic Gaussian clusters, one per class.
///
/// The mean of class `c` has every coordinate equal to
/// `sep * (c - (C - 1) / 2)`, so consecutive class means differ by `sep`
/// in each coordinate. Noise is standard normal. Labels cycle `i mod C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blobs {
    pub dim: usize,
    pub classes: usize,
    pub sep: f64,
    pub seed: u64,
}

impl Blobs {
    pub fn new(dim: usize, classes: usize, sep: f64, seed: u64) -> Result<Self> {
        if dim == 0 || classes < 2 || !sep.is_finite() {
            return Err(Error::config(format!(
                "blobs need d >= 1, C >= 2 and finite sep (got d={dim}, C={classes}, sep={sep})"
            )));
        }
        Ok(Self {
            dim,
            classes,
            sep,
            seed,
        })
    }

    fn center(&self, class: usize) -> f64 {
        self.sep * (class as f64 - (self.classes as f64 - 1.0) / 2.0)
    }

    /// `count` rows tagged `split`. Every split draws from its own random
    /// stream, so the training rows do not depend on how many held-out
    /// rows are requested.
    pub fn sample(&self, count: usize, split: Split) -> Result<Dataset> {
        let stream = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut features = Vec::with_capacity(count * self.dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let y = i % self.classes;
            let mu = self.center(y);
            for _ in 0..self.dim {
                let z: f64 = rng.sample(StandardNormal);
                features.push(mu + z);
            }
            labels.push(y);
        }
        Dataset::new(features, self.dim, labels, vec![split; count], self.classes)
    }

    /// Training rows followed by validation and test rows.
    pub fn with_splits(&self, n_train: usize, n_val: usize, n_test: usize) -> Result<Dataset> {
        let mut ds = self.sample(n_train, Split::Train)?;
        for (count, split) in [(n_val, Split::Val), (n_test, Split::Test)] {
            if count > 0 {
                ds = ds.concat(&self.sample(count, split)?)?;
            }
        }
        Ok(ds)
    }
}

/// `blobs(n, d, C, sep, seed)`: `n` training rows.
pub fn blobs(n: usize, dim: usize, classes: usize, sep: f64, seed: u64) -> Result<Dataset> {
    Blobs::new(dim, classes, sep, seed)?.sample(n, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_shapes() {
        assert!(Dataset::new(vec![0.0; 4], 2, vec![0, 2], vec![Split::Train; 2], 2).is_err());
        assert!(Dataset::new(vec![0.0; 3], 2, vec![0, 1], vec![Split::Train; 2], 2).is_err());
        assert!(Dataset::new(vec![], 2, vec![], vec![], 2).is_err());
        assert!(Dataset::new(vec![f64::NAN, 0.0], 2, vec![0], vec![Split::Train], 2).is_err());
    }

    #[test]
    fn blobs_shape_and_balance() {
        let ds = blobs(200, 10, 2, 3.0, 1).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.dim(), 10);
        assert_eq!(ds.labels().iter().filter(|&&y| y == 1).count(), 100);
    }

    #[test]
    fn train_rows_independent_of_holdout_size() {
        let b = Blobs::new(3, 3, 1.0, 9).unwrap();
        let a = b.with_splits(20, 5, 0).unwrap();
        let c = b.with_splits(20, 50, 7).unwrap();
        for i in 0..20 {
            assert_eq!(a.row(i), c.row(i));
        }
        assert_eq!(c.indices(Split::Val).len(), 50);
        assert_eq!(c.indices(Split::Test).len(), 7);
    }

    #[test]
    fn flip_wraps_labels() {
        let ds = blobs(6, 2, 3, 1.0, 0).unwrap();
        let f = ds.with_flipped_labels(&[2, 4]);
        assert_eq!(f.label(2), 0);
        assert_eq!(f.label(4), 2);
        assert_eq!(f.label(0), 0);
    }
}
