//! Numeric primitives shared by every other module: the flat parameter
//! vector, p-norms and their dual exponents, and seeded batch schedules.

use std::ops::{Add, Deref, Neg, Sub};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat real-valued parameter vector.
///
/// Parameters, perturbations, gradients and influence vectors all share
/// this representation. Constructors reject non-finite entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "parameter vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Wraps values whose finiteness the caller already guarantees.
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| c * v).collect())
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;

    fn add(self, rhs: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), rhs.len());
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), rhs.len());
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Neg for &ParamVector {
    type Output = ParamVector;

    fn neg(self) -> ParamVector {
        ParamVector(self.0.iter().map(|v| -v).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(Σ|v_i|^p)^(1/p)`, or `max|v_i|` when `p` is infinite.
pub fn p_norm(v: &[f64], p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!("norm exponent must lie in [1, inf], got {p}")));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::input(format!("entry {i} is not finite")));
    }
    let max = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return Ok(0.0);
    }
    if p.is_infinite() {
        return Ok(max);
    }
    if p == 1.0 {
        return Ok(v.iter().map(|x| x.abs()).sum());
    }
    if p == 2.0 {
        let s: f64 = v.iter().map(|x| (x / max) * (x / max)).sum();
        return Ok(max * s.sqrt());
    }
    // Scale by the largest magnitude so large p cannot overflow.
    let s: f64 = v.iter().map(|x| (x.abs() / max).powf(p)).sum();
    Ok(max * s.powf(1.0 / p))
}

/// The conjugate exponent `q` with `1/p + 1/q = 1`.
///
/// `p = 1` (dual infinity) is a domain error; callers treat it explicitly.
pub fn dual_exponent(p: f64) -> Result<f64> {
    if p.is_nan() || p <= 1.0 {
        return Err(Error::Domain(format!("dual exponent needs p > 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(1.0);
    }
    Ok(p / (p - 1.0))
}

/// How indices are drawn for each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Each step draws `b` distinct indices independently of every other step.
    #[default]
    PerStep,
    /// A fresh permutation per epoch, cut into consecutive batches; a
    /// trailing partial batch is dropped.
    EpochShuffle,
}

/// Per-step index sets over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub steps: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of steps in which `index` takes part.
    pub fn membership_count(&self, index: usize) -> usize {
        self.steps
            .iter()
            .filter(|s| s.binary_search(&index).is_ok())
            .count()
    }
}

pub fn sample_batches(n: usize, b: usize, steps: usize, seed: u64) -> Result<BatchSchedule> {
    sample_batches_with(n, b, steps, seed, SamplingMode::PerStep)
}

/// Draws `steps` batches of `b` distinct indices from `0..n`. Each batch
/// is sorted ascending.
pub fn sample_batches_with(
    n: usize,
    b: usize,
    steps: usize,
    seed: u64,
    mode: SamplingMode,
) -> Result<BatchSchedule> {
    if b == 0 || b > n {
        return Err(Error::config(format!("batch size {b} must lie in 1..={n}")));
    }
    if steps == 0 {
        return Err(Error::config("step count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(steps);
    if b == n {
        out.resize(steps, (0..n).collect::<Vec<_>>());
    } else {
        match mode {
            SamplingMode::PerStep => {
                for _ in 0..steps {
                    let mut batch = index::sample(&mut rng, n, b).into_vec();
                    batch.sort_unstable();
                    out.push(batch);
                }
            }
            SamplingMode::EpochShuffle => {
                let mut perm: Vec<usize> = (0..n).collect();
                'outer: loop {
                    perm.shuffle(&mut rng);
                    for chunk in perm.chunks_exact(b) {
                        let mut batch = chunk.to_vec();
                        batch.sort_unstable();
                        out.push(batch);
                        if out.len() == steps {
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    Ok(BatchSchedule {
        steps: out,
        batch_size: b,
        seed,
    })
}
