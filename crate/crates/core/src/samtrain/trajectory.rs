//! Recorded training trajectories and their binary file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SAMT"  u16 version
//! u64 P   u64 n   u64 T   [u8; 32] config digest
//! per checkpoint, until end of file:
//!   u64 step  f64 eta  f64 weight  u32 count  u32 × count batch  f64 × P params
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::numcore::ParamVector;

pub const MAGIC: &[u8; 4] = b"SAMT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 8 * 3 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ParamVector,
    pub eta: f64,
    /// Rows whose losses produced the update taken from this checkpoint.
    /// Empty for the final checkpoint.
    pub batch: Vec<usize>,
    /// Coefficient applied to each batch member's loss gradient: `eta / b`.
    pub per_example_weight: f64,
}

impl Checkpoint {
    pub fn record_len(&self) -> usize {
        8 + 8 + 8 + 4 + 4 * self.batch.len() + 8 * self.params.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryHeader {
    pub param_count: usize,
    pub n: usize,
    pub steps: usize,
    pub config_digest: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn new(header: TrajectoryHeader, checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let t = Self {
            header,
            checkpoints,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .checkpoints
            .first()
            .ok_or_else(|| Error::Format("trajectory has no checkpoints".into()))?;
        if first.step != 0 {
            return Err(Error::Format(format!(
                "first checkpoint is step {}, expected 0",
                first.step
            )));
        }
        if self.checkpoints.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::Format("checkpoint steps are not strictly increasing".into()));
        }
        for c in &self.checkpoints {
            if c.params.len() != self.header.param_count {
                return Err(Error::Format(format!(
                    "checkpoint {} has {} parameters, header says {}",
                    c.step,
                    c.params.len(),
                    self.header.param_count
                )));
            }
            if c.step > self.header.steps {
                return Err(Error::Format(format!(
                    "checkpoint step {} beyond T = {}",
                    c.step, self.header.steps
                )));
            }
            if let Some(&i) = c.batch.iter().find(|&&i| i >= self.header.n) {
                return Err(Error::Format(format!(
                    "checkpoint {} references row {i} >= n = {}",
                    c.step, self.header.n
                )));
            }
        }
        Ok(())
    }

    /// Fails unless the trajectory was recorded for a model of this size.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        if self.header.param_count != spec.param_count() {
            return Err(Error::input(format!(
                "trajectory has P = {}, model has P = {}",
                self.header.param_count,
                spec.param_count()
            )));
        }
        Ok(())
    }

    pub fn final_params(&self) -> &ParamVector {
        &self.checkpoints.last().unwrap().params
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.checkpoints.iter().map(Checkpoint::record_len).sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.param_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.header.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.header.steps as u64).to_le_bytes());
        out.extend_from_slice(&self.header.config_digest);
        for c in &self.checkpoints {
            out.extend_from_slice(&(c.step as u64).to_le_bytes());
            out.extend_from_slice(&c.eta.to_le_bytes());
            out.extend_from_slice(&c.per_example_weight.to_le_bytes());
            out.extend_from_slice(&(c.batch.len() as u32).to_le_bytes());
            for &i in &c.batch {
                out.extend_from_slice(&(i as u32).to_le_bytes());
            }
            for &v in c.params.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let param_count = r.u64()? as usize;
        let n = r.u64()? as usize;
        let steps = r.u64()? as usize;
        let config_digest: [u8; 32] = r.array()?;
        let header = TrajectoryHeader {
            param_count,
            n,
            steps,
            config_digest,
        };
        let mut checkpoints = Vec::new();
        while !r.done() {
            let step = r.u64()? as usize;
            let eta = r.f64()?;
            let per_example_weight = r.f64()?;
            let count = u32::from_le_bytes(r.array()?) as usize;
            let mut batch = Vec::with_capacity(count.min(1 << 20));
            for _ in 0..count {
                batch.push(u32::from_le_bytes(r.array()?) as usize);
            }
            let mut params = Vec::with_capacity(param_count.min(1 << 24));
            for _ in 0..param_count {
                params.push(r.f64()?);
            }
            let params = ParamVector::new(params)
                .map_err(|_| Error::Format(format!("checkpoint {step} has non-finite parameters")))?;
            checkpoints.push(Checkpoint {
                step,
                params,
                eta,
                batch,
                per_example_weight,
            });
        }
        Trajectory::new(header, checkpoints)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format(format!(
                "truncated file: needed {len} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn write_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, traj.encode())?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    Trajectory::decode(&fs::read(path)?)
}
