//! Constant-memory streaming fusion.
//!
//! A [`FusionSession`] keeps the cumulative intermediates `F̂`, `Ŝ` and the
//! cumulative row mass `a`. Each batch is clustered on its own and merged
//! with the incremental weighted average
//!
//! ```text
//! F̂ ← (a ⊙ F̂ + A_T·F_T) / (a + rowsum(A_T)),   a ← a + rowsum(A_T)
//! ```
//!
//! whose result is the pooled weighted mean over every batch seen, hence
//! independent of batch order. Accumulators are f64.

use std::io::{Read, Write};

use crate::aggregate::FusionWeights;
use crate::cluster::{AssignmentMap, ClusteredIntermediate};
use crate::error::{Error, Result};
use crate::model::{BatchSummary, FusionModel, ModelConfig};
use crate::numeric::Tensor;
use crate::style::FeatureRecord;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"CAFS";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Result of [`FusionSession::finalize`].
#[derive(Clone, Debug)]
pub struct Finalized {
    pub fused: Vec<f32>,
    pub weights: FusionWeights<f32>,
    /// Cumulative row mass `a`.
    pub mass: Vec<f64>,
}

/// Per-probe streaming state.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSession {
    id: u64,
    num_centers: usize,
    feature_dim: usize,
    key_dim: usize,
    max_batch: usize,
    f_hat: Vec<f64>,
    s_hat: Vec<f64>,
    mass: Vec<f64>,
    items_seen: u64,
}

impl FusionSession {
    pub fn open(id: u64, config: &ModelConfig) -> Self {
        let (m, c, d) = (config.num_centers, config.feature_dim, config.key_dim());
        Self {
            id,
            num_centers: m,
            feature_dim: c,
            key_dim: d,
            max_batch: config.max_batch,
            f_hat: vec![0.0; m * c],
            s_hat: vec![0.0; m * d],
            mass: vec![0.0; m],
            items_seen: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn items_seen(&self) -> u64 {
        self.items_seen
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn f_hat(&self) -> &[f64] {
        &self.f_hat
    }

    pub fn s_hat(&self) -> &[f64] {
        &self.s_hat
    }

    /// Heap bytes held by the state; independent of `items_seen`.
    pub fn state_bytes(&self) -> usize {
        (self.f_hat.capacity() + self.s_hat.capacity() + self.mass.capacity()) * std::mem::size_of::<f64>()
    }

    pub(crate) fn check_model(&self, model: &FusionModel) -> Result<()> {
        let cfg = &model.config;
        if cfg.num_centers != self.num_centers || cfg.feature_dim != self.feature_dim || cfg.key_dim() != self.key_dim {
            return Err(Error::Config("session dimensions do not match the model".into()));
        }
        Ok(())
    }

    /// Clusters `batch` and merges it into the running state. Returns the
    /// batch's assignment map.
    pub fn update(&mut self, batch: &[FeatureRecord], model: &FusionModel) -> Result<AssignmentMap<f32>> {
        self.check_model(model)?;
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if batch.len() > self.max_batch {
            return Err(Error::Usage(format!(
                "batch of {} exceeds the configured maximum {}",
                batch.len(),
                self.max_batch
            )));
        }
        if let Some(r) = batch.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("record for subject {}", r.subject)));
        }
        let summary = model.summarize_batch(batch)?;
        self.merge(&summary, batch.len() as u64);
        Ok(summary.assignment)
    }

    /// Merges one batch summary (unnormalised sums plus row masses).
    pub fn merge(&mut self, summary: &BatchSummary<f32>, items: u64) {
        let (c, d) = (self.feature_dim, self.key_dim);
        for j in 0..self.num_centers {
            let prev = self.mass[j];
            let added = summary.assignment.row_mass[j] as f64;
            let total = prev + added;
            if total > 0.0 {
                merge_row(&mut self.f_hat[j * c..(j + 1) * c], prev, summary.feature_sums.row(j), total);
                merge_row(&mut self.s_hat[j * d..(j + 1) * d], prev, summary.style_sums.row(j), total);
            }
            self.mass[j] = total;
        }
        self.items_seen += items;
    }

    /// Current `(F', S')` in f32.
    pub fn intermediate(&self) -> Result<ClusteredIntermediate<f32>> {
        if self.items_seen == 0 {
            return Err(Error::Usage("session has not seen any items".into()));
        }
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        Ok(ClusteredIntermediate {
            f_prime: Tensor::matrix(self.num_centers, self.feature_dim, to32(&self.f_hat)),
            s_prime: Tensor::matrix(self.num_centers, self.key_dim, to32(&self.s_hat)),
        })
    }

    /// Aggregates the current state. The session stays usable afterwards.
    pub fn finalize(&self, model: &FusionModel) -> Result<Finalized> {
        self.check_model(model)?;
        let inter = self.intermediate()?;
        let (fused, weights) = model.aggregate(&inter)?;
        Ok(Finalized {
            fused,
            weights,
            mass: self.mass.clone(),
        })
    }

    /// Writes the CAFS snapshot.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        for v in [
            SNAPSHOT_VERSION,
            self.num_centers as u32,
            self.feature_dim as u32,
            self.key_dim as u32,
            self.max_batch as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.id.to_le_bytes())?;
        w.write_all(&self.items_seen.to_le_bytes())?;
        for v in self.f_hat.iter().chain(&self.s_hat).chain(&self.mass) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a CAFS snapshot, validating magic and version first.
    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a CAFS session snapshot".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported CAFS version {version}")));
        }
        let m = read_u32(&mut r)? as usize;
        let c = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let max_batch = read_u32(&mut r)? as usize;
        let id = read_u64(&mut r)?;
        let items_seen = read_u64(&mut r)?;
        const LIMIT: usize = 1 << 28;
        if m.checked_mul(c.max(d)).is_none_or(|n| n > LIMIT) {
            return Err(Error::Format("CAFS dimensions out of range".into()));
        }
        let f_hat = read_f64s(&mut r, m * c)?;
        let s_hat = read_f64s(&mut r, m * d)?;
        let mass = read_f64s(&mut r, m)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after CAFS payload".into()));
        }
        if mass.iter().any(|&a| a.is_nan() || a < 0.0) {
            return Err(Error::Format("negative or non-finite row mass".into()));
        }
        Ok(Self {
            id,
            num_centers: m,
            feature_dim: c,
            key_dim: d,
            max_batch,
            f_hat,
            s_hat,
            mass,
            items_seen,
        })
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        Self::read_snapshot(bytes)
    }
}

fn merge_row(acc: &mut [f64], prev_mass: f64, sums: &[f32], total: f64) {
    for (a, &s) in acc.iter_mut().zip(sums) {
        *a = (prev_mass * *a + s as f64) / total;
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}
