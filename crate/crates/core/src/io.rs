//! Binary feature files (CAFF) and model checkpoints (CAFW).
//!
//! All numbers are little-endian.
//!
//! ```text
//! CAFF: "CAFF" u32 version, u32 C_f, u32 C_M, u32 n_taps, u64 count,
//!       count × (u32 subject, C_f f32 feature, n_taps × (C_M f32 μ, C_M f32 σ))
//! CAFW: "CAFW" u32 version, u32 manifest length, JSON manifest,
//!       f32 tensor payloads in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrozenStats, FusionModel, ModelConfig};
use crate::numeric::Tensor;
use crate::stream::{read_u32, read_u64};
use crate::style::FeatureRecord;

pub const FEATURE_MAGIC: &[u8; 4] = b"CAFF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAFW";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_DIM: usize = 1 << 20;
const MAX_MANIFEST: usize = 1 << 24;

/// Record layout shared by every record of a feature file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub feature_dim: usize,
    pub style_channels: usize,
    pub num_taps: usize,
}

impl FeatureLayout {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            feature_dim: config.feature_dim,
            style_channels: config.style_channels,
            num_taps: config.num_taps,
        }
    }

    pub fn style_len(&self) -> usize {
        2 * self.num_taps * self.style_channels
    }

    /// Bytes per encoded record.
    pub fn record_bytes(&self) -> usize {
        4 + 4 * (self.feature_dim + self.style_len())
    }

    fn check(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim > MAX_DIM || self.style_len() > MAX_DIM {
            return Err(Error::Format(format!("feature layout out of range: {self:?}")));
        }
        Ok(())
    }

    fn check_record(&self, r: &FeatureRecord) -> Result<()> {
        if r.feature.len() != self.feature_dim || r.style_stats.len() != self.style_len() {
            return Err(Error::Dimension(format!(
                "record for subject {} has {}+{} values, layout expects {}+{}",
                r.subject,
                r.feature.len(),
                r.style_stats.len(),
                self.feature_dim,
                self.style_len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub layout: FeatureLayout,
    pub records: Vec<FeatureRecord>,
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// One record as it appears in a CAFF payload.
pub fn encode_record(record: &FeatureRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * (record.feature.len() + record.style_stats.len()));
    out.extend_from_slice(&record.subject.to_le_bytes());
    put_f32s(&mut out, &record.feature);
    put_f32s(&mut out, &record.style_stats);
    out
}

pub fn decode_record(bytes: &[u8], layout: &FeatureLayout) -> Result<FeatureRecord> {
    if bytes.len() != layout.record_bytes() {
        return Err(Error::Format(format!(
            "record payload is {} bytes, expected {}",
            bytes.len(),
            layout.record_bytes()
        )));
    }
    let subject = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let split = 4 + 4 * layout.feature_dim;
    Ok(FeatureRecord::new(
        subject,
        get_f32s(&bytes[4..split]),
        get_f32s(&bytes[split..]),
    ))
}

pub fn write_features<W: Write>(mut w: W, layout: &FeatureLayout, records: &[FeatureRecord]) -> Result<()> {
    layout.check()?;
    for r in records {
        layout.check_record(r)?;
    }
    w.write_all(FEATURE_MAGIC)?;
    for v in [
        FEATURE_VERSION,
        layout.feature_dim as u32,
        layout.style_channels as u32,
        layout.num_taps as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&encode_record(r))?;
    }
    Ok(())
}

fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("file too short for a header".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {}",
            m,
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::Format(format!(
            "unsupported {} version {v}",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("trailing bytes after {what} payload")));
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R) -> Result<FeatureFile> {
    read_magic(&mut r, FEATURE_MAGIC, FEATURE_VERSION)?;
    let layout = FeatureLayout {
        feature_dim: read_u32(&mut r)? as usize,
        style_channels: read_u32(&mut r)? as usize,
        num_taps: read_u32(&mut r)? as usize,
    };
    layout.check()?;
    let count = read_u64(&mut r)?;
    let mut buf = vec![0u8; layout.record_bytes()];
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("header declares {count} records, payload ends at {i}")))?;
        records.push(decode_record(&buf, &layout)?);
    }
    expect_eof(&mut r, "CAFF")?;
    Ok(FeatureFile { layout, records })
}

pub fn save_features(path: &Path, layout: &FeatureLayout, records: &[FeatureRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(&mut w, layout, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    read_features(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    frozen: FrozenStats,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &FusionModel) -> Result<()> {
    let names = model.params.names();
    let tensors = model.params.flatten();
    let manifest = Manifest {
        config: model.config.clone(),
        frozen: model.frozen.clone(),
        tensors: names
            .into_iter()
            .zip(&tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        put_f32s(&mut buf, t.data());
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint and checks that its tensors match the layout implied
/// by the stored configuration.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<FusionModel> {
    read_magic(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let len = read_u32(&mut r)? as usize;
    if len > MAX_MANIFEST {
        return Err(Error::Format(format!("manifest length {len} out of range")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("manifest truncated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    manifest.config.validate()?;
    let template = FusionModel::new_random(manifest.config.clone(), 0)?;
    let expected: Vec<(String, Vec<usize>)> = template
        .params
        .names()
        .into_iter()
        .zip(template.params.shapes())
        .collect();
    let found: Vec<(String, Vec<usize>)> = manifest.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if expected != found {
        return Err(Error::Format("manifest tensors do not match the configured layout".into()));
    }
    if manifest.frozen.bn_mean.len() != manifest.config.gamma_dim
        || manifest.frozen.bn_var.len() != manifest.config.gamma_dim
    {
        return Err(Error::Format("frozen statistics have the wrong width".into()));
    }
    let mut tensors = Vec::with_capacity(found.len());
    for (name, shape) in found {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("payload for {name} truncated")))?;
        tensors.push(Tensor::new(shape, get_f32s(&buf)));
    }
    expect_eof(&mut r, "CAFW")?;
    Ok(FusionModel {
        params: template.params.with_tensors(tensors),
        config: manifest.config,
        frozen: manifest.frozen,
    })
}

pub fn save_checkpoint(path: &Path, model: &FusionModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
