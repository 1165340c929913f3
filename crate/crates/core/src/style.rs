//! Style input maker: turns per-item style statistics and the feature norm
//! into the clustering key `s = [γ, n]`.
//!
//! `γ = BatchNorm(FC(ReLU(AvgPool(W_s ⊙ Γ))))` where `Γ = [μ_sty, σ_sty]`
//! per tap. The average pool runs over the two statistics, leaving one value
//! per channel; taps are concatenated before the FC layer. `n` is a
//! sinusoidal embedding of the quantised, standardised feature norm.

use crate::error::{Error, Result};
use crate::model::{FrozenStats, FusionModel, ModelConfig, StyleParams};
use crate::numeric::{Real, Tape, Tensor, Var, LAYER_NORM_EPS};

/// One probe item: identity feature plus per-tap style statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    /// Opaque subject / probe label.
    pub subject: u32,
    /// Identity feature `f`, norm included.
    pub feature: Vec<f32>,
    /// Per tap: `μ_sty` (`C_M` values) followed by `σ_sty` (`C_M` values).
    pub style_stats: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(subject: u32, feature: Vec<f32>, style_stats: Vec<f32>) -> Self {
        Self {
            subject,
            feature,
            style_stats,
        }
    }

    pub fn norm(&self) -> f64 {
        self.feature.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn tap_mean(&self, tap: usize, channels: usize) -> &[f32] {
        &self.style_stats[2 * tap * channels..(2 * tap + 1) * channels]
    }

    pub fn tap_std(&self, tap: usize, channels: usize) -> &[f32] {
        &self.style_stats[(2 * tap + 1) * channels..(2 * tap + 2) * channels]
    }

    pub fn is_finite(&self) -> bool {
        self.feature.iter().chain(&self.style_stats).all(|v| v.is_finite())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.feature.len() != cfg.feature_dim {
            return Err(Error::Config(format!(
                "feature has {} dims, model expects {}",
                self.feature.len(),
                cfg.feature_dim
            )));
        }
        if self.style_stats.len() != cfg.style_len() {
            return Err(Error::Config(format!(
                "style stats have {} values, model expects {}",
                self.style_stats.len(),
                cfg.style_len()
            )));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite(format!("record for subject {}", self.subject)));
        }
        for tap in 0..cfg.num_taps {
            if self.tap_std(tap, cfg.style_channels).iter().any(|&s| s < 0.0) {
                return Err(Error::Usage("negative style standard deviation".into()));
            }
        }
        if self.norm() <= 0.0 {
            return Err(Error::Usage("feature has zero norm".into()));
        }
        Ok(())
    }
}

/// `s = [γ, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub gamma: Vec<f32>,
    pub norm_embed: Vec<f32>,
}

impl StyleVector {
    pub fn concat(&self) -> Vec<f32> {
        self.gamma.iter().chain(&self.norm_embed).copied().collect()
    }
}

/// Quantises a feature norm to an integer in `[-qk, qk)`.
pub fn norm_quantize(norm: f64, mean: f64, std: f64, q: u32, k: f64) -> Result<i32> {
    if std.is_nan() || std <= 0.0 {
        return Err(Error::Config(format!("norm std must be positive, got {std}")));
    }
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::Usage(format!("norm must be positive, got {norm}")));
    }
    let q = q as f64;
    let z = ((norm - mean) / std).clamp(-k, k);
    let upper = (q * k).ceil() - 1.0;
    Ok((q * z).floor().min(upper) as i32)
}

/// Sinusoidal embedding of a quantised norm: `[sin(v/ω_0), cos(v/ω_0), …]`
/// with `ω_t = 10000^(2t/c)`.
pub fn norm_embed(v: i32, c: usize) -> Vec<f64> {
    assert!(c.is_multiple_of(2), "embedding width must be even");
    let mut out = Vec::with_capacity(c);
    for t in 0..c / 2 {
        let freq = 10000f64.powf((2 * t) as f64 / c as f64);
        let x = v as f64 / freq;
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

/// Batch normalisation mode for `γ`.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with the current batch's moments.
    Batch,
    /// Normalise with frozen running moments.
    Frozen(&'a FrozenStats),
}

/// Batch moments observed in [`BnMode::Batch`], for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Dense inputs to the style graph for a batch of records.
pub struct StyleBatch<T: Real> {
    pub means: Tensor<T>,
    pub stds: Tensor<T>,
    pub norm_embed: Tensor<T>,
}

impl<T: Real> StyleBatch<T> {
    pub fn build(records: &[FeatureRecord], cfg: &ModelConfig, frozen: &FrozenStats) -> Result<Self> {
        let ch = cfg.num_taps * cfg.style_channels;
        let c = cfg.norm_embed_dim;
        let mut means = Vec::with_capacity(records.len() * ch);
        let mut stds = Vec::with_capacity(records.len() * ch);
        let mut embed = Vec::with_capacity(records.len() * c);
        for r in records {
            for tap in 0..cfg.num_taps {
                means.extend(r.tap_mean(tap, cfg.style_channels).iter().map(|&v| cast::<T>(v as f64)));
                stds.extend(r.tap_std(tap, cfg.style_channels).iter().map(|&v| cast::<T>(v as f64)));
            }
            let v = norm_quantize(
                r.norm(),
                frozen.norm_mean,
                frozen.norm_std,
                cfg.quant_resolution,
                cfg.clip_width,
            )?;
            embed.extend(norm_embed(v, c).into_iter().map(cast::<T>));
        }
        let n = records.len();
        Ok(Self {
            means: Tensor::matrix(n, ch, means),
            stds: Tensor::matrix(n, ch, stds),
            norm_embed: Tensor::matrix(n, c, embed),
        })
    }
}

fn cast<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// `N×C_f` matrix of identity features.
pub fn feature_matrix<T: Real>(records: &[FeatureRecord], dim: usize) -> Tensor<T> {
    let data = records
        .iter()
        .flat_map(|r| r.feature.iter().map(|&v| cast::<T>(v as f64)))
        .collect();
    Tensor::matrix(records.len(), dim, data)
}

/// Learned style part `γ` (`N×gamma_dim`).
pub(crate) fn gamma_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &StyleParams<Var>,
    batch: &StyleBatch<T>,
    mode: BnMode<'_>,
) -> (Var, Option<BatchMoments>) {
    let mu = tape.constant(batch.means.clone());
    let sd = tape.constant(batch.stds.clone());
    let gate_mu = tape.slice_rows(p.gate, 0, 1);
    let gate_sd = tape.slice_rows(p.gate, 1, 1);
    let a = tape.mul_row(mu, gate_mu);
    let b = tape.mul_row(sd, gate_sd);
    let gated = tape.add(a, b);
    let pooled = tape.scale(gated, cast(0.5));
    let h = tape.relu(pooled);
    let z = tape.matmul(h, p.fc_w);
    let z = tape.add_row(z, p.fc_b);
    match mode {
        BnMode::Batch => {
            let n = tape.value(z).rows();
            assert!(n >= 2, "batch-moment normalisation needs at least 2 items");
            let moments = column_moments(tape.value(z));
            let zt = tape.transpose(z);
            let ones = tape.constant(Tensor::full(&[n], T::one()));
            let zeros = tape.constant(Tensor::zeros(&[n]));
            let normed = tape.layer_norm(zt, ones, zeros);
            let normed = tape.transpose(normed);
            let y = tape.mul_row(normed, p.bn_gain);
            (tape.add_row(y, p.bn_bias), Some(moments))
        }
        BnMode::Frozen(stats) => {
            let neg_mean: Vec<T> = stats.bn_mean.iter().map(|&m| cast(-m)).collect();
            let inv_std: Vec<T> = stats
                .bn_var
                .iter()
                .map(|&v| cast(1.0 / (v + LAYER_NORM_EPS).sqrt()))
                .collect();
            let neg_mean = tape.constant(Tensor::new(vec![neg_mean.len()], neg_mean));
            let inv_std = tape.constant(Tensor::new(vec![inv_std.len()], inv_std));
            let y = tape.add_row(z, neg_mean);
            let y = tape.mul_row(y, inv_std);
            let y = tape.mul_row(y, p.bn_gain);
            (tape.add_row(y, p.bn_bias), None)
        }
    }
}

/// Full key `S = [γ, n]` (`N×d`).
pub(crate) fn style_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &StyleParams<Var>,
    batch: &StyleBatch<T>,
    mode: BnMode<'_>,
) -> (Var, Option<BatchMoments>) {
    let (gamma, moments) = gamma_graph(tape, p, batch, mode);
    let n = tape.constant(batch.norm_embed.clone());
    (tape.concat_cols(&[gamma, n]), moments)
}

fn column_moments<T: Real>(z: &Tensor<T>) -> BatchMoments {
    let (n, c) = (z.rows(), z.cols());
    let mut mean = vec![0.0; c];
    for row in z.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64().unwrap();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in z.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64().unwrap() - m;
            *s += d * d;
        }
    }
    let denom = (n.max(2) - 1) as f64;
    var.iter_mut().for_each(|s| *s /= denom);
    BatchMoments { mean, var }
}

/// `γ` for a single item's statistics, inference mode.
pub fn style_vector(style_stats: &[f32], model: &FusionModel) -> Result<Vec<f32>> {
    let cfg = &model.config;
    if style_stats.len() != cfg.style_len() {
        return Err(Error::Config(format!(
            "style stats have {} values, model expects {}",
            style_stats.len(),
            cfg.style_len()
        )));
    }
    let ch = cfg.num_taps * cfg.style_channels;
    let mut means = Vec::with_capacity(ch);
    let mut stds = Vec::with_capacity(ch);
    for tap in 0..cfg.num_taps {
        let base = 2 * tap * cfg.style_channels;
        means.extend_from_slice(&style_stats[base..base + cfg.style_channels]);
        stds.extend_from_slice(&style_stats[base + cfg.style_channels..base + 2 * cfg.style_channels]);
    }
    if stds.iter().any(|&s| s < 0.0) {
        return Err(Error::Usage("negative style standard deviation".into()));
    }
    let batch = StyleBatch {
        means: Tensor::matrix(1, ch, means),
        stds: Tensor::matrix(1, ch, stds),
        norm_embed: Tensor::zeros(&[1, cfg.norm_embed_dim]),
    };
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let (g, _) = gamma_graph(&mut tape, &p.style, &batch, BnMode::Frozen(&model.frozen));
    Ok(tape.value(g).data().to_vec())
}

/// `s = [γ, n]` for one record, inference mode.
pub fn make_style_input(record: &FeatureRecord, model: &FusionModel) -> Result<StyleVector> {
    record.validate(&model.config)?;
    let cfg = &model.config;
    let gamma = style_vector(&record.style_stats, model)?;
    let v = norm_quantize(
        record.norm(),
        model.frozen.norm_mean,
        model.frozen.norm_std,
        cfg.quant_resolution,
        cfg.clip_width,
    )?;
    let norm_embed = norm_embed(v, cfg.norm_embed_dim).into_iter().map(|x| x as f32).collect();
    Ok(StyleVector { gamma, norm_embed })
}
