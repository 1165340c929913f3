//! Synthetic identity corpus.
//!
//! Each identity has a unit class center (the ground-truth template) and a
//! private nuisance direction. An item of quality `q` has feature
//!
//! ```text
//! f = (1 + 2q) · normalize(q·center + (1 − q)·ν·normalize(u + τ·g))
//! ```
//!
//! with `g` isotropic Gaussian noise. Low-quality items are dominated by the
//! identity's nuisance direction, so averaging them does not cancel it.
//! Style statistics are a fixed smooth function of quality plus noise, the
//! same function for every corpus, so quality can be read back from style.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::Tensor;
use crate::style::FeatureRecord;

/// Seed of the quality→style mapping; fixed so train and test corpora agree.
const STYLE_MAP_SEED: u64 = 0x5157_1e00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Dimensions follow the model when embedded in a training config.
    #[serde(skip)]
    pub feature_dim: usize,
    #[serde(skip)]
    pub style_channels: usize,
    #[serde(skip)]
    pub num_taps: usize,
    /// Fraction of items drawn from the low-quality range.
    pub low_quality_fraction: f64,
    pub low_quality: [f64; 2],
    pub high_quality: [f64; 2],
    /// Quality range of gallery records.
    pub gallery_quality: [f64; 2],
    /// `ν`: length of the nuisance term before mixing.
    pub nuisance_scale: f64,
    /// `τ`: per-item spread around the nuisance direction.
    pub nuisance_spread: f64,
    pub style_noise: f64,
    /// Rejection threshold on pairwise center cosine.
    pub max_center_cos: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            style_channels: 64,
            num_taps: 2,
            low_quality_fraction: 0.7,
            low_quality: [0.05, 0.35],
            high_quality: [0.6, 1.0],
            gallery_quality: [1.0, 1.0],
            nuisance_scale: 8.0,
            nuisance_spread: 0.3,
            style_noise: 0.1,
            max_center_cos: 0.5,
        }
    }
}

impl CorpusConfig {
    /// Default corpus with dimensions matching `model`.
    pub fn for_model(model: &ModelConfig) -> Self {
        Self::default().with_dims(model)
    }

    pub fn with_dims(self, model: &ModelConfig) -> Self {
        Self {
            feature_dim: model.feature_dim,
            style_channels: model.style_channels,
            num_taps: model.num_taps,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |r: &[f64; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if self.feature_dim < 2 || self.style_channels == 0 || self.num_taps == 0 {
            return Err(Error::Config("corpus dimensions must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.low_quality_fraction) {
            return Err(Error::Config("low_quality_fraction must be in [0, 1]".into()));
        }
        if !in_unit(&self.low_quality) || !in_unit(&self.high_quality) || !in_unit(&self.gallery_quality) {
            return Err(Error::Config("quality ranges must be ordered sub-ranges of [0, 1]".into()));
        }
        if self.low_quality[0] <= 0.0 && self.low_quality_fraction > 0.0 {
            return Err(Error::Config("quality must stay above zero".into()));
        }
        if self.nuisance_scale < 0.0 || self.nuisance_spread < 0.0 || self.style_noise < 0.0 {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        if !(self.max_center_cos > -1.0 && self.max_center_cos <= 1.0) {
            return Err(Error::Config("max_center_cos must be in (-1, 1]".into()));
        }
        Ok(())
    }
}

/// Fixed per-channel coefficients of the quality→style map.
#[derive(Clone, Debug)]
struct StyleMap {
    mean_slope: Vec<f64>,
    mean_offset: Vec<f64>,
    std_slope: Vec<f64>,
    std_offset: Vec<f64>,
}

impl StyleMap {
    fn new(len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(STYLE_MAP_SEED);
        let mut draw = |s: f64| (0..len).map(|_| s * normal(&mut rng)).collect::<Vec<_>>();
        Self {
            mean_slope: draw(1.0),
            mean_offset: draw(0.5),
            std_slope: draw(1.0),
            std_offset: draw(0.3),
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    normalize(&mut v);
    v
}

/// Per-identity centers and nuisance directions plus the item renderer.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: CorpusConfig,
    centers: Vec<Vec<f64>>,
    nuisance: Vec<Vec<f64>>,
    style: StyleMap,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: CorpusConfig, n_ids: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n_ids < 2 {
            return Err(Error::Config("a corpus needs at least two identities".into()));
        }
        let dim = config.feature_dim;
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_ids);
        let max_attempts = 10_000;
        while centers.len() < n_ids {
            let mut placed = false;
            for _ in 0..max_attempts {
                let c = unit_vector(rng, dim);
                let ok = centers
                    .iter()
                    .all(|o| o.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() < config.max_center_cos);
                if ok {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Config(format!(
                    "could not place {n_ids} centers in {dim} dims with cosine below {}",
                    config.max_center_cos
                )));
            }
        }
        let nuisance = (0..n_ids).map(|_| unit_vector(rng, dim)).collect();
        let style = StyleMap::new(config.num_taps * config.style_channels);
        Ok(Self {
            config,
            centers,
            nuisance,
            style,
        })
    }

    pub fn n_ids(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, id: usize) -> &[f64] {
        &self.centers[id]
    }

    /// Draws an item quality from the low/high mixture.
    pub fn draw_quality<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let cfg = &self.config;
        let r = if rng.random::<f64>() < cfg.low_quality_fraction {
            cfg.low_quality
        } else {
            cfg.high_quality
        };
        uniform(rng, r)
    }

    pub fn feature_norm(quality: f64) -> f64 {
        1.0 + 2.0 * quality
    }

    /// Renders one record of identity `id` at `quality`.
    pub fn render<R: Rng + ?Sized>(&self, rng: &mut R, id: usize, quality: f64) -> FeatureRecord {
        let cfg = &self.config;
        let dim = cfg.feature_dim;
        let spread = cfg.nuisance_spread / (dim as f64).sqrt();
        let mut noise: Vec<f64> = self.nuisance[id].iter().map(|&u| u + spread * normal(rng)).collect();
        normalize(&mut noise);
        let mut f: Vec<f64> = self.centers[id]
            .iter()
            .zip(&noise)
            .map(|(&c, &n)| quality * c + (1.0 - quality) * cfg.nuisance_scale * n)
            .collect();
        normalize(&mut f);
        let scale = Self::feature_norm(quality);
        let feature = f.iter().map(|&v| (v * scale) as f32).collect();

        let ch = cfg.style_channels;
        let x = quality - 0.5;
        let mut stats = Vec::with_capacity(2 * cfg.num_taps * ch);
        let m = &self.style;
        for tap in 0..cfg.num_taps {
            let idx = tap * ch..(tap + 1) * ch;
            for k in idx.clone() {
                let v = m.mean_slope[k] * x + m.mean_offset[k] + cfg.style_noise * normal(rng);
                stats.push(v as f32);
            }
            for k in idx {
                let v = (m.std_slope[k] * x + m.std_offset[k] + cfg.style_noise * normal(rng)).exp();
                stats.push(v as f32);
            }
        }
        FeatureRecord::new(id as u32, feature, stats)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Materialised corpus: `per_id` records for each identity plus one
/// high-quality gallery record per identity.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub seed: u64,
    pub generator: Generator,
    /// Unit ground-truth templates, `n_ids×C_f`.
    pub class_centers: Tensor<f32>,
    /// Grouped by identity, `per_id` consecutive records each.
    pub records: Vec<FeatureRecord>,
    pub quality: Vec<f32>,
    pub gallery: Vec<FeatureRecord>,
    pub per_id: usize,
}

impl SyntheticCorpus {
    pub fn generate(config: CorpusConfig, seed: u64, n_ids: usize, per_id: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(config, n_ids, &mut rng)?;
        let dim = generator.config.feature_dim;
        let mut records = Vec::with_capacity(n_ids * per_id);
        let mut quality = Vec::with_capacity(n_ids * per_id);
        let mut gallery = Vec::with_capacity(n_ids);
        for id in 0..n_ids {
            for _ in 0..per_id {
                let q = generator.draw_quality(&mut rng);
                records.push(generator.render(&mut rng, id, q));
                quality.push(q as f32);
            }
            let q = uniform(&mut rng, generator.config.gallery_quality);
            gallery.push(generator.render(&mut rng, id, q));
        }
        let centers = (0..n_ids).flat_map(|i| generator.center(i).iter().map(|&v| v as f32)).collect();
        Ok(Self {
            seed,
            class_centers: Tensor::matrix(n_ids, dim, centers),
            generator,
            records,
            quality,
            gallery,
            per_id,
        })
    }

    pub fn n_ids(&self) -> usize {
        self.generator.n_ids()
    }

    pub fn records_of(&self, id: usize) -> &[FeatureRecord] {
        &self.records[id * self.per_id..(id + 1) * self.per_id]
    }

    pub fn quality_of(&self, id: usize) -> &[f32] {
        &self.quality[id * self.per_id..(id + 1) * self.per_id]
    }

    /// Normalised per-identity mean of the corpus features.
    pub fn mean_templates(&self) -> Tensor<f32> {
        let dim = self.generator.config.feature_dim;
        let mut out = Vec::with_capacity(self.n_ids() * dim);
        for id in 0..self.n_ids() {
            let mut acc = vec![0.0f64; dim];
            for r in self.records_of(id) {
                for (a, &v) in acc.iter_mut().zip(&r.feature) {
                    *a += v as f64;
                }
            }
            normalize(&mut acc);
            out.extend(acc.iter().map(|&v| v as f32));
        }
        Tensor::matrix(self.n_ids(), dim, out)
    }

    /// Mean and standard deviation of record feature norms.
    pub fn norm_stats(&self) -> (f64, f64) {
        let norms: Vec<f64> = self.records.iter().map(|r| r.norm()).collect();
        let n = norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / n;
        let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// `n` record indices of identity `id` in random order, without
    /// replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, id: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (id * self.per_id..(id + 1) * self.per_id).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx
    }
}

/// Default-config corpus with `C_f = 64`.
pub fn generate_corpus(seed: u64, n_ids: usize, per_id: usize) -> Result<SyntheticCorpus> {
    SyntheticCorpus::generate(CorpusConfig::default(), seed, n_ids, per_id)
}
