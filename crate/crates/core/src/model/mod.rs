//! Model configuration, parameters and the batch-level inference pipeline
//! that ties the style input maker, cluster network and aggregation network
//! together.

mod params;

pub use params::{
    init_params, EncoderBlock, FrozenStats, MixerBlock, Params, Projections, StyleParams,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, FusionWeights};
use crate::cluster::{self, AssignmentMap, ClusteredIntermediate};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tape, Tensor, Var};
use crate::style::{self, BnMode, FeatureRecord, StyleBatch};

/// Architecture and quantisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of global cluster centers `M`.
    pub num_centers: usize,
    /// Identity feature dimension `C_f`.
    pub feature_dim: usize,
    /// Channels per style tap `C_M`.
    pub style_channels: usize,
    pub num_taps: usize,
    /// Width of the learned style part of the key.
    pub gamma_dim: usize,
    /// Width of the sinusoidal norm embedding (`c`, even).
    pub norm_embed_dim: usize,
    /// Norm quantisation resolution `q`.
    pub quant_resolution: u32,
    /// Norm clip width `k` in standard deviations.
    pub clip_width: f64,
    pub encoder_layers: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    pub mixer_depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    /// Largest batch a single update accepts (`N'`).
    pub max_batch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_centers: 4,
            feature_dim: 512,
            style_channels: 64,
            num_taps: 2,
            gamma_dim: 64,
            norm_embed_dim: 64,
            quant_resolution: 10,
            clip_width: 3.0,
            encoder_layers: 2,
            num_heads: 4,
            ff_mult: 4,
            mixer_depth: 2,
            token_hidden: 64,
            channel_hidden: 256,
            max_batch: 256,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks and unit tests.
    pub fn toy() -> Self {
        Self {
            num_centers: 2,
            feature_dim: 8,
            style_channels: 3,
            num_taps: 2,
            gamma_dim: 4,
            norm_embed_dim: 4,
            encoder_layers: 2,
            num_heads: 2,
            ff_mult: 2,
            mixer_depth: 1,
            token_hidden: 3,
            channel_hidden: 8,
            max_batch: 64,
            ..Self::default()
        }
    }

    /// Key width `d`.
    pub fn key_dim(&self) -> usize {
        self.gamma_dim + self.norm_embed_dim
    }

    /// Token width inside the mixer: `[S', C]` concatenated.
    pub fn mixer_dim(&self) -> usize {
        2 * self.key_dim()
    }

    pub fn style_len(&self) -> usize {
        2 * self.num_taps * self.style_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_centers == 0 {
            return fail("num_centers must be at least 1");
        }
        if self.feature_dim == 0 || self.style_channels == 0 || self.num_taps == 0 {
            return fail("feature_dim, style_channels and num_taps must be positive");
        }
        if self.gamma_dim < 2 {
            return fail("gamma_dim must be at least 2");
        }
        if self.norm_embed_dim == 0 || !self.norm_embed_dim.is_multiple_of(2) {
            return fail("norm_embed_dim must be even and positive");
        }
        if self.quant_resolution == 0 {
            return fail("quant_resolution must be at least 1");
        }
        if !(self.clip_width > 0.0 && self.clip_width.is_finite()) {
            return fail("clip_width must be positive");
        }
        if self.num_heads == 0 || !self.key_dim().is_multiple_of(self.num_heads) {
            return fail("num_heads must divide the key dimension");
        }
        if self.ff_mult == 0 || self.token_hidden == 0 || self.channel_hidden == 0 {
            return fail("hidden widths must be positive");
        }
        if self.max_batch == 0 {
            return fail("max_batch must be positive");
        }
        Ok(())
    }
}

/// Per-batch cluster summary in unnormalised form, the quantity the
/// streaming state accumulates.
#[derive(Clone, Debug)]
pub struct BatchSummary<T: Real = f32> {
    /// `A·F`, `M×C_f`.
    pub feature_sums: Tensor<T>,
    /// `A·S`, `M×d`.
    pub style_sums: Tensor<T>,
    pub assignment: AssignmentMap<T>,
}

/// Output of a single concurrent fusion pass.
#[derive(Clone, Debug)]
pub struct FusionOutput<T: Real = f32> {
    pub fused: Vec<T>,
    pub weights: FusionWeights<T>,
    pub assignment: AssignmentMap<T>,
    pub intermediate: ClusteredIntermediate<T>,
}

/// Trained (or freshly initialised) fusion network.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T: Real = f32> {
    pub config: ModelConfig,
    pub params: Params<Tensor<T>>,
    pub frozen: FrozenStats,
}

impl FusionModel<f32> {
    pub fn new_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng);
        let frozen = FrozenStats::identity(config.gamma_dim);
        Ok(Self {
            config,
            params,
            frozen,
        })
    }
}

impl<T: Real> FusionModel<T> {
    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            frozen: self.frozen.clone(),
        }
    }

    /// Binds every parameter onto `tape`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> Params<Var> {
        self.params.map(|t| {
            if trainable {
                tape.param(t)
            } else {
                tape.constant_ref(t)
            }
        })
    }

    pub fn validate_batch(&self, records: &[FeatureRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        for r in records {
            r.validate(&self.config)?;
        }
        Ok(())
    }

    /// Style vectors `S` (`N×d`) in inference mode.
    pub fn style_inputs(&self, records: &[FeatureRecord]) -> Result<Tensor<T>> {
        self.validate_batch(records)?;
        let batch = StyleBatch::<T>::build(records, &self.config, &self.frozen)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (s, _) = style::style_graph(&mut tape, &p.style, &batch, BnMode::Frozen(&self.frozen));
        Ok(tape.value(s).clone())
    }

    fn batch_graph<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        p: &Params<Var>,
        records: &[FeatureRecord],
    ) -> Result<(Var, Var, Var)> {
        let batch = StyleBatch::<T>::build(records, &self.config, &self.frozen)?;
        let (s, _) = style::style_graph(tape, &p.style, &batch, BnMode::Frozen(&self.frozen));
        let f = tape.constant(style::feature_matrix(records, self.config.feature_dim));
        let a = cluster::assignment_graph(tape, p, s, self.config.num_heads);
        Ok((s, f, a))
    }

    /// Runs style input + cluster network on one batch and returns the
    /// unnormalised sums.
    pub fn summarize_batch(&self, records: &[FeatureRecord]) -> Result<BatchSummary<T>> {
        self.validate_batch(records)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (s, f, a) = self.batch_graph(&mut tape, &p, records)?;
        let (fs, mass) = cluster::cluster_sums_graph(&mut tape, a, f);
        let ss = tape.matmul(a, s);
        Ok(BatchSummary {
            feature_sums: tape.value(fs).clone(),
            style_sums: tape.value(ss).clone(),
            assignment: AssignmentMap::new(tape.value(a).clone(), tape.value(mass).data().to_vec()),
        })
    }

    /// Concurrent cluster network on one batch: `(F', S')` and `A`.
    pub fn cluster_network(
        &self,
        records: &[FeatureRecord],
    ) -> Result<(ClusteredIntermediate<T>, AssignmentMap<T>)> {
        self.validate_batch(records)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let (s, f, a) = self.batch_graph(&mut tape, &p, records)?;
        let fp = cluster::cluster_graph(&mut tape, a, f);
        let sp = cluster::cluster_graph(&mut tape, a, s);
        let mass = tape.row_sums(a);
        Ok((
            ClusteredIntermediate {
                f_prime: tape.value(fp).clone(),
                s_prime: tape.value(sp).clone(),
            },
            AssignmentMap::new(tape.value(a).clone(), tape.value(mass).data().to_vec()),
        ))
    }

    /// Aggregation network on clustered intermediates.
    pub fn aggregate(&self, inter: &ClusteredIntermediate<T>) -> Result<(Vec<T>, FusionWeights<T>)> {
        let cfg = &self.config;
        let m = cfg.num_centers;
        if inter.f_prime.shape() != [m, cfg.feature_dim] || inter.s_prime.shape() != [m, cfg.key_dim()] {
            return Err(Error::Config(format!(
                "intermediates must be {m}x{} and {m}x{}",
                cfg.feature_dim,
                cfg.key_dim()
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let sp = tape.constant_ref(&inter.s_prime);
        let fp = tape.constant_ref(&inter.f_prime);
        let weights = aggregate::cluster_weights_graph(&mut tape, &p, sp);
        let fused = aggregate::fuse_graph(&mut tape, weights, fp);
        Ok((
            tape.value(fused).data().to_vec(),
            FusionWeights {
                p: tape.value(weights).clone(),
            },
        ))
    }

    /// Whole-set fusion in a single pass.
    pub fn fuse(&self, records: &[FeatureRecord]) -> Result<FusionOutput<T>> {
        let (intermediate, assignment) = self.cluster_network(records)?;
        let (fused, weights) = self.aggregate(&intermediate)?;
        Ok(FusionOutput {
            fused,
            weights,
            assignment,
            intermediate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_sizes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.key_dim(), 128);
        let model = FusionModel::new_random(cfg, 0).unwrap();
        let n = model.params.num_scalars();
        // About 0.79M parameters at default dims.
        assert!((700_000..950_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        cfg.norm_embed_dim = 63;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.quant_resolution = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.clip_width = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_names_are_unique() {
        let model = FusionModel::new_random(ModelConfig::toy(), 1).unwrap();
        let names = model.params.names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"encoder.1.w_qkv".to_string()));
    }
}
