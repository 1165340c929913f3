use rand::Rng;

use crate::model::ModelConfig;
use crate::style::FeatureRecord;

/// Uniform random records of the right shape for `cfg`.
pub fn random_records(rng: &mut impl Rng, cfg: &ModelConfig, n: usize, subject: u32) -> Vec<FeatureRecord> {
    (0..n)
        .map(|_| {
            let f = (0..cfg.feature_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut s = Vec::with_capacity(cfg.style_len());
            for _ in 0..cfg.num_taps {
                s.extend((0..cfg.style_channels).map(|_| rng.random_range(-1.0f32..1.0)));
                s.extend((0..cfg.style_channels).map(|_| rng.random_range(0.0f32..1.0)));
            }
            FeatureRecord::new(subject, f, s)
        })
        .collect()
}
