//! Learnable parameter tree.
//!
//! The same structure is instantiated with `Tensor<T>` (storage), `Var`
//! (bound on a tape) and gradients, so every consumer walks the parameters
//! in one canonical order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::numeric::{randn, Real, Tensor};

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<S> {
            $(pub $field: S),*
        }

        impl<S> $name<S> {
            pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s S) -> U) -> $name<U> {
                $name { $($field: f(&self.$field)),* }
            }

            pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s S)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut S)) {
                $(f(&mut self.$field);)*
            }
        }
    };
}

param_group!(
    /// Style input maker: per-channel gates on `[μ, σ]`, the FC layer and
    /// the batch-norm affine.
    StyleParams {
        gate,
        fc_w,
        fc_b,
        bn_gain,
        bn_bias,
    }
);

param_group!(
    /// One pre-norm self-attention block.
    EncoderBlock {
        ln1_g,
        ln1_b,
        w_qkv,
        b_qkv,
        w_o,
        b_o,
        ln2_g,
        ln2_b,
        w_ff1,
        b_ff1,
        w_ff2,
        b_ff2,
    }
);

param_group!(
    /// One mixer block: token mixing across clusters, then channel mixing.
    MixerBlock {
        ln1_g,
        ln1_b,
        tok_w1,
        tok_b1,
        tok_w2,
        tok_b2,
        ln2_g,
        ln2_b,
        ch_w1,
        ch_b1,
        ch_w2,
        ch_b2,
    }
);

param_group!(
    Projections {
        centers,
        w_q,
        w_k,
        enc_ln_g,
        enc_ln_b,
        mix_ln_g,
        mix_ln_b,
        head_w,
        head_b,
    }
);

/// Every trainable tensor of the fusion network.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    pub style: StyleParams<S>,
    pub encoder: Vec<EncoderBlock<S>>,
    pub mixer: Vec<MixerBlock<S>>,
    pub proj: Projections<S>,
}

impl<S> Params<S> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s S) -> U) -> Params<U> {
        Params {
            style: self.style.map(&mut f),
            encoder: self.encoder.iter().map(|b| b.map(&mut f)).collect(),
            mixer: self.mixer.iter().map(|b| b.map(&mut f)).collect(),
            proj: self.proj.map(&mut f),
        }
    }

    /// Visits `(name, tensor)` in canonical order.
    pub fn visit<'s>(&'s self, mut f: impl FnMut(String, &'s S)) {
        self.style.visit("style.", &mut f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}."), &mut f);
        }
        for (i, b) in self.mixer.iter().enumerate() {
            b.visit(&format!("mixer.{i}."), &mut f);
        }
        self.proj.visit("", &mut f);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut S)) {
        self.style.visit_mut(&mut f);
        for b in &mut self.encoder {
            b.visit_mut(&mut f);
        }
        for b in &mut self.mixer {
            b.visit_mut(&mut f);
        }
        self.proj.visit_mut(&mut f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }

    pub fn flatten(&self) -> Vec<&S> {
        let mut out = Vec::new();
        self.visit(|_, s| out.push(s));
        out
    }

    /// Zips two trees of the same layout.
    pub fn zip_map<U, V>(&self, other: &Params<U>, mut f: impl FnMut(&S, &U) -> V) -> Params<V> {
        let rhs = other.flatten();
        let mut i = 0;
        self.map(|s| {
            let v = f(s, rhs[i]);
            i += 1;
            v
        })
    }
}

impl<T: Real> Params<Tensor<T>> {
    pub fn cast<U: Real>(&self) -> Params<Tensor<U>> {
        self.map(|t| t.cast())
    }

    pub fn num_scalars(&self) -> usize {
        self.flatten().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    /// Tensor shapes in canonical order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.flatten().iter().map(|t| t.shape().to_vec()).collect()
    }

    /// Rebuilds a tree shaped like `self` from tensors in canonical order.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Self {
        let mut it = tensors.into_iter();
        self.map(|_| it.next().expect("tensor count matches layout"))
    }
}

/// Non-trainable statistics frozen after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenStats {
    /// Running batch-norm mean of the style FC output.
    pub bn_mean: Vec<f64>,
    /// Running batch-norm variance of the style FC output.
    pub bn_var: Vec<f64>,
    /// Mean of feature norms seen in training.
    pub norm_mean: f64,
    /// Standard deviation of feature norms seen in training.
    pub norm_std: f64,
}

impl FrozenStats {
    pub fn identity(gamma_dim: usize) -> Self {
        Self {
            bn_mean: vec![0.0; gamma_dim],
            bn_var: vec![1.0; gamma_dim],
            norm_mean: 1.0,
            norm_std: 1.0,
        }
    }
}

fn ones(n: usize) -> Tensor<f32> {
    Tensor::full(&[n], 1.0)
}

fn zeros(n: usize) -> Tensor<f32> {
    Tensor::zeros(&[n])
}

/// Random initialisation. The aggregation head starts at zero so the
/// untrained network fuses with uniform cluster weights.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Params<Tensor<f32>> {
    let d = cfg.key_dim();
    let ff = d * cfg.ff_mult;
    let style_in = cfg.num_taps * cfg.style_channels;
    let tokens = cfg.num_centers;
    let mix_dim = cfg.mixer_dim();
    let lin = |rng: &mut R, fan_in: usize, fan_out: usize| {
        randn(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    };

    let style = StyleParams {
        gate: Tensor::full(&[2, style_in], 1.0),
        fc_w: lin(rng, style_in, cfg.gamma_dim),
        fc_b: zeros(cfg.gamma_dim),
        bn_gain: ones(cfg.gamma_dim),
        bn_bias: zeros(cfg.gamma_dim),
    };
    let encoder = (0..cfg.encoder_layers)
        .map(|_| EncoderBlock {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            w_qkv: lin(rng, d, 3 * d),
            b_qkv: zeros(3 * d),
            w_o: lin(rng, d, d),
            b_o: zeros(d),
            ln2_g: ones(d),
            ln2_b: zeros(d),
            w_ff1: lin(rng, d, ff),
            b_ff1: zeros(ff),
            w_ff2: lin(rng, ff, d),
            b_ff2: zeros(d),
        })
        .collect();
    let mixer = (0..cfg.mixer_depth)
        .map(|_| MixerBlock {
            ln1_g: ones(mix_dim),
            ln1_b: zeros(mix_dim),
            tok_w1: lin(rng, tokens, cfg.token_hidden),
            tok_b1: zeros(cfg.token_hidden),
            tok_w2: lin(rng, cfg.token_hidden, tokens),
            tok_b2: zeros(tokens),
            ln2_g: ones(mix_dim),
            ln2_b: zeros(mix_dim),
            ch_w1: lin(rng, mix_dim, cfg.channel_hidden),
            ch_b1: zeros(cfg.channel_hidden),
            ch_w2: lin(rng, cfg.channel_hidden, mix_dim),
            ch_b2: zeros(mix_dim),
        })
        .collect();
    let proj = Projections {
        centers: randn(rng, &[cfg.num_centers, d], 1.0 / (d as f64).sqrt()),
        w_q: lin(rng, d, d),
        w_k: lin(rng, d, d),
        enc_ln_g: ones(d),
        enc_ln_b: zeros(d),
        mix_ln_g: ones(mix_dim),
        mix_ln_b: zeros(mix_dim),
        head_w: Tensor::zeros(&[mix_dim, cfg.feature_dim]),
        head_b: zeros(cfg.feature_dim),
    };
    Params {
        style,
        encoder,
        mixer,
        proj,
    }
}
