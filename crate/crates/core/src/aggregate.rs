//! Aggregation network: an MLP-Mixer over the `M` cluster tokens predicts
//! per-channel weights `P`, and the fused feature is `Σ_j P_j ⊙ F'_j`.
//!
//! The softmax for `P` runs across clusters independently per channel, so
//! each channel of the output is a convex combination of that channel of
//! `F'`.

use crate::error::{Error, Result};
use crate::model::{FusionModel, MixerBlock, Params};
use crate::numeric::{Real, Tape, Tensor, Var};

/// `P`, `M×C_f`; every column sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T: Real = f32> {
    pub p: Tensor<T>,
}

impl<T: Real> FusionWeights<T> {
    /// Mean weight of each cluster across channels.
    pub fn cluster_importance(&self) -> Vec<T> {
        let c = T::from_usize(self.p.cols()).unwrap();
        (0..self.p.rows())
            .map(|j| self.p.row(j).iter().copied().sum::<T>() / c)
            .collect()
    }
}

fn mixer_block<T: Real>(tape: &mut Tape<'_, T>, b: &MixerBlock<Var>, x: Var) -> Var {
    // Token mixing across the cluster axis.
    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b);
    let ht = tape.transpose(h);
    let t = tape.matmul(ht, b.tok_w1);
    let t = tape.add_row(t, b.tok_b1);
    let t = tape.gelu(t);
    let t = tape.matmul(t, b.tok_w2);
    let t = tape.add_row(t, b.tok_b2);
    let t = tape.transpose(t);
    let x = tape.add(x, t);

    // Channel mixing per token.
    let h = tape.layer_norm(x, b.ln2_g, b.ln2_b);
    let c = tape.matmul(h, b.ch_w1);
    let c = tape.add_row(c, b.ch_b1);
    let c = tape.gelu(c);
    let c = tape.matmul(c, b.ch_w2);
    let c = tape.add_row(c, b.ch_b2);
    tape.add(x, c)
}

/// `P = softmax_over_clusters(Mixer([S', C]))`.
pub(crate) fn cluster_weights_graph<T: Real>(tape: &mut Tape<'_, T>, p: &Params<Var>, s_prime: Var) -> Var {
    let mut x = tape.concat_cols(&[s_prime, p.proj.centers]);
    for block in &p.mixer {
        x = mixer_block(tape, block, x);
    }
    let x = tape.layer_norm(x, p.proj.mix_ln_g, p.proj.mix_ln_b);
    let logits = tape.matmul(x, p.proj.head_w);
    let logits = tape.add_row(logits, p.proj.head_b);
    tape.softmax_cols(logits)
}

/// `Σ_j P_j ⊙ F'_j` as a `1×C_f` row.
pub(crate) fn fuse_graph<T: Real>(tape: &mut Tape<'_, T>, weights: Var, f_prime: Var) -> Var {
    let prod = tape.mul(weights, f_prime);
    tape.col_sums(prod)
}

/// Mixer-predicted fusion weights for clustered style intermediates.
pub fn cluster_weights<T: Real>(s_prime: &Tensor<T>, model: &FusionModel<T>) -> Result<FusionWeights<T>> {
    let cfg = &model.config;
    if s_prime.shape() != [cfg.num_centers, cfg.key_dim()] {
        return Err(Error::Config(format!(
            "S' must be {}x{}, got {:?}",
            cfg.num_centers,
            cfg.key_dim(),
            s_prime.shape()
        )));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let sp = tape.constant_ref(s_prime);
    let w = cluster_weights_graph(&mut tape, &p, sp);
    Ok(FusionWeights {
        p: tape.value(w).clone(),
    })
}

/// Per-channel weighted sum of cluster rows.
pub fn fuse<T: Real>(weights: &FusionWeights<T>, f_prime: &Tensor<T>) -> Result<Vec<T>> {
    if weights.p.shape() != f_prime.shape() {
        return Err(Error::Dimension(format!(
            "P {:?} and F' {:?} differ",
            weights.p.shape(),
            f_prime.shape()
        )));
    }
    let c = f_prime.cols();
    let mut out = vec![T::zero(); c];
    for (prow, frow) in weights.p.data().chunks(c).zip(f_prime.data().chunks(c)) {
        for ((o, &w), &f) in out.iter_mut().zip(prow).zip(frow) {
            *o = *o + w * f;
        }
    }
    Ok(out)
}

/// `f = AGN(S', F')`.
pub fn aggregate<T: Real>(
    s_prime: &Tensor<T>,
    f_prime: &Tensor<T>,
    model: &FusionModel<T>,
) -> Result<(Vec<T>, FusionWeights<T>)> {
    let w = cluster_weights(s_prime, model)?;
    let f = fuse(&w, f_prime)?;
    Ok((f, w))
}
