//! Cluster network: soft-assigns items to `M` global learned centers and
//! produces fixed-size intermediates.
//!
//! Orientation convention used everywhere: the assignment map `A` is
//! `M×N'` (centers index rows, items index columns). Each column is a
//! softmax over centers, so every item distributes unit mass; `row_mass[j]`
//! is the total mass center `j` received.

use crate::error::{Error, Result};
use crate::model::{EncoderBlock, FusionModel, Params};
use crate::numeric::{Real, Tape, Tensor, Var};

/// Added to row masses before normalising a cluster.
pub const CLUSTER_EPS: f64 = 1e-8;

/// `A` plus its per-center row sums.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMap<T: Real = f32> {
    pub a: Tensor<T>,
    pub row_mass: Vec<T>,
}

impl<T: Real> AssignmentMap<T> {
    pub fn new(a: Tensor<T>, row_mass: Vec<T>) -> Self {
        Self { a, row_mass }
    }

    pub fn from_matrix(a: Tensor<T>) -> Self {
        let row_mass = (0..a.rows()).map(|j| a.row(j).iter().copied().sum()).collect();
        Self { a, row_mass }
    }

    pub fn num_centers(&self) -> usize {
        self.a.rows()
    }

    pub fn num_items(&self) -> usize {
        self.a.cols()
    }
}

/// `F'` (`M×C_f`) and `S'` (`M×d`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredIntermediate<T: Real = f32> {
    pub f_prime: Tensor<T>,
    pub s_prime: Tensor<T>,
}

fn encoder_block<T: Real>(tape: &mut Tape<'_, T>, b: &EncoderBlock<Var>, x: Var, heads: usize) -> Var {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let h = tape.layer_norm(x, b.ln1_g, b.ln1_b);
    let qkv = tape.matmul(h, b.w_qkv);
    let qkv = tape.add_row(qkv, b.b_qkv);
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q = tape.slice_cols(qkv, i * dh, dh);
        let k = tape.slice_cols(qkv, d + i * dh, dh);
        let v = tape.slice_cols(qkv, 2 * d + i * dh, dh);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores);
        outs.push(tape.matmul(att, v));
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let o = tape.matmul(o, b.w_o);
    let o = tape.add_row(o, b.b_o);
    let x = tape.add(x, o);

    let h = tape.layer_norm(x, b.ln2_g, b.ln2_b);
    let f = tape.matmul(h, b.w_ff1);
    let f = tape.add_row(f, b.b_ff1);
    let f = tape.gelu(f);
    let f = tape.matmul(f, b.w_ff2);
    let f = tape.add_row(f, b.b_ff2);
    tape.add(x, f)
}

/// Embeds the `N'` keys jointly with the `M` center tokens through the
/// position-free encoder and returns the first `N'` rows.
pub(crate) fn embed_keys_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Params<Var>,
    s: Var,
    heads: usize,
) -> Var {
    let n = tape.value(s).rows();
    let mut x = tape.concat_rows(&[s, p.proj.centers]);
    for block in &p.encoder {
        x = encoder_block(tape, block, x, heads);
    }
    let x = tape.layer_norm(x, p.proj.enc_ln_g, p.proj.enc_ln_b);
    tape.slice_rows(x, 0, n)
}

/// `softmax_col(C·W_q·(K·W_k)ᵀ / √d)`.
pub(crate) fn assignment_from_keys<T: Real>(tape: &mut Tape<'_, T>, p: &Params<Var>, keys: Var) -> Var {
    let d = tape.value(keys).cols();
    let q = tape.matmul(p.proj.centers, p.proj.w_q);
    let k = tape.matmul(keys, p.proj.w_k);
    let logits = tape.matmul_nt(q, k);
    let logits = tape.scale(logits, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
    tape.softmax_cols(logits)
}

/// Style keys `S` → assignment map `A` (`M×N'`).
pub(crate) fn assignment_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Params<Var>,
    s: Var,
    heads: usize,
) -> Var {
    let keys = embed_keys_graph(tape, p, s, heads);
    assignment_from_keys(tape, p, keys)
}

/// Unnormalised `A·V` and row masses (`M×1`).
pub(crate) fn cluster_sums_graph<T: Real>(tape: &mut Tape<'_, T>, a: Var, v: Var) -> (Var, Var) {
    let sums = tape.matmul(a, v);
    let mass = tape.row_sums(a);
    (sums, mass)
}

/// `A·V / (row_mass + ε)`.
pub(crate) fn cluster_graph<T: Real>(tape: &mut Tape<'_, T>, a: Var, v: Var) -> Var {
    let (sums, mass) = cluster_sums_graph(tape, a, v);
    let denom = tape.add_scalar(mass, T::from_f64_lossy(CLUSTER_EPS));
    tape.div_rows(sums, denom)
}

/// Embedded keys for a batch of style vectors (`N'×d`).
pub fn embed_keys<T: Real>(s: &Tensor<T>, model: &FusionModel<T>) -> Result<Tensor<T>> {
    let d = model.config.key_dim();
    if s.rows() == 0 || s.cols() != d {
        return Err(Error::Dimension(format!("keys must be N'x{d} with N' >= 1")));
    }
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let sv = tape.constant_ref(s);
    let k = embed_keys_graph(&mut tape, &p, sv, model.config.num_heads);
    Ok(tape.value(k).clone())
}

/// Assignment map from already-embedded keys.
pub fn assignment_map<T: Real>(
    keys: &Tensor<T>,
    centers: &Tensor<T>,
    w_q: &Tensor<T>,
    w_k: &Tensor<T>,
) -> Result<AssignmentMap<T>> {
    let d = keys.cols();
    if centers.cols() != d || w_q.shape() != [d, d] || w_k.shape() != [d, d] {
        return Err(Error::Dimension("assignment_map: key/center/projection widths disagree".into()));
    }
    let q = crate::numeric::matmul(centers, w_q)?;
    let k = crate::numeric::matmul(keys, w_k)?;
    let inv = T::from_f64_lossy(1.0 / (d as f64).sqrt());
    let logits = crate::numeric::gemm(&q, false, &k, true).map(|v| v * inv);
    Ok(AssignmentMap::from_matrix(crate::numeric::softmax_cols(&logits)))
}

/// Row-normalised cluster averages `A·V / (row_mass + ε)`.
pub fn cluster<T: Real>(a: &AssignmentMap<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if a.num_items() != v.rows() {
        return Err(Error::Dimension(format!(
            "assignment covers {} items, values have {} rows",
            a.num_items(),
            v.rows()
        )));
    }
    let mut out = crate::numeric::matmul(&a.a, v)?;
    let eps = T::from_f64_lossy(CLUSTER_EPS);
    for (j, &m) in a.row_mass.iter().enumerate() {
        let denom = m + eps;
        out.row_mut(j).iter_mut().for_each(|x| *x = *x / denom);
    }
    Ok(out)
}
