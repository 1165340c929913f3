//! Cosine-distance losses over fused templates.

use crate::error::{Error, Result};
use crate::metrics::cosine_similarity;
use crate::model::FusionModel;
use crate::numeric::{Real, Tape, Tensor, Var};
use crate::stream::FusionSession;
use crate::style::FeatureRecord;

/// Guard added to cosine denominators.
pub const COSINE_EPS: f64 = 1e-12;

fn mean_cosine_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::Usage("no rows".into()));
    }
    let total: f64 = (0..a.rows()).map(|i| 1.0 - cosine_similarity(a.row(i), b.row(i))).sum();
    Ok(total / a.rows() as f64)
}

/// `mean_b (1 − cos(fused_b, gt_b))`.
pub fn template_loss(fused: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    mean_cosine_distance(fused, gt)
}

/// `mean_b (1 − cos(concurrent_b, split_b))`.
pub fn permutation_consistency_loss(concurrent: &Tensor<f32>, split: &Tensor<f32>) -> Result<f64> {
    mean_cosine_distance(concurrent, split)
}

pub fn total_loss(template: f64, consistency: f64, lambda_p: f64) -> f64 {
    template + lambda_p * consistency
}

/// Fuses `records` by streaming consecutive chunks of the given sizes
/// through a fresh session.
pub fn split_fuse(model: &FusionModel, records: &[FeatureRecord], chunks: &[usize]) -> Result<Vec<f32>> {
    if chunks.iter().sum::<usize>() != records.len() || chunks.contains(&0) {
        return Err(Error::Usage("chunk sizes must be positive and cover the set".into()));
    }
    let mut session = FusionSession::open(0, &model.config);
    let mut start = 0;
    for &n in chunks {
        session.update(&records[start..start + n], model)?;
        start += n;
    }
    Ok(session.finalize(model)?.fused)
}

/// Row-wise cosine similarity of two `B×C` vars, as a `B×1` var.
pub(crate) fn cosine_rows_graph<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Var {
    let ab = tape.mul(a, b);
    let dot = tape.row_sums(ab);
    let aa = tape.mul(a, a);
    let na = tape.row_sums(aa);
    let na = tape.sqrt(na);
    let bb = tape.mul(b, b);
    let nb = tape.row_sums(bb);
    let nb = tape.sqrt(nb);
    let denom = tape.mul(na, nb);
    let denom = tape.add_scalar(denom, T::from_f64_lossy(COSINE_EPS));
    tape.div(dot, denom)
}

/// `mean(1 − cos)` over rows, as a scalar var.
pub(crate) fn cosine_distance_graph<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Var {
    let cos = cosine_rows_graph(tape, a, b);
    let m = tape.mean(cos);
    let neg = tape.scale(m, -T::one());
    tape.add_scalar(neg, T::one())
}
