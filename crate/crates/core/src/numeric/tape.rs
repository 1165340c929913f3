//! Dynamic-graph reverse-mode differentiation.
//!
//! Every op evaluates eagerly and records its inputs on the [`Tape`]. Values
//! are stored per node, so [`Tape::backward`] replays the tape in reverse
//! without recomputation. Parameters can be borrowed into the tape to avoid
//! copying them for every forward pass.

use std::borrow::Cow;

use super::tensor::{gemm, gemm_into, softmax_rows_in_place, Real, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, b: Var },
    MulRow { x: Var, g: Var },
    DivRows { x: Var, v: Var },
    Scale(Var, T),
    AddScalar(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu { x: Var, deriv: Vec<T> },
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, inv_std: Vec<T> },
    RowSums(Var),
    ColSums(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` did not influence the output or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn tanh_fast<T: Real>(u: T) -> T {
    let two = T::from_f64_lossy(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// `(gelu(x), gelu'(x))` with one tanh evaluation.
fn gelu_and_grad<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let x2 = x * x;
    let t = tanh_fast(c * (x + a * x2 * x));
    let y = half * x * (T::one() + t);
    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x2);
    (y, d)
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowed from caller-owned storage.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Trainable leaf that the tape owns.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `a·bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, true)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = gemm(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_row: bias length {} vs {} cols", bv.len(), c);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        self.push(out, Op::AddRow { x, b }, &[x, b])
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(g);
        let c = xv.cols();
        assert_eq!(gv.len(), c, "mul_row: gain length {} vs {} cols", gv.len(), c);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &gg) in row.iter_mut().zip(gv.data()) {
                *o = *o * gg;
            }
        }
        self.push(out, Op::MulRow { x, g }, &[x, g])
    }

    /// Divides row `i` of `x` by `v[i]`.
    pub fn div_rows(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x);
        let vv = self.value(v);
        assert_eq!(vv.len(), xv.rows(), "div_rows: divisor length");
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &d) in out.data_mut().chunks_mut(c).zip(vv.data()) {
            for o in row.iter_mut() {
                *o = *o / d;
            }
        }
        self.push(out, Op::DivRows { x, v }, &[x, v])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let mut out = Vec::with_capacity(xv.len());
        let mut deriv = Vec::with_capacity(xv.len());
        for &x in xv.data() {
            let (y, d) = gelu_and_grad(x);
            out.push(y);
            deriv.push(d);
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        self.push(out, Op::Gelu { x: a, deriv }, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let c = out.cols();
        softmax_rows_in_place(out.data_mut(), c);
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = super::tensor::softmax_cols(self.value(a));
        self.push(out, Op::SoftmaxCols(a), &[a])
    }

    /// Per-row layer norm with affine `g`, `b` (length `cols`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(g), self.value(b));
        let d = xv.cols();
        assert!(d >= 2, "layer_norm needs at least 2 features");
        assert!(gv.len() == d && bv.len() == d, "layer_norm affine length");
        let n = T::from_usize(d).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xhat.len()];
        for (row, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                row[j] = (row[j] - mean) * inv;
                orow[j] = row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, g, b, xhat, inv_std },
            &[x, g, b],
        )
    }

    /// Sum across each row: `m×n → m×1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let sums: Vec<T> = av.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::matrix(sums.len(), 1, sums);
        self.push(out, Op::RowSums(a), &[a])
    }

    /// Sum down each column: `m×n → 1×n`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut sums = vec![T::zero(); c];
        for row in av.data().chunks(c) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s = *s + v;
            }
        }
        self.push(Tensor::matrix(1, c, sums), Op::ColSums(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(v.row(i));
            }
        }
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Tensor::matrix(rows, cols, out), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let out = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::matrix(xv.rows(), len, out), Op::SliceCols { x, start }, &[x])
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let v = self.value(output);
        if v.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::new(v.shape().to_vec(), vec![T::one()]);
        self.backward_seeded(vec![(output, seed)])
    }

    /// Reverse pass from arbitrary upstream gradients, which lets a pipeline
    /// split across tapes chain its backward passes.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::Dimension("seed gradient shape mismatch".into()));
            }
            last = last.max(v.0);
            accumulate(&mut grads[v.0], g.reshape(self.value(v).shape().to_vec()));
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    // y = op(a)·op(b)
                    let slot = &mut grads[a.0];
                    match (ta, tb) {
                        (false, false) => gemm_acc(slot, av, dy, false, bv, true),
                        (false, true) => gemm_acc(slot, av, dy, false, bv, false),
                        (true, false) => gemm_acc(slot, av, bv, false, dy, true),
                        (true, true) => gemm_acc(slot, av, bv, true, dy, true),
                    }
                }
                if self.needs(b) {
                    let slot = &mut grads[b.0];
                    match (ta, tb) {
                        (false, false) => gemm_acc(slot, bv, av, true, dy, false),
                        (false, true) => gemm_acc(slot, bv, dy, true, av, false),
                        (true, false) => gemm_acc(slot, bv, av, false, dy, false),
                        (true, true) => gemm_acc(slot, bv, dy, true, av, true),
                    }
                }
            }
            &Op::Transpose(a) => {
                let g = dy.transpose().reshape(self.value(a).shape().to_vec());
                accumulate(&mut grads[a.0], g);
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], dy.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], dy.zip_map(self.value(b), |g, x| g * x));
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], dy.zip_map(self.value(a), |g, x| g * x));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.needs(a) {
                    accumulate(&mut grads[a.0], dy.zip_map(bv, |g, d| g / d));
                }
                if self.needs(b) {
                    // d(a/b)/db = -y/b
                    let t = dy.zip_map(y, |g, q| g * q);
                    accumulate(&mut grads[b.0], t.zip_map(bv, |v, d| -v / d));
                }
            }
            &Op::AddRow { x, b } => {
                if self.needs(x) {
                    accumulate(&mut grads[x.0], dy.clone());
                }
                if self.needs(b) {
                    let sums = column_sums(dy);
                    accumulate(&mut grads[b.0], Tensor::new(self.value(b).shape().to_vec(), sums));
                }
            }
            &Op::MulRow { x, g } => {
                let (xv, gv) = (self.value(x), self.value(g));
                let c = xv.cols();
                if self.needs(x) {
                    let mut out = dy.clone();
                    for row in out.data_mut().chunks_mut(c) {
                        for (o, &gg) in row.iter_mut().zip(gv.data()) {
                            *o = *o * gg;
                        }
                    }
                    accumulate(&mut grads[x.0], out);
                }
                if self.needs(g) {
                    let sums = column_sums(&dy.zip_map(xv, |a, b| a * b));
                    accumulate(&mut grads[g.0], Tensor::new(gv.shape().to_vec(), sums));
                }
            }
            &Op::DivRows { x, v } => {
                let (xv, vv) = (self.value(x), self.value(v));
                let c = xv.cols();
                if self.needs(x) {
                    let mut out = dy.clone();
                    for (row, &d) in out.data_mut().chunks_mut(c).zip(vv.data()) {
                        for o in row.iter_mut() {
                            *o = *o / d;
                        }
                    }
                    accumulate(&mut grads[x.0], out);
                }
                if self.needs(v) {
                    let gv: Vec<T> = dy
                        .data()
                        .chunks(c)
                        .zip(y.data().chunks(c))
                        .zip(vv.data())
                        .map(|((g, q), &d)| {
                            -g.iter().zip(q).map(|(&a, &b)| a * b).sum::<T>() / d
                        })
                        .collect();
                    accumulate(&mut grads[v.0], Tensor::new(vv.shape().to_vec(), gv));
                }
            }
            &Op::Scale(a, s) => accumulate(&mut grads[a.0], dy.map(|g| g * s)),
            &Op::AddScalar(a) => accumulate(&mut grads[a.0], dy.clone()),
            &Op::Sqrt(a) => {
                let two = T::from_f64_lossy(2.0);
                accumulate(&mut grads[a.0], dy.zip_map(y, |g, r| g / (two * r)));
            }
            &Op::Relu(a) => {
                let g = dy.zip_map(self.value(a), |g, x| if x > T::zero() { g } else { T::zero() });
                accumulate(&mut grads[a.0], g);
            }
            Op::Gelu { x, deriv } => {
                let g = dy.data().iter().zip(deriv).map(|(&g, &d)| g * d).collect();
                accumulate(&mut grads[x.0], Tensor::new(dy.shape().to_vec(), g));
            }
            &Op::SoftmaxRows(a) => {
                accumulate(&mut grads[a.0], softmax_rows_backward(y, dy));
            }
            &Op::SoftmaxCols(a) => {
                let g = softmax_rows_backward(&y.transpose(), &dy.transpose()).transpose();
                accumulate(&mut grads[a.0], g.reshape(y.shape().to_vec()));
            }
            Op::LayerNorm { x, g, b, xhat, inv_std } => {
                let (x, g, b) = (*x, *g, *b);
                let gv = self.value(g);
                let d = y.cols();
                let n = T::from_usize(d).unwrap();
                if self.needs(x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for (((row_dy, row_xh), row_gx), &inv) in dy
                        .data()
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(inv_std)
                    {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = row_dy[j] * gv.data()[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * row_xh[j];
                        }
                        mean_dxh = mean_dxh / n;
                        mean_dxh_xh = mean_dxh_xh / n;
                        for j in 0..d {
                            let dxh = row_dy[j] * gv.data()[j];
                            row_gx[j] = inv * (dxh - mean_dxh - row_xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx));
                }
                if self.needs(g) {
                    let mut gg = vec![T::zero(); d];
                    for (row_dy, row_xh) in dy.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row_dy[j] * row_xh[j];
                        }
                    }
                    accumulate(&mut grads[g.0], Tensor::new(gv.shape().to_vec(), gg));
                }
                if self.needs(b) {
                    let gb = column_sums(dy);
                    accumulate(&mut grads[b.0], Tensor::new(self.value(b).shape().to_vec(), gb));
                }
            }
            &Op::RowSums(a) => {
                let av = self.value(a);
                let c = av.cols();
                let mut g = Vec::with_capacity(av.len());
                for &s in dy.data() {
                    g.extend(std::iter::repeat_n(s, c));
                }
                accumulate(&mut grads[a.0], Tensor::new(av.shape().to_vec(), g));
            }
            &Op::ColSums(a) => {
                let av = self.value(a);
                let mut g = Vec::with_capacity(av.len());
                for _ in 0..av.rows() {
                    g.extend_from_slice(dy.data());
                }
                accumulate(&mut grads[a.0], Tensor::new(av.shape().to_vec(), g));
            }
            &Op::Sum(a) => {
                let av = self.value(a);
                accumulate(&mut grads[a.0], Tensor::full(av.shape(), dy.data()[0]));
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            g.extend_from_slice(&dy.row(i)[offset..offset + w]);
                        }
                        accumulate(&mut grads[p.0], Tensor::new(self.value(p).shape().to_vec(), g));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let g = dy.data()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut grads[p.0], Tensor::new(self.value(p).shape().to_vec(), g));
                    }
                    offset += r;
                }
            }
            &Op::SliceRows { x, start } => {
                let xv = self.value(x);
                let c = xv.cols();
                let g = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
                for (o, &d) in g.data_mut()[start * c..start * c + dy.len()].iter_mut().zip(dy.data()) {
                    *o = *o + d;
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let (c, w) = (xv.cols(), dy.cols());
                let g = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
                for (grow, drow) in g.data_mut().chunks_mut(c).zip(dy.data().chunks(w)) {
                    for (o, &d) in grow[start..start + w].iter_mut().zip(drow) {
                        *o = *o + d;
                    }
                }
            }
        }
    }
}

/// Adds `op(a)·op(b)` into the gradient slot of `like`, allocating it on
/// first use.
fn gemm_acc<T: Real>(slot: &mut Option<Tensor<T>>, like: &Tensor<T>, a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) {
    match slot {
        Some(existing) => {
            gemm_into(a, ta, b, tb, existing.data_mut(), true);
        }
        None => {
            let mut out = vec![T::zero(); like.len()];
            gemm_into(a, ta, b, tb, &mut out, false);
            *slot = Some(Tensor::new(like.shape().to_vec(), out));
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        None => *slot = Some(g),
    }
}

fn column_sums<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let c = t.cols();
    let mut sums = vec![T::zero(); c];
    for row in t.data().chunks(c) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    sums
}

fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.cols();
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), or) in y.data().chunks(c).zip(dy.data().chunks(c)).zip(out.chunks_mut(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..c {
            or[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}
