//! Dense tensors, tape-based reverse-mode differentiation and a
//! finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, softmax_cols, softmax_rows, Real, Tensor, LAYER_NORM_EPS};

pub(crate) use tensor::gemm;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// I.i.d. normal initialisation.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand64(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        randn(rng, shape, 1.0).cast()
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::scalar(3.0);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.mul(v, v);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::<f64>::from_rows(&[vec![0.2, -1.3, 4.0, 0.0]]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.softmax_rows(v);
        let y = tape.sum(s);
        let g = tape.backward(y).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn gelu_values() {
        // tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
        let x = Tensor::<f64>::from_rows(&[vec![1.0, -1.0, 0.0, 6.0]]);
        let mut tape = Tape::new();
        let v = tape.constant_ref(&x);
        let y = tape.gelu(v);
        let out = tape.value(y).data().to_vec();
        assert!((out[0] - 0.841_191_990).abs() < 1e-8);
        assert!((out[1] + 0.158_808_010).abs() < 1e-8);
        assert_eq!(out[2], 0.0);
        assert!((out[3] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.relu(v);
        assert!(matches!(tape.backward(y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = Tensor::<f64>::scalar(2.0);
        let c = Tensor::<f64>::scalar(5.0);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let k = tape.constant_ref(&c);
        let y = tape.mul(v, k);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[5.0]);
        assert!(g.get(k).is_none());
    }

    #[test]
    fn composite_matches_finite_differences() {
        // h = 1e-3 leaves O(h²) truncation error above 1e-4 relative on
        // small-gradient coordinates; 1e-5 in f64 isolates analytic errors.
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                rand64(&mut rng, &[3, 4]),
                rand64(&mut rng, &[4, 5]),
                rand64(&mut rng, &[5]),
                rand64(&mut rng, &[5]),
                rand64(&mut rng, &[3, 5]),
            ];
            let err = finite_difference_check(
                |t, v| {
                    let h = t.matmul(v[0], v[1]);
                    let n = t.layer_norm(h, v[2], v[3]);
                    let s = t.softmax_cols(n);
                    let r = t.softmax_rows(n);
                    let m = t.mul(s, v[4]);
                    let q = t.matmul_nt(r, m);
                    let q = t.gelu(q);
                    t.sum(q)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err:e}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = vec![
            rand64(&mut rng, &[3, 4]),
            rand64(&mut rng, &[4]),
            rand64(&mut rng, &[3, 4]),
            rand64(&mut rng, &[3, 2]),
        ];
        let err = finite_difference_check(
            |t, v| {
                let a = t.mul_row(v[0], v[1]);
                let b = t.add_row(a, v[1]);
                let pos = t.mul(v[2], v[2]);
                let pos = t.add_scalar(pos, 1.0);
                let c = t.div(b, pos);
                let root = t.sqrt(pos);
                let d = t.sub(c, root);
                let tr = t.transpose(d);
                let e = t.matmul_t(d, true, v[3], false);
                let e2 = t.matmul_t(v[3], true, tr, true);
                let e2 = t.sum(e2);
                let rs = t.row_sums(d);
                let rs = t.mul(rs, rs);
                let rs = t.add_scalar(rs, 2.0);
                let f = t.div_rows(d, rs);
                let cs = t.col_sums(f);
                let cat = t.concat_cols(&[d, v[3]]);
                let cat = t.concat_rows(&[cat, cat]);
                let sl = t.slice_rows(cat, 1, 4);
                let sl = t.slice_cols(sl, 2, 3);
                let sl = t.scale(sl, 0.7);
                let s1 = t.sum(e);
                let s2 = t.sum(cs);
                let sq = t.mul(sl, sl);
                let s3 = t.mean(sq);
                let tot = t.add(s1, s2);
                let tot = t.add(tot, e2);
                t.add(tot, s3)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn finite_difference_trivial_functions() {
        let p = vec![Tensor::<f64>::from_rows(&[vec![1.0, 2.0, -3.0]])];
        let constant = finite_difference_check(
            |t, _| t.constant(Tensor::scalar(4.0)),
            &p,
            1e-3,
        )
        .unwrap();
        assert_eq!(constant, 0.0);
        let w = Tensor::<f64>::from_rows(&[vec![0.5], vec![-2.0], vec![3.0]]);
        let linear = finite_difference_check(
            |t, v| {
                let c = t.constant(w.clone());
                t.matmul(v[0], c)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(linear < 1e-7);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[6, 7], 1.0);
        let b = randn(&mut rng, &[7, 3], 1.0);
        let run = || {
            let mut t = Tape::new();
            let (x, y) = (t.param(&a), t.param(&b));
            let z = t.matmul(x, y);
            let z = t.softmax_cols(z);
            t.value(z).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
