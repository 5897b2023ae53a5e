//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op of one forward pass. Values enter the tape as
//! constants, differentiable inputs, or parameters from a [`ParamStore`];
//! [`Tape::backward`] then fills gradients for everything reachable from a
//! scalar loss.

mod params;
mod tape;
mod value;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Axis, Tape, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let b = t.constant(m(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0]])).unwrap();
        let b = t.constant(m(&[&[3.0], &[4.0]])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[4, 5])).unwrap();
        assert!(matches!(t.matmul(a, b), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        let y = t.softmax(x, Axis::Cols).unwrap();
        for &v in t.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t.constant(Tensor::row(vec![1f64.ln(), 3f64.ln()]).unwrap()).unwrap();
        let y = t.softmax(x, Axis::Cols).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(y).data()[1], 0.75, epsilon = 1e-15);
        let x = t.constant(Tensor::row(vec![1000.0, 0.0]).unwrap()).unwrap();
        let y = t.softmax(x, Axis::Cols).unwrap();
        assert_abs_diff_eq!(t.value(y).data()[0], 1.0, epsilon = 1e-15);
        assert!(t.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_over_rows_axis() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, 1.0], &[0.0, 1.0]])).unwrap();
        let y = t.softmax(x, Axis::Rows).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 3])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(t.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0]).unwrap()).unwrap();
        assert!(matches!(t.ln(x), Err(crate::Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn constants_do_not_receive_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::row(vec![1.0, 2.0]).unwrap()).unwrap();
        let x = t.input(Tensor::row(vec![3.0, 4.0]).unwrap()).unwrap();
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn composite_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |w: &[f64]| -> f64 {
            let mut t = Tape::new();
            let wv = t.input(Tensor::matrix(3, 4, w.to_vec()).unwrap()).unwrap();
            let xv = t.constant(Tensor::matrix(4, 1, x.clone()).unwrap()).unwrap();
            let z = t.matmul(wv, xv).unwrap();
            let zt = t.transpose(z).unwrap();
            let sm = t.softmax(zt, Axis::Cols).unwrap();
            let sq = t.mul(sm, sm).unwrap();
            let s = t.sum(sq).unwrap();
            t.value(s).item()
        };
        let mut t = Tape::new();
        let wv = t.input(Tensor::matrix(3, 4, w.clone()).unwrap()).unwrap();
        let xv = t.constant(Tensor::matrix(4, 1, x.clone()).unwrap()).unwrap();
        let z = t.matmul(wv, xv).unwrap();
        let zt = t.transpose(z).unwrap();
        let sm = t.softmax(zt, Axis::Cols).unwrap();
        let sq = t.mul(sm, sm).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        let analytic = t.grad(wv).unwrap().data().to_vec();
        let h = 1e-5;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let fd = (eval(&wp) - eval(&wm)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!((fd - analytic[i]).abs() / scale < 1e-5, "coord {i}: {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn param_leaf_is_cached_per_tape() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row(vec![1.0, 2.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, id).unwrap();
        let b = t.param(&store, id).unwrap();
        assert_eq!(a, b);
        let s = t.add(a, b).unwrap();
        let s = t.sum(s).unwrap();
        t.backward(s).unwrap();
        let g = t.param_gradients(&store);
        assert_eq!(g.get(id).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn max_rows_ties_pick_first_row() {
        let mut t = Tape::new();
        let x = t.input(m(&[&[1.0, 5.0], &[1.0, 2.0]])).unwrap();
        let y = t.max_rows(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn row_cosine_of_zero_vector_is_guarded() {
        let mut t = Tape::new();
        let a = t.input(Tensor::row(vec![0.0, 0.0]).unwrap()).unwrap();
        let b = t.input(Tensor::row(vec![1.0, 0.0]).unwrap()).unwrap();
        let c = t.row_cosine(a, b, 1e-12).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(a).unwrap().is_finite());
    }
}
