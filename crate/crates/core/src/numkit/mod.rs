//! Dense matrices, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::{log_softmax, logsumexp, softmax, Matrix};
pub use tape::{double_center, row_normalized, CustomOp, Gradients, Tape, Var};
pub(crate) use matrix::log_softmax_unchecked;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().as_scalar(), Some(6.0));
    }

    #[test]
    fn sum_of_softmax_is_flat() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[0.2, -1.0, 3.0, 0.7]).unwrap());
        let ls = tape.log_softmax_rows(x, 1.0).unwrap();
        let p = tape.exp(ls);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        for v in g.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::scalar(2.0));
        let c = tape.constant(Matrix::scalar(5.0));
        let y = tape.mul(w, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().as_scalar(), Some(5.0));
        assert!(g.get(c).is_none());
    }

    /// Loss `sum(tanh(A B) ∘ M)` for a fixed random mask `M`.
    fn matmul_loss(a: &Matrix, b: &Matrix, mask: &Matrix) -> (f64, Matrix, Matrix) {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let mv = tape.constant(mask.clone());
        let c = tape.matmul(av, bv).unwrap();
        let t = tape.tanh(c);
        let m = tape.mul(t, mv).unwrap();
        let s = tape.sum(m);
        let mut g = tape.backward(s).unwrap();
        (
            tape.scalar(s),
            g.take_or_zeros(av, a.shape()),
            g.take_or_zeros(bv, b.shape()),
        )
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 4, 2);
            let mask = random_matrix(&mut rng, 3, 2);
            let (_, da, db) = matmul_loss(&a, &b, &mask);
            let err_a = finite_diff_check(
                |x| matmul_loss(&Matrix::new(3, 4, x.to_vec()).unwrap(), &b, &mask).0,
                da.data(),
                a.data(),
                1e-5,
            );
            let err_b = finite_diff_check(
                |x| matmul_loss(&a, &Matrix::new(4, 2, x.to_vec()).unwrap(), &mask).0,
                db.data(),
                b.data(),
                1e-5,
            );
            assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
        }
    }

    /// Exercises every built-in op in one scalar function of `x` (3×3).
    fn everything(x: &Matrix) -> (f64, Matrix) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let bias = tape.constant(Matrix::row_vector(&[0.1, -0.2, 0.3]).unwrap());
        let b = tape.add_row(xv, bias).unwrap();
        let n = tape.row_normalize(b).unwrap();
        let k = tape.matmul_transposed(n, n).unwrap();
        let kc = tape.center(k).unwrap();
        let t = tape.transpose(kc);
        let prod = tape.mul(kc, t).unwrap();
        let tr = tape.sum(prod);
        let ls = tape.log_softmax_rows(xv, 2.0).unwrap();
        let picked = tape.pick_cols(ls, vec![0, 2, 1]).unwrap();
        let sel = tape.select_rows(xv, vec![2, 0, 2]).unwrap();
        let cat = tape.concat_rows(vec![sel, xv]).unwrap();
        let sq = tape.mul(cat, cat).unwrap();
        let ex = tape.exp(sq);
        let one = tape.constant(Matrix::filled(6, 3, 1.0));
        let sh = tape.add(ex, one).unwrap();
        let lg = tape.ln(sh).unwrap();
        let rt = tape.sqrt(sh).unwrap();
        let dv = tape.div(lg, rt).unwrap();
        let s1 = tape.sum(dv);
        let s2 = tape.sum(picked);
        let s3 = tape.scale(tr, 0.5);
        let a1 = tape.add(s1, s2).unwrap();
        let total = tape.sub(a1, s3).unwrap();
        let mut g = tape.backward(total).unwrap();
        (tape.scalar(total), g.take_or_zeros(xv, x.shape()))
    }

    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 3, 3);
        let (_, grad) = everything(&x);
        let err = finite_diff_check(
            |p| everything(&Matrix::new(3, 3, p.to_vec()).unwrap()).0,
            grad.data(),
            x.data(),
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 3);
        let (v1, g1) = everything(&x);
        let (v2, g2) = everything(&x);
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn log_softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let a = log_softmax(&logits, 1.0).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = log_softmax(&shifted, 1.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let total: f64 = a.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
