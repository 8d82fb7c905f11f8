//! Reverse-mode automatic differentiation for the trainable fusers.

mod params;
mod tape;
mod tensor;

pub use params::ParamSet;
pub use tape::{AutodiffError, Gradients, NodeId, Tape};
pub use tensor::{unordered_sum, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(0, Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        assert_eq!(tape.value(loss).get(0, 0), 14.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_of_matrix_vector_product_gradient() {
        // f(W) = sum(W x) with W 2x2, x = [5, 7]^T: df/dW_ij = x_j.
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        let x = tape.constant(Tensor::from_rows(&[[5.0], [7.0]]));
        let wx = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(wx);
        assert_eq!(tape.value(loss).get(0, 0), (5.0 - 14.0) + (2.5 + 21.0));
        let grads = tape.backward(loss).unwrap();
        let g = grads.param_grads(&[(2, 2)]);
        assert_eq!(g[0], Tensor::from_rows(&[[5.0, 7.0], [5.0, 7.0]]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(0, Tensor::row_vector(vec![1.0, 2.0]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss { rows: 1, cols: 2 }
        );
    }

    #[test]
    fn unreachable_parameters_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor::row_vector(vec![1.0, 2.0]));
        let _b = tape.param(1, Tensor::row_vector(vec![3.0]));
        let loss = tape.sum_all(a);
        let g = tape.backward(loss).unwrap().param_grads(&[(1, 2), (1, 1)]);
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 6));
        assert_eq!(
            tape.attention(x, x, x, 4).unwrap_err(),
            AutodiffError::Heads(4, 6)
        );
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        assert_eq!(tape.l2_normalize_rows(x).unwrap_err(), AutodiffError::ZeroNorm);
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Checks every entry of every input against central differences.
    fn gradcheck(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let shapes: Vec<_> = inputs.iter().map(Tensor::shape).collect();
        let eval = |values: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<_> = values
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(i, t.clone()))
                .collect();
            let out = f(&mut tape, &ids);
            (tape.value(out).get(0, 0), tape.backward(out).unwrap().param_grads(&shapes))
        };
        let (_, analytic) = eval(&inputs);
        let eps = 1e-4;
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[e] += eps;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[e] -= eps;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic[ti].data()[e];
                let err = if a.abs() < 1e-8 {
                    (a - numeric).abs()
                } else {
                    (a - numeric).abs() / a.abs().max(numeric.abs())
                };
                assert!(err < 1e-4, "input {ti} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Projects a tensor-valued node to a scalar with fixed random weights.
    fn weighted_sum(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
        let (r, c) = tape.value(node).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, r, c));
        let prod = tape.mul(node, w).unwrap();
        tape.sum_all(prod)
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);

        gradcheck(vec![a.clone(), b.clone()], |t, x| {
            let y = t.matmul(x[0], x[1]).unwrap();
            weighted_sum(t, y, 1)
        });
        gradcheck(vec![a.clone(), c.clone()], |t, x| {
            let s = t.add(x[0], x[1]).unwrap();
            let m = t.mul(s, x[1]).unwrap();
            weighted_sum(t, m, 2)
        });
        gradcheck(vec![a.clone(), row.clone()], |t, x| {
            let y = t.add_row(x[0], x[1]).unwrap();
            let y = t.scale(y, -1.5);
            weighted_sum(t, y, 3)
        });
        gradcheck(vec![a.clone()], |t, x| {
            let y = t.relu(x[0]);
            weighted_sum(t, y, 4)
        });
        gradcheck(vec![a.clone(), c.clone()], |t, x| {
            let y = t.concat(&[x[0], x[1]]).unwrap();
            weighted_sum(t, y, 5)
        });
        gradcheck(vec![a.clone(), row.clone()], |t, x| {
            let y = t.stack(&[x[0], x[1]]).unwrap();
            let s = t.sum_rows(y);
            weighted_sum(t, s, 6)
        });
        gradcheck(vec![a.clone()], |t, x| {
            let y = t.softmax_rows(x[0]);
            weighted_sum(t, y, 7)
        });
        gradcheck(vec![a.clone()], |t, x| {
            let y = t.l2_normalize_rows(x[0]).unwrap();
            weighted_sum(t, y, 8)
        });
        gradcheck(vec![a.clone(), row.clone(), random(&mut rng, 1, 4)], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
            weighted_sum(t, y, 9)
        });
        gradcheck(vec![a.clone(), c.clone(), random(&mut rng, 3, 4)], |t, x| {
            let y = t.attention(x[0], x[1], x[2], 2).unwrap();
            weighted_sum(t, y, 10)
        });
        gradcheck(vec![row.clone()], |t, x| {
            let y = t.scale(x[0], 3.0);
            t.cross_entropy(y, 2).unwrap()
        });
        let mask = Tensor::from_rows(&[[2.0, 0.0, 2.0, 0.0]]);
        gradcheck(vec![row], move |t, x| {
            let y = t.mask(x[0], mask.clone()).unwrap();
            weighted_sum(t, y, 11)
        });
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let loss = tape.cross_entropy(l, 0).unwrap();
        assert!((tape.value(loss).get(0, 0) - 0.3133).abs() < 1e-4);
        assert_eq!(
            tape.cross_entropy(l, 2).unwrap_err(),
            AutodiffError::ClassOutOfRange { index: 2, classes: 2 }
        );
    }

    #[test]
    fn attention_and_pooling_are_row_order_invariant_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 8);
        let pooled = |rows: &[usize]| {
            let permuted = Tensor::from_rows(&rows.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>());
            let mut tape = Tape::new();
            let n = tape.constant(permuted);
            let a = tape.attention(n, n, n, 2).unwrap();
            let s = tape.sum_rows(a);
            tape.value(s).clone()
        };
        let base = pooled(&[0, 1, 2, 3]);
        for perm in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
            let p = pooled(&perm);
            assert!(base.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
