//! Dense f64 tensors and a reverse-mode autodiff tape.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{inject_backward_fault, Gradients, Graph, NodeId, OpKind};
pub use kernels::{centered_sigmoid, log_sigmoid, log_softmax_row, sigmoid};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for bound {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

/// Value-only matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let (ia, ib) = (g.leaf(a, false), g.leaf(b, false));
    let out = g.matmul(ia, ib)?;
    Ok(g.value(out).clone())
}

/// Value-only `log_softmax(logits)[t, targets[t]]` for each row.
pub fn log_softmax_gather(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>, NumericsError> {
    let mut g = Graph::new();
    let il = g.leaf(logits, false);
    let out = g.log_softmax_gather(il, targets)?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        let two = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let three = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut g = Graph::new();
        let (ia, ib) = (g.leaf(&a, true), g.leaf(&b, true));
        let c = g.matmul(ia, ib).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        let ga = grads.get(ia).unwrap();
        // ones(3,2)·bᵀ: every row equals the row sums of b.
        for i in 0..3 {
            for k in 0..4 {
                let expected = b.data()[k * 2] + b.data()[k * 2 + 1];
                assert!((ga[i * 4 + k] - expected).abs() < 1e-14);
            }
        }
        let report = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
                let c = g.matmul(p[0], p[1])?;
                Ok(g.sum(c))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn log_softmax_gather_anchors() {
        let uniform = Tensor::matrix(1, 4, vec![0.3; 4]).unwrap();
        for t in 0..4 {
            let v = log_softmax_gather(&uniform, &[t]).unwrap()[0];
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
        let peaked = Tensor::matrix(1, 3, vec![0.0, 1e6, 0.0]).unwrap();
        let v = log_softmax_gather(&peaked, &[1]).unwrap()[0];
        assert!(v.abs() < 1e-12 && v <= 0.0);
        let err = log_softmax_gather(&uniform, &[4]).unwrap_err();
        assert!(matches!(err, NumericsError::Index { index: 4, bound: 4, .. }));
    }

    #[test]
    fn log_softmax_gather_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, &[5, 8]);
        let targets = [0usize, 7, 3, 3, 5];
        let report = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
                let lp = g.log_softmax_gather(p[0], &targets)?;
                Ok(g.sum(lp))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn sigmoid_graph_values() {
        let x = Tensor::vector(vec![0.0, 1000.0, -1000.0]);
        let mut g = Graph::new();
        let ix = g.leaf(&x, false);
        let s = g.sigmoid(ix);
        let v = g.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-15);
        assert!(v[2].abs() < 1e-300);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn detach_blocks_gradient() {
        let a = Tensor::scalar(0.7);
        let b = Tensor::scalar(2.0);
        let mut g = Graph::new();
        let (ia, ib) = (g.leaf(&a, true), g.leaf(&b, true));
        let da = g.detach(ia);
        let loss = g.mul(da, ib).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(ia).is_none());
        assert_eq!(grads.get(ib).unwrap(), &[0.7]);

        // detach(a)·a: only the undetached factor carries gradient.
        let mut g = Graph::new();
        let ia = g.leaf(&a, true);
        let da = g.detach(ia);
        let loss = g.mul(da, ia).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ia).unwrap(), &[0.7]);
    }

    #[test]
    fn grad_check_square() {
        let x = Tensor::scalar(3.0);
        let report = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> { g.mul(p[0], p[0]) },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.analytic, 6.0);
        assert!((report.numeric - 6.0).abs() < 1e-8);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn grad_check_reports_non_finite_loss() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
                let big = g.scale(p[0], f64::INFINITY);
                Ok(g.sum(big))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[6]);
        let f = |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
            let s = g.sigmoid(p[0]);
            Ok(g.sum(s))
        };
        inject_backward_fault(Some(OpKind::Sigmoid));
        let bad = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
        inject_backward_fault(None);
        let good = grad_check(f, &[x], 1e-5).unwrap();
        assert!(bad.max_rel_error > 1e-2);
        assert!(good.max_rel_error < 1e-8);
    }

    #[test]
    fn composite_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[6, 4]),  // embedding table
            random(&mut rng, &[4]),     // ln gain
            random(&mut rng, &[4]),     // ln bias
            random(&mut rng, &[4, 12]), // qkv
            random(&mut rng, &[12]),
            random(&mut rng, &[4, 6]), // head
        ];
        let ids = [1usize, 4, 2, 0, 5, 3];
        let report = grad_check(
            |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
                let x = g.embedding(p[0], &ids)?;
                let h = g.layer_norm(x, p[1], p[2])?;
                let qkv = g.matmul(h, p[3])?;
                let qkv = g.add_row(qkv, p[4])?;
                let att = g.causal_attention(qkv, 2, 3, 2)?;
                let act = g.gelu(att);
                let res = g.add(act, x)?;
                let sel = g.select_rows(res, &[0, 2, 5])?;
                let logits = g.matmul(sel, p[5])?;
                let lp = g.log_softmax_gather(logits, &[3, 1, 0])?;
                let head = g.slice(lp, 0, 2)?;
                let tail = g.slice(lp, 2, 1)?;
                let both = g.concat(&[head, tail]);
                let s = g.sum(both);
                let ls = g.log_sigmoid(s);
                let sq = g.mul(ls, ls)?;
                let d = g.sub(sq, s)?;
                Ok(g.neg(d))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn log_softmax_rows_are_normalised(
            rows in 1usize..4,
            vals in proptest::collection::vec(-50.0f64..50.0, 24),
        ) {
            let v = 24 / rows;
            let logits = Tensor::matrix(rows, v, vals[..rows * v].to_vec()).unwrap();
            for r in 0..rows {
                let mut total = 0.0;
                for t in 0..v {
                    let mut targets = vec![0; rows];
                    targets[r] = t;
                    let lp = log_softmax_gather(&logits, &targets).unwrap()[r];
                    prop_assert!(lp <= 0.0);
                    total += lp.exp();
                }
                prop_assert!((total - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn detach_equals_constant_substitution(vals in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let x = Tensor::vector(vals.clone());
            let run = |use_detach: bool| {
                let mut g = Graph::new();
                let ix = g.leaf(&x, true);
                let w = if use_detach {
                    let s = g.sigmoid(ix);
                    g.detach(s)
                } else {
                    g.constant(Tensor::vector(vals.iter().map(|v| sigmoid(*v)).collect()))
                };
                let prod = g.mul(w, ix).unwrap();
                let loss = g.sum(prod);
                let grads = g.backward(loss).unwrap();
                (g.scalar(loss).to_bits(), grads.get(ix).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            prop_assert_eq!(run(true), run(false));
        }

        #[test]
        fn random_elementwise_graphs_match_finite_differences(
            vals in proptest::collection::vec(-2.0f64..2.0, 6),
            factor in -3.0f64..3.0,
        ) {
            let x = Tensor::matrix(2, 3, vals).unwrap();
            let bias = Tensor::vector(vec![0.1, -0.2, 0.3]);
            let report = grad_check(
                |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, NumericsError> {
                    let y = g.add_row(p[0], p[1])?;
                    let s = g.sigmoid(y);
                    let e = g.gelu(y);
                    let m = g.mul(s, e)?;
                    let m = g.scale(m, factor);
                    Ok(g.mean(m))
                },
                &[x, bias],
                1e-5,
            ).unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
        }
    }
}
