use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fdcheck::{numeric_grad, random_matrix, rel_err};
use super::{Graph, Matrix, NodeId};
use crate::error::Error;

const EPS: f64 = 1e-5;

/// Reduces any node to a scalar through a fixed random projection so the
/// upstream gradient is not uniform.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let (_, cols) = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_matrix(&mut rng, cols, 1, 1.0));
    let y = g.matmul(x, w).unwrap();
    g.sum_all(y).unwrap()
}

/// Builds `op` over `inputs`, runs backward and checks every input gradient
/// against central differences. Returns the worst relative error.
fn check_op<F>(inputs: &[Matrix], op: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let scalar = |ms: &[Matrix]| {
        let mut g = Graph::new();
        let ids: Vec<_> = ms.iter().map(|m| g.param(m.clone())).collect();
        let out = op(&mut g, &ids);
        let loss = project(&mut g, out, 99);
        g.value(loss).get(0, 0)
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = op(&mut g, &ids);
    let loss = project(&mut g, out, 99);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, id) in ids.iter().enumerate() {
        let analytic = g.grad_or_zeros(*id);
        let numeric = numeric_grad(inputs, i, EPS, scalar);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_matrix(&mut rng, 3, 4, 1.0);
    let b = random_matrix(&mut rng, 4, 2, 1.0);
    let err = check_op(&[a, b], |g, ids| g.matmul(ids[0], ids[1]).unwrap());
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.param(Matrix::zeros(2, 3));
    let b = g.param(Matrix::zeros(4, 5));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, (2, 3));
            assert_eq!(rhs, (4, 5));
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn rowwise_scale_identity_and_annihilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_matrix(&mut rng, 4, 8, 1.0);

    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let s = g.param(Matrix::ones(4, 1));
    let out = g.rowwise_scale(xi, s).unwrap();
    assert_eq!(g.value(out), &x);

    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let s = g.param(Matrix::zeros(4, 1));
    let out = g.rowwise_scale(xi, s).unwrap();
    assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    let loss = project(&mut g, out, 3);
    g.backward(loss).unwrap();
    assert!(g.grad(xi).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn rowwise_scale_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_matrix(&mut rng, 4, 8, 1.0);
    let s = random_matrix(&mut rng, 4, 1, 1.0);
    let err = check_op(&[x, s], |g, ids| g.rowwise_scale(ids[0], ids[1]).unwrap());
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn rowwise_scale_rejects_row_mismatch() {
    let mut g = Graph::new();
    let x = g.param(Matrix::zeros(4, 8));
    let s = g.param(Matrix::zeros(3, 1));
    assert!(matches!(g.rowwise_scale(x, s), Err(Error::Dimension { .. })));
}

#[test]
fn blockwise_scale_substitution() {
    let mut g = Graph::new();
    let x = g.param(Matrix::from_vec(1, 4, vec![1., 2., 3., 4.]).unwrap());
    let z = g.param(Matrix::from_vec(1, 2, vec![1., 0.]).unwrap());
    let out = g.blockwise_scale(x, z).unwrap();
    assert_eq!(g.value(out).data(), &[1., 2., 0., 0.]);
}

#[test]
fn blockwise_scale_identity_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(&mut rng, 3, 16, 1.0);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let z = g.param(Matrix::ones(3, 4));
    let out = g.blockwise_scale(xi, z).unwrap();
    assert_eq!(g.value(out), &x);
}

#[test]
fn blockwise_scale_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(&mut rng, 3, 16, 1.0);
    let z = random_matrix(&mut rng, 3, 4, 1.0);
    let err = check_op(&[x, z], |g, ids| g.blockwise_scale(ids[0], ids[1]).unwrap());
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn blockwise_scale_divisibility_error_states_e_and_k() {
    let mut g = Graph::new();
    let x = g.param(Matrix::zeros(2, 10));
    let z = g.param(Matrix::ones(2, 4));
    match g.blockwise_scale(x, z) {
        Err(Error::Divisibility { numerator, divisor, .. }) => assert_eq!((numerator, divisor), (10, 4)),
        other => panic!("expected divisibility error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_uniform_is_log_c() {
    let mut g = Graph::new();
    let l = g.param(Matrix::filled(1, 4, 0.7));
    let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
    assert!((loss.value - 4f64.ln()).abs() < 1e-12);
    assert!((loss.value - 1.3863).abs() < 1e-4);
}

#[test]
fn cross_entropy_saturates_with_margin() {
    let mut prev = f64::INFINITY;
    for margin in [2.0, 5.0, 10.0] {
        let mut g = Graph::new();
        let l = g.param(Matrix::from_vec(1, 3, vec![margin, 0.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap().value;
        assert!(loss >= 0.0 && loss < prev, "margin {margin}: {loss} !< {prev}");
        prev = loss;
    }
    assert!(prev < 1e-4);
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random_matrix(&mut rng, 2, 3, 2.0);
    let labels = [2usize, 0];
    let f = |ms: &[Matrix]| {
        let mut g = Graph::new();
        let l = g.param(ms[0].clone());
        g.softmax_cross_entropy(l, &labels).unwrap().value
    };
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let loss = g.softmax_cross_entropy(l, &labels).unwrap();
    g.backward(loss.node).unwrap();
    let numeric = numeric_grad(&[logits], 0, EPS, f);
    let err = rel_err(g.grad(l).unwrap(), &numeric);
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut g = Graph::new();
    let l = g.param(Matrix::zeros(1, 3));
    assert!(matches!(
        g.softmax_cross_entropy(l, &[3]),
        Err(Error::Index { index: 3, bound: 3, .. })
    ));
}

#[test]
fn concat_rows_puts_top_first() {
    let mut g = Graph::new();
    let p = g.param(Matrix::filled(2, 4, 1.0));
    let x = g.param(Matrix::filled(3, 4, 2.0));
    let out = g.concat_rows(p, x).unwrap();
    let v = g.value(out);
    assert_eq!(v.shape(), (5, 4));
    assert!(v.row(0).iter().chain(v.row(1)).all(|x| *x == 1.0));
    assert!((2..5).all(|r| v.row(r).iter().all(|x| *x == 2.0)));
}

#[test]
fn layer_norm_of_constant_row_is_zero_before_affine() {
    let mut g = Graph::new();
    let x = g.param(Matrix::filled(2, 6, 3.5));
    let gain = g.constant(Matrix::ones(1, 6));
    let bias = g.constant(Matrix::zeros(1, 6));
    let out = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(out).data().iter().all(|v| *v == 0.0));
}

#[test]
fn backward_of_single_leaf_is_one() {
    let mut g = Graph::new();
    let x = g.param(Matrix::scalar(4.2));
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
}

#[test]
fn backward_of_constant_slope() {
    let mut g = Graph::new();
    let x = g.param(Matrix::scalar(2.0));
    let y = g.scale(x, 3.0).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);
    assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
}

#[test]
fn double_backward_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Matrix::scalar(2.0));
    let y = g.scale(x, 3.0).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::State(_))));
    assert!(matches!(g.scale(x, 1.0), Err(Error::State(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let w = g.constant(Matrix::filled(2, 2, 0.5));
    let x = g.param(Matrix::filled(1, 2, 1.0));
    let y = g.matmul(x, w).unwrap();
    let s = g.sum_all(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
}

/// One pre-norm attention block with every weight differentiable.
fn attention_block(g: &mut Graph, ids: &[NodeId], heads: usize) -> NodeId {
    let (x, wq, wk, wv, wo, w1, w2) = (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6]);
    let (gain, bias) = (ids[7], ids[8]);
    let a = g.layer_norm(x, gain, bias).unwrap();
    let q = g.matmul(a, wq).unwrap();
    let k = g.matmul(a, wk).unwrap();
    let v = g.matmul(a, wv).unwrap();
    let att = g.attention(q, k, v, heads).unwrap();
    let o = g.matmul(att, wo).unwrap();
    let h = g.add(x, o).unwrap();
    let f = g.matmul(h, w1).unwrap();
    let f = g.gelu(f).unwrap();
    let f = g.matmul(f, w2).unwrap();
    let h = g.add(h, f).unwrap();
    g.mean_rows(h, 1, 5).unwrap()
}

fn block_inputs(rng: &mut ChaCha8Rng, t: usize, e: usize) -> Vec<Matrix> {
    vec![
        random_matrix(rng, t, e, 1.0),
        random_matrix(rng, e, e, 0.5),
        random_matrix(rng, e, e, 0.5),
        random_matrix(rng, e, e, 0.5),
        random_matrix(rng, e, e, 0.5),
        random_matrix(rng, e, 2 * e, 0.5),
        random_matrix(rng, 2 * e, e, 0.5),
        random_matrix(rng, 1, e, 1.0),
        random_matrix(rng, 1, e, 0.5),
    ]
}

#[test]
fn attention_block_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = block_inputs(&mut rng, 6, 8);
    let err = check_op(&inputs, |g, ids| attention_block(g, ids, 2));
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut g = Graph::new();
    let q = g.param(Matrix::zeros(3, 6));
    assert!(matches!(
        g.attention(q, q, q, 4),
        Err(Error::Divisibility {
            numerator: 6,
            divisor: 4,
            ..
        })
    ));
}

#[test]
fn embedding_and_gather_route_gradients_to_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = random_matrix(&mut rng, 5, 3, 1.0);
    let err = check_op(std::slice::from_ref(&table), |g, ids| {
        let x = g.embedding_lookup(ids[0], &[4, 1, 1, 0]).unwrap();
        g.gather_rows(x, &[2, 0, 2]).unwrap()
    });
    assert!(err <= 1e-6, "rel err {err}");

    let mut g = Graph::new();
    let t = g.param(table);
    assert!(matches!(
        g.embedding_lookup(t, &[5]),
        Err(Error::Index { index: 5, .. })
    ));
}

/// Every primitive, 20 random instances each, within 1e-5.
#[test]
fn every_primitive_passes_twenty_random_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let (m, e) = (rng.random_range(1..5), 4 * rng.random_range(1..4));
        let mut worst = Vec::new();
        let a = random_matrix(&mut rng, m, e, 1.0);
        let b = random_matrix(&mut rng, e, 3, 1.0);
        worst.push((
            "matmul",
            check_op(&[a.clone(), b.clone()], |g, i| g.matmul(i[0], i[1]).unwrap()),
        ));
        let bt = random_matrix(&mut rng, 3, e, 1.0);
        worst.push((
            "matmul_bt",
            check_op(&[a.clone(), bt], |g, i| g.matmul_bt(i[0], i[1]).unwrap()),
        ));
        let s = random_matrix(&mut rng, m, 1, 1.0);
        worst.push((
            "rowwise",
            check_op(&[a.clone(), s], |g, i| g.rowwise_scale(i[0], i[1]).unwrap()),
        ));
        let z = random_matrix(&mut rng, m, 4, 1.0);
        worst.push((
            "blockwise",
            check_op(&[a.clone(), z], |g, i| g.blockwise_scale(i[0], i[1]).unwrap()),
        ));
        let c = random_matrix(&mut rng, 2, e, 1.0);
        worst.push((
            "concat",
            check_op(&[a.clone(), c], |g, i| g.concat_rows(i[0], i[1]).unwrap()),
        ));
        let gain = random_matrix(&mut rng, 1, e, 1.0);
        let bias = random_matrix(&mut rng, 1, e, 1.0);
        worst.push((
            "layer_norm",
            check_op(&[a.clone(), gain, bias], |g, i| g.layer_norm(i[0], i[1], i[2]).unwrap()),
        ));
        worst.push(("gelu", check_op(std::slice::from_ref(&a), |g, i| g.gelu(i[0]).unwrap())));
        let row = random_matrix(&mut rng, 1, e, 1.0);
        worst.push((
            "add_row",
            check_op(&[a.clone(), row], |g, i| g.add_row(i[0], i[1]).unwrap()),
        ));
        let t = m + 2;
        let x = random_matrix(&mut rng, t, e, 1.0);
        worst.push((
            "mean_rows",
            check_op(std::slice::from_ref(&x), |g, i| g.mean_rows(i[0], 1, t).unwrap()),
        ));
        let (q, k, v) = (
            random_matrix(&mut rng, t, e, 1.5),
            random_matrix(&mut rng, t, e, 1.5),
            random_matrix(&mut rng, t, e, 1.5),
        );
        worst.push((
            "attention",
            check_op(&[q, k, v], |g, i| g.attention(i[0], i[1], i[2], 2).unwrap()),
        ));
        let table = random_matrix(&mut rng, 6, e, 1.0);
        worst.push((
            "embedding",
            check_op(&[table], |g, i| g.embedding_lookup(i[0], &[0, 5, 5, 2]).unwrap()),
        ));
        let logits = random_matrix(&mut rng, m, 3, 2.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let analytic = {
            let mut g = Graph::new();
            let l = g.param(logits.clone());
            let loss = g.softmax_cross_entropy(l, &labels).unwrap();
            g.backward(loss.node).unwrap();
            g.grad(l).unwrap().clone()
        };
        let numeric = numeric_grad(&[logits], 0, EPS, |ms| {
            let mut g = Graph::new();
            let l = g.param(ms[0].clone());
            g.softmax_cross_entropy(l, &labels).unwrap().value
        });
        worst.push(("cross_entropy", rel_err(&analytic, &numeric)));
        for (name, err) in worst {
            assert!(err <= 1e-5, "trial {trial}: {name} rel err {err}");
        }
    }
}

#[test]
fn token_importance_identity_holds_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = block_inputs(&mut rng, 6, 8);
    let prompt = random_matrix(&mut rng, 2, 8, 1.0);
    let mut g = Graph::new();
    let p = g.constant(prompt.clone());
    let gamma = g.param(Matrix::ones(2, 1));
    let masked = g.rowwise_scale(p, gamma).unwrap();
    let x = g.constant(inputs[0].clone());
    let seq = g.concat_rows(masked, x).unwrap();
    let mut ids = vec![seq];
    ids.extend(inputs[1..].iter().map(|m| g.constant(m.clone())));
    let gain = g.constant(Matrix::ones(1, 8));
    let bias = g.constant(Matrix::zeros(1, 8));
    ids[7] = gain;
    ids[8] = bias;
    let out = attention_block(&mut g, &ids, 2);
    let loss = project(&mut g, out, 10);
    g.backward(loss).unwrap();

    let dmasked = g.grad(masked).unwrap();
    let dgamma = g.grad(gamma).unwrap();
    for i in 0..2 {
        let mut inner = 0.0;
        for (a, b) in dmasked.row(i).iter().zip(prompt.row(i)) {
            inner += a * b;
        }
        let got = dgamma.get(i, 0);
        let rel = (got - inner).abs() / inner.abs().max(f64::MIN_POSITIVE);
        assert!(rel <= 1e-12, "row {i}: {got} vs {inner}");
    }
}

#[test]
fn unit_masks_leave_values_and_embedding_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = block_inputs(&mut rng, 6, 8);
    let prompt = random_matrix(&mut rng, 2, 8, 1.0);

    let run = |masked: bool| {
        let mut g = Graph::new();
        let p = g.param(prompt.clone());
        let seq_top = if masked {
            let gm = g.param(Matrix::ones(2, 1));
            let zm = g.param(Matrix::ones(2, 4));
            let r = g.rowwise_scale(p, gm).unwrap();
            g.blockwise_scale(r, zm).unwrap()
        } else {
            p
        };
        let x = g.constant(inputs[0].clone());
        let seq = g.concat_rows(seq_top, x).unwrap();
        let mut ids = vec![seq];
        ids.extend(inputs[1..].iter().map(|m| g.constant(m.clone())));
        let out = attention_block(&mut g, &ids, 2);
        let loss = project(&mut g, out, 12);
        let value = g.value(loss).get(0, 0);
        g.backward(loss).unwrap();
        (value, g.grad(p).unwrap().clone())
    };
    let (v0, g0) = run(false);
    let (v1, g1) = run(true);
    assert_eq!(v0.to_bits(), v1.to_bits());
    assert_eq!(g0, g1);
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let eval = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = block_inputs(&mut rng, 6, 8);
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let out = attention_block(&mut g, &ids, 2);
        let loss = project(&mut g, out, 14);
        g.backward(loss).unwrap();
        (g.value(loss).get(0, 0).to_bits(), g.grad(ids[1]).unwrap().clone())
    };
    assert_eq!(eval(), eval());
}
