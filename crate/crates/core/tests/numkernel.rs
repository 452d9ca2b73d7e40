use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xprompt_core::numkernel::{Graph, Matrix, NodeId};
use xprompt_core::Error;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A small transformer-ish block ending in a cross-entropy loss: inputs are
/// `[x, wq, wk, wv, gain, bias, w_out, zeta, gamma]`.
fn block(g: &mut Graph, ids: &[NodeId], heads: usize, labels: &[usize]) -> NodeId {
    let x = g.rowwise_scale(ids[0], ids[8]).unwrap();
    let x = g.blockwise_scale(x, ids[7]).unwrap();
    let q = g.matmul(x, ids[1]).unwrap();
    let k = g.matmul(x, ids[2]).unwrap();
    let v = g.matmul(x, ids[3]).unwrap();
    let a = g.attention(q, k, v, heads).unwrap();
    let h = g.add(x, a).unwrap();
    let h = g.layer_norm(h, ids[4], ids[5]).unwrap();
    let h = g.gelu(h).unwrap();
    let pooled = g.mean_rows(h, 1, g.shape(h).0).unwrap();
    let first = g.gather_rows(h, &[0]).unwrap();
    let both = g.concat_rows(pooled, first).unwrap();
    let logits = g.matmul(both, ids[6]).unwrap();
    g.softmax_cross_entropy(logits, labels).unwrap().node
}

fn block_inputs(seed: u64, t: usize, e: usize, k: usize) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![random_matrix(&mut rng, t, e, 1.0)];
    for _ in 0..3 {
        v.push(random_matrix(&mut rng, e, e, 0.6));
    }
    let mut gain = random_matrix(&mut rng, 1, e, 0.2);
    gain.data_mut().iter_mut().for_each(|x| *x += 1.0);
    v.push(gain);
    v.push(random_matrix(&mut rng, 1, e, 0.2));
    v.push(random_matrix(&mut rng, e, 3, 0.8));
    v.push(Matrix::ones(t, k));
    v.push(Matrix::ones(t, 1));
    v
}

fn eval(inputs: &[Matrix], heads: usize, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let loss = block(&mut g, &ids, heads, labels);
    g.value(loss).get(0, 0)
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let d: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        d / na.max(nb)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn composite_gradients_match_central_differences(seed in 0u64..10_000, t in 2usize..5) {
        let (e, k, heads) = (4, 2, 2);
        let labels = [1, 2];
        let inputs = block_inputs(seed, t, e, k);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let loss = block(&mut g, &ids, heads, &labels);
        g.backward(loss).unwrap();
        let eps = 1e-5;
        for (w, id) in ids.iter().enumerate() {
            let analytic = g.grad_or_zeros(*id);
            let mut numeric = Matrix::zeros(inputs[w].rows(), inputs[w].cols());
            for j in 0..inputs[w].len() {
                let mut plus = inputs.to_vec();
                plus[w].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[w].data_mut()[j] -= eps;
                numeric.data_mut()[j] = (eval(&plus, heads, &labels) - eval(&minus, heads, &labels)) / (2.0 * eps);
            }
            let err = rel_err(&analytic, &numeric);
            prop_assert!(err <= 1e-5, "input {w}: relative error {err:e}");
        }
    }

    #[test]
    fn reachable_grads_are_populated_with_value_shapes(seed in 0u64..10_000, t in 2usize..5) {
        let inputs = block_inputs(seed, t, 4, 2);
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let loss = block(&mut g, &ids, 2, &[0, 1]);
        g.backward(loss).unwrap();
        for id in ids {
            let grad = g.grad(id).expect("reachable parameter has a gradient");
            prop_assert_eq!(grad.shape(), g.value(id).shape());
            prop_assert!(grad.is_finite());
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        logits in proptest::collection::vec(-30.0f64..30.0, 6),
        a in 0usize..3,
        b in 0usize..3,
    ) {
        let mut g = Graph::new();
        let z = g.param(Matrix::from_vec(2, 3, logits).unwrap());
        let loss = g.softmax_cross_entropy(z, &[a, b]).unwrap();
        prop_assert!(loss.value >= 0.0);
        prop_assert!(loss.value.is_finite());
    }

    #[test]
    fn byte_image_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng, rows, cols, 1e3);
        prop_assert_eq!(m.len(), rows * cols);
        let back = Matrix::from_le_bytes(rows, cols, &m.to_le_bytes()).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn from_vec_checks_length() {
    assert!(Matrix::from_vec(2, 3, vec![0.0; 5]).is_err());
    assert!(Matrix::from_le_bytes(1, 1, &[0u8; 7]).is_err());
}

#[test]
fn unit_masks_are_bitwise_identities() {
    let inputs = block_inputs(3, 4, 4, 2);
    let mut g = Graph::new();
    let x = g.param(inputs[0].clone());
    let gamma = g.param(Matrix::ones(4, 1));
    let zeta = g.param(Matrix::ones(4, 2));
    let r = g.rowwise_scale(x, gamma).unwrap();
    let b = g.blockwise_scale(r, zeta).unwrap();
    assert_eq!(g.value(b), &inputs[0]);
}

#[test]
fn second_backward_is_a_state_error() {
    let mut g = Graph::new();
    let x = g.param(Matrix::scalar(2.0));
    let y = g.scale(x, 3.0).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().get(0, 0), 3.0);
    assert!(matches!(g.backward(y), Err(Error::State(_))));
}

#[test]
fn repeated_evaluation_is_bitwise_identical() {
    let inputs = block_inputs(11, 4, 4, 2);
    let a = eval(&inputs, 2, &[0, 2]);
    let b = eval(&inputs, 2, &[0, 2]);
    assert_eq!(a.to_bits(), b.to_bits());
}
