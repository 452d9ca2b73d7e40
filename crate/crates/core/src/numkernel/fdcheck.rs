//! Central finite differences, used only as a test oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Matrix;

/// Numerical gradient of `f` with respect to every entry of `inputs[which]`.
pub fn numeric_grad<F>(inputs: &[Matrix], which: usize, eps: f64, f: F) -> Matrix
where
    F: Fn(&[Matrix]) -> f64,
{
    let mut work: Vec<Matrix> = inputs.to_vec();
    let (r, c) = inputs[which].shape();
    let mut out = Matrix::zeros(r, c);
    for idx in 0..r * c {
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + eps;
        let plus = f(&work);
        work[which].data_mut()[idx] = orig - eps;
        let minus = f(&work);
        work[which].data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * eps);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}
