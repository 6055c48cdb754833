//! Central finite-difference utilities shared by unit tests and the
//! acceptance suite.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `x0`, one coordinate at a time.
pub fn numeric_gradient(
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    h: f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    let idxs: Vec<_> = x0.indexed_iter().map(|(i, _)| i).collect();
    for idx in idxs {
        let orig = x[&idx];
        x[&idx] = orig + h;
        let fp = f(&x);
        x[&idx] = orig - h;
        let fm = f(&x);
        x[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference directional/per-coordinate check at a subset of
/// coordinates (flat indices). Returns (analytic, numeric) pairs.
pub fn numeric_gradient_at(
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
    x0: &ArrayD<f64>,
    flat_indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(flat_indices.len());
    let mut x = x0.clone();
    for &fi in flat_indices {
        let idx: Vec<usize> = unravel(fi, x0.shape());
        let orig = x[idx.as_slice()];
        x[idx.as_slice()] = orig + h;
        let fp = f(&x);
        x[idx.as_slice()] = orig - h;
        let fm = f(&x);
        x[idx.as_slice()] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = flat % shape[ax];
        flat /= shape[ax];
    }
    idx
}

/// Relative error with an absolute floor, the comparison used by all
/// gradient checks in this crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
