// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{NnError, Result};

/// Temperature softmax, stabilized by subtracting the maximum logit.
pub fn softmax_t(logits: ArrayView1<'_, f64>, temperature: f64) -> Array1<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| ((v - max) / temperature).exp());
    let sum = out.sum();
    out /= sum;
    out
}

/// Row-wise [`softmax_t`].
pub fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&softmax_t(src, temperature));
    }
    out
}

pub fn log_softmax_row(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
///
/// Targets are 0-based class indices.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if targets.len() != n {
        return Err(NnError::ShapeMismatch { expected: vec![n], found: vec![targets.len()] });
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= k) {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, k))));
    }
    let scale = 1.0 / n as f64;
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let logp = log_softmax_row(row);
        total -= logp[targets[i]];
        let mut g = grad.row_mut(i);
        for j in 0..k {
            g[j] = logp[j].exp() * scale;
        }
        g[targets[i]] -= scale;
    }
    Ok((total * scale, grad))
}

/// Gradient reversal, forward direction: identity.
pub fn grl_forward(x: &Array2<f64>) -> Array2<f64> {
    x.clone()
}

/// Gradient reversal, backward direction: `-lambda * upstream`.
pub fn grl_backward(upstream: &Array2<f64>, lambda: f64) -> Array2<f64> {
    upstream.mapv(|g| -lambda * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softmax_examples() {
        let p = softmax_t(array![2.0, 0.0].view(), 1.0);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(p[0], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.1192, epsilon = 1e-4);
        for t in [0.1, 1.0, 7.0] {
            let u = softmax_t(array![3.0, 3.0, 3.0, 3.0].view(), t);
            assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        let hot = softmax_t(array![5.0, -1.0, 2.0].view(), 1e9);
        assert!(hot.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&Array2::zeros((3, 5)), &[0, 4, 2]).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-14);
        let (l, _) = cross_entropy(&array![[2.0, 0.0]], &[0]).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(l, -(e2 / (e2 + 1.0)).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(l, 0.1269, epsilon = 1e-4);
        let (l, _) = cross_entropy(&array![[60.0, 0.0]], &[0]).unwrap();
        assert!(l < 1e-20);
        assert_eq!(
            cross_entropy(&array![[0.0, 0.0]], &[2]).unwrap_err(),
            NnError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = array![[0.3, -1.2, 2.0], [1.0, 0.5, -0.5]];
        let targets = [2, 0];
        let (_, g) = cross_entropy(&logits, &targets).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut a = logits.clone();
                a[[i, j]] += h;
                let mut b = logits.clone();
                b[[i, j]] -= h;
                let fd = (cross_entropy(&a, &targets).unwrap().0 - cross_entropy(&b, &targets).unwrap().0) / (2.0 * h);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn grl_examples() {
        let g = array![[1.0, -2.0]];
        assert_eq!(grl_backward(&g, 0.5), array![[-0.5, 1.0]]);
        assert!(grl_backward(&g, 0.0).iter().all(|v| *v == 0.0));
        assert_eq!(grl_backward(&g, 1.0), -&g);
        assert_eq!(grl_forward(&g), g);
    }
}
