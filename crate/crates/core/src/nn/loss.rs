//! Categorical cross-entropy and related batch statistics.

use ndarray::{Array2, ArrayView2};

const CLIP: f32 = 1e-7;

/// Mean categorical cross-entropy over a batch of probability rows
/// against one-hot label rows. Probabilities are clipped away from
/// zero and one before taking logs.
pub fn cross_entropy(probs: &ArrayView2<f32>, one_hot: &ArrayView2<f32>) -> f32 {
    let n = probs.nrows().max(1) as f64;
    let mut total = 0.0f64;
    for (p_row, y_row) in probs.rows().into_iter().zip(one_hot.rows()) {
        for (&p, &y) in p_row.iter().zip(y_row.iter()) {
            if y > 0.0 {
                let p = p.clamp(CLIP, 1.0 - CLIP);
                total -= (y as f64) * (p as f64).ln();
            }
        }
    }
    (total / n) as f32
}

/// Gradient of mean cross-entropy with respect to the logits feeding a
/// softmax: (p - y) / batch.
pub fn softmax_ce_grad_logits(probs: &ArrayView2<f32>, one_hot: &ArrayView2<f32>) -> Array2<f32> {
    let inv_n = 1.0 / probs.nrows().max(1) as f32;
    let mut g = probs.to_owned();
    g.zip_mut_with(one_hot, |p, &y| *p = (*p - y) * inv_n);
    g
}

/// Fraction of rows whose argmax matches the one-hot label.
pub fn accuracy_from_probs(probs: &ArrayView2<f32>, one_hot: &ArrayView2<f32>) -> f32 {
    if probs.nrows() == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for (p_row, y_row) in probs.rows().into_iter().zip(one_hot.rows()) {
        let pred = argmax(p_row.as_slice().unwrap());
        let truth = argmax(y_row.as_slice().unwrap());
        if pred == truth {
            hits += 1;
        }
    }
    hits as f32 / probs.nrows() as f32
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_hand_computation() {
        let p = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]];
        let y = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let expected = -((0.7f64.ln() + 0.8f64.ln()) / 2.0) as f32;
        assert!((cross_entropy(&p.view(), &y.view()) - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_clips_zero_probabilities() {
        let p = array![[0.0, 1.0]];
        let y = array![[1.0, 0.0]];
        let loss = cross_entropy(&p.view(), &y.view());
        assert!(loss.is_finite());
        assert!((loss - (-(1e-7f64.ln()) as f32)).abs() < 1e-3);
    }

    #[test]
    fn logit_gradient_is_probability_minus_label_over_batch() {
        let p = array![[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]];
        let y = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let g = softmax_ce_grad_logits(&p.view(), &y.view());
        assert!((g[[0, 0]] - (0.7 - 1.0) / 2.0).abs() < 1e-7);
        assert!((g[[1, 1]] - (0.8 - 1.0) / 2.0).abs() < 1e-7);
        assert!((g[[1, 2]] - 0.05).abs() < 1e-7);
        // Rows of the gradient sum to zero.
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_through_softmax() {
        // loss(z) = CE(softmax(z), y); check d loss / d z numerically.
        let z = array![[0.3f32, -0.7, 1.1], [0.0, 0.2, -0.4]];
        let y = array![[0.0f32, 0.0, 1.0], [1.0, 0.0, 0.0]];
        let softmax = |z: &Array2<f32>| -> Array2<f32> {
            let mut out = z.clone();
            for mut row in out.rows_mut() {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                row.mapv_inplace(|v| (v - max).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            out
        };
        let loss = |z: &Array2<f32>| cross_entropy(&softmax(z).view(), &y.view());
        let analytic = softmax_ce_grad_logits(&softmax(&z).view(), &y.view());
        let eps = 1e-3f32;
        for flat in 0..z.len() {
            let mut zp = z.clone();
            zp.as_slice_mut().unwrap()[flat] += eps;
            let mut zm = z.clone();
            zm.as_slice_mut().unwrap()[flat] -= eps;
            let numeric = (loss(&zp) - loss(&zm)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[flat];
            assert!((numeric - a).abs() < 1e-3, "logit {flat}: {numeric} vs {a}");
        }
    }

    #[test]
    fn accuracy_counts_argmax_matches() {
        let p = array![[0.6, 0.4], [0.3, 0.7], [0.5, 0.5]];
        let y = array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        // Ties resolve to the lowest index, so row 3 counts as class 0.
        assert!((accuracy_from_probs(&p.view(), &y.view()) - 2.0 / 3.0).abs() < 1e-6);
    }
}
