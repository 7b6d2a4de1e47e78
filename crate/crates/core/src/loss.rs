//! Training objectives.
//!
//! Loss values are always accumulated in f64 no matter what precision the
//! network runs in; gradients are cast back to the network's scalar type.
//! The task loss is a two-class focal loss with label smoothing; the concept
//! loss is plain MSE over every (sample, concept) cell.

use crate::nn::{Scalar, Tensor};

const P_FLOOR: f64 = 1e-12;

/// Focal loss with smoothed targets, batch-averaged.
///
/// With `gamma == 0` and `smoothing == 0` this reduces exactly to softmax
/// cross-entropy. Returns the scalar loss and d(loss)/d(logits) including
/// the 1/N batch factor.
pub fn focal_loss<R: Scalar>(
    logits: &Tensor<R>,
    labels: &[u8],
    gamma: f64,
    smoothing: f64,
) -> (f64, Tensor<R>) {
    assert_eq!(logits.shape.len(), 2);
    assert_eq!(logits.shape[1], 2, "task head emits two logits");
    assert_eq!(logits.shape[0], labels.len());
    assert!(gamma >= 0.0 && (0.0..1.0).contains(&smoothing));
    let n = labels.len();
    assert!(n > 0, "empty batch");

    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape.clone());
    for s in 0..n {
        let z0 = logits.data[2 * s].to_f64();
        let z1 = logits.data[2 * s + 1].to_f64();
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let sum = e0 + e1;
        let p = [
            (e0 / sum).clamp(P_FLOOR, 1.0 - P_FLOOR),
            (e1 / sum).clamp(P_FLOOR, 1.0 - P_FLOOR),
        ];
        let y = labels[s] as usize;
        assert!(y < 2, "labels must be 0 or 1");
        let t = [
            if y == 0 { 1.0 - smoothing / 2.0 } else { smoothing / 2.0 },
            if y == 1 { 1.0 - smoothing / 2.0 } else { smoothing / 2.0 },
        ];

        let mut a = [0.0f64; 2];
        for k in 0..2 {
            let q = 1.0 - p[k];
            total -= t[k] * q.powf(gamma) * p[k].ln();
            // dL/dp_k; the gamma term vanishes identically at gamma == 0 and
            // is skipped to avoid 0^(-1) at p -> 1.
            let mut dk = q.powf(gamma) / p[k];
            if gamma > 0.0 {
                dk -= gamma * q.powf(gamma - 1.0) * p[k].ln();
            }
            a[k] = -t[k] * dk;
        }
        let inner = a[0] * p[0] + a[1] * p[1];
        for k in 0..2 {
            grad.data[2 * s + k] = R::from_f64(p[k] * (a[k] - inner) / n as f64);
        }
    }
    (total / n as f64, grad)
}

/// Mean squared error across all (sample, concept) cells; targets are given
/// row-major with the same layout as the prediction tensor.
pub fn concept_mse<R: Scalar>(pred: &Tensor<R>, target: &[f64]) -> (f64, Tensor<R>) {
    assert_eq!(pred.numel(), target.len());
    assert!(!target.is_empty(), "empty concept target");
    let n = pred.numel() as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(pred.shape.clone());
    for (i, (&p, &t)) in pred.data.iter().zip(target).enumerate() {
        let d = p.to_f64() - t;
        total += d * d;
        grad.data[i] = R::from_f64(2.0 * d / n);
    }
    (total / n, grad)
}

/// Weighted sum of the two objectives.
pub fn total_loss(task: f64, concept: f64, alpha: f64, beta: f64) -> f64 {
    beta * task + alpha * concept
}
