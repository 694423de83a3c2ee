//! Plain-tensor loss functions for evaluation and reporting. Training
//! uses the tape's differentiable twins; both share the same clamping and
//! batch-mean conventions.

use super::PROB_CLAMP;
use crate::element::Element;
use crate::tensor::{Tensor, TensorError};

/// Row-wise softmax with max subtraction: `[N, K]` logits to `[N, K]`
/// probabilities, each row summing to 1.
pub fn softmax<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::BadRank {
            op: "softmax",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let mut out = vec![E::ZERO; n * k];
    for (row_out, row) in out.chunks_mut(k).zip(logits.data().chunks(k)) {
        let max = row.iter().fold(row[0], |m, &v| m.maximum(v));
        let mut sum = E::ZERO;
        for (o, &v) in row_out.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Batch-mean categorical cross entropy `-sum_i w_i y_i log p_i` over
/// `[N, M]` probabilities and one-hot (or soft) targets, with optional
/// per-class weights. Probabilities are clamped away from 0 and 1 before
/// the log.
pub fn cross_entropy<E: Element>(
    pred_probs: &Tensor<E>,
    true_onehot: &Tensor<E>,
    class_weights: Option<&[E]>,
) -> Result<E, TensorError> {
    let shape = pred_probs.shape();
    if shape.len() != 2 {
        return Err(TensorError::BadRank {
            op: "cross_entropy",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    if true_onehot.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: true_onehot.shape().to_vec(),
        });
    }
    let (n, m) = (shape[0], shape[1]);
    if let Some(w) = class_weights {
        if w.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy class weights",
                lhs: vec![w.len()],
                rhs: vec![m],
            });
        }
    }
    let (lo, hi) = (E::from_f64(PROB_CLAMP), E::ONE - E::from_f64(PROB_CLAMP));
    let mut total = E::ZERO;
    for (preds, truths) in pred_probs.data().chunks(m).zip(true_onehot.data().chunks(m)) {
        for (j, (&p, &y)) in preds.iter().zip(truths).enumerate() {
            let w = class_weights.map_or(E::ONE, |w| w[j]);
            total -= w * y * p.maximum(lo).minimum(hi).ln();
        }
    }
    Ok(total / E::from_f64(n as f64))
}

/// Batch-mean squared error over `[N, 1]` (or `[N]`) predictions and
/// targets of the same shape.
pub fn mse<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E, TensorError> {
    let n = match pred.shape() {
        [n] => *n,
        [n, 1] => *n,
        other => {
            return Err(TensorError::BadRank {
                op: "mse",
                expected: 2,
                shape: other.to_vec(),
            })
        }
    };
    if pred.numel() != target.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mut total = E::ZERO;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        total += (p - t) * (p - t);
    }
    Ok(total / E::from_f64(n as f64))
}
