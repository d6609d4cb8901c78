use crate::scalar::Scalar;

use super::{NetError, Tensor};

/// Predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_shapes<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<(), NetError> {
    if pred.shape() != target.shape() {
        return Err(NetError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(w) = weights {
        if w.shape() != pred.shape() {
            return Err(NetError::ShapeMismatch(format!(
                "weight mask {:?} vs prediction {:?}",
                w.shape(),
                pred.shape()
            )));
        }
    }
    Ok(())
}

fn weight_total<T: Scalar>(n: usize, weights: Option<&Tensor<T>>) -> T {
    match weights {
        Some(w) => w.data().iter().copied().sum(),
        None => T::from_f64_lossy(n as f64),
    }
}

/// Binary cross-entropy, averaged over elements (weighted average when a
/// weight mask is given). A zero total weight yields zero loss.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<T, NetError> {
    check_shapes(pred, target, weights)?;
    let lo = T::from_f64_lossy(BCE_CLAMP);
    let hi = T::one() - lo;
    let mut total = T::zero();
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weights.map_or(T::one(), |w| w.data()[i]);
        if w == T::zero() {
            continue;
        }
        let p = p.max(lo).min(hi);
        total += -w * (t * p.ln() + (T::one() - t) * (T::one() - p).ln());
    }
    let denom = weight_total(pred.len(), weights);
    Ok(if denom > T::zero() { total / denom } else { T::zero() })
}

/// `dL/d(pred)` of [`bce_loss`]; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: Option<&Tensor<T>>) -> Result<Tensor<T>, NetError> {
    check_shapes(pred, target, weights)?;
    let lo = T::from_f64_lossy(BCE_CLAMP);
    let hi = T::one() - lo;
    let denom = weight_total(pred.len(), weights);
    let mut g = Tensor::zeros(pred.shape().to_vec());
    if denom <= T::zero() {
        return Ok(g);
    }
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weights.map_or(T::one(), |w| w.data()[i]);
        if p <= lo || p >= hi {
            continue;
        }
        g.data_mut()[i] = w * (p - t) / (p * (T::one() - p)) / denom;
    }
    Ok(g)
}

/// `dL/d(logits)` for BCE applied after a sigmoid: `w * (p - t) / Σw`.
///
/// This is the exact derivative of the unclamped loss and stays informative
/// when the sigmoid saturates.
pub fn bce_sigmoid_logit_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<Tensor<T>, NetError> {
    check_shapes(pred, target, weights)?;
    let denom = weight_total(pred.len(), weights);
    let mut g = Tensor::zeros(pred.shape().to_vec());
    if denom <= T::zero() {
        return Ok(g);
    }
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let w = weights.map_or(T::one(), |w| w.data()[i]);
        g.data_mut()[i] = w * (p - t) / denom;
    }
    Ok(g)
}
