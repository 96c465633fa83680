use super::activation::softmax_slice;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let mut grad = vec![T::zero(); logits.len()];
    softmax_slice(logits, &mut grad);
    grad[label] -= T::one();
    Ok((log_sum - logits[label], grad))
}

/// Mean cross-entropy over a batch of `(n, classes, 1, 1)` logits. The
/// returned gradient already carries the `1/n` factor.
pub fn batch_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[u8]) -> Result<(T, Tensor4<T>)> {
    let n = logits.shape().n;
    if labels.len() != n {
        return Err(shape_err("batch_cross_entropy labels", n, labels.len()));
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = logits.zeros_like();
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let (loss, g) = softmax_cross_entropy(logits.sample(i), label as usize)?;
        total += loss;
        for (d, gv) in grad.sample_mut(i).iter_mut().zip(g) {
            *d = gv * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per sample.
pub fn predictions<T: Scalar>(logits: &Tensor4<T>) -> Vec<usize> {
    (0..logits.shape().n)
        .map(|i| {
            let s = logits.sample(i);
            (0..s.len()).fold(0, |best, j| if s[j] > s[best] { j } else { best })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64; 10], 3).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit() {
        let (loss, _) = softmax_cross_entropy(&[50.0f64, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn label_range() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f32; 10], 10),
            Err(Error::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }
}
