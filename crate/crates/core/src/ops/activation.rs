use crate::error::Result;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalized over the channel (class) axis at each `(n, h, w)`.
    Softmax,
}

/// Propagates NaN rather than clamping it to zero.
pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

pub fn relu_bwd<T: Scalar>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn sigmoid_fwd<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid)
}

/// Gradient from the forward output `y = σ(x)`.
pub fn sigmoid_bwd<T: Scalar>(y: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    y.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}

/// Max-subtracted softmax written into `out`.
pub(crate) fn softmax_slice<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let mut y = x.zeros_like();
    let mut row = vec![T::zero(); s.c];
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for p in 0..s.plane() {
            for (c, r) in row.iter_mut().enumerate() {
                *r = x.sample(n)[c * s.plane() + p];
            }
            softmax_slice(&row, &mut out);
            let dst = y.sample_mut(n);
            for (c, &o) in out.iter().enumerate() {
                dst[c * s.plane() + p] = o;
            }
        }
    }
    y
}

/// Gradient from the forward output `y = softmax(x)`.
pub fn softmax_bwd<T: Scalar>(y: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    y.expect_shape("softmax_bwd", grad_out.shape())?;
    let s = y.shape();
    let mut dx = y.zeros_like();
    for n in 0..s.n {
        let ys = y.sample(n);
        let gs = grad_out.sample(n);
        let dst = dx.sample_mut(n);
        for p in 0..s.plane() {
            let dot: T = (0..s.c).map(|c| ys[c * s.plane() + p] * gs[c * s.plane() + p]).sum();
            for c in 0..s.c {
                let i = c * s.plane() + p;
                dst[i] = ys[i] * (gs[i] - dot);
            }
        }
    }
    Ok(dx)
}

pub fn activate<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid_fwd(x),
        Activation::Softmax => softmax(x),
    }
}

/// Backward for any activation given both its input `x` and output `y`.
pub fn activate_bwd<T: Scalar>(
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    kind: Activation,
) -> Result<Tensor4<T>> {
    match kind {
        Activation::Relu => relu_bwd(x, grad_out),
        Activation::Sigmoid => sigmoid_bwd(y, grad_out),
        Activation::Softmax => softmax_bwd(y, grad_out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn v(vals: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, vals.len(), 1, 1), vals.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(relu(&v(&[-1.0, 2.0])).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid_fwd(&v(&[0.0])).data(), &[0.5]);
        assert_eq!(softmax(&v(&[0.0, 0.0])).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = softmax(&v(&[1000.0, 1000.0, -1000.0]));
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(y.data()[2], 0.0);
    }
}
