use crate::error::{shape_err, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Shape4, Tensor4};

/// A block that maps a feature tensor to one pre-sigmoid gate value per
/// `(sample, channel)`.
pub trait ChannelGate<T: Scalar>: Sized {
    type Cache;

    /// Pre-gate of shape `(n, C, 1, 1)`.
    fn pre_gate(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Self::Cache)>;

    /// Input gradient through the pre-gate path alone, plus parameter
    /// gradients laid out like `Self`.
    fn pre_gate_bwd(&self, x: &Tensor4<T>, cache: &Self::Cache, grad_pre: &Tensor4<T>) -> Result<(Tensor4<T>, Self)>;
}

fn check<T: Scalar>(x: &Tensor4<T>, pre_gate: &Tensor4<T>) -> Result<()> {
    let s = x.shape();
    if pre_gate.shape() != Shape4::new(s.n, s.c, 1, 1) {
        return Err(shape_err("gate length", (s.n, s.c), pre_gate.shape()));
    }
    Ok(())
}

/// `y[n,c,h,w] = x[n,c,h,w] · sigmoid(pre_gate[n,c])`
pub fn gate_and_scale<T: Scalar>(x: &Tensor4<T>, pre_gate: &Tensor4<T>) -> Result<Tensor4<T>> {
    check(x, pre_gate)?;
    let gate = pre_gate.map(sigmoid);
    Ok(scale_channels(x, gate.data()))
}

/// Multiplies each `(n, c)` plane by `gate[n·C + c]`.
pub fn scale_channels<T: Scalar>(x: &Tensor4<T>, gate: &[T]) -> Tensor4<T> {
    let mut y = x.clone();
    for (plane, &g) in y.data_mut().chunks_exact_mut(x.shape().plane()).zip(gate) {
        for v in plane {
            *v *= g;
        }
    }
    y
}

/// Returns `(dL/dx through the scale factor, dL/dpre_gate)`.
pub fn gate_and_scale_bwd<T: Scalar>(
    x: &Tensor4<T>,
    pre_gate: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check(x, pre_gate)?;
    grad_out.expect_shape("gate_and_scale_bwd", x.shape())?;
    let gate = pre_gate.map(sigmoid);
    let dx = scale_channels(grad_out, gate.data());
    let plane = x.shape().plane();
    let dpre = gate
        .data()
        .iter()
        .zip(x.data().chunks_exact(plane).zip(grad_out.data().chunks_exact(plane)))
        .map(|(&g, (xs, gs))| {
            let dg: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            dg * g * (T::one() - g)
        })
        .collect();
    Ok((dx, Tensor4::from_vec(pre_gate.shape(), dpre)?))
}
