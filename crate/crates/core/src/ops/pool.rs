use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output cell, the flat input offset of the winner (first maximum in
/// row-major window order).
pub fn maxpool2x2<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::OddSpatial { h: s.h, w: s.w });
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    let data = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.offset(n, c, 0, 0);
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor4::from_vec(out_shape, out)?, argmax))
}

pub fn maxpool2x2_bwd<T: Scalar>(input_shape: Shape4, argmax: &[usize], grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    let expected = Shape4::new(input_shape.n, input_shape.c, input_shape.h / 2, input_shape.w / 2);
    grad_out.expect_shape("maxpool2x2_bwd", expected)?;
    let mut dx = Tensor4::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Mean over each `(h, w)` plane, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize_lossy(s.plane());
    let data = x.data().chunks_exact(s.plane()).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_bwd<T: Scalar>(input_shape: Shape4, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    grad_out.expect_shape("global_avg_pool_bwd", Shape4::new(input_shape.n, input_shape.c, 1, 1))?;
    let inv = T::one() / T::from_usize_lossy(input_shape.plane());
    let mut dx = Tensor4::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_exact_mut(input_shape.plane()).zip(grad_out.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}
