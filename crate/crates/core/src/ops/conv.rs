//! 2-D cross-correlation lowered to matrix products (im2col).

use rayon::prelude::*;

use super::gemm::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Samples per partial weight-gradient accumulator. Fixed so that the
/// reduction order never depends on the thread count.
const GRAD_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Zero padding of `k - 1` total per axis; the extra cell of an even
    /// kernel goes after.
    Same,
}

/// `(before, after)` padding for one axis of a same-padded kernel of length `k`.
pub fn same_pad(k: usize) -> (usize, usize) {
    let total = k.saturating_sub(1);
    (total / 2, total - total / 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_c, in_c, kh, kw)`
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

/// Precomputed geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, stride: usize, padding: Padding) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidStride);
        }
        if bias.len() != weight.shape().n {
            return Err(shape_err("ConvParams::new bias", weight.shape().n, bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Self {
        Self {
            weight: Tensor4::zeros(Shape4::new(out_c, in_c, kh, kw)),
            bias: vec![T::zero(); out_c],
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let g = self.geometry(input)?;
        Ok(Shape4::new(input.n, self.out_channels(), g.out_h, g.out_w))
    }

    fn geometry(&self, input: Shape4) -> Result<Geometry> {
        if self.stride < 1 {
            return Err(Error::InvalidStride);
        }
        if input.c != self.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.in_channels(),
                got: input.c,
            });
        }
        if self.bias.len() != self.out_channels() {
            return Err(shape_err("conv2d bias", self.out_channels(), self.bias.len()));
        }
        let (kh, kw) = self.kernel();
        let ((pt, pb), (pl, pr)) = match self.padding {
            Padding::Valid => ((0, 0), (0, 0)),
            Padding::Same => (same_pad(kh), same_pad(kw)),
        };
        let (ph, pw) = (input.h + pt + pb, input.w + pl + pr);
        if kh > ph || kw > pw {
            return Err(Error::KernelTooLarge {
                kernel: (kh, kw),
                input: (ph, pw),
            });
        }
        Ok(Geometry {
            in_c: input.c,
            h: input.h,
            w: input.w,
            kh,
            kw,
            stride: self.stride,
            pad_top: pt,
            pad_left: pl,
            out_h: (ph - kh) / self.stride + 1,
            out_w: (pw - kw) / self.stride + 1,
        })
    }
}

/// Input row/column feeding output index `o` at kernel offset `k`, or `None` inside padding.
#[inline]
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < len)
}

/// Lowers one sample to a `(in_c·kh·kw) × (out_h·out_w)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for ic in 0..g.in_c {
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = source(oy, ky, g.stride, g.pad_top, g.h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (iy, source(ox, kx, g.stride, g.pad_left, g.w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.w + ix],
                            _ => T::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Position-major transpose of [`im2col`]: `(out_h·out_w) × (in_c·kh·kw)`.
fn im2row<T: Scalar>(x: &[T], g: &Geometry, rows: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let dst = &mut rows[(oy * g.out_w + ox) * k..(oy * g.out_w + ox + 1) * k];
            let mut i = 0;
            for ic in 0..g.in_c {
                let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    let iy = source(oy, ky, g.stride, g.pad_top, g.h);
                    for kx in 0..g.kw {
                        dst[i] = match (iy, source(ox, kx, g.stride, g.pad_left, g.w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.w + ix],
                            _ => T::zero(),
                        };
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input plane layout.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for ic in 0..g.in_c {
        let plane = &mut dx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = source(oy, ky, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = source(ox, kx, g.stride, g.pad_left, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_fwd<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let g = p.geometry(x.shape())?;
    let out_shape = Shape4::new(x.shape().n, p.out_channels(), g.out_h, g.out_w);
    let mut out = Tensor4::zeros(out_shape);
    let (oc, k, pos) = (p.out_channels(), g.patch(), g.positions());
    let weight = p.weight.data();
    out.data_mut()
        .par_chunks_mut(out_shape.sample())
        .enumerate()
        .for_each_init(
            || vec![T::zero(); k * pos],
            |col, (n, y)| {
                im2col(x.sample(n), &g, col);
                for (row, &b) in y.chunks_exact_mut(pos).zip(&p.bias) {
                    row.fill(b);
                }
                matmul_acc(weight, col, y, oc, k, pos);
            },
        );
    Ok(out)
}

pub fn conv2d_bwd<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
    let g = p.geometry(x.shape())?;
    let out_shape = Shape4::new(x.shape().n, p.out_channels(), g.out_h, g.out_w);
    grad_out.expect_shape("conv2d_bwd grad_out", out_shape)?;
    let (oc, k, pos) = (p.out_channels(), g.patch(), g.positions());
    let weight = p.weight.data();
    let sample_in = x.shape().sample();
    let sample_out = out_shape.sample();

    let mut grad_x = x.zeros_like();
    let partials: Vec<(Vec<T>, Vec<T>)> = grad_x
        .data_mut()
        .par_chunks_mut(sample_in * GRAD_GROUP)
        .enumerate()
        .map(|(group, dx_group)| {
            let mut gw = vec![T::zero(); oc * k];
            let mut gb = vec![T::zero(); oc];
            let mut col = vec![T::zero(); k * pos];
            let mut rows = vec![T::zero(); pos * k];
            for (j, dx) in dx_group.chunks_exact_mut(sample_in).enumerate() {
                let n = group * GRAD_GROUP + j;
                let go = &grad_out.data()[n * sample_out..(n + 1) * sample_out];
                for (b, row) in gb.iter_mut().zip(go.chunks_exact(pos)) {
                    for &v in row {
                        *b += v;
                    }
                }
                im2row(x.sample(n), &g, &mut rows);
                matmul_a_bt_acc(go, &rows, &mut gw, oc, pos, k);
                col.fill(T::zero());
                matmul_at_b_acc(weight, go, &mut col, oc, k, pos);
                col2im(&col, &g, dx);
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); oc * k];
    let mut grad_b = vec![T::zero(); oc];
    for (gw, gb) in partials {
        for (a, b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
        for (a, b) in grad_b.iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: grad_x,
        weight: Tensor4::from_vec(p.weight.shape(), grad_w)?,
        bias: grad_b,
    })
}
