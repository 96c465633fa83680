use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Per-sample `2 × C` matrix: row 0 holds the global average of every
/// channel, row 1 the global maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDescriptor<T> {
    samples: usize,
    channels: usize,
    /// `samples × 2 × channels`
    data: Vec<T>,
    /// Position of the (first) maximum within each `(n, c)` plane.
    argmax: Vec<usize>,
}

impl<T: Scalar> ChannelDescriptor<T> {
    /// Builds a descriptor directly from rows; used for gradients and tests.
    pub fn from_rows(samples: usize, channels: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), samples * 2 * channels, "descriptor length");
        Self {
            samples,
            channels,
            data,
            argmax: Vec::new(),
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn avg(&self, n: usize) -> &[T] {
        let c = self.channels;
        &self.data[2 * n * c..(2 * n + 1) * c]
    }

    pub fn max(&self, n: usize) -> &[T] {
        let c = self.channels;
        &self.data[(2 * n + 1) * c..(2 * n + 2) * c]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Global average and global max of every channel, stacked.
pub fn build_descriptor<T: Scalar>(x: &Tensor4<T>) -> ChannelDescriptor<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize_lossy(s.plane());
    let mut data = vec![T::zero(); s.n * 2 * s.c];
    let mut argmax = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            data[2 * n * s.c + c] = plane.iter().copied().sum::<T>() * inv;
            data[(2 * n + 1) * s.c + c] = plane[best];
            argmax.push(best);
        }
    }
    ChannelDescriptor {
        samples: s.n,
        channels: s.c,
        data,
        argmax,
    }
}

/// Routes descriptor gradients back to the input: uniformly over the plane for
/// the average row, to the recorded argmax for the max row.
pub fn build_descriptor_bwd<T: Scalar>(
    input_shape: Shape4,
    desc: &ChannelDescriptor<T>,
    grad: &ChannelDescriptor<T>,
) -> Result<Tensor4<T>> {
    let inv = T::one() / T::from_usize_lossy(input_shape.plane());
    let mut dx = Tensor4::zeros(input_shape);
    for n in 0..input_shape.n {
        let (ga, gm) = (grad.avg(n), grad.max(n));
        for c in 0..input_shape.c {
            let plane = dx.plane_mut(n, c);
            plane.fill(ga[c] * inv);
            plane[desc.argmax[n * input_shape.c + c]] += gm[c];
        }
    }
    Ok(dx)
}
