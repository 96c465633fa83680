//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    /// Weight of the old running value: `r ← m·r + (1−m)·batch`.
    pub momentum: T,
}

/// Saved normalized activations for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub x_hat: Tensor4<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running stats at the identity.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::lit(BN_EPSILON),
            momentum: T::lit(BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        let c = self.channels();
        if x.shape().c != c {
            return Err(Error::ChannelMismatch {
                op: "batchnorm",
                expected: c,
                got: x.shape().c,
            });
        }
        for v in [&self.beta, &self.running_mean, &self.running_var] {
            if v.len() != c {
                return Err(shape_err("batchnorm params", c, v.len()));
            }
        }
        Ok(())
    }
}

fn channel_values<T: Scalar>(x: &Tensor4<T>, c: usize) -> impl Iterator<Item = T> + '_ {
    (0..x.shape().n).flat_map(move |n| x.plane(n, c).iter().copied())
}

/// Train-mode forward. Normalizes with batch statistics and folds them into
/// the running averages.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor4<T>,
    p: &mut BatchNormParams<T>,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    p.check(x)?;
    let s = x.shape();
    let count = s.n * s.plane();
    if count < 2 {
        return Err(Error::EmptyBatch(count));
    }
    let inv_count = T::one() / T::from_usize_lossy(count);
    let mut y = x.zeros_like();
    let mut x_hat = x.zeros_like();
    let mut inv_std = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mean = channel_values(x, c).sum::<T>() * inv_count;
        let var = channel_values(x, c).map(|v| (v - mean) * (v - mean)).sum::<T>() * inv_count;
        let istd = T::one() / (var + p.epsilon).sqrt();
        inv_std.push(istd);
        for n in 0..s.n {
            let src = x.plane(n, c);
            let xh = x_hat.plane_mut(n, c);
            let out = y.plane_mut(n, c);
            for ((h, o), &v) in xh.iter_mut().zip(out).zip(src) {
                *h = (v - mean) * istd;
                *o = p.gamma[c] * *h + p.beta[c];
            }
        }
        let m = p.momentum;
        p.running_mean[c] = m * p.running_mean[c] + (T::one() - m) * mean;
        p.running_var[c] = m * p.running_var[c] + (T::one() - m) * var;
    }
    Ok((y, BatchNormCache { x_hat, inv_std }))
}

pub fn batchnorm_infer<T: Scalar>(x: &Tensor4<T>, p: &BatchNormParams<T>) -> Result<Tensor4<T>> {
    p.check(x)?;
    let s = x.shape();
    let mut y = x.clone();
    for c in 0..s.c {
        let scale = p.gamma[c] / (p.running_var[c] + p.epsilon).sqrt();
        let shift = p.beta[c] - p.running_mean[c] * scale;
        for n in 0..s.n {
            for v in y.plane_mut(n, c) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Mode-dispatching forward; train mode updates running statistics.
pub fn batchnorm<T: Scalar>(x: &Tensor4<T>, p: &mut BatchNormParams<T>, mode: Mode) -> Result<Tensor4<T>> {
    match mode {
        Mode::Train => batchnorm_train(x, p).map(|(y, _)| y),
        Mode::Infer => batchnorm_infer(x, p),
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_train_bwd<T: Scalar>(
    cache: &BatchNormCache<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.expect_shape("batchnorm_train_bwd", cache.x_hat.shape())?;
    let s = grad_out.shape();
    let count = T::from_usize_lossy(s.n * s.plane());
    let mut dx = grad_out.zeros_like();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &h) in grad_out.plane(n, c).iter().zip(cache.x_hat.plane(n, c)) {
                sum_g += g;
                sum_gx += g * h;
            }
        }
        dbeta[c] = sum_g;
        dgamma[c] = sum_gx;
        let k = p.gamma[c] * cache.inv_std[c] / count;
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let h = cache.x_hat.plane(n, c);
            for ((d, &gv), &hv) in dx.plane_mut(n, c).iter_mut().zip(g).zip(h) {
                *d = k * (count * gv - sum_g - hv * sum_gx);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn batchnorm_infer_bwd<T: Scalar>(
    x: &Tensor4<T>,
    p: &BatchNormParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<BatchNormGrads<T>> {
    p.check(x)?;
    grad_out.expect_shape("batchnorm_infer_bwd", x.shape())?;
    let s = x.shape();
    let mut dx = x.zeros_like();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let istd = T::one() / (p.running_var[c] + p.epsilon).sqrt();
        for n in 0..s.n {
            for ((d, &g), &v) in dx.plane_mut(n, c).iter_mut().zip(grad_out.plane(n, c)).zip(x.plane(n, c)) {
                *d = g * p.gamma[c] * istd;
                dgamma[c] += g * (v - p.running_mean[c]) * istd;
                dbeta[c] += g;
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor4::filled(Shape4::new(4, 1, 2, 2), 3.0f64);
        let mut p = BatchNormParams::new(1);
        p.beta[0] = 0.25;
        let y = batchnorm(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn two_samples_normalize_to_unit() {
        let x = Tensor4::from_vec(Shape4::new(2, 1, 1, 1), vec![1.0f64, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        p.epsilon = 0.0;
        let y = batchnorm(&x, &mut p, Mode::Train).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        assert!((p.running_mean[0] - 0.02).abs() < 1e-12);
        assert!((p.running_var[0] - (0.99 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn infer_identity_stats() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![0.5f64, -2.0, 7.0, 1.0]).unwrap();
        let mut p = BatchNormParams::new(2);
        p.epsilon = 0.0;
        assert_eq!(batchnorm(&x, &mut p, Mode::Infer).unwrap(), x);
    }

    #[test]
    fn single_value_per_channel_is_rejected() {
        let x = Tensor4::<f32>::zeros(Shape4::new(1, 2, 1, 1));
        let mut p = BatchNormParams::new(2);
        assert!(matches!(batchnorm_train(&x, &mut p), Err(Error::EmptyBatch(1))));
    }

    #[test]
    fn train_output_statistics() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::<f64>::random_uniform(Shape4::new(6, 3, 4, 4), -2.0, 5.0, &mut rng);
        let mut p = BatchNormParams::new(3);
        p.beta = vec![0.5, -1.0, 2.0];
        let (y, _) = batchnorm_train(&x, &mut p).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = channel_values(&y, c).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - p.beta[c]).abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
