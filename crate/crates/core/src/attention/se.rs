//! Squeeze-and-Excitation block: `g = sigmoid(W2·relu(W1·gap(x) + b1) + b2)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gate::{gate_and_scale, gate_and_scale_bwd, ChannelGate};
use crate::error::{Error, Result};
use crate::ops::{global_avg_pool, global_avg_pool_bwd};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub const SE_REDUCTION: usize = 8;

/// Closed-form parameter count for an SE block on `c` channels.
pub fn se_param_count(c: usize) -> usize {
    let h = c / SE_REDUCTION;
    c * h + h + h * c + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SEParams<T> {
    pub channels: usize,
    pub hidden: usize,
    /// `hidden × C`
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `C × hidden`
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> SEParams<T> {
    pub fn zeros(channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(SE_REDUCTION) {
            return Err(Error::ChannelsNotDivisible {
                channels,
                divisor: SE_REDUCTION,
            });
        }
        let hidden = channels / SE_REDUCTION;
        Ok(Self {
            channels,
            hidden,
            w1: vec![T::zero(); hidden * channels],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); channels * hidden],
            b2: vec![T::zero(); channels],
        })
    }

    pub fn he_normal<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels)?;
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
        for w in &mut p.w1 {
            *w = T::lit(n1.sample(rng));
        }
        let n2 = Normal::new(0.0, (2.0 / p.hidden as f64).sqrt()).expect("valid std");
        for w in &mut p.w2 {
            *w = T::lit(n2.sample(rng));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels).expect("validated shape")
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Hidden pre-activations `W1·s + b1` for a squeezed sample `s`.
    fn hidden_pre(&self, s: &[T]) -> Vec<T> {
        self.w1
            .chunks_exact(self.channels)
            .zip(&self.b1)
            .map(|(row, &b)| row.iter().zip(s).fold(b, |acc, (&w, &v)| acc + w * v))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SECache<T> {
    pub squeezed: Tensor4<T>,
    /// `n × hidden` pre-relu activations.
    pub hidden_pre: Vec<T>,
}

impl<T: Scalar> SEParams<T> {
    /// Hidden pre-activations for every sample, exposed for tie screening.
    pub fn hidden_activations(&self, x: &Tensor4<T>) -> Result<Vec<T>> {
        Ok(self.pre_gate(x)?.1.hidden_pre)
    }
}

impl<T: Scalar> ChannelGate<T> for SEParams<T> {
    type Cache = SECache<T>;

    fn pre_gate(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, SECache<T>)> {
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "se",
                expected: self.channels,
                got: s.c,
            });
        }
        let squeezed = global_avg_pool(x);
        let mut hidden_pre = Vec::with_capacity(s.n * self.hidden);
        let mut z = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            let pre = self.hidden_pre(squeezed.sample(n));
            let act: Vec<T> = pre.iter().map(|&v| if v < T::zero() { T::zero() } else { v }).collect();
            for (row, &b) in self.w2.chunks_exact(self.hidden).zip(&self.b2) {
                z.push(row.iter().zip(&act).fold(b, |acc, (&w, &v)| acc + w * v));
            }
            hidden_pre.extend(pre);
        }
        Ok((
            Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), z)?,
            SECache { squeezed, hidden_pre },
        ))
    }

    fn pre_gate_bwd(&self, x: &Tensor4<T>, cache: &SECache<T>, grad_pre: &Tensor4<T>) -> Result<(Tensor4<T>, Self)> {
        let s = x.shape();
        grad_pre.expect_shape("se pre_gate_bwd", Shape4::new(s.n, s.c, 1, 1))?;
        let (c, h) = (self.channels, self.hidden);
        let mut g = self.zeros_like();
        let mut d_squeezed = cache.squeezed.zeros_like();
        for n in 0..s.n {
            let pre = &cache.hidden_pre[n * h..(n + 1) * h];
            let sq = cache.squeezed.sample(n);
            let dz = grad_pre.sample(n);
            let mut d_act = vec![T::zero(); h];
            for (o, &gz) in dz.iter().enumerate() {
                g.b2[o] += gz;
                for j in 0..h {
                    g.w2[o * h + j] += gz * if pre[j] > T::zero() { pre[j] } else { T::zero() };
                    d_act[j] += gz * self.w2[o * h + j];
                }
            }
            let ds = d_squeezed.sample_mut(n);
            for j in 0..h {
                if pre[j] <= T::zero() {
                    continue;
                }
                let dp = d_act[j];
                g.b1[j] += dp;
                for i in 0..c {
                    g.w1[j * c + i] += dp * sq[i];
                    ds[i] += dp * self.w1[j * c + i];
                }
            }
        }
        let dx = global_avg_pool_bwd(s, &d_squeezed)?;
        Ok((dx, g))
    }
}

pub fn se_forward<T: Scalar>(x: &Tensor4<T>, p: &SEParams<T>) -> Result<Tensor4<T>> {
    let (z, _) = p.pre_gate(x)?;
    gate_and_scale(x, &z)
}

pub fn se_backward<T: Scalar>(x: &Tensor4<T>, p: &SEParams<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, SEParams<T>)> {
    let (z, cache) = p.pre_gate(x)?;
    let (mut dx, dz) = gate_and_scale_bwd(x, &z, grad_out)?;
    let (dx_squeeze, grads) = p.pre_gate_bwd(x, &cache, &dz)?;
    dx.add_assign(&dx_squeeze)?;
    Ok((dx, grads))
}
