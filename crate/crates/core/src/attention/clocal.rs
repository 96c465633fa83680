//! Channel Locality block.
//!
//! The pre-gate for channel `c` is built in two linear stages:
//!
//! 1. `F` filters of size 2×1 mix the stacked `(avg, max)` descriptor of each
//!    channel into `F` maps: `m[c][f] = w1[f][0]·avg[c] + w1[f][1]·max[c] + b1[f]`.
//! 2. One kernel of length `L` slides along the channel strand over all `F`
//!    maps with zero same-padding: `z[c] = b2 + Σ_j Σ_f w2[j][f]·m[c+j−pb][f]`.
//!
//! The gate is `sigmoid(z)`, multiplied into every spatial position of the
//! channel.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::descriptor::{build_descriptor, build_descriptor_bwd, ChannelDescriptor};
use super::gate::{gate_and_scale, gate_and_scale_bwd, ChannelGate};
use crate::error::{shape_err, Error, Result};
use crate::ops::same_pad;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Channel-count ratios giving the number of stage-1 filters (`C / filter_ratio`)
/// and the strand kernel length (`C / strand_ratio`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShapeRule {
    pub filter_ratio: usize,
    pub strand_ratio: usize,
}

impl Default for ShapeRule {
    fn default() -> Self {
        Self {
            filter_ratio: 4,
            strand_ratio: 8,
        }
    }
}

impl ShapeRule {
    pub fn with_strand_ratio(strand_ratio: usize) -> Self {
        Self {
            strand_ratio,
            ..Self::default()
        }
    }

    /// `(F, L)` for `channels`.
    pub fn apply(&self, channels: usize) -> Result<(usize, usize)> {
        if self.filter_ratio == 0 || self.strand_ratio == 0 {
            return Err(Error::Config("shape rule ratios must be positive".into()));
        }
        for divisor in [8, self.filter_ratio, self.strand_ratio] {
            if channels == 0 || !channels.is_multiple_of(divisor) {
                return Err(Error::ChannelsNotDivisible { channels, divisor });
            }
        }
        Ok((channels / self.filter_ratio, channels / self.strand_ratio))
    }
}

/// Default `(F, L) = (C/4, C/8)`.
pub fn clocal_shape_rule(channels: usize) -> Result<(usize, usize)> {
    ShapeRule::default().apply(channels)
}

/// Closed-form learnable parameter count `3F + LF + 1`.
pub fn clocal_param_count(filters: usize, strand_len: usize) -> usize {
    3 * filters + strand_len * filters + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct CLocalParams<T> {
    pub channels: usize,
    pub filters: usize,
    pub strand_len: usize,
    /// `F × 2`, row `f` = (avg weight, max weight)
    pub stage1_w: Vec<T>,
    pub stage1_b: Vec<T>,
    /// `L × F`
    pub stage2_w: Vec<T>,
    /// single bias
    pub stage2_b: Vec<T>,
}

impl<T: Scalar> CLocalParams<T> {
    pub fn zeros(channels: usize, rule: ShapeRule) -> Result<Self> {
        let (filters, strand_len) = rule.apply(channels)?;
        Self::zeros_with(channels, filters, strand_len)
    }

    /// Zero parameters with explicit `F` and `L` (no divisibility rule).
    pub fn zeros_with(channels: usize, filters: usize, strand_len: usize) -> Result<Self> {
        if strand_len > channels {
            return Err(Error::StrandTooLong {
                kernel: strand_len,
                channels,
            });
        }
        Ok(Self {
            channels,
            filters,
            strand_len,
            stage1_w: vec![T::zero(); 2 * filters],
            stage1_b: vec![T::zero(); filters],
            stage2_w: vec![T::zero(); strand_len * filters],
            stage2_b: vec![T::zero()],
        })
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn he_normal<R: Rng + ?Sized>(channels: usize, rule: ShapeRule, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, rule)?;
        // each stage-1 filter sees one avg and one max value
        let n1 = Normal::new(0.0, 1.0f64).expect("valid std");
        for w in &mut p.stage1_w {
            *w = T::lit(n1.sample(rng));
        }
        let fan_in = (p.strand_len * p.filters) as f64;
        let n2 = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut p.stage2_w {
            *w = T::lit(n2.sample(rng));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros_with(self.channels, self.filters, self.strand_len).expect("validated shape")
    }

    pub fn param_count(&self) -> usize {
        self.stage1_w.len() + self.stage1_b.len() + self.stage2_w.len() + self.stage2_b.len()
    }
}

/// Stage 1: linear mix of the descriptor rows. Output shape `(n, 1, C, F)`.
pub fn combine_stage1<T: Scalar>(d: &ChannelDescriptor<T>, w: &[T], b: &[T]) -> Result<Tensor4<T>> {
    let f = b.len();
    if w.len() != 2 * f || f == 0 {
        return Err(shape_err("combine_stage1 weights", (f, 2), w.len()));
    }
    let c = d.channels();
    let mut out = Tensor4::zeros(Shape4::new(d.samples(), 1, c, f));
    for n in 0..d.samples() {
        let (avg, max) = (d.avg(n), d.max(n));
        for (row, (&a, &m)) in out.sample_mut(n).chunks_exact_mut(f).zip(avg.iter().zip(max)) {
            for ((o, wf), &bf) in row.iter_mut().zip(w.chunks_exact(2)).zip(b) {
                *o = wf[0] * a + wf[1] * m + bf;
            }
        }
    }
    Ok(out)
}

pub struct Stage1Grads<T> {
    pub descriptor: ChannelDescriptor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn combine_stage1_bwd<T: Scalar>(
    d: &ChannelDescriptor<T>,
    w: &[T],
    grad_map: &Tensor4<T>,
) -> Result<Stage1Grads<T>> {
    let f = w.len() / 2;
    let c = d.channels();
    grad_map.expect_shape("combine_stage1_bwd", Shape4::new(d.samples(), 1, c, f))?;
    let mut gd = vec![T::zero(); d.samples() * 2 * c];
    let mut gw = vec![T::zero(); 2 * f];
    let mut gb = vec![T::zero(); f];
    for n in 0..d.samples() {
        let (avg, max) = (d.avg(n), d.max(n));
        for (ch, row) in grad_map.sample(n).chunks_exact(f).enumerate() {
            let (mut ga, mut gm) = (T::zero(), T::zero());
            for (fi, &g) in row.iter().enumerate() {
                gw[2 * fi] += g * avg[ch];
                gw[2 * fi + 1] += g * max[ch];
                gb[fi] += g;
                ga += g * w[2 * fi];
                gm += g * w[2 * fi + 1];
            }
            gd[2 * n * c + ch] = ga;
            gd[(2 * n + 1) * c + ch] = gm;
        }
    }
    Ok(Stage1Grads {
        descriptor: ChannelDescriptor::from_rows(d.samples(), c, gd),
        weight: gw,
        bias: gb,
    })
}

/// Stage 2: single same-padded 1-D kernel along the channel strand, summed
/// over the `F` maps. `m` has shape `(n, 1, C, F)`, `w` is `L × F`. Output
/// pre-gate has shape `(n, C, 1, 1)`.
pub fn strand_conv_stage2<T: Scalar>(m: &Tensor4<T>, w: &[T], bias: T) -> Result<Tensor4<T>> {
    let s = m.shape();
    let (c, f) = (s.h, s.w);
    if s.c != 1 || w.is_empty() || !w.len().is_multiple_of(f) {
        return Err(shape_err("strand_conv_stage2 kernel", ("L", f), w.len()));
    }
    let l = w.len() / f;
    if l > c {
        return Err(Error::StrandTooLong { kernel: l, channels: c });
    }
    let (pb, _) = same_pad(l);
    let mut out = Tensor4::zeros(Shape4::new(s.n, c, 1, 1));
    for n in 0..s.n {
        let map = m.sample(n);
        for (ch, o) in out.sample_mut(n).iter_mut().enumerate() {
            let mut acc = bias;
            for (j, wrow) in w.chunks_exact(f).enumerate() {
                let Some(src) = (ch + j).checked_sub(pb).filter(|&i| i < c) else {
                    continue;
                };
                for (&wv, &mv) in wrow.iter().zip(&map[src * f..(src + 1) * f]) {
                    acc += wv * mv;
                }
            }
            *o = acc;
        }
    }
    Ok(out)
}

pub struct Stage2Grads<T> {
    pub map: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: T,
}

pub fn strand_conv_stage2_bwd<T: Scalar>(m: &Tensor4<T>, w: &[T], grad_pre: &Tensor4<T>) -> Result<Stage2Grads<T>> {
    let s = m.shape();
    let (c, f) = (s.h, s.w);
    grad_pre.expect_shape("strand_conv_stage2_bwd", Shape4::new(s.n, c, 1, 1))?;
    let (pb, _) = same_pad(w.len() / f);
    let mut gm = m.zeros_like();
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = T::zero();
    for n in 0..s.n {
        let map = m.sample(n);
        let gmap = gm.sample_mut(n);
        for (ch, &g) in grad_pre.sample(n).iter().enumerate() {
            gb += g;
            for (j, (wrow, gwrow)) in w.chunks_exact(f).zip(gw.chunks_exact_mut(f)).enumerate() {
                let Some(src) = (ch + j).checked_sub(pb).filter(|&i| i < c) else {
                    continue;
                };
                let range = src * f..(src + 1) * f;
                for (((gwv, gmv), &wv), &mv) in gwrow.iter_mut().zip(&mut gmap[range.clone()]).zip(wrow).zip(&map[range]) {
                    *gwv += g * mv;
                    *gmv += g * wv;
                }
            }
        }
    }
    Ok(Stage2Grads {
        map: gm,
        weight: gw,
        bias: gb,
    })
}

/// Intermediates of one C-Local pre-gate evaluation.
#[derive(Debug, Clone)]
pub struct CLocalCache<T> {
    pub descriptor: ChannelDescriptor<T>,
    pub map: Tensor4<T>,
}

impl<T: Scalar> CLocalParams<T> {
    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.shape().c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "clocal",
                expected: self.channels,
                got: x.shape().c,
            });
        }
        Ok(())
    }
}

impl<T: Scalar> ChannelGate<T> for CLocalParams<T> {
    type Cache = CLocalCache<T>;

    fn pre_gate(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, CLocalCache<T>)> {
        self.check_input(x)?;
        let descriptor = build_descriptor(x);
        let map = combine_stage1(&descriptor, &self.stage1_w, &self.stage1_b)?;
        let z = strand_conv_stage2(&map, &self.stage2_w, self.stage2_b[0])?;
        Ok((z, CLocalCache { descriptor, map }))
    }

    fn pre_gate_bwd(&self, x: &Tensor4<T>, cache: &CLocalCache<T>, grad_pre: &Tensor4<T>) -> Result<(Tensor4<T>, Self)> {
        let s2 = strand_conv_stage2_bwd(&cache.map, &self.stage2_w, grad_pre)?;
        let s1 = combine_stage1_bwd(&cache.descriptor, &self.stage1_w, &s2.map)?;
        let dx = build_descriptor_bwd(x.shape(), &cache.descriptor, &s1.descriptor)?;
        let grads = Self {
            stage1_w: s1.weight,
            stage1_b: s1.bias,
            stage2_w: s2.weight,
            stage2_b: vec![s2.bias],
            ..self.zeros_like()
        };
        Ok((dx, grads))
    }
}

pub fn clocal_forward<T: Scalar>(x: &Tensor4<T>, p: &CLocalParams<T>) -> Result<Tensor4<T>> {
    let (z, _) = p.pre_gate(x)?;
    gate_and_scale(x, &z)
}

/// Gradients of the full block with respect to the input and every
/// parameter, through both the direct scale path and the descriptor path.
pub fn clocal_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &CLocalParams<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, CLocalParams<T>)> {
    let (z, cache) = p.pre_gate(x)?;
    let (mut dx, dz) = gate_and_scale_bwd(x, &z, grad_out)?;
    let (dx_desc, grads) = p.pre_gate_bwd(x, &cache, &dz)?;
    dx.add_assign(&dx_desc)?;
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shape_rules() {
        assert_eq!(clocal_shape_rule(32).unwrap(), (8, 4));
        assert_eq!(clocal_shape_rule(64).unwrap(), (16, 8));
        assert_eq!(clocal_shape_rule(128).unwrap(), (32, 16));
        assert_eq!(ShapeRule::with_strand_ratio(4).apply(32).unwrap(), (8, 8));
        assert!(matches!(clocal_shape_rule(36), Err(Error::ChannelsNotDivisible { .. })));
    }

    #[test]
    fn param_counts() {
        for (c, n) in [(32, 57), (64, 177), (128, 609)] {
            let p = CLocalParams::<f32>::zeros(c, ShapeRule::default()).unwrap();
            assert_eq!(p.param_count(), n);
            assert_eq!(clocal_param_count(p.filters, p.strand_len), n);
        }
    }

    #[test]
    fn stage1_selector_and_midpoint() {
        let d = ChannelDescriptor::from_rows(1, 2, vec![2.0f64, -1.0, 4.0, 3.0]);
        let m = combine_stage1(&d, &[1.0, 0.0, 0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(m.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(m.data(), &[2.0, 3.0, -1.0, 1.0]);
        assert!(combine_stage1(&d, &[1.0, 0.0, 0.5], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn stage2_even_kernel_end_padding() {
        let m = Tensor4::from_vec(Shape4::new(1, 1, 4, 1), vec![1.0f64; 4]).unwrap();
        let z = strand_conv_stage2(&m, &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(z.data(), &[2.0, 2.0, 2.0, 1.0]);
        let z = strand_conv_stage2(&m, &[0.0, 0.0], 0.75).unwrap();
        assert_eq!(z.data(), &[0.75; 4]);
        assert!(matches!(
            strand_conv_stage2(&m, &[1.0; 5], 0.0),
            Err(Error::StrandTooLong { kernel: 5, channels: 4 })
        ));
    }

    #[test]
    fn zero_params_halve_input() {
        let x = Tensor4::from_vec(Shape4::new(1, 8, 1, 2), (0..16).map(f64::from).collect()).unwrap();
        let p = CLocalParams::zeros(8, ShapeRule::default()).unwrap();
        let y = clocal_forward(&x, &p).unwrap();
        assert_eq!(y, x.map(|v| 0.5 * v));
    }

    #[test]
    fn output_shape_and_channel_check() {
        let x = Tensor4::<f32>::zeros(Shape4::new(2, 64, 16, 16));
        let p = CLocalParams::zeros(64, ShapeRule::default()).unwrap();
        assert_eq!(p.param_count(), 177);
        assert_eq!(clocal_forward(&x, &p).unwrap().shape(), x.shape());
        let q = CLocalParams::<f32>::zeros(32, ShapeRule::default()).unwrap();
        assert!(matches!(clocal_forward(&x, &q), Err(Error::ChannelMismatch { .. })));
    }
}
