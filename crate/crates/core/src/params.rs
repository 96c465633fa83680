//! Uniform named views over learnable parameters, used by the optimizer,
//! checkpoints and gradient bookkeeping.

use crate::attention::{CLocalParams, SEParams};
use crate::ops::{BatchNormParams, ConvParams, DenseParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
    Attention,
}

#[derive(Debug)]
pub struct Param<'a, T> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct ParamMut<'a, T> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub dims: Vec<usize>,
    pub data: &'a mut [T],
}

/// A fixed, ordered list of parameter tensors. `params` and `params_mut`
/// must list the same tensors in the same order.
pub trait Parameterized<T> {
    fn params(&self) -> Vec<Param<'_, T>>;
    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

impl<T: Scalar> Parameterized<T> for ConvParams<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        let dims = self.weight.shape().dims().to_vec();
        vec![
            Param { name: "weight", kind: ParamKind::ConvWeight, dims, data: self.weight.data() },
            Param { name: "bias", kind: ParamKind::ConvBias, dims: vec![self.bias.len()], data: &self.bias },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let dims = self.weight.shape().dims().to_vec();
        let bias_dims = vec![self.bias.len()];
        vec![
            ParamMut { name: "weight", kind: ParamKind::ConvWeight, dims, data: self.weight.data_mut() },
            ParamMut { name: "bias", kind: ParamKind::ConvBias, dims: bias_dims, data: &mut self.bias },
        ]
    }
}

impl<T: Scalar> Parameterized<T> for DenseParams<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        vec![
            Param {
                name: "weight",
                kind: ParamKind::DenseWeight,
                dims: vec![self.out_features, self.in_features],
                data: &self.weight,
            },
            Param { name: "bias", kind: ParamKind::DenseBias, dims: vec![self.out_features], data: &self.bias },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: "weight",
                kind: ParamKind::DenseWeight,
                dims: vec![self.out_features, self.in_features],
                data: &mut self.weight,
            },
            ParamMut {
                name: "bias",
                kind: ParamKind::DenseBias,
                dims: vec![self.out_features],
                data: &mut self.bias,
            },
        ]
    }
}

impl<T: Scalar> Parameterized<T> for BatchNormParams<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        let c = vec![self.channels()];
        vec![
            Param { name: "gamma", kind: ParamKind::BnGamma, dims: c.clone(), data: &self.gamma },
            Param { name: "beta", kind: ParamKind::BnBeta, dims: c, data: &self.beta },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let c = vec![self.channels()];
        vec![
            ParamMut { name: "gamma", kind: ParamKind::BnGamma, dims: c.clone(), data: &mut self.gamma },
            ParamMut { name: "beta", kind: ParamKind::BnBeta, dims: c, data: &mut self.beta },
        ]
    }
}

impl<T: Scalar> Parameterized<T> for CLocalParams<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        let (f, l) = (self.filters, self.strand_len);
        let a = ParamKind::Attention;
        vec![
            Param { name: "stage1_w", kind: a, dims: vec![f, 2], data: &self.stage1_w },
            Param { name: "stage1_b", kind: a, dims: vec![f], data: &self.stage1_b },
            Param { name: "stage2_w", kind: a, dims: vec![l, f], data: &self.stage2_w },
            Param { name: "stage2_b", kind: a, dims: vec![1], data: &self.stage2_b },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let (f, l) = (self.filters, self.strand_len);
        let a = ParamKind::Attention;
        vec![
            ParamMut { name: "stage1_w", kind: a, dims: vec![f, 2], data: &mut self.stage1_w },
            ParamMut { name: "stage1_b", kind: a, dims: vec![f], data: &mut self.stage1_b },
            ParamMut { name: "stage2_w", kind: a, dims: vec![l, f], data: &mut self.stage2_w },
            ParamMut { name: "stage2_b", kind: a, dims: vec![1], data: &mut self.stage2_b },
        ]
    }
}

impl<T: Scalar> Parameterized<T> for SEParams<T> {
    fn params(&self) -> Vec<Param<'_, T>> {
        let (c, h) = (self.channels, self.hidden);
        let a = ParamKind::Attention;
        vec![
            Param { name: "w1", kind: a, dims: vec![h, c], data: &self.w1 },
            Param { name: "b1", kind: a, dims: vec![h], data: &self.b1 },
            Param { name: "w2", kind: a, dims: vec![c, h], data: &self.w2 },
            Param { name: "b2", kind: a, dims: vec![c], data: &self.b2 },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let (c, h) = (self.channels, self.hidden);
        let a = ParamKind::Attention;
        vec![
            ParamMut { name: "w1", kind: a, dims: vec![h, c], data: &mut self.w1 },
            ParamMut { name: "b1", kind: a, dims: vec![h], data: &mut self.b1 },
            ParamMut { name: "w2", kind: a, dims: vec![c, h], data: &mut self.w2 },
            ParamMut { name: "b2", kind: a, dims: vec![c], data: &mut self.b2 },
        ]
    }
}
