use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Fully connected layer `y = x·Wᵀ + b`. Each sample of the input is
/// flattened to a vector of `in_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// Row-major `(out_features, in_features)`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weight: Vec<T>, bias: Vec<T>, in_features: usize, out_features: usize) -> Result<Self> {
        if weight.len() != in_features * out_features {
            return Err(shape_err("DenseParams::new weight", (out_features, in_features), weight.len()));
        }
        if bias.len() != out_features {
            return Err(shape_err("DenseParams::new bias", out_features, bias.len()));
        }
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: vec![T::zero(); in_features * out_features],
            bias: vec![T::zero(); out_features],
            in_features,
            out_features,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.shape().sample() != self.in_features {
            return Err(shape_err("dense input width", self.in_features, x.shape().sample()));
        }
        Ok(())
    }
}

/// Output shape `(n, out_features, 1, 1)`.
pub fn dense_fwd<T: Scalar>(x: &Tensor4<T>, p: &DenseParams<T>) -> Result<Tensor4<T>> {
    p.check(x)?;
    let n = x.shape().n;
    let mut out = Vec::with_capacity(n * p.out_features);
    for i in 0..n {
        let xi = x.sample(i);
        for (row, &b) in p.weight.chunks_exact(p.in_features).zip(&p.bias) {
            let mut acc = b;
            for (&w, &v) in row.iter().zip(xi) {
                acc += w * v;
            }
            out.push(acc);
        }
    }
    Tensor4::from_vec(Shape4::new(n, p.out_features, 1, 1), out)
}

pub fn dense_bwd<T: Scalar>(x: &Tensor4<T>, p: &DenseParams<T>, grad_out: &Tensor4<T>) -> Result<DenseGrads<T>> {
    p.check(x)?;
    let n = x.shape().n;
    grad_out.expect_shape("dense_bwd", Shape4::new(n, p.out_features, 1, 1))?;
    let mut dx = x.zeros_like();
    let mut dw = vec![T::zero(); p.weight.len()];
    let mut db = vec![T::zero(); p.out_features];
    for i in 0..n {
        let xi = x.sample(i);
        let gi = grad_out.sample(i);
        let dxi = dx.sample_mut(i);
        for (o, &g) in gi.iter().enumerate() {
            db[o] += g;
            let row = &p.weight[o * p.in_features..(o + 1) * p.in_features];
            let drow = &mut dw[o * p.in_features..(o + 1) * p.in_features];
            for (((d, dxv), &w), &v) in drow.iter_mut().zip(dxi.iter_mut()).zip(row).zip(xi) {
                *d += g * v;
                *dxv += g * w;
            }
        }
    }
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_bias_passthrough() {
        let p = DenseParams::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2).unwrap();
        assert_eq!(dense_fwd(&row(&[4.0, -1.0]), &p).unwrap().data(), &[4.0, -1.0]);
        let p = DenseParams::new(vec![0.0, 0.0], vec![5.0], 2, 1).unwrap();
        assert_eq!(dense_fwd(&row(&[4.0, -1.0]), &p).unwrap().data(), &[5.0]);
    }

    #[test]
    fn hand_product() {
        let p = DenseParams::new(vec![1.0, 1.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2).unwrap();
        assert_eq!(dense_fwd(&row(&[1.0, 2.0]), &p).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn width_mismatch() {
        let p = DenseParams::<f64>::zeros(3, 2);
        assert!(dense_fwd(&row(&[1.0, 2.0]), &p).is_err());
        assert!(DenseParams::<f64>::new(vec![0.0; 5], vec![0.0; 2], 3, 2).is_err());
    }
}
