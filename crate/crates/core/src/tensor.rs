//! Rank-4 `(n, c, h, w)` tensor, channel-major and row-major within a plane.

use std::ops::{Index, IndexMut};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample.
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::InvalidShape(shape.dims()));
        }
        if data.len() != shape.len() {
            return Err(shape_err("Tensor4::from_vec", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| T::lit(rng.gen_range(lo..hi))).collect();
        Self { shape, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    /// Bounds-checked element access.
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> Option<T> {
        let s = self.shape;
        (n < s.n && c < s.c && h < s.h && w < s.w).then(|| self.data[self.offset(n, c, h, w)])
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.sample();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.sample();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape("zip_map", other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape("add_assign", other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise precision conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Gathers the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let s = self.shape;
        let mut data = Vec::with_capacity(indices.len() * s.sample());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            shape: Shape4::new(indices.len(), s.c, s.h, s.w),
            data,
        }
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: Shape4) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err(op, shape, self.shape));
        }
        Ok(())
    }
}

impl<T: Scalar> Index<[usize; 4]> for Tensor4<T> {
    type Output = T;

    fn index(&self, [n, c, h, w]: [usize; 4]) -> &T {
        let s = self.shape;
        assert!(
            n < s.n && c < s.c && h < s.h && w < s.w,
            "index ({n}, {c}, {h}, {w}) out of bounds for {s}"
        );
        &self.data[self.offset(n, c, h, w)]
    }
}

impl<T: Scalar> IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, [n, c, h, w]: [usize; 4]) -> &mut T {
        let s = self.shape;
        assert!(
            n < s.n && c < s.c && h < s.h && w < s.w,
            "index ({n}, {c}, {h}, {w}) out of bounds for {s}"
        );
        let o = self.offset(n, c, h, w);
        &mut self.data[o]
    }
}
