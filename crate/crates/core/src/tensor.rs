use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimensions of a [`Tensor4`] in (batch, channel, height, width) order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-4 array, row-major in (N, C, H, W) order.
#[derive(Clone, PartialEq)]
pub struct Tensor4<S> {
    data: Vec<S>,
    dims: Dims,
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, S::zero())
    }

    pub fn full(dims: Dims, value: S) -> Self {
        assert!(
            dims.n >= 1 && dims.c >= 1 && dims.h >= 1 && dims.w >= 1,
            "tensor dims must be positive, got {dims}"
        );
        Tensor4 {
            data: vec![value; dims.len()],
            dims,
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<S>) -> Result<Self> {
        if dims.n == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::Config(format!("tensor dims must be positive, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Config(format!(
                "tensor {dims} needs {} elements, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Tensor4 { data, dims })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut t = Self::zeros(dims);
        let mut i = 0;
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        t.data[i] = f(n, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(dims: Dims, bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = S::from_f64_lossy(rng.gen_range(-bound..bound));
        }
        t
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let d = self.dims;
        debug_assert!(n < d.n && c < d.c && h < d.h && w < d.w);
        ((n * d.c + c) * d.h + h) * d.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// One sample as a contiguous `C·H·W` slice.
    pub fn sample(&self, n: usize) -> &[S] {
        let s = self.dims.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [S] {
        let s = self.dims.sample();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// One channel plane of one sample.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            data: self.data.iter().map(|&v| f(v)).collect(),
            dims: self.dims,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.dims, other.dims, "zip_map dims mismatch");
        Tensor4 {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            dims: self.dims,
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        assert_eq!(self.dims, other.dims, "add_scaled dims mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "add_assign dims mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            dims: self.dims,
        }
    }

    /// Copies samples `indices` (in order) into a new batch.
    pub fn gather_samples(&self, indices: &[usize]) -> Self {
        let s = self.dims.sample();
        let mut data = Vec::with_capacity(indices.len() * s);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor4 {
            data,
            dims: Dims::new(indices.len(), self.dims.c, self.dims.h, self.dims.w),
        }
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor4<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor4({}, [", self.dims)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "])")
    }
}
