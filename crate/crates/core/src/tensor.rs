//! Dense NCHW tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a 4-D tensor in `(batch, channels, rows, cols)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape([n, c, h, w]));
        }
        Ok(Self { n, c, h, w })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        if data.len() != shape.numel() {
            return Err(Error::ElementCount {
                shape: dims,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(dims: [usize; 4], value: T) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        Ok(Self {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: [usize; 4]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape,
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub(crate) fn from_shape(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    /// Per-channel vector stored as a `(1, c, 1, 1)` tensor.
    pub fn channel_vector(values: Vec<T>) -> Result<Self> {
        let c = values.len();
        Self::from_vec([1, c, 1, 1], values)
    }

    /// Samples i.i.d. values uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let data = (0..shape.numel())
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Ok(Self { shape, data })
    }

    /// Samples i.i.d. values from `N(0, std^2)`.
    pub fn normal<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])?;
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, index: [usize; 4]) -> Result<T> {
        let off = self.checked_offset(index)?;
        Ok(self.data[off])
    }

    pub fn set(&mut self, index: [usize; 4], value: T) -> Result<()> {
        let off = self.checked_offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    fn checked_offset(&self, index: [usize; 4]) -> Result<usize> {
        let dims = self.dims();
        if index.iter().zip(dims.iter()).any(|(i, d)| i >= d) {
            return Err(Error::OutOfBounds { index, shape: dims });
        }
        Ok(self.shape.offset(index[0], index[1], index[2], index[3]))
    }

    /// The contiguous `(h, w)` plane for sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, rounding when narrowing.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat of zero tensors".into()))?;
        let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
        let mut c_total = 0;
        for p in parts {
            if p.shape.n != n || p.shape.h != h || p.shape.w != w {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: first.dims(),
                    right: p.dims(),
                });
            }
            c_total += p.shape.c;
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let per = p.shape.c * h * w;
                data.extend_from_slice(&p.data[b * per..(b + 1) * per]);
            }
        }
        Self::from_vec([n, c_total, h, w], data)
    }

    pub(crate) fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor::<f64>::zeros([1, 0, 2, 2]),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn out_of_bounds_read_is_error() {
        let t = Tensor::<f64>::zeros([1, 2, 3, 3]).unwrap();
        assert!(t.get([0, 1, 2, 2]).is_ok());
        assert!(matches!(t.get([0, 2, 0, 0]), Err(Error::OutOfBounds { .. })));
        assert!(matches!(t.get([0, 0, 3, 0]), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn element_count_checked() {
        assert!(matches!(
            Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::ElementCount { .. })
        ));
    }

    #[test]
    fn concat_orders_channels_per_sample() {
        let a = Tensor::<f64>::from_vec([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec([2, 2, 1, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), [2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }
}
