use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-4 shape: batch, channels, height, width. Data is row-major
/// with width fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor over a scalar type. `Tensor` (f32) is the storage
/// type used by layers and files; `TensorBase<f64>` backs the gradient
/// checker's shadow evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor = TensorBase<f32>;

impl<T: Scalar> TensorBase<T> {
    pub fn zeros(shape: Shape) -> Self {
        TensorBase {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        TensorBase {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("shape {} needs {} values, got {}", shape, shape.len(), data.len()),
            ));
        }
        Ok(TensorBase { shape, data })
    }

    pub fn shape(&self) -> Shape {
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let idx = self.shape.index(n, c, y, x);
        self.data[idx] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a + scale * *b)
            .collect();
        Ok(TensorBase {
            shape: self.shape,
            data,
        })
    }

    pub fn scaled(&self, scale: T) -> Self {
        TensorBase {
            shape: self.shape,
            data: self.data.iter().map(|v| *v * scale).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TensorBase<U> {
        TensorBase {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl Tensor {
    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}
