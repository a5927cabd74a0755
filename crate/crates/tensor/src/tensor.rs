use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Result, TensorError};
use crate::shape::Shape;

/// Dense f64 array with an optional gradient buffer of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Self {
            shape,
            data: vec![value; n],
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Shape::scalar(),
            data: vec![value],
            grad: None,
        }
    }

    /// Entries drawn from N(0, 1).
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..shape.numel()).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; shape.numel()]
        };
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Allocates a zeroed gradient buffer if none exists.
    pub fn ensure_grad(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn drop_grad(&mut self) {
        self.grad = None;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same data under new dimensions with the same element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Copy of channel `c` of sample `n` for rank-4 tensors.
    pub fn channel_plane(&self, n: usize, c: usize) -> Result<&[f64]> {
        let (_, ch, h, w) = self.shape.as_nchw("channel_plane")?;
        let start = (n * ch + c) * h * w;
        Ok(&self.data[start..start + h * w])
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
