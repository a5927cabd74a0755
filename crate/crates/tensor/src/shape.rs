use std::fmt;

use crate::error::{Result, TensorError};

/// Dimensions of a dense row-major array.
///
/// Image tensors are rank 4 `(N, C, H, W)` or rank 5 `(N, C, D, H, W)`.
/// Lower ranks appear for scalars `[1]` and feature rows `(N, F)`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 5 {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "rank must be between 1 and 5",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                dims: dims.to_vec(),
                reason: "all dimensions must be >= 1",
            });
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Self(vec![1])
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(&[n, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.0[i]
    }

    /// `(N, C, H, W)` of a rank-4 shape.
    pub fn as_nchw(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.0.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 4,
                actual: self.rank(),
            }),
        }
    }

    /// Product of the dimensions after axis 1.
    pub(crate) fn inner_after_channel(&self) -> usize {
        self.0.iter().skip(2).product()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join("x"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_rank() {
        assert!(Shape::new(&[1, 0, 2, 2]).is_err());
        assert!(Shape::new(&[]).is_err());
        assert!(Shape::new(&[1, 1, 1, 1, 1, 1]).is_err());
        assert_eq!(Shape::new(&[2, 3, 4, 5]).unwrap().numel(), 120);
    }
}
