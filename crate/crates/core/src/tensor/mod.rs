//! Dense row-major f64 tensors with trailing-axis broadcasting and optional
//! participation in a gradient tape.
//!
//! A tensor without a tape link is a plain immutable value and can move
//! freely between threads. Operations record a tape node only when at least
//! one input is tracked, so the same model code doubles as a value-only
//! evaluator when run on detached inputs.

pub mod kernels;
mod tape;

pub use tape::{Gradients, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) node: Option<tape::TapeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// Zero-dim scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single element of a scalar (or any one-element tensor).
    /// Panics on larger tensors; misuse is a programming error, not input.
    pub fn item(&self) -> f64 {
        assert!(
            self.numel() == 1,
            "item() requires a one-element tensor, got shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Same values with no tape link.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Select rows (leading-axis slices) by index, repeats allowed.
    /// Value-level: the result is always detached.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(Error::InvalidParameter {
                what: "gather_rows on a scalar".into(),
            });
        }
        let rows = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidParameter {
                    what: format!("row index {i} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor {
            shape,
            data: Arc::new(out),
            node: None,
        })
    }

    /// Broadcast result shape of two tensors, or a shape-mismatch error.
    pub fn bshape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        kernels::broadcast_shape(a, b).ok_or(Error::ShapeMismatch {
            op: "broadcast",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<f64> = self.data.iter().take(8).copied().collect();
        let ellipsis = if self.data.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor{{shape={:?}, data={:?}{}{}}}",
            self.shape,
            head,
            ellipsis,
            if self.node.is_some() { ", tracked" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { len: 5, .. }));
    }

    #[test]
    fn scalar_is_zero_dim() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn bshape_is_commutative() {
        let cases: [(&[usize], &[usize]); 4] =
            [(&[3, 1], &[1, 4]), (&[2, 3], &[3]), (&[], &[5]), (&[1], &[7, 1])];
        for (a, b) in cases {
            assert_eq!(Tensor::bshape(a, b).unwrap(), Tensor::bshape(b, a).unwrap());
        }
    }

    #[test]
    fn gather_rows_selects_and_detaches() {
        let t = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.shape(), &[3, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }
}
