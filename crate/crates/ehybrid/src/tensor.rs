//! Dense NCHW tensors backed by shared buffers.
//!
//! All activations, parameters and filter responses in this crate are `f64`
//! and laid out as `(batch, channels, height, width)` in row-major order.
//! The buffer is reference counted so that cloning a tensor (for example
//! when a value is captured by the autodiff tape) does not copy the data.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Logical dimensions of a [`Tensor`], ordered `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
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

    /// Total number of elements.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of `(n, c, h, w)` in row-major NCHW order.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense NCHW tensor of `f64` values.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![0.0; shape.count()]),
        }
    }

    /// Wraps an existing buffer. Fails if the length does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot form tensor of shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor by evaluating `f` at every `(n, c, h, w)` position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// A `(1, 1, 1, 1)` tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Read-only view of the underlying buffer in NCHW order.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Element accessor, mostly for tests and small diagnostics.
    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape.count() != 1 {
            return Err(Error::Shape(format!(
                "item() requires a single-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Largest absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// True if every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), s.count() - 1);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        let r = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(r.is_err());
    }

    #[test]
    fn clone_shares_then_copies_on_write() {
        let a = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = a.clone();
        assert!(std::ptr::eq(a.data(), b.data()));
        b.data_mut()[0] = 9.0;
        assert_eq!(a.get(0, 0, 0, 0), 1.0);
        assert_eq!(b.get(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn from_fn_matches_index() {
        let s = Shape::new(2, 2, 2, 2);
        let t = Tensor::from_fn(s, |n, c, h, w| (s.index(n, c, h, w)) as f64);
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
    }
}
