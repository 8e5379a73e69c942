//! Dense 4-D tensors, the reverse-mode graph that differentiates them, and
//! the `.ten` container format.

mod conv;
mod fused;
mod graph;
pub mod gradcheck;
pub mod io;
mod linalg;
mod nn;
mod ops;

use std::fmt;
use std::ops::BitOr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use graph::{Gradients, Graph, Var};
pub use nn::{BnOptions, RunningStats};
pub use ops::sigmoid;

/// `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    /// Vectors are stored as `(len, 1, 1, 1)`.
    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Shape with every axis in `axes` collapsed to 1.
    pub fn reduced(&self, axes: Axes) -> Self {
        let mut d = self.dims();
        for (i, di) in d.iter_mut().enumerate() {
            if axes.contains(i) {
                *di = 1;
            }
        }
        Self::from_dims(d)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Set of tensor axes, used by reductions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Axes(u8);

impl Axes {
    pub const N: Axes = Axes(1);
    pub const C: Axes = Axes(2);
    pub const H: Axes = Axes(4);
    pub const W: Axes = Axes(8);
    pub const SPATIAL: Axes = Axes(4 | 8);
    pub const CHW: Axes = Axes(2 | 4 | 8);
    pub const NHW: Axes = Axes(1 | 4 | 8);
    pub const ALL: Axes = Axes(15);

    pub fn contains(&self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }
}

impl BitOr for Axes {
    type Output = Axes;
    fn bitor(self, rhs: Axes) -> Axes {
        Axes(self.0 | rhs.0)
    }
}

/// Train/eval switch for dropout and batch norm.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Immutable dense `f64` tensor in row-major `(n, c, h, w)` order.
///
/// Cloning is cheap: the buffer is reference counted.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(Error::Shape(format!("every dimension must be >= 1, got {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fill shape {shape} ({} values)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn randn(shape: Shape, std: f64, rng: &mut RngStream) -> Self {
        let data = (0..shape.numel()).map(|_| std * rng.normal()).collect();
        Self::from_parts(shape, data)
    }

    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut RngStream) -> Self {
        let data = (0..shape.numel()).map(|_| rng.uniform_range(lo, hi)).collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!("item() on non-scalar tensor {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Item `i` of the batch as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let s = self.shape;
        if i >= s.n {
            return Err(Error::Shape(format!("batch index {i} out of range for {s}")));
        }
        let len = s.c * s.plane();
        Ok(Self::from_parts(
            Shape::new(1, s.c, s.h, s.w),
            self.data[i * len..(i + 1) * len].to_vec(),
        ))
    }

    /// Concatenate along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot stack {s} with {first}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self::from_parts(Shape::new(n, first.c, first.h, first.w), data))
    }
}
