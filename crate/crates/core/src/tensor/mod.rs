//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a flat row-major buffer plus its shape. Operations live
//! on a [`Tape`]: while the tape is recording, every op appends a node with
//! the saved forward value, and [`Tape::backward`] replays the node list in
//! reverse to accumulate gradients. Tensors that require gradients are
//! registered as leaves the first time an op touches them, so layer
//! parameters can be plain struct fields and still receive gradients.
//!
//! All computation is in f64. Randomized initialization uses PCG64 so that a
//! seed fully determines every value.

mod check;
mod tape;

pub use check::grad_check;
pub use tape::{Gradients, Tape};

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use thiserror::Error;

/// Deterministic generator used everywhere randomness is needed.
pub type Pcg = rand_pcg::Pcg64;

/// Seed a [`Pcg`] from a u64.
pub fn rng_from_seed(seed: u64) -> Pcg {
    Pcg::seed_from_u64(seed)
}

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("unsupported kernel size {k}: conv1d requires an odd kernel")]
    EvenKernel { k: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An n-dimensional array of f64 values, optionally tracked on a tape.
///
/// `node` caches `(tape generation, node id)` for the tape that last traced
/// this tensor; a stale generation simply means the tensor is re-registered
/// on the next tape that sees it.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Cell<Option<(u64, NodeId)>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            node: self.node.clone(),
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "shape must be non-empty".into(),
        });
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "all dimensions must be >= 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    /// Tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::full(shape, 0.0)
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            node: Cell::new(None),
        })
    }

    /// Tensor with entries drawn uniformly from `[lo, hi)` using the given
    /// generator. Identical generator state yields bitwise-identical output.
    pub fn uniform(shape: &[usize], rng: &mut Pcg, lo: f64, hi: f64) -> Result<Tensor> {
        validate_shape(shape)?;
        if !(lo < hi) {
            return Err(TensorError::Domain {
                op: "uniform",
                reason: format!("requires lo < hi, got [{lo}, {hi})"),
            });
        }
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: Cell::new(None),
        })
    }

    /// Convenience for [`Tensor::uniform`] with a fresh PCG64 seeded from `seed`.
    pub fn uniform_seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
        let mut rng = rng_from_seed(seed);
        Tensor::uniform(shape, &mut rng, lo, hi)
    }

    /// Tensor from an existing buffer; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("shape product {n} != data length {}", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            node: Cell::new(None),
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            node: Cell::new(None),
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            node: Cell::new(None),
        }
    }

    /// Mark this tensor as a gradient-carrying leaf.
    pub fn requires_grad(mut self, yes: bool) -> Tensor {
        self.requires_grad = yes;
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        // Mutation invalidates any node recorded on an earlier tape.
        self.node.set(None);
        &mut self.data
    }

    /// The single value of a scalar (numel == 1) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() requires numel == 1, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element by multi-index, for tests and small inspections.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (d, (&i, &n)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(i < n, "index {i} out of bounds for axis {d} (size {n})");
            flat = flat * n + i;
        }
        self.data[flat]
    }

    pub(crate) fn node_on(&self, gen: u64) -> Option<NodeId> {
        match self.node.get() {
            Some((g, id)) if g == gen => Some(id),
            _ => None,
        }
    }

    pub(crate) fn set_node(&self, gen: u64, id: NodeId) {
        self.node.set(Some((gen, id)));
    }

    /// Exact elementwise equality (shape and bits).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_constant_fill() {
        let z = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let c = Tensor::full(&[3], 1.5).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::zeros(&[]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let a = Tensor::uniform_seeded(&[4], 7, -1.0, 1.0).unwrap();
        let b = Tensor::uniform_seeded(&[4], 7, -1.0, 1.0).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.data().iter().all(|&v| (-1.0..1.0).contains(&v)));

        let c = Tensor::uniform_seeded(&[4], 8, -1.0, 1.0).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn uniform_requires_ordered_bounds() {
        assert!(Tensor::uniform_seeded(&[2], 1, 1.0, 1.0).is_err());
        assert!(Tensor::uniform_seeded(&[2], 1, 2.0, -2.0).is_err());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
    }
}
