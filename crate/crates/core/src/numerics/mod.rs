//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the record in reverse creation
//! order (a valid reverse topological order) and accumulates gradients for
//! every node that transitively depends on a leaf created with
//! `requires_grad = true`.
//!
//! ```
//! use trendlab::numerics::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; clear gradients first")]
    BackwardTwice,
}

pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> NumericsError {
    NumericsError::Invalid {
        op,
        message: message.into(),
    }
}

/// Samples `U(−1/√fan_in, 1/√fan_in)` for every element of `shape`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Mean squared error between two same-shape tensors.
pub fn mse(g: &Graph, prediction: Var, target: Var) -> Result<Var, NumericsError> {
    let (p, t) = (g.shape(prediction), g.shape(target));
    if p != t {
        return Err(NumericsError::Shape {
            op: "mse",
            left: p,
            right: t,
        });
    }
    let diff = g.sub(prediction, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}
