//! Dense tensors, reverse-mode differentiation and optimization.
//!
//! All learnable computation in the crate is recorded on a [`Tape`] against
//! a [`ParamStore`] and differentiated with [`Tape::backward`]. The free
//! functions below are forward-only conveniences over the same kernels.

mod adam;
pub mod gradcheck;
mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use rng::{derive_seed, derive_seed_index, SeededRng};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub(crate) fn contract(op: &'static str, detail: String) -> Self {
        Self::Contract { op, detail }
    }
}

/// Single-input pointwise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
}

/// Two-input pointwise operations on equally shaped tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    /// Hadamard product.
    Multiply,
}

pub fn unary(input: &Tensor, kind: Unary) -> Tensor {
    match kind {
        Unary::Sigmoid => input.map(kernels::sigmoid),
        Unary::Relu => input.map(|v| v.max(0.0)),
    }
}

pub fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::shape(
            "elementwise",
            format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let f = match kind {
        Binary::Add => |x: f64, y: f64| x + y,
        Binary::Multiply => |x: f64, y: f64| x * y,
    };
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `[cin, t]` input, `[cout, cin, k]` kernels, symmetric zero padding.
pub fn conv1d(input: &Tensor, kernels: &Tensor, padding: usize) -> Result<Tensor, NumericsError> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(input.clone());
    let w = tape.constant(kernels.clone());
    let y = tape.conv1d(x, w, None, padding, padding)?;
    Ok(tape.value(y).clone())
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(input.clone());
    let y = tape.softmax(x, axis)?;
    Ok(tape.value(y).clone())
}

/// Per-channel linear resampling of `[c, t]` over normalized time.
pub fn interpolate_time(input: &Tensor, t_target: usize) -> Result<Tensor, NumericsError> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.constant(input.clone());
    let y = tape.interpolate_time(x, t_target)?;
    Ok(tape.value(y).clone())
}
