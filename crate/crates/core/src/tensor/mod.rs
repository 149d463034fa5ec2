//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Only the operations the reasoner needs are provided. There is no general
//! broadcasting; `add_bias` covers the one broadcast the model uses.

mod graph;
mod scalar;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Fault, Gradients, Graph, Var};
pub use scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Range { op: &'static str, index: usize, extent: usize },
    #[error("shape {shape:?} does not describe {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("softmax row {row} has no unmasked entry")]
    FullyMasked { row: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x·Φ(x)` with the exact Gaussian CDF.
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * graph::sigmoid(x),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let pdf = (-(x * x) / T::of(2.0)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
                std_normal_cdf(x) + x * pdf
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = graph::sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(TensorError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf())
}

/// Owned dense tensor: row-major values plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) || shape.iter().product::<usize>() != values.len() {
            return Err(TensorError::ShapeData { shape, len: values.len() });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![T::zero(); n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[cfg(test)]
mod tests;
