//! Exact simulation of XX spin pseudo-chains and inference of their block
//! structure from end-site measurements.
//!
//! Spins are flat-indexed; spin `a` is bit `a` of a basis mask, and a set bit
//! is an excitation. Numerical kernels are generic over [`scalar::Scalar`],
//! so the same code runs in `f64` and in exact rationals.

pub mod blackbox;
pub mod calibration;
pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod inference;
pub mod modelchain;
pub mod propagate;
pub mod scalar;
pub mod tomography;
pub mod topology;
pub mod traps;

use num_rational::BigRational;

pub use blackbox::{BlackBoxChain, Mode};
pub use error::{Error, Result};
pub use topology::{BlockSpec, ModelChainSpec, PseudoChainSpec};

pub type PseudoChain = PseudoChainSpec<f64>;
pub type ExactPseudoChain = PseudoChainSpec<BigRational>;
pub type ModelChain = ModelChainSpec<f64>;
pub type ExactModelChain = ModelChainSpec<BigRational>;
pub type Block = BlockSpec<f64>;
