//! Stochastic simulation of vibrationally assisted electron transfer in a
//! biased two-level system with one explicit vibrational mode and a
//! harmonic bath.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod cli;
pub mod error;
pub mod fftconv;
pub mod hilbert;
pub mod noise;
pub mod observables;
pub mod propagator;
pub mod quad;
pub mod ratetheory;
pub mod scalar;
pub mod sweep;
pub mod units;

pub use error::{Error, Result};

pub type SystemParamsF64 = hilbert::SystemParams<f64>;
pub type BathSpecF64 = bath::BathSpec<f64>;
pub type OperatorMatrixF64 = hilbert::OperatorMatrix<f64>;
pub type StateVectorF64 = hilbert::StateVector<f64>;
pub type PropagatorF64 = propagator::Propagator<f64>;
pub type MjParamsF64 = ratetheory::MjParams<f64>;
