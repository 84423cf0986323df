//! Surrogate models for high-dimensional function regression and
//! feedback control.
//!
//! The crate implements four surrogate families — gradient-augmented
//! tensor-train cross regression, block-sparse tensor trains, radial
//! kernel interpolants, and feedforward/residual networks — together
//! with a state-dependent Riccati (SDRE) control stack that generates
//! value-function training data, synthesizes feedback laws from
//! surrogate gradients, and benchmarks everything on a common set of
//! high-dimensional test problems.
//!
//! The `bench` binary drives the comparison experiments; see the
//! repository README for usage.

pub mod basis;
pub mod benchmarks;
pub mod block_sparse;
pub mod container;
pub mod control;
pub mod cross;
pub mod data;
pub mod experiment;
pub mod kernel;
pub mod metrics;
pub mod neural;
pub mod report;
pub mod surrogate;
pub mod tt;

pub use surrogate::Surrogate;
