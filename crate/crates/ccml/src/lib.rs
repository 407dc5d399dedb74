//! Collaborative two-network training for multi-label classification under
//! label noise.
//!
//! Two identically shaped classifiers are trained side by side. Per
//! mini-batch they
//!
//! 1. compare intermediate features (disparity, maximized) and final logits
//!    (consistency, minimized) through a kernel two-sample statistic
//!    ([`discrepancy`]),
//! 2. score each sample's labels for noise evidence with a grouped ranking
//!    loss that separates missing-label from wrong-label errors
//!    ([`grouplasso`]),
//! 3. optionally correct the labels both networks agree are wrong
//!    ([`flipping`]), and
//! 4. exchange their low-loss sample selections so that each network is
//!    updated only on samples the *other* network trusts ([`swap`]).
//!
//! [`datagen`] provides a deterministic synthetic multi-label generator and
//! noise injector so that detection and correction quality can be scored
//! against known ground truth; [`trainer`] orchestrates the per-batch
//! pipeline and the plain single-network baseline; [`eval`] computes
//! micro-averaged metrics and noise-detection statistics.
//!
//! The numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline runs in double precision via the [`Real`] alias.

pub mod bce;
pub mod datagen;
pub mod discrepancy;
pub mod error;
pub mod eval;
pub mod flipping;
pub mod gradcheck;
pub mod grouplasso;
pub mod model;
pub mod scalar;
pub mod swap;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision of the training pipeline.
pub type Real = f64;

/// Dense matrix of [`Real`] values (samples are rows).
pub type Matrix = ndarray::Array2<Real>;

/// Dense vector of [`Real`] values.
pub type Vector = ndarray::Array1<Real>;

/// Binary label or mask matrix; entries are 0 or 1.
pub type LabelMatrix = ndarray::Array2<u8>;
