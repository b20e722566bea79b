//! Low-to-high multi-level transformer (LMLT) for single-image
//! super-resolution: a small NCHW tensor engine with reverse-mode autodiff,
//! the network and its ablations, an analytic cost model, and image metrics.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod nn;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod metrics;
pub mod model;
