//! Quantization-aware training with smooth gradient estimators, paired in
//! lockstep with a straight-through-estimator twin.
//!
//! The weight warp `M` and learning-rate factor `α` from [`transform`] map an
//! estimator-trained net onto an equivalent STE-trained one; [`bisim`] trains
//! both side by side and records how far they drift apart.

pub mod bisim;
pub mod data;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod io;
pub mod net;
pub mod optim;
pub mod quantizer;
pub mod toy;
pub mod transform;

pub use error::{Error, Result};
