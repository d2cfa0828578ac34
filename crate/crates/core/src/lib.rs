//! Gaussian-process activations (GAPA) for post-hoc uncertainty on
//! pre-trained feedforward regression networks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod calibrate;
pub mod dataio;
pub mod error;
pub mod gpact;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod par;
pub mod persist;
pub mod propagate;

pub use error::{Error, Result};
