//! Canonical dynamic causal modeling: block-affine neural dynamics observed
//! through a fixed double-gamma HRF.

pub mod error;
pub mod group;
pub mod identifiability;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod simulator;

pub use error::{CdcmError, Result};
