//! The CDCM probability model.

pub mod density;
pub mod design;
pub mod dynamics;
pub mod hrf;
pub mod hypothesis;

pub use density::{log_likelihood, log_prior, predicted_mean};
pub use design::{block_partition, Block, StimulusDesign};
pub use dynamics::{assemble_block_system, convolve, neural_trajectory};
pub use hrf::{hrf_eval, hrf_kernel, CanonicalHrf, CANONICAL_HRF};
pub use hypothesis::{Hypothesis, ParamSet};
