//! Posterior sampling and summaries.

pub mod bootstrap;
pub mod ess;
pub mod init;
pub mod nuts;
pub mod posterior;
pub mod summary;

pub use bootstrap::{block_bootstrap_mse, BootstrapMse};
pub use ess::{ess_threshold, mcse, multi_ess, multi_ess_chains};
pub use init::{initialize, refine, sample_prior, InitConfig};
pub use nuts::{nuts_sample, thread_count, PosteriorDraws, SamplerConfig};
pub use posterior::CdcmPosterior;
pub use summary::{hpd_interval, summarize, ParamSummary, PosteriorSummary};

use crate::linalg::{Matrix, Vector};

/// A differentiable log-density on `R^dim`. Implementations must be
/// reentrant: chains call them concurrently.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// `-inf` outside the support or where evaluation fails.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the log-density; `-inf`
    /// flags an invalid point (the gradient is then meaningless).
    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Multivariate normal target `N(mean, cov)`, handy for calibration runs.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub mean: Vector,
    precision: Matrix,
}

impl GaussianTarget {
    pub fn new(mean: Vector, cov: Matrix) -> crate::Result<Self> {
        let precision = cov.try_inverse().ok_or_else(|| {
            crate::CdcmError::DegenerateCovariance("target covariance is singular".into())
        })?;
        Ok(GaussianTarget { mean, precision })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianTarget {
            mean: Vector::zeros(dim),
            precision: Matrix::identity(dim, dim),
        }
    }
}

impl LogDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let r = Vector::from_column_slice(x) - &self.mean;
        -0.5 * r.dot(&(&self.precision * &r))
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r = Vector::from_column_slice(x) - &self.mean;
        let pr = &self.precision * &r;
        for (g, v) in grad.iter_mut().zip(pr.iter()) {
            *g = -v;
        }
        -0.5 * r.dot(&pr)
    }
}
