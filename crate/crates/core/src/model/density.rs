//! Log-prior and Gaussian log-likelihood of the CDCM model.

use std::f64::consts::PI;

use crate::error::{CdcmError, Result};
use crate::linalg::Matrix;
use crate::model::design::StimulusDesign;
use crate::model::dynamics::{convolve, neural_trajectory};
use crate::model::hrf::hrf_kernel;
use crate::model::hypothesis::{Hypothesis, ParamSet};

/// Prior SD of `nu_diagA` and of diagonal `B` entries.
pub const SD_DIAGONAL: f64 = 0.125;
/// Prior SD of off-diagonal `A`/`B` entries and of `C` entries.
pub const SD_OFFDIAGONAL: f64 = 1.0;
pub const SD_S_STAR: f64 = 0.3;
pub const SD_BETA: f64 = 1.0;
/// Rate of the exponential prior on each noise SD.
pub const SIGMA_RATE: f64 = 0.5;

pub(crate) fn normal_lpdf(x: f64, sd: f64) -> f64 {
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (x / sd).powi(2)
}

/// Prior SD of each `B` entry, in hypothesis order.
pub fn b_prior_sds(h: &Hypothesis) -> Vec<f64> {
    h.b_positions()
        .into_iter()
        .map(|(_, i, j)| if i == j { SD_DIAGONAL } else { SD_OFFDIAGONAL })
        .collect()
}

pub fn log_prior(p: &ParamSet, h: &Hypothesis) -> f64 {
    if p.sigma.iter().any(|s| !(*s > 0.0)) {
        return f64::NEG_INFINITY;
    }
    let mut lp = 0.0;
    lp += p.nu_diag_a.iter().map(|v| normal_lpdf(*v, SD_DIAGONAL)).sum::<f64>();
    lp += p.offdiag_a.iter().map(|v| normal_lpdf(*v, SD_OFFDIAGONAL)).sum::<f64>();
    lp += p
        .b_entries
        .iter()
        .zip(b_prior_sds(h))
        .map(|(v, sd)| normal_lpdf(*v, sd))
        .sum::<f64>();
    lp += p.c_entries.iter().map(|v| normal_lpdf(*v, SD_OFFDIAGONAL)).sum::<f64>();
    lp += p.s_star.iter().map(|v| normal_lpdf(*v, SD_S_STAR)).sum::<f64>();
    lp += p.beta.iter().map(|v| normal_lpdf(*v, SD_BETA)).sum::<f64>();
    lp += p.sigma.iter().map(|s| SIGMA_RATE.ln() - SIGMA_RATE * s).sum::<f64>();
    lp
}

/// Noiseless BOLD mean `μ(t_1..t_n)` (without `β`).
pub fn predicted_mean(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign) -> Result<Matrix> {
    let z = neural_trajectory(p, h, design)?;
    convolve(&z, &hrf_kernel(design.r, design.n)?)
}

/// Gaussian log-likelihood given a precomputed mean `μ`.
pub fn log_likelihood_from_mean(p: &ParamSet, mu: &Matrix, y: &Matrix) -> Result<f64> {
    if mu.shape() != y.shape() || y.ncols() != p.sigma.len() {
        return Err(CdcmError::InvalidInput(format!(
            "data is {}x{}, model mean is {}x{} with {} noise scales",
            y.nrows(),
            y.ncols(),
            mu.nrows(),
            mu.ncols(),
            p.sigma.len()
        )));
    }
    if p.sigma.iter().any(|s| !(*s > 0.0)) {
        return Ok(f64::NEG_INFINITY);
    }
    let n = y.nrows() as f64;
    let mut ll = 0.0;
    for l in 0..y.ncols() {
        let s = p.sigma[l];
        let rss: f64 = y
            .column(l)
            .iter()
            .zip(mu.column(l).iter())
            .map(|(yv, mv)| (yv - mv - p.beta[l]).powi(2))
            .sum();
        ll += -0.5 * n * (2.0 * PI * s * s).ln() - 0.5 * rss / (s * s);
    }
    Ok(ll)
}

pub fn log_likelihood(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign, y: &Matrix) -> Result<f64> {
    if y.nrows() != design.n || y.ncols() != h.d {
        return Err(CdcmError::InvalidInput(format!(
            "data is {}x{}, expected {}x{}",
            y.nrows(),
            y.ncols(),
            design.n,
            h.d
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CdcmError::InvalidInput("data contains non-finite values".into()));
    }
    let mu = predicted_mean(p, h, design)?;
    log_likelihood_from_mean(p, &mu, y)
}
