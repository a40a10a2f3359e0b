//! Multivariate effective sample size and the minimum-ESS stopping threshold.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{CdcmError, Result};
use crate::linalg::{Matrix, Vector};

/// Minimum multivariate ESS for a `1 - alpha` confidence region of relative
/// precision `eps` in `p` dimensions:
/// `W = 2^{2/p} π (p Γ(p/2))^{-2/p} χ²_{1-α,p} / ε²`.
pub fn ess_threshold(p: usize, alpha: f64, eps: f64) -> Result<f64> {
    if p == 0 || !(alpha > 0.0 && alpha < 1.0) || !(eps > 0.0) {
        return Err(CdcmError::InvalidInput(format!(
            "ess_threshold needs p >= 1, 0 < alpha < 1, eps > 0 (got {p}, {alpha}, {eps})"
        )));
    }
    let pf = p as f64;
    let chi = ChiSquared::new(pf)
        .map_err(|e| CdcmError::InvalidInput(e.to_string()))?
        .inverse_cdf(1.0 - alpha);
    let log_w = (2.0 / pf) * 2f64.ln() + std::f64::consts::PI.ln()
        - (2.0 / pf) * (pf.ln() + ln_gamma(pf / 2.0))
        + chi.ln()
        - 2.0 * eps.ln();
    Ok(log_w.exp())
}

fn log_det_spd(m: &Matrix) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn check_columns(chains: &[&Matrix]) -> Result<usize> {
    let p = chains
        .first()
        .map(|c| c.ncols())
        .ok_or_else(|| CdcmError::InvalidInput("no draws".into()))?;
    if chains.iter().any(|c| c.ncols() != p) {
        return Err(CdcmError::DimensionMismatch("chains differ in parameter count".into()));
    }
    for j in 0..p {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in chains {
            for v in c.column(j).iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if !(hi > lo) {
            return Err(CdcmError::DegenerateDraws(format!("column {} is constant", j + 1)));
        }
    }
    Ok(p)
}

/// Multivariate ESS `N (|Λ| / |Σ|)^{1/P}` pooled over chains. `Λ` is the
/// sample covariance and `Σ` the batch-means estimate of the asymptotic
/// covariance, with batches of `⌊√N_c⌋` draws formed within each chain.
/// Returns `Ok(None)` when the draws are too few to estimate it.
pub fn multi_ess_chains(chains: &[&Matrix]) -> Result<Option<f64>> {
    let p = check_columns(chains)?;
    let total: usize = chains.iter().map(|c| c.nrows()).sum();
    if total <= 2 * p {
        return Ok(None);
    }
    let mut mean = Vector::zeros(p);
    for c in chains {
        for row in c.row_iter() {
            mean += row.transpose();
        }
    }
    mean /= total as f64;
    let mut lambda = Matrix::zeros(p, p);
    for c in chains {
        for row in c.row_iter() {
            let r = row.transpose() - &mean;
            lambda.syger(1.0, &r, &r, 1.0);
        }
    }
    lambda /= (total - 1) as f64;

    // One batch size for every chain, from the shortest chain.
    let shortest = chains.iter().map(|c| c.nrows()).min().unwrap_or(0);
    let batch_size = (shortest as f64).sqrt().floor() as usize;
    let mut sigma = Matrix::zeros(p, p);
    let mut dof = 0usize;
    for c in chains.iter().filter(|_| batch_size > 0) {
        let a = c.nrows() / batch_size;
        if a < 2 {
            continue;
        }
        let mut means = Vec::with_capacity(a);
        let mut chain_mean = Vector::zeros(p);
        for k in 0..a {
            let bm = c.rows(k * batch_size, batch_size).row_sum().transpose() / batch_size as f64;
            chain_mean += &bm;
            means.push(bm);
        }
        chain_mean /= a as f64;
        for bm in &means {
            let r = bm - &chain_mean;
            sigma.syger(1.0, &r, &r, 1.0);
        }
        dof += a - 1;
    }
    if dof < p || batch_size == 0 {
        return Ok(None);
    }
    sigma *= batch_size as f64 / dof as f64;
    fill_upper(&mut lambda);
    fill_upper(&mut sigma);
    let ld_lambda = log_det_spd(&lambda)
        .ok_or_else(|| CdcmError::DegenerateDraws("sample covariance is singular".into()))?;
    let Some(ld_sigma) = log_det_spd(&sigma) else {
        return Ok(None);
    };
    Ok(Some(total as f64 * ((ld_lambda - ld_sigma) / p as f64).exp()))
}

/// `syger` only writes the lower triangle.
fn fill_upper(m: &mut Matrix) {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Single-chain multivariate ESS; see [`multi_ess_chains`].
pub fn multi_ess(draws: &Matrix) -> Result<Option<f64>> {
    multi_ess_chains(&[draws])
}

/// Batch-means Monte Carlo standard error of the mean of one column.
pub fn mcse(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor().max(1.0) as usize;
    let a = n / b;
    if a < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..a)
        .map(|k| x[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / a as f64;
    let var_bm = b as f64 * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (a - 1) as f64;
    (var_bm / (a * b) as f64).sqrt()
}
