//! Starting points for the sampler: several prior draws, each refined by
//! backtracking gradient ascent on the log-posterior, keeping the best.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::inference::posterior::CdcmPosterior;
use crate::inference::LogDensity;
use crate::model::density::{b_prior_sds, SD_DIAGONAL, SD_OFFDIAGONAL, SD_S_STAR, SIGMA_RATE};
use crate::model::hypothesis::{Hypothesis, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Prior draws screened per chain.
    pub prior_draws: usize,
    /// Gradient-ascent iterations applied to each draw.
    pub refine_steps: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            prior_draws: 10,
            refine_steps: 100,
            seed: 0,
        }
    }
}

/// One draw of the neural parameters and `s*` from the prior. `β` and `σ`
/// are drawn from theirs as well; callers fitting data usually overwrite them.
pub fn sample_prior<R: Rng + ?Sized>(h: &Hypothesis, rng: &mut R) -> ParamSet {
    let mut normal = |sd: f64| -> f64 { sd * rng.sample::<f64, _>(StandardNormal) };
    let mut p = ParamSet::zeros(h);
    p.nu_diag_a.iter_mut().for_each(|v| *v = normal(SD_DIAGONAL));
    p.offdiag_a.iter_mut().for_each(|v| *v = normal(SD_OFFDIAGONAL));
    for (v, sd) in p.b_entries.iter_mut().zip(b_prior_sds(h)) {
        *v = normal(sd);
    }
    p.c_entries.iter_mut().for_each(|v| *v = normal(SD_OFFDIAGONAL));
    p.s_star.iter_mut().for_each(|v| *v = normal(SD_S_STAR));
    p.beta.iter_mut().for_each(|v| *v = normal(1.0));
    let exp = Exp::new(SIGMA_RATE).expect("positive rate");
    p.sigma.iter_mut().for_each(|v| *v = exp.sample(rng).max(1e-3));
    p
}

fn column_moments(post: &CdcmPosterior, l: usize) -> (f64, f64) {
    let col = post.y.column(l);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt().max(1e-6))
}

/// Backtracking ascent along the gradient.
pub fn refine<T: LogDensity>(target: &T, x0: &[f64], steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; x.len()];
    let mut lp = target.log_density_and_grad(&x, &mut grad);
    let mut step = 0.1;
    for _ in 0..steps {
        if !lp.is_finite() {
            break;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !(norm > 1e-10) || !norm.is_finite() {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(&grad).map(|(x, g)| x + step * g / norm).collect();
            let mut cg = vec![0.0; x.len()];
            let clp = target.log_density_and_grad(&cand, &mut cg);
            if clp.is_finite() && clp > lp {
                x = cand;
                grad = cg;
                lp = clp;
                step *= 1.5;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    x
}

/// One starting point per chain. Each chain refines its own prior draws
/// (with `β`, `σ` set from the data moments) and keeps the highest result.
pub fn initialize(post: &CdcmPosterior, cfg: &InitConfig, chains: usize) -> Result<Vec<Vec<f64>>> {
    if cfg.prior_draws == 0 || chains == 0 {
        return Err(CdcmError::InvalidInput("prior_draws and chains must be positive".into()));
    }
    let h = &post.hypothesis;
    let moments: Vec<(f64, f64)> = (0..h.d).map(|l| column_moments(post, l)).collect();
    let mut inits = Vec::with_capacity(chains);
    for c in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(c as u64);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..cfg.prior_draws {
            let mut p = sample_prior(h, &mut rng);
            for (l, (mean, sd)) in moments.iter().enumerate() {
                p.beta[l] = *mean;
                p.sigma[l] = *sd;
            }
            let x0 = p.to_unconstrained();
            if !post.log_posterior(&x0).is_finite() {
                continue;
            }
            let x = refine(post, &x0, cfg.refine_steps);
            let lp = post.log_posterior(&x);
            if lp.is_finite() && best.as_ref().is_none_or(|(b, _)| lp > *b) {
                best = Some((lp, x));
            }
        }
        let (_, x) = best.ok_or_else(|| {
            CdcmError::Initialization(format!(
                "none of {} prior draws has a finite log-posterior",
                cfg.prior_draws
            ))
        })?;
        inits.push(x);
    }
    Ok(inits)
}
