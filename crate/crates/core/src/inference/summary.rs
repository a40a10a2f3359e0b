//! Posterior summaries: means, SDs, HPD intervals and the within-subject
//! covariance of the neural parameters.

use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::inference::nuts::PosteriorDraws;
use crate::model::hypothesis::{Hypothesis, SELF_LOOP_BASELINE};

/// Shortest interval containing `⌈prob N⌉` of the draws.
pub fn hpd_interval(draws: &[f64], prob: f64) -> Result<(f64, f64)> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(CdcmError::InvalidInput(format!("probability must lie in (0, 1), got {prob}")));
    }
    if draws.is_empty() {
        return Err(CdcmError::InvalidInput("no draws".into()));
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let k = ((prob * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (x[0], x[k - 1]);
    for i in 1..=(n - k) {
        if x[i + k - 1] - x[i] < best.1 - best.0 {
            best = (x[i], x[i + k - 1]);
        }
    }
    Ok(best)
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub hpd_95: (f64, f64),
    /// Name on the natural scale (e.g. `A[1,1]` for `nu_diagA[1]`).
    pub natural_name: String,
    pub natural_mean: f64,
    pub natural_sd: f64,
    pub natural_hpd_95: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub parameters: Vec<ParamSummary>,
    /// Natural-scale names of the neural parameters.
    pub neural_names: Vec<String>,
    /// Posterior means of the neural parameters on the natural scale.
    pub theta_hat: Vec<f64>,
    /// Posterior covariance of the natural-scale neural parameters.
    pub s_matrix: Vec<Vec<f64>>,
}

/// Natural-scale value of unconstrained coordinate `i` for a CDCM draw.
fn natural_transform(h: &Hypothesis, i: usize, v: f64) -> f64 {
    let p = h.param_count();
    if i < h.d {
        SELF_LOOP_BASELINE * v.exp()
    } else if i >= p - h.d {
        v.exp()
    } else {
        v
    }
}

fn natural_name(h: &Hypothesis, i: usize, name: &str) -> String {
    let p = h.param_count();
    if i < h.d {
        format!("A[{},{}]", i + 1, i + 1)
    } else if i >= p - h.d {
        format!("sigma[{}]", i + h.d + 1 - p)
    } else {
        name.to_string()
    }
}

/// Summaries on both scales. With a hypothesis, `nu_diagA` maps to
/// `-0.5 exp(ν)` and `log_sigma` to `σ` draw by draw before summarizing, and
/// the first `p_θz` coordinates are treated as the neural parameters.
/// Without one the natural scale is the identity and every coordinate is
/// treated as "neural".
pub fn summarize(pd: &PosteriorDraws, h: Option<&Hypothesis>) -> Result<PosteriorSummary> {
    let (n, p) = pd.draws.shape();
    if n == 0 {
        return Err(CdcmError::InvalidInput("no draws to summarize".into()));
    }
    if let Some(h) = h {
        if h.param_count() != p {
            return Err(CdcmError::DimensionMismatch(format!(
                "draws have {p} columns, hypothesis has {} parameters",
                h.param_count()
            )));
        }
    }
    let neural = h.map_or(p, |h| h.neural_count());
    let mut parameters = Vec::with_capacity(p);
    let mut natural_cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    for i in 0..p {
        let col: Vec<f64> = pd.draws.column(i).iter().copied().collect();
        let nat: Vec<f64> = match h {
            Some(h) => col.iter().map(|v| natural_transform(h, i, *v)).collect(),
            None => col.clone(),
        };
        let (mean, sd) = mean_sd(&col);
        let (natural_mean, natural_sd) = mean_sd(&nat);
        let hpd = |x: &[f64]| -> (f64, f64) {
            if x.len() > 1 {
                hpd_interval(x, 0.95).unwrap_or((f64::NAN, f64::NAN))
            } else {
                (x[0], x[0])
            }
        };
        parameters.push(ParamSummary {
            name: pd.names[i].clone(),
            mean,
            sd,
            hpd_95: hpd(&col),
            natural_name: h.map_or(pd.names[i].clone(), |h| natural_name(h, i, &pd.names[i])),
            natural_mean,
            natural_sd,
            natural_hpd_95: hpd(&nat),
        });
        natural_cols.push(nat);
    }
    let theta_hat: Vec<f64> = parameters[..neural].iter().map(|s| s.natural_mean).collect();
    let mut s_matrix = vec![vec![0.0; neural]; neural];
    if n > 1 {
        for a in 0..neural {
            for b in 0..=a {
                let cov = natural_cols[a]
                    .iter()
                    .zip(&natural_cols[b])
                    .map(|(x, y)| (x - theta_hat[a]) * (y - theta_hat[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
                s_matrix[a][b] = cov;
                s_matrix[b][a] = cov;
            }
        }
    }
    Ok(PosteriorSummary {
        neural_names: parameters[..neural].iter().map(|s| s.natural_name.clone()).collect(),
        parameters,
        theta_hat,
        s_matrix,
    })
}
