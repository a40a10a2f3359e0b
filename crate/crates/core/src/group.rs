//! Marginalized normal–normal hierarchical synthesis of subject-level
//! estimates with subject covariates.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CdcmError, Result};
use crate::inference::{nuts_sample, refine, LogDensity, PosteriorDraws, SamplerConfig};
use crate::linalg::{Matrix, Vector};

/// Jitter added to every `S_k` before factorization.
pub const S_JITTER: f64 = 1e-8;
/// LKJ shape for the correlation factor.
pub const LKJ_ETA: f64 = 2.0;

/// One subject's posterior summary and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub theta_hat: Vec<f64>,
    /// Within-subject posterior covariance of `theta_hat`.
    pub s: Matrix,
    pub b: Vec<f64>,
}

impl SubjectRecord {
    pub fn new(theta_hat: Vec<f64>, s: Matrix, b: Vec<f64>) -> Result<Self> {
        let p = theta_hat.len();
        if s.nrows() != p || s.ncols() != p {
            return Err(CdcmError::DimensionMismatch(format!(
                "S is {}x{}, theta_hat has {p} entries",
                s.nrows(),
                s.ncols()
            )));
        }
        let scale = s.amax().max(1.0);
        if (&s - s.transpose()).amax() > 1e-10 * scale {
            return Err(CdcmError::InvalidInput("S is not symmetric".into()));
        }
        if p > 0 && s.clone().symmetric_eigenvalues().min() < -1e-8 * scale {
            return Err(CdcmError::InvalidInput("S is not positive semidefinite".into()));
        }
        if theta_hat.iter().chain(&b).chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(CdcmError::InvalidInput("subject record has non-finite entries".into()));
        }
        Ok(SubjectRecord { theta_hat, s, b })
    }
}

/// Group-level parameters on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    pub alpha: Vec<f64>,
    /// `p x q` covariate coefficients.
    pub theta: Matrix,
    pub tau: Vec<f64>,
    /// Lower-triangular Cholesky factor of the between-subject correlation.
    pub l_corr: Matrix,
}

impl GroupParams {
    /// `T = diag(τ) L Lᵀ diag(τ)`.
    pub fn covariance(&self) -> Matrix {
        let lt = Matrix::from_diagonal(&Vector::from_column_slice(&self.tau)) * &self.l_corr;
        &lt * lt.transpose()
    }

    pub fn correlation(&self) -> Matrix {
        &self.l_corr * self.l_corr.transpose()
    }

    /// Unconstrained layout `[α, vec_row(Θ), log τ, atanh(partial correlations)]`.
    pub fn from_unconstrained(p: usize, q: usize, x: &[f64]) -> Result<Self> {
        let want = unconstrained_dim(p, q);
        if x.len() != want {
            return Err(CdcmError::DimensionMismatch(format!(
                "group parameter vector has length {}, expected {want}",
                x.len()
            )));
        }
        let alpha = x[..p].to_vec();
        let theta = Matrix::from_row_slice(p, q, &x[p..p + p * q]);
        let tau = x[p + p * q..2 * p + p * q].iter().map(|v| v.exp()).collect();
        let (l_corr, _) = corr_cholesky(p, &x[2 * p + p * q..]);
        Ok(GroupParams {
            alpha,
            theta,
            tau,
            l_corr,
        })
    }
}

pub fn unconstrained_dim(p: usize, q: usize) -> usize {
    2 * p + p * q + p * (p.saturating_sub(1)) / 2
}

/// Canonical partial-correlation transform: `y` (length `p(p-1)/2`, row-wise
/// below the diagonal) to a Cholesky factor of a correlation matrix. Also
/// returns the log-Jacobian.
pub fn corr_cholesky(p: usize, y: &[f64]) -> (Matrix, f64) {
    let mut l = Matrix::zeros(p, p);
    let mut log_jac = 0.0;
    if p == 0 {
        return (l, 0.0);
    }
    l[(0, 0)] = 1.0;
    let mut k = 0;
    for i in 1..p {
        let mut sum_sqs: f64 = 0.0;
        for j in 0..i {
            let z = y[k].tanh();
            log_jac += (1.0 - z * z).ln();
            k += 1;
            if j == 0 {
                l[(i, 0)] = z;
            } else {
                log_jac += 0.5 * (1.0 - sum_sqs).ln();
                l[(i, j)] = z * (1.0 - sum_sqs).sqrt();
            }
            sum_sqs += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - sum_sqs).max(0.0).sqrt();
    }
    (l, log_jac)
}

/// `log LKJ(L | η)` for a correlation Cholesky factor, up to its normalizing
/// constant.
pub fn lkj_cholesky_log_density(l: &Matrix, eta: f64) -> f64 {
    let p = l.nrows();
    (1..p)
        .map(|i| (p as f64 - i as f64 - 1.0 + 2.0 * eta - 2.0) * l[(i, i)].ln())
        .sum()
}

fn check_records(records: &[SubjectRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| CdcmError::InvalidInput("no subject records".into()))?;
    let (p, q) = (first.theta_hat.len(), first.b.len());
    for (k, r) in records.iter().enumerate() {
        if r.theta_hat.len() != p || r.b.len() != q || r.s.nrows() != p || r.s.ncols() != p {
            return Err(CdcmError::DimensionMismatch(format!(
                "subject {} has dimensions ({}, {}), expected ({p}, {q})",
                k + 1,
                r.theta_hat.len(),
                r.b.len()
            )));
        }
    }
    Ok((p, q))
}

/// Per-subject quantities shared by the value and the gradient.
struct SubjectTerm {
    log_density: f64,
    /// `Σ_k⁻¹ r_k`
    w: Vector,
    sigma_inv: Matrix,
}

fn subject_term(rec: &SubjectRecord, g: &GroupParams, t: &Matrix, need_inverse: bool, k: usize) -> Result<SubjectTerm> {
    let p = rec.theta_hat.len();
    let mut sigma = t + &rec.s;
    for i in 0..p {
        sigma[(i, i)] += S_JITTER;
    }
    let chol = sigma.cholesky().ok_or_else(|| {
        CdcmError::DegenerateCovariance(format!("T + S_{} is not positive definite", k + 1))
    })?;
    let mut r = Vector::from_column_slice(&rec.theta_hat) - Vector::from_column_slice(&g.alpha);
    if !rec.b.is_empty() {
        r -= &g.theta * Vector::from_column_slice(&rec.b);
    }
    let w = chol.solve(&r);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_density = -0.5 * (p as f64 * (2.0 * PI).ln() + log_det + r.dot(&w));
    let sigma_inv = if need_inverse { chol.inverse() } else { Matrix::zeros(0, 0) };
    Ok(SubjectTerm {
        log_density,
        w,
        sigma_inv,
    })
}

/// `Σ_k log N_p(θ̂_k; α + Θ b_k, T + S_k)`.
pub fn group_marginal_loglik(records: &[SubjectRecord], g: &GroupParams) -> Result<f64> {
    let (p, q) = check_records(records)?;
    if g.alpha.len() != p || g.theta.nrows() != p || g.theta.ncols() != q || g.tau.len() != p {
        return Err(CdcmError::DimensionMismatch("group parameters do not match the records".into()));
    }
    let t = g.covariance();
    records
        .iter()
        .enumerate()
        .map(|(k, r)| subject_term(r, g, &t, false, k).map(|s| s.log_density))
        .sum()
}

/// Group posterior on the unconstrained scale: marginal likelihood, priors
/// `α ~ N(0, I)`, `vec Θ ~ N(0, I)`, `τ ~ N⁺(0, I)`, `L ~ LKJ(2)`, plus
/// the transform Jacobians.
#[derive(Debug, Clone)]
pub struct GroupPosterior {
    pub records: Vec<SubjectRecord>,
    pub p: usize,
    pub q: usize,
}

impl GroupPosterior {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        let (p, q) = check_records(&records)?;
        if records.len() < 2 {
            return Err(CdcmError::InvalidInput("the group model needs at least 2 subjects".into()));
        }
        Ok(GroupPosterior { records, p, q })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=self.p).map(|i| format!("alpha[{i}]")).collect();
        for i in 1..=self.p {
            for j in 1..=self.q {
                names.push(format!("Theta[{i},{j}]"));
            }
        }
        names.extend((1..=self.p).map(|i| format!("log_tau[{i}]")));
        for i in 2..=self.p {
            for j in 1..i {
                names.push(format!("atanh_pcor[{i},{j}]"));
            }
        }
        names
    }

    /// Names of [`Self::constrain`] outputs.
    pub fn natural_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.names()[..self.p + self.p * self.q].to_vec();
        names.extend((1..=self.p).map(|i| format!("tau[{i}]")));
        for i in 2..=self.p {
            for j in 1..i {
                names.push(format!("Omega[{i},{j}]"));
            }
        }
        names
    }

    /// `α`, `Θ`, `τ` and the strictly lower correlations of one draw.
    pub fn constrain(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = GroupParams::from_unconstrained(self.p, self.q, x)?;
        let omega = g.correlation();
        let mut out = g.alpha.clone();
        for i in 0..self.p {
            out.extend(g.theta.row(i).iter());
        }
        out.extend(&g.tau);
        for i in 1..self.p {
            for j in 0..i {
                out.push(omega[(i, j)]);
            }
        }
        Ok(out)
    }

    fn value_and_grad(&self, x: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        let (p, q) = (self.p, self.q);
        let g = GroupParams::from_unconstrained(p, q, x)?;
        let o_theta = p;
        let o_tau = p + p * q;
        let o_corr = 2 * p + p * q;
        let (l, corr_jac) = corr_cholesky(p, &x[o_corr..]);
        let t = g.covariance();
        let need = grad.is_some();

        let mut value = corr_jac + lkj_cholesky_log_density(&l, LKJ_ETA);
        value -= 0.5 * g.alpha.iter().map(|a| a * a).sum::<f64>();
        value -= 0.5 * g.theta.iter().map(|a| a * a).sum::<f64>();
        value += x[o_tau..o_corr].iter().zip(&g.tau).map(|(y, t)| y - 0.5 * t * t).sum::<f64>();

        let mut g_alpha = Vector::zeros(p);
        let mut g_theta = Matrix::zeros(p, q);
        let mut g_t = Matrix::zeros(p, p);
        for (k, rec) in self.records.iter().enumerate() {
            let term = subject_term(rec, &g, &t, need, k)?;
            value += term.log_density;
            if need {
                g_alpha += &term.w;
                if q > 0 {
                    g_theta += &term.w * Vector::from_column_slice(&rec.b).transpose();
                }
                g_t += 0.5 * (&term.w * term.w.transpose() - &term.sigma_inv);
            }
        }
        let Some(grad) = grad else {
            return Ok(value);
        };

        for i in 0..p {
            grad[i] = g_alpha[i] - g.alpha[i];
            for j in 0..q {
                grad[o_theta + i * q + j] = g_theta[(i, j)] - g.theta[(i, j)];
            }
        }
        // T_ij = τ_i τ_j M_ij with M = L Lᵀ.
        let m = &l * l.transpose();
        for i in 0..p {
            let d_tau: f64 = 2.0 * (0..p).map(|j| g_t[(i, j)] * g.tau[j] * m[(i, j)]).sum::<f64>();
            let tau = g.tau[i];
            grad[o_tau + i] = d_tau * tau + 1.0 - tau * tau;
        }
        let mut gt_scaled = g_t.clone();
        for i in 0..p {
            for j in 0..p {
                gt_scaled[(i, j)] *= g.tau[i] * g.tau[j];
            }
        }
        let g_l = 2.0 * gt_scaled * &l;
        corr_cholesky_backward(&x[o_corr..], &l, &g_l, &mut grad[o_corr..]);
        Ok(value)
    }
}

/// Reverse pass of [`corr_cholesky`] including its log-Jacobian and the LKJ
/// term: given `∂f/∂L`, writes `∂(f + log J + log LKJ)/∂y`.
fn corr_cholesky_backward(y: &[f64], l: &Matrix, g_l: &Matrix, out: &mut [f64]) {
    let p = l.nrows();
    let mut k0 = 0;
    for i in 1..p {
        let c = p as f64 - i as f64 - 1.0 + 2.0 * LKJ_ETA - 2.0;
        // s[j] = Σ_{c<j} L[i,c]², the partial sum before entry j.
        let mut s = vec![0.0; i + 1];
        for j in 0..i {
            s[j + 1] = s[j] + l[(i, j)] * l[(i, j)];
        }
        let z: Vec<f64> = (0..i).map(|j| y[k0 + j].tanh()).collect();
        let diag = l[(i, i)];
        let mut s_bar = -g_l[(i, i)] * 0.5 / diag - c * 0.5 / (1.0 - s[i]);
        let mut z_bar = vec![0.0; i];
        for j in (1..i).rev() {
            let l_bar = g_l[(i, j)] + s_bar * 2.0 * l[(i, j)];
            let w = (1.0 - s[j]).sqrt();
            z_bar[j] = l_bar * w;
            s_bar += l_bar * z[j] * (-0.5) / w - 0.5 / (1.0 - s[j]);
        }
        z_bar[0] = g_l[(i, 0)] + s_bar * 2.0 * l[(i, 0)];
        for j in 0..i {
            out[k0 + j] = z_bar[j] * (1.0 - z[j] * z[j]) - 2.0 * z[j];
        }
        k0 += i;
    }
}

impl LogDensity for GroupPosterior {
    fn dim(&self) -> usize {
        unconstrained_dim(self.p, self.q)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        match self.value_and_grad(x, None) {
            Ok(v) if !v.is_nan() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.value_and_grad(x, Some(grad)) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Sampler defaults for the group model: 5 chains, 1000 warmup and 5000
/// sampling iterations per chain.
pub fn group_sampler_defaults() -> SamplerConfig {
    SamplerConfig {
        chains: 5,
        warmup: 1000,
        num_samples: Some(5000),
        ..SamplerConfig::default()
    }
}

/// Samples the group posterior. The returned draws are on the natural scale
/// (`alpha`, `Theta`, `tau`, `Omega` lower correlations); diagnostics refer
/// to the unconstrained chains.
pub fn group_fit(records: Vec<SubjectRecord>, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    let post = GroupPosterior::new(records)?;
    let (p, k) = (post.p, post.records.len() as f64);
    let mut x0 = vec![0.0; post.dim()];
    for i in 0..p {
        let vals: Vec<f64> = post.records.iter().map(|r| r.theta_hat[i]).collect();
        let mean = vals.iter().sum::<f64>() / k;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        x0[i] = mean;
        x0[p + p * post.q + i] = sd.max(1e-3).ln();
    }
    let x0 = refine(&post, &x0, 200);
    if !post.log_density(&x0).is_finite() {
        return Err(CdcmError::Initialization("group posterior is not finite at the starting point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let jitter = Normal::new(0.0, 0.1).expect("finite sd");
    let inits: Vec<Vec<f64>> = (0..cfg.chains)
        .map(|_| {
            let x: Vec<f64> = x0.iter().map(|v| v + jitter.sample(&mut rng)).collect();
            if post.log_density(&x).is_finite() {
                x
            } else {
                x0.clone()
            }
        })
        .collect();
    let mut pd = nuts_sample(&post, cfg, &inits, post.names())?;
    let mut natural = Matrix::zeros(pd.draws.nrows(), post.natural_names().len());
    for i in 0..pd.draws.nrows() {
        let row: Vec<f64> = pd.draws.row(i).iter().copied().collect();
        natural.row_mut(i).copy_from_slice(&post.constrain(&row)?);
    }
    pd.draws = natural;
    pd.names = post.natural_names();
    Ok(pd)
}

/// One covariate column as read from a table; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CovariateColumn {
    Continuous { name: String, values: Vec<Option<f64>> },
    Categorical { name: String, values: Vec<Option<String>> },
}

impl CovariateColumn {
    fn name(&self) -> &str {
        match self {
            CovariateColumn::Continuous { name, .. } | CovariateColumn::Categorical { name, .. } => name,
        }
    }

    fn len(&self) -> usize {
        match self {
            CovariateColumn::Continuous { values, .. } => values.len(),
            CovariateColumn::Categorical { values, .. } => values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCovariates {
    pub names: Vec<String>,
    /// `K x q_s`
    pub matrix: Matrix,
}

impl EncodedCovariates {
    pub fn row(&self, k: usize) -> Vec<f64> {
        self.matrix.row(k).iter().copied().collect()
    }
}

/// Standardizes continuous columns and effect-codes categorical ones. A
/// categorical column with levels `l_1 < … < l_L` (sorted) becomes `L − 1`
/// columns; level `l_j` is the indicator of column `j` and `l_L` is `−1` in
/// all of them.
pub fn encode_covariates(columns: &[CovariateColumn]) -> Result<EncodedCovariates> {
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(CdcmError::DimensionMismatch("covariate columns differ in length".into()));
    }
    let mut names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for col in columns {
        let missing = |row: usize| {
            CdcmError::InvalidInput(format!("covariate '{}' is missing for subject {}", col.name(), row + 1))
        };
        match col {
            CovariateColumn::Continuous { name, values } => {
                let v: Vec<f64> = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.filter(|x| x.is_finite()).ok_or_else(|| missing(i)))
                    .collect::<Result<_>>()?;
                let mean = v.iter().sum::<f64>() / n as f64;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                if !(sd > 0.0) || !sd.is_finite() {
                    return Err(CdcmError::ZeroVariance(format!("covariate '{name}' is constant")));
                }
                names.push(name.clone());
                cols.push(v.iter().map(|x| (x - mean) / sd).collect());
            }
            CovariateColumn::Categorical { name, values } => {
                let v: Vec<&str> = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v.as_deref().ok_or_else(|| missing(i)))
                    .collect::<Result<_>>()?;
                let levels: Vec<&str> = v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                if levels.len() < 2 {
                    return Err(CdcmError::ZeroVariance(format!("covariate '{name}' has a single level")));
                }
                let last = levels.len() - 1;
                for level in &levels[..last] {
                    names.push(format!("{name}[{level}]"));
                    cols.push(
                        v.iter()
                            .map(|x| {
                                if *x == *level {
                                    1.0
                                } else if *x == levels[last] {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }
        }
    }
    let matrix = Matrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(EncodedCovariates { names, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn records(p: usize, q: usize, k: usize, seed: u64) -> Vec<SubjectRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| {
                let th: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let a = Matrix::from_fn(p, p, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
                let s = &a * a.transpose() + Matrix::identity(p, p) * 0.05;
                let b: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
                SubjectRecord::new(th, s, b).unwrap()
            })
            .collect()
    }

    #[test]
    fn reduces_to_standard_normals() {
        let recs: Vec<SubjectRecord> = [[0.5, -1.0], [2.0, 0.1]]
            .iter()
            .map(|t| SubjectRecord::new(t.to_vec(), Matrix::identity(2, 2), vec![]).unwrap())
            .collect();
        let g = GroupParams {
            alpha: vec![0.0, 0.0],
            theta: Matrix::zeros(2, 0),
            tau: vec![0.0, 0.0],
            l_corr: Matrix::identity(2, 2),
        };
        let ll = group_marginal_loglik(&recs, &g).unwrap();
        let want: f64 = [0.5f64, -1.0, 2.0, 0.1].iter().map(|r| -0.5 * (2.0 * PI).ln() - 0.5 * r * r).sum();
        assert!((ll - want).abs() < 1e-7, "{ll} vs {want}");
    }

    #[test]
    fn scalar_hand_computed() {
        let rec = SubjectRecord::new(vec![1.3], Matrix::from_element(1, 1, 0.2), vec![0.5]).unwrap();
        let g = GroupParams {
            alpha: vec![0.4],
            theta: Matrix::from_element(1, 1, 0.6),
            tau: vec![0.7],
            l_corr: Matrix::identity(1, 1),
        };
        let var: f64 = 0.49 + 0.2 + S_JITTER;
        let r: f64 = 1.3 - 0.4 - 0.3;
        let want = -0.5 * (2.0 * PI * var).ln() - 0.5 * r * r / var;
        let got = group_marginal_loglik(&[rec], &g).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn monte_carlo_marginalization() {
        // N(θ̂; η, T + S) = E_{θ ~ N(η, T)} N(θ̂; θ, S).
        let theta_hat = [0.4, -0.2];
        let s = Matrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
        let g = GroupParams {
            alpha: vec![0.1, 0.2],
            theta: Matrix::zeros(2, 0),
            tau: vec![0.5, 0.8],
            l_corr: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.6, 0.8]),
        };
        let rec = SubjectRecord::new(theta_hat.to_vec(), s.clone(), vec![]).unwrap();
        let exact = group_marginal_loglik(&[rec], &g).unwrap().exp();
        let t_chol = g.covariance().cholesky().unwrap().l();
        let s_inv = s.clone().try_inverse().unwrap();
        let s_det = s.determinant();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let e = Vector::from_fn(2, |_, _| rng.sample(StandardNormal));
                let th = Vector::from_column_slice(&g.alpha) + &t_chol * e;
                let r = Vector::from_column_slice(&theta_hat) - th;
                (-0.5 * (r.transpose() * &s_inv * &r)[(0, 0)]).exp() / (2.0 * PI * s_det.sqrt())
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt() / (n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "MC {mean} ± {se} vs {exact}");
    }

    #[test]
    fn subject_permutation_invariance() {
        let recs = records(3, 2, 8, 1);
        let post = GroupPosterior::new(recs.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..post.dim()).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let g = GroupParams::from_unconstrained(3, 2, &x).unwrap();
        let a = group_marginal_loglik(&recs, &g).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        let b = group_marginal_loglik(&rev, &g).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn corr_transform_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let y: Vec<f64> = (0..10).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let (l, _) = corr_cholesky(5, &y);
            let m = &l * l.transpose();
            for i in 0..5 {
                assert!((m[(i, i)] - 1.0).abs() < 1e-12);
            }
            assert!(m.symmetric_eigenvalues().min() > -1e-12);
        }
    }

    #[test]
    fn corr_jacobian_matches_finite_differences() {
        // log|det ∂(lower L)/∂y| for p = 3, by differencing the 3 free entries.
        let y = [0.3, -0.5, 0.8];
        let free = |y: &[f64]| {
            let (l, _) = corr_cholesky(3, y);
            [l[(1, 0)], l[(2, 0)], l[(2, 1)]]
        };
        let h = 1e-6;
        let mut jac = Matrix::zeros(3, 3);
        for j in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[j] += h;
            ym[j] -= h;
            let (fp, fm) = (free(&yp), free(&ym));
            for i in 0..3 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let (_, log_jac) = corr_cholesky(3, &y);
        assert!((jac.determinant().abs().ln() - log_jac).abs() < 1e-7);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (p, q) in [(1, 0), (2, 1), (4, 3)] {
            let post = GroupPosterior::new(records(p, q, 6, p as u64)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10 + p as u64);
            let x: Vec<f64> = (0..post.dim()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut g = vec![0.0; x.len()];
            post.log_density_and_grad(&x, &mut g);
            for i in 0..x.len() {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (post.log_density(&xp) - post.log_density(&xm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1.0), "p={p} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn fixed_effects_limit() {
        // With T → 0 the likelihood score in α vanishes at the
        // precision-weighted mean of θ̂_k.
        let vals = [(1.0, 0.1), (2.0, 0.4), (-0.5, 0.2)];
        let recs: Vec<SubjectRecord> = vals
            .iter()
            .map(|(t, v)| SubjectRecord::new(vec![*t], Matrix::from_element(1, 1, *v), vec![]).unwrap())
            .collect();
        let w: f64 = vals.iter().map(|(_, v)| 1.0 / v).sum();
        let pooled = vals.iter().map(|(t, v)| t / v).sum::<f64>() / w;
        let ll = |a: f64| {
            let g = GroupParams {
                alpha: vec![a],
                theta: Matrix::zeros(1, 0),
                tau: vec![1e-6],
                l_corr: Matrix::identity(1, 1),
            };
            group_marginal_loglik(&recs, &g).unwrap()
        };
        let h = 1e-6;
        assert!(((ll(pooled + h) - ll(pooled - h)) / (2.0 * h)).abs() < 1e-5);
    }

    #[test]
    fn non_pd_covariance_is_reported() {
        let rec = SubjectRecord::new(vec![0.0], Matrix::from_element(1, 1, 0.0), vec![]).unwrap();
        let g = GroupParams {
            alpha: vec![0.0],
            theta: Matrix::zeros(1, 0),
            tau: vec![f64::NAN],
            l_corr: Matrix::identity(1, 1),
        };
        assert!(matches!(
            group_marginal_loglik(&[rec], &g),
            Err(CdcmError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn effect_coding_two_levels() {
        let col = CovariateColumn::Categorical {
            name: "sex".into(),
            values: ["M", "F", "F", "M"].iter().map(|s| Some(s.to_string())).collect(),
        };
        let enc = encode_covariates(&[col]).unwrap();
        assert_eq!(enc.names, vec!["sex[F]"]);
        assert_eq!(enc.matrix.column(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn effect_coding_three_levels_sums_to_zero() {
        let col = CovariateColumn::Categorical {
            name: "age".into(),
            values: ["a", "b", "c", "a", "b", "c"].iter().map(|s| Some(s.to_string())).collect(),
        };
        let enc = encode_covariates(&[col]).unwrap();
        assert_eq!(enc.matrix.ncols(), 2);
        for j in 0..2 {
            assert_eq!(enc.matrix.column(j).sum(), 0.0);
        }
    }

    #[test]
    fn standardization() {
        let col = CovariateColumn::Continuous {
            name: "pmat".into(),
            values: vec![Some(10.0), Some(14.0), Some(18.0)],
        };
        let enc = encode_covariates(&[col]).unwrap();
        let v: Vec<f64> = enc.matrix.column(0).iter().copied().collect();
        // SD of {10, 14, 18} is 4.
        for (got, want) in v.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance_and_errors() {
        let raw = [3.1, -2.0, 7.5, 0.4];
        let enc = |shift: f64| {
            encode_covariates(&[CovariateColumn::Continuous {
                name: "x".into(),
                values: raw.iter().map(|v| Some(v + shift)).collect(),
            }])
            .unwrap()
            .matrix
        };
        assert!((enc(0.0) - enc(123.0)).amax() < 1e-12);
        assert!(enc(0.0).column(0).sum().abs() < 1e-12);
        let constant = CovariateColumn::Continuous {
            name: "c".into(),
            values: vec![Some(1.0); 4],
        };
        assert!(matches!(encode_covariates(&[constant]), Err(CdcmError::ZeroVariance(_))));
        let gap = CovariateColumn::Continuous {
            name: "g".into(),
            values: vec![Some(1.0), None],
        };
        assert!(matches!(encode_covariates(&[gap]), Err(CdcmError::InvalidInput(_))));
    }

    #[test]
    fn record_validation() {
        assert!(SubjectRecord::new(vec![0.0; 2], Matrix::identity(3, 3), vec![]).is_err());
        let asym = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(SubjectRecord::new(vec![0.0; 2], asym, vec![]).is_err());
        let neg = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(SubjectRecord::new(vec![0.0; 2], neg, vec![]).is_err());
    }
}
