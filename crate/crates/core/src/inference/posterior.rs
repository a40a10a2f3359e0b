//! CDCM log-posterior on the unconstrained scale and its adjoint gradient.

use std::f64::consts::PI;

use crate::error::{CdcmError, Result};
use crate::inference::LogDensity;
use crate::linalg::{exp_frechet, Matrix, Vector};
use crate::model::density::{
    b_prior_sds, log_likelihood_from_mean, log_prior, SD_BETA, SD_DIAGONAL, SD_OFFDIAGONAL,
    SD_S_STAR, SIGMA_RATE,
};
use crate::model::design::StimulusDesign;
use crate::model::dynamics::{convolve, convolve_adjoint, propagate};
use crate::model::hrf::hrf_kernel;
use crate::model::hypothesis::{Hypothesis, ParamSet};

/// Posterior of one subject's CDCM given BOLD data `y` (`n x d`).
#[derive(Debug, Clone)]
pub struct CdcmPosterior {
    pub hypothesis: Hypothesis,
    pub design: StimulusDesign,
    pub y: Matrix,
    hker: Vec<f64>,
    b_sds: Vec<f64>,
}

impl CdcmPosterior {
    pub fn new(hypothesis: Hypothesis, design: StimulusDesign, y: Matrix) -> Result<Self> {
        hypothesis.validate()?;
        if design.m != hypothesis.m {
            return Err(CdcmError::DimensionMismatch(format!(
                "design has {} stimuli, hypothesis has {}",
                design.m, hypothesis.m
            )));
        }
        if y.nrows() != design.n || y.ncols() != hypothesis.d {
            return Err(CdcmError::DimensionMismatch(format!(
                "data is {}x{}, expected {}x{}",
                y.nrows(),
                y.ncols(),
                design.n,
                hypothesis.d
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CdcmError::InvalidInput("data contains non-finite values".into()));
        }
        let hker = hrf_kernel(design.r, design.n)?;
        let b_sds = b_prior_sds(&hypothesis);
        Ok(CdcmPosterior {
            hypothesis,
            design,
            y,
            hker,
            b_sds,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.hypothesis.param_names()
    }

    /// Log-posterior density of the unconstrained vector, including the
    /// `log σ` Jacobian. Returns `-inf` where the model cannot be evaluated.
    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        match self.eval(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        let p = ParamSet::from_unconstrained(&self.hypothesis, x)?;
        let prop = propagate(&p, &self.hypothesis, &self.design, self.design.n)?;
        let mu = convolve(&prop.z, &self.hker)?;
        let jac: f64 = p.sigma.iter().map(|s| s.ln()).sum();
        Ok(log_prior(&p, &self.hypothesis) + log_likelihood_from_mean(&p, &mu, &self.y)? + jac)
    }

    /// Gradient of [`Self::log_posterior`], or `None` where it is `-inf`.
    pub fn grad_log_posterior(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; x.len()];
        let v = self.value_and_grad(x, &mut g).ok()?;
        (v.is_finite() && g.iter().all(|v| v.is_finite())).then_some(g)
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let h = &self.hypothesis;
        let (d, n) = (h.d, self.design.n);
        let p = ParamSet::from_unconstrained(h, x)?;
        let prop = propagate(&p, h, &self.design, n)?;
        let mu = convolve(&prop.z, &self.hker)?;

        let n_a = h.a_offdiag_positions().len();
        let n_b = self.b_sds.len();
        let n_c = h.c_positions().len();
        let o_off = d;
        let o_b = o_off + n_a;
        let o_c = o_b + n_b;
        let o_s = o_c + n_c;
        let o_beta = o_s + d;
        let o_sig = o_beta + d;

        // Prior and Jacobian.
        let mut lp = 0.0;
        let mut add_normal = |v: f64, sd: f64, g: &mut f64| {
            lp += -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (v / sd).powi(2);
            *g = -v / (sd * sd);
        };
        for i in 0..d {
            add_normal(p.nu_diag_a[i], SD_DIAGONAL, &mut grad[i]);
            add_normal(p.s_star[i], SD_S_STAR, &mut grad[o_s + i]);
            add_normal(p.beta[i], SD_BETA, &mut grad[o_beta + i]);
        }
        for i in 0..n_a {
            add_normal(p.offdiag_a[i], SD_OFFDIAGONAL, &mut grad[o_off + i]);
        }
        for i in 0..n_b {
            add_normal(p.b_entries[i], self.b_sds[i], &mut grad[o_b + i]);
        }
        for i in 0..n_c {
            add_normal(p.c_entries[i], SD_OFFDIAGONAL, &mut grad[o_c + i]);
        }
        for (l, s) in p.sigma.iter().enumerate() {
            lp += SIGMA_RATE.ln() - SIGMA_RATE * s + x[o_sig + l];
            grad[o_sig + l] = -SIGMA_RATE * s + 1.0;
        }

        // Likelihood.
        let mut ll = 0.0;
        let mut g_mu = Matrix::zeros(n, d);
        for l in 0..d {
            let s2 = p.sigma[l] * p.sigma[l];
            let mut rss = 0.0;
            let mut sum_e = 0.0;
            for j in 0..n {
                let e = self.y[(j, l)] - mu[(j, l)] - p.beta[l];
                rss += e * e;
                sum_e += e;
                g_mu[(j, l)] = e / s2;
            }
            ll += -0.5 * n as f64 * (2.0 * PI * s2).ln() - 0.5 * rss / s2;
            grad[o_beta + l] += sum_e / s2;
            grad[o_sig + l] += -(n as f64) + rss / s2;
        }

        // Adjoint pass through the piecewise-affine recursion.
        let g_z = convolve_adjoint(&g_mu, &self.hker)?;
        let mut lambda: Vector = g_z.row(n - 1).transpose();
        let mut gbar_exp: Vec<Matrix> = vec![Matrix::zeros(d + 1, d + 1); prop.systems.len()];
        for j in (0..n - 1).rev() {
            let k = prop.interval_system[j];
            let gb = &mut gbar_exp[k];
            // [λ_{j+1}; 0] [z_j; 1]ᵀ
            for a in 0..d {
                let la = lambda[a];
                for b in 0..d {
                    gb[(a, b)] += la * prop.z[(j, b)];
                }
                gb[(a, d)] += la;
            }
            lambda = prop.systems[k].phi.tr_mul(&lambda) + g_z.row(j).transpose();
        }
        for i in 0..d {
            grad[o_s + i] += lambda[i];
        }

        let r = self.design.r;
        let a_offdiag = h.a_offdiag_positions();
        let b_pos = h.b_positions();
        let c_pos = h.c_positions();
        let a_mat = p.a_matrix(h);
        for (k, sys) in prop.systems.iter().enumerate() {
            let gbar = exp_frechet(&sys.generator.transpose(), &gbar_exp[k])?;
            let g_a = gbar.view((0, 0), (d, d)) * r;
            let g_c: Vec<f64> = (0..d).map(|a| gbar[(a, d)] * r).collect();
            for i in 0..d {
                grad[i] += g_a[(i, i)] * a_mat[(i, i)];
            }
            for (q, (i, j)) in a_offdiag.iter().enumerate() {
                grad[o_off + q] += g_a[(*i, *j)];
            }
            for (q, (s, i, j)) in b_pos.iter().enumerate() {
                grad[o_b + q] += sys.stimulus[*s] * g_a[(*i, *j)];
            }
            for (q, (i, s)) in c_pos.iter().enumerate() {
                grad[o_c + q] += sys.stimulus[*s] * g_c[*i];
            }
        }
        Ok(lp + ll)
    }
}

impl LogDensity for CdcmPosterior {
    fn dim(&self) -> usize {
        self.hypothesis.param_count()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_posterior(x)
    }

    fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self.value_and_grad(x, grad) {
            Ok(v) if v.is_finite() && grad.iter().all(|g| g.is_finite()) => v,
            _ => f64::NEG_INFINITY,
        }
    }
}
