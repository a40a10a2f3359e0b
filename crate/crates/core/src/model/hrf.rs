use statrs::function::gamma::ln_gamma;

use crate::error::{CdcmError, Result};

/// Double-gamma canonical haemodynamic response function. The parameters are
/// fixed; they are never estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalHrf {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub c: f64,
}

pub const CANONICAL_HRF: CanonicalHrf = CanonicalHrf {
    alpha1: 6.0,
    alpha2: 16.0,
    beta1: 1.0,
    beta2: 1.0,
    c: 1.0 / 6.0,
};

impl Default for CanonicalHrf {
    fn default() -> Self {
        CANONICAL_HRF
    }
}

fn gamma_density(t: f64, shape: f64, rate: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    (shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * t.ln() - rate * t).exp()
}

impl CanonicalHrf {
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(CdcmError::InvalidInput(format!(
                "HRF time must be finite and non-negative, got {t}"
            )));
        }
        Ok(gamma_density(t, self.alpha1, self.beta1)
            - self.c * gamma_density(t, self.alpha2, self.beta2))
    }

    /// Sampled kernel `h[i] = h(r i)` for `i = 0..=n` (length `n + 1`).
    pub fn kernel(&self, r: f64, n: usize) -> Result<Vec<f64>> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(CdcmError::InvalidInput(format!(
                "repetition time must be positive, got {r}"
            )));
        }
        if n == 0 {
            return Err(CdcmError::InvalidInput("scan count must be at least 1".into()));
        }
        (0..=n).map(|i| self.eval(r * i as f64)).collect()
    }
}

/// Canonical HRF at `t` seconds.
pub fn hrf_eval(t: f64) -> Result<f64> {
    CANONICAL_HRF.eval(t)
}

/// Canonical HRF sampled at multiples of the repetition time, `h[0..=n]`.
pub fn hrf_kernel(r: f64, n: usize) -> Result<Vec<f64>> {
    CANONICAL_HRF.kernel(r, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_at_origin() {
        assert_eq!(hrf_eval(0.0).unwrap(), 0.0);
    }

    #[test]
    fn value_at_one_second() {
        // e^{-1}/120 - (1/6) e^{-1}/15!
        let fact15: f64 = (1..=15).map(|k| k as f64).product();
        let direct = (-1.0f64).exp() / 120.0 - (-1.0f64).exp() / (6.0 * fact15);
        let h = hrf_eval(1.0).unwrap();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.00306566).abs() < 1e-7);
    }

    #[test]
    fn sign_pattern() {
        assert!(hrf_eval(5.0).unwrap() > 0.0);
        assert!(hrf_eval(15.0).unwrap() < 0.0);
    }

    #[test]
    fn negative_time_rejected() {
        assert!(hrf_eval(-0.1).is_err());
    }

    #[test]
    fn kernel_layout() {
        let h = hrf_kernel(2.0, 3).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(h[0], 0.0);
        assert!(h[1] > 0.0);
        assert_eq!(h[2], hrf_eval(4.0).unwrap());
        assert_eq!(h[3], hrf_eval(6.0).unwrap());

        let h = hrf_kernel(3.22, 1).unwrap();
        assert_eq!(h.len(), 2);
        assert!(h[1] != 0.0);
    }
}
