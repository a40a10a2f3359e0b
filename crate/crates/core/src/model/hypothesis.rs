//! Sparsity hypothesis and the parameter state it induces.

use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::linalg::{Matrix, Vector};

/// Baseline self-connection rate: `diag(A) = -0.5 exp(nu)`.
pub const SELF_LOOP_BASELINE: f64 = -0.5;

/// Which entries of `A`, `B_1..B_m` and `C` are free parameters.
///
/// `mask_b[i][row][col]` marks entry `(row, col)` of `B_{i+1}`. The diagonal
/// of `mask_a` is always free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "mask_A")]
    pub mask_a: Vec<Vec<bool>>,
    #[serde(rename = "mask_B")]
    pub mask_b: Vec<Vec<Vec<bool>>>,
    #[serde(rename = "mask_C")]
    pub mask_c: Vec<Vec<bool>>,
}

impl Hypothesis {
    pub fn new(
        mask_a: Vec<Vec<bool>>,
        mask_b: Vec<Vec<Vec<bool>>>,
        mask_c: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let d = mask_a.len();
        let m = mask_b.len();
        let h = Hypothesis {
            d,
            m,
            mask_a,
            mask_b,
            mask_c,
        };
        h.validate()?;
        Ok(h)
    }

    /// Hypothesis with no free B or C entries and only the diagonal of A.
    pub fn empty(d: usize, m: usize) -> Self {
        let mut mask_a = vec![vec![false; d]; d];
        for (i, row) in mask_a.iter_mut().enumerate() {
            row[i] = true;
        }
        Hypothesis {
            d,
            m,
            mask_a,
            mask_b: vec![vec![vec![false; d]; d]; m],
            mask_c: vec![vec![false; m]; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(CdcmError::InvalidInput(
                "hypothesis needs at least one ROI and one stimulus".into(),
            ));
        }
        let square = |mask: &Vec<Vec<bool>>| {
            mask.len() == self.d && mask.iter().all(|r| r.len() == self.d)
        };
        if !square(&self.mask_a) {
            return Err(CdcmError::DimensionMismatch(format!(
                "mask_A must be {0}x{0}",
                self.d
            )));
        }
        if self.mask_b.len() != self.m || !self.mask_b.iter().all(square) {
            return Err(CdcmError::DimensionMismatch(format!(
                "mask_B must be {}x{}x{}",
                self.m, self.d, self.d
            )));
        }
        if self.mask_c.len() != self.d || !self.mask_c.iter().all(|r| r.len() == self.m) {
            return Err(CdcmError::DimensionMismatch(format!(
                "mask_C must be {}x{}",
                self.d, self.m
            )));
        }
        if (0..self.d).any(|i| !self.mask_a[i][i]) {
            return Err(CdcmError::InvalidInput(
                "the diagonal of mask_A must be free".into(),
            ));
        }
        Ok(())
    }

    /// Off-diagonal free positions of `A`, row-major.
    pub fn a_offdiag_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.d {
            for j in 0..self.d {
                if i != j && self.mask_a[i][j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Free positions `(stimulus, row, col)` of `B`, stimulus-major then row-major.
    pub fn b_positions(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (k, mask) in self.mask_b.iter().enumerate() {
            for i in 0..self.d {
                for j in 0..self.d {
                    if mask[i][j] {
                        out.push((k, i, j));
                    }
                }
            }
        }
        out
    }

    /// Free positions `(row, stimulus)` of `C`, row-major.
    pub fn c_positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.d {
            for k in 0..self.m {
                if self.mask_c[i][k] {
                    out.push((i, k));
                }
            }
        }
        out
    }

    /// Number of free neural parameters `p_θz`.
    pub fn neural_count(&self) -> usize {
        self.d + self.a_offdiag_positions().len() + self.b_positions().len() + self.c_positions().len()
    }

    /// Total unconstrained dimension: neural parameters plus `s*`, `β` and `σ`.
    pub fn param_count(&self) -> usize {
        self.neural_count() + 3 * self.d
    }

    /// Labels of the neural parameters in vector order (1-based indices).
    pub fn neural_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.d).map(|i| format!("nu_diagA[{}]", i + 1)).collect();
        names.extend(
            self.a_offdiag_positions()
                .into_iter()
                .map(|(i, j)| format!("A[{},{}]", i + 1, j + 1)),
        );
        names.extend(
            self.b_positions()
                .into_iter()
                .map(|(k, i, j)| format!("B{}[{},{}]", k + 1, i + 1, j + 1)),
        );
        names.extend(
            self.c_positions()
                .into_iter()
                .map(|(i, k)| format!("C[{},{}]", i + 1, k + 1)),
        );
        names
    }

    /// Labels of every unconstrained coordinate.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.neural_names();
        for prefix in ["s_star", "beta", "log_sigma"] {
            names.extend((0..self.d).map(|i| format!("{prefix}[{}]", i + 1)));
        }
        names
    }

    /// Permutes ROI labels: ROI `i` of `self` becomes ROI `perm[i]`.
    pub fn permute_rois(&self, perm: &[usize]) -> Hypothesis {
        let d = self.d;
        let mut out = Hypothesis::empty(d, self.m);
        for i in 0..d {
            for j in 0..d {
                out.mask_a[perm[i]][perm[j]] = self.mask_a[i][j];
                for k in 0..self.m {
                    out.mask_b[k][perm[i]][perm[j]] = self.mask_b[k][i][j];
                }
            }
            out.mask_c[perm[i]] = self.mask_c[i].clone();
        }
        out
    }
}

/// Full parameter state.
///
/// Entry vectors follow the position orders of [`Hypothesis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(rename = "nu_diagA")]
    pub nu_diag_a: Vec<f64>,
    #[serde(rename = "offdiag_A")]
    pub offdiag_a: Vec<f64>,
    #[serde(rename = "B_entries")]
    pub b_entries: Vec<f64>,
    #[serde(rename = "C_entries")]
    pub c_entries: Vec<f64>,
    pub s_star: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ParamSet {
    /// All-zero neural parameters, `s* = β = 0`, unit noise.
    pub fn zeros(h: &Hypothesis) -> Self {
        ParamSet {
            nu_diag_a: vec![0.0; h.d],
            offdiag_a: vec![0.0; h.a_offdiag_positions().len()],
            b_entries: vec![0.0; h.b_positions().len()],
            c_entries: vec![0.0; h.c_positions().len()],
            s_star: vec![0.0; h.d],
            beta: vec![0.0; h.d],
            sigma: vec![1.0; h.d],
        }
    }

    pub fn check(&self, h: &Hypothesis) -> Result<()> {
        let checks = [
            ("nu_diagA", self.nu_diag_a.len(), h.d),
            ("offdiag_A", self.offdiag_a.len(), h.a_offdiag_positions().len()),
            ("B_entries", self.b_entries.len(), h.b_positions().len()),
            ("C_entries", self.c_entries.len(), h.c_positions().len()),
            ("s_star", self.s_star.len(), h.d),
            ("beta", self.beta.len(), h.d),
            ("sigma", self.sigma.len(), h.d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(CdcmError::DimensionMismatch(format!(
                    "{name} has {got} entries, hypothesis expects {want}"
                )));
            }
        }
        Ok(())
    }

    pub fn a_matrix(&self, h: &Hypothesis) -> Matrix {
        let mut a = Matrix::zeros(h.d, h.d);
        for (i, nu) in self.nu_diag_a.iter().enumerate() {
            a[(i, i)] = SELF_LOOP_BASELINE * nu.exp();
        }
        for ((i, j), v) in h.a_offdiag_positions().into_iter().zip(&self.offdiag_a) {
            a[(i, j)] = *v;
        }
        a
    }

    pub fn b_matrices(&self, h: &Hypothesis) -> Vec<Matrix> {
        let mut bs = vec![Matrix::zeros(h.d, h.d); h.m];
        for ((k, i, j), v) in h.b_positions().into_iter().zip(&self.b_entries) {
            bs[k][(i, j)] = *v;
        }
        bs
    }

    pub fn c_matrix(&self, h: &Hypothesis) -> Matrix {
        let mut c = Matrix::zeros(h.d, h.m);
        for ((i, k), v) in h.c_positions().into_iter().zip(&self.c_entries) {
            c[(i, k)] = *v;
        }
        c
    }

    /// Builds a parameter set from dense connectivity matrices, reading only
    /// the entries the hypothesis marks as free.
    pub fn from_matrices(
        h: &Hypothesis,
        a: &Matrix,
        bs: &[Matrix],
        c: &Matrix,
        s_star: &[f64],
    ) -> Result<Self> {
        let mut p = ParamSet::zeros(h);
        for i in 0..h.d {
            if !(a[(i, i)] < 0.0) {
                return Err(CdcmError::InvalidInput(format!(
                    "diag(A)[{i}] = {} must be negative",
                    a[(i, i)]
                )));
            }
            p.nu_diag_a[i] = (a[(i, i)] / SELF_LOOP_BASELINE).ln();
        }
        p.offdiag_a = h.a_offdiag_positions().into_iter().map(|(i, j)| a[(i, j)]).collect();
        p.b_entries = h.b_positions().into_iter().map(|(k, i, j)| bs[k][(i, j)]).collect();
        p.c_entries = h.c_positions().into_iter().map(|(i, k)| c[(i, k)]).collect();
        p.s_star = s_star.to_vec();
        Ok(p)
    }

    /// Neural parameters on the natural scale, in hypothesis order, with the
    /// diagonal of `A` reported as `-0.5 exp(nu)`.
    pub fn neural_natural(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .nu_diag_a
            .iter()
            .map(|nu| SELF_LOOP_BASELINE * nu.exp())
            .collect();
        out.extend(&self.offdiag_a);
        out.extend(&self.b_entries);
        out.extend(&self.c_entries);
        out
    }

    /// Flattens into the unconstrained sampler coordinates
    /// `[nu_diagA, offdiag_A, B, C, s*, β, log σ]`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut x = Vec::new();
        x.extend(&self.nu_diag_a);
        x.extend(&self.offdiag_a);
        x.extend(&self.b_entries);
        x.extend(&self.c_entries);
        x.extend(&self.s_star);
        x.extend(&self.beta);
        x.extend(self.sigma.iter().map(|s| s.ln()));
        x
    }

    pub fn from_unconstrained(h: &Hypothesis, x: &[f64]) -> Result<Self> {
        if x.len() != h.param_count() {
            return Err(CdcmError::DimensionMismatch(format!(
                "parameter vector has length {}, expected {}",
                x.len(),
                h.param_count()
            )));
        }
        let mut it = x.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let nu_diag_a = take(h.d);
        let offdiag_a = take(h.a_offdiag_positions().len());
        let b_entries = take(h.b_positions().len());
        let c_entries = take(h.c_positions().len());
        let s_star = take(h.d);
        let beta = take(h.d);
        let sigma = take(h.d).into_iter().map(f64::exp).collect();
        Ok(ParamSet {
            nu_diag_a,
            offdiag_a,
            b_entries,
            c_entries,
            s_star,
            beta,
            sigma,
        })
    }

    pub fn s_star_vector(&self) -> Vector {
        Vector::from_vec(self.s_star.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_roi() -> Hypothesis {
        Hypothesis::new(
            vec![vec![true, true], vec![true, true]],
            vec![
                vec![vec![false, false], vec![false, false]],
                vec![vec![false, true], vec![false, false]],
            ],
            vec![vec![true, false], vec![false, false]],
        )
        .unwrap()
    }

    #[test]
    fn counts_and_names() {
        let h = two_roi();
        assert_eq!(h.neural_count(), 6);
        assert_eq!(h.param_count(), 12);
        assert_eq!(
            h.neural_names(),
            vec!["nu_diagA[1]", "nu_diagA[2]", "A[1,2]", "A[2,1]", "B2[1,2]", "C[1,1]"]
        );
    }

    #[test]
    fn diagonal_must_be_free() {
        let r = Hypothesis::new(
            vec![vec![false, true], vec![true, true]],
            vec![vec![vec![false; 2]; 2]],
            vec![vec![false], vec![false]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn ragged_masks_rejected() {
        let r = Hypothesis::new(
            vec![vec![true, true], vec![true, true]],
            vec![vec![vec![false; 2]; 2]],
            vec![vec![false]],
        );
        assert!(matches!(r, Err(CdcmError::DimensionMismatch(_))));
    }

    #[test]
    fn diag_a_is_negative_and_baseline_at_zero() {
        let h = two_roi();
        let mut p = ParamSet::zeros(&h);
        assert_eq!(p.a_matrix(&h)[(0, 0)], -0.5);
        p.nu_diag_a = vec![-30.0, 30.0];
        let a = p.a_matrix(&h);
        assert!(a[(0, 0)] < 0.0 && a[(1, 1)] < 0.0);
    }

    #[test]
    fn unconstrained_round_trip() {
        let h = two_roi();
        let x: Vec<f64> = (0..h.param_count()).map(|i| 0.1 * i as f64 - 0.3).collect();
        let p = ParamSet::from_unconstrained(&h, &x).unwrap();
        let back = p.to_unconstrained();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn json_field_names() {
        let h = two_roi();
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("\"mask_A\"") && s.contains("\"mask_B\"") && s.contains("\"mask_C\""));
        let p = serde_json::to_string(&ParamSet::zeros(&h)).unwrap();
        assert!(p.contains("\"nu_diagA\"") && p.contains("\"C_entries\""));
    }
}
