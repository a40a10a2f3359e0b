//! Assumption audits (A1–A4) and constructive recovery of `(s*, A, B, C)`
//! from a noiseless trajectory or BOLD mean.

use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::linalg::{
    condition_number, distinct_real_eigenvalues, eigenvalues, mat_exp, mat_log_real, w_antideriv,
    Matrix, Vector, EIGEN_GAP_TOL, EIGEN_IMAG_TOL,
};
use crate::model::design::StimulusDesign;
use crate::model::dynamics::{assemble_block_system, neural_trajectory};
use crate::model::hypothesis::{Hypothesis, ParamSet};

/// Condition number above which `X_0^(b)` counts as singular.
pub const A4_MAX_CONDITION: f64 = 1e10;
/// Condition number above which `Ũ*` counts as singular.
pub const A2_MAX_CONDITION: f64 = 1e10;
/// Smallest admissible `|h(r)|` for deconvolution.
pub const HRF_MIN_FIRST_TAP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A1Report {
    pub pass: bool,
    /// Observations each block needs (`d + 1`).
    pub required: usize,
    pub block_lengths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2Report {
    pub pass: bool,
    /// Indices into the design's block list forming `𝓑*`.
    pub selected_blocks: Vec<usize>,
    pub stimuli: Vec<Vec<f64>>,
    /// Condition number of the intercept-augmented `Ũ*`, when square.
    pub condition_number: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Block {
    pub block: usize,
    pub pass: bool,
    /// Eigenvalues of `Ã^(b)` as `[re, im]` pairs.
    pub eigenvalues: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Report {
    pub pass: bool,
    pub blocks: Vec<A3Block>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A4Block {
    pub block: usize,
    pub pass: bool,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A4Report {
    pub pass: bool,
    pub blocks: Vec<A4Block>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTolerances {
    pub eigen_gap_relative: f64,
    pub eigen_imag_relative: f64,
    pub a2_max_condition: f64,
    pub a4_max_condition: f64,
}

impl Default for AuditTolerances {
    fn default() -> Self {
        AuditTolerances {
            eigen_gap_relative: EIGEN_GAP_TOL,
            eigen_imag_relative: EIGEN_IMAG_TOL,
            a2_max_condition: A2_MAX_CONDITION,
            a4_max_condition: A4_MAX_CONDITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub d: usize,
    pub m: usize,
    pub checks_run: Vec<String>,
    pub a1: A1Report,
    pub a2: A2Report,
    pub a3: Option<A3Report>,
    pub a4: Option<A4Report>,
    pub tolerances: AuditTolerances,
}

impl AuditReport {
    pub fn all_pass(&self) -> bool {
        self.a1.pass
            && self.a2.pass
            && self.a3.as_ref().is_none_or(|r| r.pass)
            && self.a4.as_ref().is_none_or(|r| r.pass)
    }
}

/// A block qualifies for `𝓑*` when it spans `d + 1` scans and its `d + 2`
/// states lie inside the observed trajectory.
fn block_qualifies(design: &StimulusDesign, b: usize, d: usize) -> bool {
    let block = &design.blocks[b];
    block.len > d && design.block_state_index(block) + d + 1 < design.n
}

fn augmented_row(u: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(u.len() + 1);
    row.push(1.0);
    row.extend_from_slice(u);
    row
}

fn min_singular_value(rows: &[Vec<f64>]) -> f64 {
    let cols = rows[0].len();
    let m = Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    m.svd(false, false).singular_values.min()
}

/// Greedy selection of `m + 1` qualifying blocks with distinct stimuli whose
/// intercept-augmented stimulus matrix is invertible.
pub fn select_blocks(design: &StimulusDesign, d: usize) -> (Vec<usize>, Option<f64>) {
    let mut candidates: Vec<usize> = Vec::new();
    for b in 0..design.blocks.len() {
        if block_qualifies(design, b, d)
            && !candidates
                .iter()
                .any(|c| design.blocks[*c].stimulus == design.blocks[b].stimulus)
        {
            candidates.push(b);
        }
    }
    let target = design.m + 1;
    let mut selected: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while selected.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for c in &candidates {
            if selected.contains(c) {
                continue;
            }
            let mut trial = rows.clone();
            trial.push(augmented_row(&design.blocks[*c].stimulus));
            let s = min_singular_value(&trial);
            if s > 1e-10 && best.is_none_or(|(_, bs)| s > bs) {
                best = Some((*c, s));
            }
        }
        match best {
            Some((c, _)) => {
                rows.push(augmented_row(&design.blocks[c].stimulus));
                selected.push(c);
            }
            None => break,
        }
    }
    selected.sort_unstable();
    let cond = if selected.len() == target {
        let rows: Vec<Vec<f64>> = selected
            .iter()
            .map(|b| augmented_row(&design.blocks[*b].stimulus))
            .collect();
        Some(condition_number(&Matrix::from_fn(target, target, |i, j| rows[i][j])))
    } else {
        None
    };
    (selected, cond)
}

/// A1 and A2 for a design and ROI count.
pub fn check_design(design: &StimulusDesign, d: usize) -> AuditReport {
    let required = d + 1;
    let block_lengths: Vec<usize> = design.blocks.iter().map(|b| b.len).collect();
    let a1 = A1Report {
        pass: block_lengths.iter().all(|l| *l >= required),
        required,
        block_lengths,
    };
    let (selected, cond) = select_blocks(design, d);
    let a2 = A2Report {
        pass: cond.is_some_and(|c| c <= A2_MAX_CONDITION),
        stimuli: selected.iter().map(|b| design.blocks[*b].stimulus.clone()).collect(),
        selected_blocks: selected,
        condition_number: cond,
    };
    AuditReport {
        d,
        m: design.m,
        checks_run: vec!["A1".into(), "A2".into()],
        a1,
        a2,
        a3: None,
        a4: None,
        tolerances: AuditTolerances::default(),
    }
}

/// A3: every selected block system has `d` distinct real eigenvalues.
pub fn check_a3(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign, blocks: &[usize]) -> Result<A3Report> {
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (a, _) = assemble_block_system(p, h, &design.blocks[*b].stimulus)?;
        let eig = eigenvalues(&a)?;
        out.push(A3Block {
            block: *b,
            pass: distinct_real_eigenvalues(&a).is_ok(),
            eigenvalues: eig.iter().map(|c| [c.re, c.im]).collect(),
        });
    }
    Ok(A3Report {
        pass: out.iter().all(|b| b.pass),
        blocks: out,
    })
}

/// `X_0^(b)`: columns `[z(t^(b) + j r); 1]` for `j = 0..=d`.
pub fn data_matrix(z: &Matrix, design: &StimulusDesign, block: usize) -> Result<Matrix> {
    let d = z.ncols();
    let start = design.block_state_index(&design.blocks[block]);
    if start + d >= z.nrows() {
        return Err(CdcmError::InvalidInput(format!(
            "block {block} needs states {start}..={}, trajectory has {}",
            start + d,
            z.nrows()
        )));
    }
    let mut x = Matrix::from_element(d + 1, d + 1, 1.0);
    for j in 0..=d {
        for i in 0..d {
            x[(i, j)] = z[(start + j, i)];
        }
    }
    Ok(x)
}

/// A4: the within-block data matrix of each selected block is invertible.
pub fn check_a4(z: &Matrix, design: &StimulusDesign, blocks: &[usize]) -> Result<A4Report> {
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let cond = condition_number(&data_matrix(z, design, *b)?);
        out.push(A4Block {
            block: *b,
            pass: cond <= A4_MAX_CONDITION,
            condition_number: cond,
        });
    }
    Ok(A4Report {
        pass: out.iter().all(|b| b.pass),
        blocks: out,
    })
}

/// Full audit of a parameter set under a design: A1–A2 on the design, A3 on
/// the block systems and A4 on the noiseless trajectory.
pub fn audit(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign) -> Result<AuditReport> {
    let mut report = check_design(design, h.d);
    let blocks = report.a2.selected_blocks.clone();
    report.a3 = Some(check_a3(p, h, design, &blocks)?);
    let z = neural_trajectory(p, h, design)?;
    report.a4 = Some(check_a4(&z, design, &blocks)?);
    report.checks_run.extend(["A3".to_string(), "A4".to_string()]);
    Ok(report)
}

/// Recovers `(Ã, c̃)` from `d + 2` consecutive states (rows of `v`) spaced `r`
/// apart under a constant stimulus.
pub fn recover_block(v: &Matrix, r: f64) -> Result<(Matrix, Vector)> {
    let d = v.ncols();
    if v.nrows() < d + 2 {
        return Err(CdcmError::InvalidInput(format!(
            "block recovery needs {} states, got {}",
            d + 2,
            v.nrows()
        )));
    }
    if !(r > 0.0) {
        return Err(CdcmError::InvalidInput(format!("repetition time must be positive, got {r}")));
    }
    // Homogeneous states [z; 1] satisfy X1 = Ψ X0 with Ψ = [[Φ, p], [0, 1]].
    // Solving on X0 avoids forming the cancellation-prone state differences.
    let homogeneous = |offset: usize| {
        Matrix::from_fn(d + 1, d + 1, |i, j| if i == d { 1.0 } else { v[(offset + j, i)] })
    };
    let (x0, x1) = (homogeneous(0), homogeneous(1));
    let cond = condition_number(&x0);
    if !(cond <= A4_MAX_CONDITION) {
        return Err(CdcmError::SingularDataMatrix(format!(
            "within-block data matrix has condition number {cond:.3e}"
        )));
    }
    let psi = x0
        .transpose()
        .lu()
        .solve(&x1.transpose())
        .ok_or_else(|| CdcmError::SingularDataMatrix("within-block data matrix is singular".into()))?
        .transpose();
    let phi = psi.view((0, 0), (d, d)).into_owned();
    let a_tilde = mat_log_real(&phi)? / r;
    let w1 = w_antideriv(1.0, &(&a_tilde * r))?;
    let rhs = psi.view((0, d), (d, 1)).column(0) / r;
    let c_tilde = w1
        .lu()
        .solve(&rhs)
        .ok_or_else(|| CdcmError::SingularDataMatrix("w(1; rÃ) is singular".into()))?;
    Ok((a_tilde, c_tilde))
}

/// One recovered block system.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystemEstimate {
    pub stimulus: Vec<f64>,
    pub a_tilde: Matrix,
    pub c_tilde: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRecovery {
    pub a: Matrix,
    pub b: Vec<Matrix>,
    pub c: Matrix,
    /// Max absolute mismatch between the input block systems and those
    /// reassembled from `(A, B, C)`.
    pub residual: f64,
    pub condition_number: f64,
}

/// Unmixes `(A, B_1..B_m, C)` from `m + 1` (or more, by least squares) block
/// systems with an invertible intercept-augmented stimulus matrix.
pub fn recover_global(systems: &[BlockSystemEstimate], d: usize, m: usize) -> Result<GlobalRecovery> {
    let k = systems.len();
    if k < m + 1 {
        return Err(CdcmError::ConfoundedDesign(format!(
            "need {} block systems, got {k}",
            m + 1
        )));
    }
    for s in systems {
        if s.stimulus.len() != m || s.a_tilde.shape() != (d, d) || s.c_tilde.len() != d {
            return Err(CdcmError::DimensionMismatch(
                "block system does not match (d, m)".into(),
            ));
        }
    }
    let u = Matrix::from_fn(k, m + 1, |i, j| if j == 0 { 1.0 } else { systems[i].stimulus[j - 1] });
    let cond = condition_number(&u);
    if !(cond <= A2_MAX_CONDITION) {
        return Err(CdcmError::ConfoundedDesign(format!(
            "intercept-augmented stimulus matrix has condition number {cond:.3e}"
        )));
    }
    // Each matrix entry (and each entry of c̃) is a separate regression on Ũ*.
    let mut rhs = Matrix::zeros(k, d * d + d);
    for (b, s) in systems.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                rhs[(b, i * d + j)] = s.a_tilde[(i, j)];
            }
            rhs[(b, d * d + i)] = s.c_tilde[i];
        }
    }
    let coef = u
        .clone()
        .svd(true, true)
        .solve(&rhs, 0.0)
        .map_err(|e| CdcmError::ConfoundedDesign(e.to_string()))?;
    let mut a = Matrix::zeros(d, d);
    let mut bs = vec![Matrix::zeros(d, d); m];
    let mut c = Matrix::zeros(d, m);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = coef[(0, i * d + j)];
            for (q, bq) in bs.iter_mut().enumerate() {
                bq[(i, j)] = coef[(q + 1, i * d + j)];
            }
        }
        for q in 0..m {
            c[(i, q)] = coef[(q + 1, d * d + i)];
        }
    }
    let mut residual: f64 = 0.0;
    for s in systems {
        let mut at = a.clone();
        for (q, bq) in bs.iter().enumerate() {
            at += bq * s.stimulus[q];
        }
        let ct = &c * Vector::from_column_slice(&s.stimulus);
        residual = residual.max((at - &s.a_tilde).amax()).max((ct - &s.c_tilde).amax());
    }
    Ok(GlobalRecovery {
        a,
        b: bs,
        c,
        residual,
        condition_number: cond,
    })
}

/// Inverts one affine step: `s* = exp(-r Ã) (z(r) - w(r; Ã) c̃)`.
pub fn recover_initial(z_r: &Vector, a_init: &Matrix, c_init: &Vector, r: f64) -> Result<Vector> {
    let w = w_antideriv(r, a_init)?;
    Ok(mat_exp(&(a_init * -r))? * (z_r - w * c_init))
}

/// Inverts [`crate::model::dynamics::convolve`] by forward substitution on
/// the lower-triangular Toeplitz system.
pub fn deconvolve(mu: &Matrix, hker: &[f64]) -> Result<Matrix> {
    let n = mu.nrows();
    if hker.len() < n + 1 {
        return Err(CdcmError::InvalidInput(format!(
            "kernel has {} samples, need at least {}",
            hker.len(),
            n + 1
        )));
    }
    let h1 = hker[1];
    if !(h1.abs() > HRF_MIN_FIRST_TAP) {
        return Err(CdcmError::NonInjectiveObservation(format!("h(r) = {h1:e}")));
    }
    let mut z = Matrix::zeros(n, mu.ncols());
    for l in 0..mu.ncols() {
        for k in 0..n {
            let mut acc = mu[(k, l)];
            for i in 2..=(k + 1) {
                acc -= hker[i] * z[(k + 1 - i, l)];
            }
            z[(k, l)] = acc / h1;
        }
    }
    Ok(z)
}

/// Infinity-norm condition number of the `n x n` lower-triangular Toeplitz
/// convolution matrix. Deconvolution amplifies relative perturbations of `μ`
/// by up to this factor.
pub fn deconvolution_condition(hker: &[f64], n: usize) -> Result<f64> {
    if hker.len() < n + 1 || n == 0 {
        return Err(CdcmError::InvalidInput(format!(
            "kernel has {} samples, need at least {}",
            hker.len(),
            n + 1
        )));
    }
    let h1 = hker[1];
    if !(h1.abs() > HRF_MIN_FIRST_TAP) {
        return Ok(f64::INFINITY);
    }
    // Coefficients of the inverse power series of Σ_i h[i+1] x^i.
    let mut g = vec![1.0 / h1];
    for j in 1..n {
        let s: f64 = (1..=j).map(|i| hker[i + 1] * g[j - i]).sum();
        g.push(-s / h1);
    }
    let inv_norm: f64 = g.iter().map(|v| v.abs()).sum();
    let norm: f64 = hker[1..=n].iter().map(|v| v.abs()).sum();
    Ok(inv_norm * norm)
}

/// Output of the full recovery chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub blocks: Vec<usize>,
    pub systems: Vec<BlockSystemEstimate>,
    pub global: GlobalRecovery,
    pub s_star: Vector,
}

/// Runs block recovery on `𝓑*`, global unmixing and initial-state recovery on
/// a latent trajectory `z` (`n x d`).
pub fn recover_from_trajectory(z: &Matrix, design: &StimulusDesign) -> Result<Recovery> {
    let d = z.ncols();
    if z.nrows() != design.n {
        return Err(CdcmError::DimensionMismatch(format!(
            "trajectory has {} rows, design has {} scans",
            z.nrows(),
            design.n
        )));
    }
    let report = check_design(design, d);
    if !report.a2.pass {
        return Err(CdcmError::ConfoundedDesign(format!(
            "found only {} of {} qualifying blocks with unconfounded stimuli",
            report.a2.selected_blocks.len(),
            design.m + 1
        )));
    }
    let blocks = report.a2.selected_blocks;
    let mut systems = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let block = &design.blocks[*b];
        let start = design.block_state_index(block);
        let v = z.rows(start, d + 2).into_owned();
        let (a_tilde, c_tilde) = recover_block(&v, design.r)?;
        systems.push(BlockSystemEstimate {
            stimulus: block.stimulus.clone(),
            a_tilde,
            c_tilde,
        });
    }
    let global = recover_global(&systems, d, design.m)?;
    let u0 = design.prescan_stimulus();
    let mut a_init = global.a.clone();
    for (q, bq) in global.b.iter().enumerate() {
        a_init += bq * u0[q];
    }
    let c_init = &global.c * Vector::from_column_slice(&u0);
    let s_star = recover_initial(&z.row(1).transpose(), &a_init, &c_init, design.r)?;
    Ok(Recovery {
        blocks,
        systems,
        global,
        s_star,
    })
}

/// Recovery from a noiseless BOLD mean: deconvolve, then
/// [`recover_from_trajectory`].
pub fn recover_from_bold(mu: &Matrix, design: &StimulusDesign) -> Result<Recovery> {
    let hker = crate::model::hrf::hrf_kernel(design.r, design.n)?;
    let z = deconvolve(mu, &hker)?;
    recover_from_trajectory(&z, design)
}

/// Recovered parameters as a [`ParamSet`] under hypothesis `h` (entries
/// outside the masks are dropped). Observation parameters are copied from
/// `template`.
pub fn recovery_to_params(rec: &Recovery, h: &Hypothesis, template: &ParamSet) -> Result<ParamSet> {
    let mut p = ParamSet::from_matrices(h, &rec.global.a, &rec.global.b, &rec.global.c, rec.s_star.as_slice())?;
    p.beta = template.beta.clone();
    p.sigma = template.sigma.clone();
    Ok(p)
}
