//! Piecewise-affine latent trajectory and HRF convolution.

use crate::error::{CdcmError, Result};
use crate::linalg::{affine_propagator, augmented_generator, Matrix, Vector};
use crate::model::design::StimulusDesign;
use crate::model::hypothesis::{Hypothesis, ParamSet};

/// `Ã = A + Σ_i u_i B_i` and `c̃ = C u` for one stimulus vector.
pub fn assemble_block_system(p: &ParamSet, h: &Hypothesis, u_b: &[f64]) -> Result<(Matrix, Vector)> {
    if u_b.len() != h.m {
        return Err(CdcmError::DimensionMismatch(format!(
            "stimulus vector has length {}, expected {}",
            u_b.len(),
            h.m
        )));
    }
    if let Some(v) = u_b.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(CdcmError::InvalidInput(format!("non-binary stimulus entry {v}")));
    }
    let mut a = p.a_matrix(h);
    for ((k, i, j), v) in h.b_positions().into_iter().zip(&p.b_entries) {
        a[(i, j)] += u_b[k] * v;
    }
    let mut c = Vector::zeros(h.d);
    for ((i, k), v) in h.c_positions().into_iter().zip(&p.c_entries) {
        c[i] += v * u_b[k];
    }
    Ok((a, c))
}

/// Cached one-TR propagator of a block system.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub stimulus: Vec<f64>,
    pub a_tilde: Matrix,
    pub c_tilde: Vector,
    /// `r [[Ã, c̃], [0, 0]]`.
    pub generator: Matrix,
    pub phi: Matrix,
    pub p: Vector,
}

/// Latent trajectory together with the per-system propagators used to build it.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub systems: Vec<BlockSystem>,
    /// System index for each unit interval `[t_j, t_{j+1})`.
    pub interval_system: Vec<usize>,
    /// States `z(t_0) .. z(t_{len-1})`, one per row.
    pub z: Matrix,
}

/// Propagates `len` states (`z(0) = s*` plus `len - 1` unit steps of length `r`).
pub fn propagate(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign, len: usize) -> Result<Propagation> {
    p.check(h)?;
    if design.m != h.m {
        return Err(CdcmError::DimensionMismatch(format!(
            "design has {} stimuli, hypothesis has {}",
            design.m, h.m
        )));
    }
    if len == 0 {
        return Err(CdcmError::InvalidInput("trajectory length must be positive".into()));
    }
    let (stimuli, interval_system) = design.interval_systems(len - 1);
    let mut systems = Vec::with_capacity(stimuli.len());
    for s in stimuli {
        let (a_tilde, c_tilde) = assemble_block_system(p, h, &s)?;
        let (phi, pv) = affine_propagator(&a_tilde, &c_tilde, design.r)?;
        let generator = augmented_generator(&a_tilde, &c_tilde, design.r);
        systems.push(BlockSystem {
            stimulus: s,
            a_tilde,
            c_tilde,
            generator,
            phi,
            p: pv,
        });
    }
    let d = h.d;
    let mut z = Matrix::zeros(len, d);
    let mut state = p.s_star_vector();
    z.row_mut(0).copy_from(&state.transpose());
    for (j, k) in interval_system.iter().enumerate() {
        let sys = &systems[*k];
        state = &sys.phi * &state + &sys.p;
        z.row_mut(j + 1).copy_from(&state.transpose());
    }
    Ok(Propagation {
        systems,
        interval_system,
        z,
    })
}

/// Latent states `z(t_j)`, `j = 0..n-1`, as an `n x d` matrix.
pub fn neural_trajectory(p: &ParamSet, h: &Hypothesis, design: &StimulusDesign) -> Result<Matrix> {
    Ok(propagate(p, h, design, design.n)?.z)
}

/// Discrete HRF convolution: row `j-1` of the result is
/// `μ(t_j) = Σ_{i=1}^{j} h[i] z[j-i]` for `j = 1..n`.
pub fn convolve(z: &Matrix, hker: &[f64]) -> Result<Matrix> {
    let n = z.nrows();
    if hker.len() < n + 1 {
        return Err(CdcmError::InvalidInput(format!(
            "kernel has {} samples, need at least {}",
            hker.len(),
            n + 1
        )));
    }
    let mut mu = Matrix::zeros(n, z.ncols());
    for l in 0..z.ncols() {
        let zc = z.column(l);
        let mut out = mu.column_mut(l);
        for j in 1..=n {
            let mut acc = 0.0;
            for i in 1..=j {
                acc += hker[i] * zc[j - i];
            }
            out[j - 1] = acc;
        }
    }
    Ok(mu)
}

/// Adjoint of [`convolve`]: maps a gradient with respect to `μ` onto the
/// latent states.
pub fn convolve_adjoint(g_mu: &Matrix, hker: &[f64]) -> Result<Matrix> {
    let n = g_mu.nrows();
    if hker.len() < n + 1 {
        return Err(CdcmError::InvalidInput(format!(
            "kernel has {} samples, need at least {}",
            hker.len(),
            n + 1
        )));
    }
    let mut g_z = Matrix::zeros(n, g_mu.ncols());
    for l in 0..g_mu.ncols() {
        let gc = g_mu.column(l);
        let mut out = g_z.column_mut(l);
        for k in 0..n {
            let mut acc = 0.0;
            for j in (k + 1)..=n {
                acc += hker[j - k] * gc[j - 1];
            }
            out[k] = acc;
        }
    }
    Ok(g_z)
}
