//! Dormand–Prince 5(4) adaptive integrator, used as a numeric reference for
//! the analytic trajectory.

use crate::error::{CdcmError, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::design::StimulusDesign;
use crate::model::dynamics::assemble_block_system;
use crate::model::hypothesis::{Hypothesis, ParamSet};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-9, atol: 1e-9 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` and returns `y(t1)`.
pub fn dopri5<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, tol: Tolerance, stats: &mut OdeStats) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(t1 >= t0) {
        return Err(CdcmError::InvalidInput(format!("cannot integrate backwards from {t0} to {t1}")));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    if t1 == t0 {
        return Ok(y);
    }
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut t = t0;
    f(t, &y, &mut k[0]);
    stats.evaluations += 1;
    let mut h = initial_step(&y, &k[0], tol, t1 - t0);
    let mut steps = 0usize;
    while t < t1 {
        steps += 1;
        if steps > 10_000_000 {
            return Err(CdcmError::Initialization("adaptive integrator exceeded step limit".into()));
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        stage(&y, h, &[(A21, &k[0])], &mut tmp);
        f(t + C2 * h, &tmp, &mut k[1]);
        stage(&y, h, &[(A31, &k[0]), (A32, &k[1])], &mut tmp);
        f(t + C3 * h, &tmp, &mut k[2]);
        stage(&y, h, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])], &mut tmp);
        f(t + C4 * h, &tmp, &mut k[3]);
        stage(&y, h, &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])], &mut tmp);
        f(t + C5 * h, &tmp, &mut k[4]);
        stage(
            &y,
            h,
            &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])],
            &mut tmp,
        );
        f(t + h, &tmp, &mut k[5]);
        stage(
            &y,
            h,
            &[(B1, &k[0]), (B3, &k[2]), (B4, &k[3]), (B5, &k[4]), (B6, &k[5])],
            &mut y_new,
        );
        f(t + h, &y_new, &mut k[6]);
        stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = tol.atol + tol.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            return Err(CdcmError::InvalidInput("non-finite state during integration".into()));
        }
        if err <= 1.0 {
            stats.accepted += 1;
            t = if last { t1 } else { t + h };
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
        } else {
            stats.rejected += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= if err <= 1.0 { factor } else { factor.min(1.0) };
    }
    Ok(y)
}

fn stage(y: &[f64], h: f64, terms: &[(f64, &Vec<f64>)], out: &mut [f64]) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (a, k) in terms {
            acc += a * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn initial_step(y: &[f64], f0: &[f64], tol: Tolerance, span: f64) -> f64 {
    let n = y.len().max(1) as f64;
    let d0 = (y.iter().map(|v| (v / (tol.atol + tol.rtol * v.abs())).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (y
        .iter()
        .zip(f0)
        .map(|(v, dv)| (dv / (tol.atol + tol.rtol * v.abs())).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.min(span)
}

/// Latent trajectory obtained by numerically integrating each unit interval.
pub fn rk_trajectory(
    p: &ParamSet,
    h: &Hypothesis,
    design: &StimulusDesign,
    tol: Tolerance,
) -> Result<(Matrix, OdeStats)> {
    p.check(h)?;
    let (stimuli, index) = design.interval_systems(design.n - 1);
    let systems = stimuli
        .iter()
        .map(|s| assemble_block_system(p, h, s))
        .collect::<Result<Vec<_>>>()?;
    let d = h.d;
    let mut z = Matrix::zeros(design.n, d);
    let mut state = p.s_star.clone();
    z.row_mut(0).copy_from_slice(&state);
    let mut stats = OdeStats::default();
    for (j, k) in index.iter().enumerate() {
        let (a, c) = &systems[*k];
        let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            let yv = Vector::from_column_slice(y);
            let v = a * yv + c;
            dy.copy_from_slice(v.as_slice());
        };
        let t0 = j as f64 * design.r;
        state = dopri5(rhs, t0, &state, t0 + design.r, tol, &mut stats)?;
        z.row_mut(j + 1).copy_from_slice(&state);
    }
    Ok((z, stats))
}
