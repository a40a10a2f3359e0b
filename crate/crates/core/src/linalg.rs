//! Dense kernels for affine ODE propagation.
//!
//! Everything here works on small dense matrices (d rarely exceeds 10), so
//! the implementations favour accuracy over asymptotic cost: the matrix
//! exponential is a degree-13 Padé scaling-and-squaring scheme, the
//! antiderivative `w(t; A)` and the affine propagator are read off augmented
//! block exponentials, and the real logarithm goes through a real Schur
//! eigendecomposition.

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{CdcmError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative gap below which two eigenvalues are treated as repeated.
pub const EIGEN_GAP_TOL: f64 = 1e-8;
/// Relative imaginary part below which an eigenvalue is treated as real.
pub const EIGEN_IMAG_TOL: f64 = 1e-10;

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// 1-norm thresholds for degrees 3, 5, 7, 9, 13 (Higham 2005).
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];

fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(CdcmError::InvalidInput(format!(
            "{what} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CdcmError::InvalidInput(format!("{what} has non-finite entries")))
    }
}

fn one_norm(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_solve(u: Matrix, v: Matrix) -> Result<Matrix> {
    let p = &v + &u;
    let q = v - u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| CdcmError::InvalidInput("singular Padé denominator".into()))
}

fn pade_low(a: &Matrix, coeffs: &[f64]) -> Result<Matrix> {
    let n = a.nrows();
    let ident = Matrix::identity(n, n);
    let a2 = a * a;
    // Even powers A^0, A^2, A^4, ...
    let mut even = ident.clone();
    let mut u_acc = Matrix::zeros(n, n);
    let mut v_acc = Matrix::zeros(n, n);
    let half = coeffs.len() / 2;
    for k in 0..half {
        u_acc += &even * coeffs[2 * k + 1];
        v_acc += &even * coeffs[2 * k];
        if k + 1 < half {
            even = &even * &a2;
        }
    }
    let u = a * u_acc;
    pade_solve(u, v_acc)
}

/// Matrix exponential by scaling and squaring with Padé approximants.
pub fn mat_exp(m: &Matrix) -> Result<Matrix> {
    ensure_square(m, "matrix")?;
    ensure_finite(m.as_slice(), "matrix")?;
    let norm = one_norm(m);
    for (theta, coeffs) in THETA[..4]
        .iter()
        .zip([&PADE3[..], &PADE5[..], &PADE7[..], &PADE9[..]])
    {
        if norm <= *theta {
            return pade_low(m, coeffs);
        }
    }

    let s = if norm > THETA[4] {
        (norm / THETA[4]).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = m * 2f64.powi(-s);
    let n = a.nrows();
    let b = &PADE13;
    let ident = Matrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    let mut r = pade_solve(u, v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Fréchet derivative of the matrix exponential at `x` in direction `e`,
/// read off the top-right block of `exp([[x, e], [0, x]])`.
pub fn exp_frechet(x: &Matrix, e: &Matrix) -> Result<Matrix> {
    ensure_square(x, "matrix")?;
    let n = x.nrows();
    if e.shape() != (n, n) {
        return Err(CdcmError::DimensionMismatch(format!(
            "direction is {}x{}, expected {n}x{n}",
            e.nrows(),
            e.ncols()
        )));
    }
    // Linear in `e`; a large `e` would otherwise drive the scaling step.
    let scale = e.amax();
    if scale == 0.0 {
        return Ok(Matrix::zeros(n, n));
    }
    let mut big = Matrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(x);
    big.view_mut((n, n), (n, n)).copy_from(x);
    big.view_mut((0, n), (n, n)).copy_from(&(e / scale));
    let ex = mat_exp(&big)?;
    Ok(ex.view((0, n), (n, n)) * scale)
}

/// Antiderivative `w(t; A) = Σ_k t^{k+1}/(k+1)! A^k`, so that
/// `exp(tA) = I + A w(t; A)`. Computed from the top-right block of
/// `exp(t [[A, I], [0, 0]])`, which stays exact for singular `A`.
pub fn w_antideriv(t: f64, a: &Matrix) -> Result<Matrix> {
    ensure_square(a, "matrix")?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(CdcmError::InvalidInput(format!(
            "time must be finite and non-negative, got {t}"
        )));
    }
    let n = a.nrows();
    let mut big = Matrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    big.view_mut((0, n), (n, n))
        .copy_from(&(Matrix::identity(n, n) * t));
    let ex = mat_exp(&big)?;
    Ok(ex.view((0, n), (n, n)).into_owned())
}

/// One-step propagator of `v' = A v + c` over `tau`: returns
/// `(exp(A tau), w(tau; A) c)` so that `v(tau) = Φ v(0) + p`.
pub fn affine_propagator(a: &Matrix, c: &Vector, tau: f64) -> Result<(Matrix, Vector)> {
    ensure_square(a, "matrix")?;
    let d = a.nrows();
    if c.len() != d {
        return Err(CdcmError::DimensionMismatch(format!(
            "affine term has length {}, expected {d}",
            c.len()
        )));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(CdcmError::InvalidInput(format!(
            "step must be finite and non-negative, got {tau}"
        )));
    }
    ensure_finite(c.as_slice(), "affine term")?;
    let ex = mat_exp(&augmented_generator(a, c, tau))?;
    let phi = ex.view((0, 0), (d, d)).into_owned();
    let p = ex.view((0, d), (d, 1)).column(0).into_owned();
    Ok((phi, p))
}

/// The (d+1)x(d+1) generator `tau [[A, c], [0, 0]]` of the affine flow in
/// homogeneous coordinates.
pub fn augmented_generator(a: &Matrix, c: &Vector, tau: f64) -> Matrix {
    let d = a.nrows();
    let mut g = Matrix::zeros(d + 1, d + 1);
    g.view_mut((0, 0), (d, d)).copy_from(&(a * tau));
    for i in 0..d {
        g[(i, d)] = c[i] * tau;
    }
    g
}

/// Affine ODE solution `z(tau) = exp(A tau) z0 + w(tau; A) c`.
pub fn affine_step(z0: &Vector, a: &Matrix, c: &Vector, tau: f64) -> Result<Vector> {
    if z0.len() != a.nrows() {
        return Err(CdcmError::DimensionMismatch(format!(
            "state has length {}, expected {}",
            z0.len(),
            a.nrows()
        )));
    }
    ensure_finite(z0.as_slice(), "initial state")?;
    let (phi, p) = affine_propagator(a, c, tau)?;
    Ok(phi * z0 + p)
}

/// 2-norm condition number `σ_max / σ_min` (infinite when singular).
pub fn condition_number(m: &Matrix) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Eigenvalues of a real square matrix (possibly complex).
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    ensure_square(m, "matrix")?;
    ensure_finite(m.as_slice(), "matrix")?;
    Ok(m.complex_eigenvalues().iter().copied().collect())
}

/// Checks that every eigenvalue is real (relative imaginary part below
/// [`EIGEN_IMAG_TOL`]) and that all pairwise relative gaps are at least
/// [`EIGEN_GAP_TOL`]. Returns the sorted real eigenvalues.
pub fn distinct_real_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    let eig = eigenvalues(m)?;
    let mut real = Vec::with_capacity(eig.len());
    for l in &eig {
        if l.im.abs() > EIGEN_IMAG_TOL * l.norm().max(1.0) {
            return Err(CdcmError::NotRealLogIdentifiable(format!(
                "complex eigenvalue {}{:+}i",
                l.re, l.im
            )));
        }
        real.push(l.re);
    }
    real.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in real.windows(2) {
        let scale = w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE);
        if (w[1] - w[0]).abs() < EIGEN_GAP_TOL * scale {
            return Err(CdcmError::NotRealLogIdentifiable(format!(
                "repeated eigenvalue near {}",
                w[0]
            )));
        }
    }
    Ok(real)
}

/// Real eigendecomposition `M = P diag(λ) P^{-1}` for matrices with
/// distinct real eigenvalues, via the real Schur form `M = Q T Qᵀ` and
/// back-substitution on the triangular factor.
pub fn real_eigendecomposition(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    distinct_real_eigenvalues(m)?;
    let n = m.nrows();
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000).ok_or_else(|| {
        CdcmError::NotRealLogIdentifiable("Schur iteration did not converge".into())
    })?;
    let (q, t) = schur.unpack();
    for i in 1..n {
        if t[(i, i - 1)].abs() > 1e-12 * (t[(i, i)].abs() + t[(i - 1, i - 1)].abs()).max(1.0) {
            return Err(CdcmError::NotRealLogIdentifiable(
                "Schur form has a 2x2 block".into(),
            ));
        }
    }
    let lambdas: Vec<f64> = (0..n).map(|i| t[(i, i)]).collect();
    let mut v = Matrix::zeros(n, n);
    for k in 0..n {
        v[(k, k)] = 1.0;
        for i in (0..k).rev() {
            let mut s = 0.0;
            for j in (i + 1)..=k {
                s += t[(i, j)] * v[(j, k)];
            }
            v[(i, k)] = -s / (t[(i, i)] - t[(k, k)]);
        }
    }
    Ok((lambdas, q * v))
}

/// Unique real logarithm of a matrix with distinct, strictly positive real
/// eigenvalues: `L = P diag(log λ) P^{-1}`.
pub fn mat_log_real(phi: &Matrix) -> Result<Matrix> {
    ensure_square(phi, "matrix")?;
    ensure_finite(phi.as_slice(), "matrix")?;
    let real = distinct_real_eigenvalues(phi)?;
    if let Some(bad) = real.iter().find(|l| **l <= 0.0) {
        return Err(CdcmError::NotRealLogIdentifiable(format!(
            "non-positive eigenvalue {bad}"
        )));
    }
    let (lambdas, p) = real_eigendecomposition(phi)?;
    let n = phi.nrows();
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| CdcmError::NotRealLogIdentifiable("defective eigenbasis".into()))?;
    let log_diag = Matrix::from_diagonal(&Vector::from_iterator(
        n,
        lambdas.iter().map(|l| l.ln()),
    ));
    Ok(p * log_diag * p_inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taylor_exp(m: &Matrix, terms: usize) -> Matrix {
        let n = m.nrows();
        let mut acc = Matrix::identity(n, n);
        let mut term = Matrix::identity(n, n);
        for k in 1..terms {
            term = &term * m / k as f64;
            acc += &term;
        }
        acc
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = mat_exp(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(e, Matrix::identity(2, 2));
    }

    #[test]
    fn exp_diagonal_closed_form() {
        let m = Matrix::from_diagonal_element(2, 2, -0.55) * 2.0;
        let e = mat_exp(&m).unwrap();
        let expected = (-1.1f64).exp();
        assert!((e[(0, 0)] - expected).abs() < 1e-15);
        assert!((e[(1, 1)] - expected).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_nilpotent() {
        let m = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = mat_exp(&m).unwrap();
        assert!(max_abs_diff(&e, &Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])) < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        let m = Matrix::from_row_slice(2, 2, &[0.0, f64::NAN, 0.0, 0.0]);
        assert!(matches!(mat_exp(&m), Err(CdcmError::InvalidInput(_))));
    }

    #[test]
    fn exp_matches_taylor_for_all_pade_degrees() {
        // Scales chosen to exercise each degree plus the squaring branch.
        let base = Matrix::from_row_slice(3, 3, &[0.3, -0.7, 0.2, 0.5, -0.1, 0.4, -0.6, 0.3, 0.2]);
        for scale in [0.005, 0.1, 0.5, 1.0, 2.0, 6.0] {
            let m = &base * scale;
            let e = mat_exp(&m).unwrap();
            let t = taylor_exp(&m, 80);
            for (x, y) in e.iter().zip(t.iter()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "scale {scale}");
            }
        }
    }

    #[test]
    fn w_of_zero_matrix_is_t_identity() {
        let w = w_antideriv(1.7, &Matrix::zeros(3, 3)).unwrap();
        assert!(max_abs_diff(&w, &(Matrix::identity(3, 3) * 1.7)) < 1e-15);
    }

    #[test]
    fn w_scalar_closed_form() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![-0.5, 0.3]));
        let w = w_antideriv(1.0, &a).unwrap();
        for (i, ai) in [-0.5f64, 0.3].iter().enumerate() {
            assert!((w[(i, i)] - (ai.exp() - 1.0) / ai).abs() < 1e-14);
        }
    }

    #[test]
    fn w_rejects_negative_time() {
        assert!(w_antideriv(-1.0, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn affine_step_scalar() {
        let z = affine_step(
            &Vector::from_vec(vec![0.0]),
            &Matrix::from_element(1, 1, -0.5),
            &Vector::from_vec(vec![0.7]),
            2.0,
        )
        .unwrap();
        assert!((z[0] - 0.884969).abs() < 1e-6);
        assert!((z[0] - 0.7 * ((-1.0f64).exp() - 1.0) / -0.5).abs() < 1e-15);
    }

    #[test]
    fn affine_step_special_cases() {
        let a = Matrix::from_row_slice(2, 2, &[-0.4, 0.2, 0.1, -0.3]);
        let z0 = Vector::from_vec(vec![0.3, -0.2]);
        let lin = affine_step(&z0, &a, &Vector::zeros(2), 1.5).unwrap();
        let expected = mat_exp(&(&a * 1.5)).unwrap() * &z0;
        assert!((lin - expected).amax() < 1e-14);

        let c = Vector::from_vec(vec![0.5, 1.0]);
        let drift = affine_step(&z0, &Matrix::zeros(2, 2), &c, 2.0).unwrap();
        assert!((drift - (&z0 + &c * 2.0)).amax() < 1e-14);
    }

    #[test]
    fn log_of_identity_and_diagonal() {
        let l = mat_log_real(&Matrix::identity(2, 2));
        // identity has a repeated eigenvalue, which is rejected by policy
        assert!(l.is_err());
        let phi = Matrix::from_diagonal(&Vector::from_vec(vec![(-1.1f64).exp(), (-0.2f64).exp()]));
        let l = mat_log_real(&phi).unwrap();
        assert!((l[(0, 0)] + 1.1).abs() < 1e-12);
        assert!((l[(1, 1)] + 0.2).abs() < 1e-12);
        assert!(l[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn log_of_identity_1x1_is_zero() {
        let l = mat_log_real(&Matrix::identity(1, 1)).unwrap();
        assert!(l[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn log_rejects_negative_eigenvalue() {
        let phi = Matrix::from_diagonal(&Vector::from_vec(vec![-0.3, 0.5]));
        assert!(matches!(
            mat_log_real(&phi),
            Err(CdcmError::NotRealLogIdentifiable(_))
        ));
    }

    #[test]
    fn log_rejects_rotation() {
        let phi = mat_exp(&Matrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).unwrap();
        assert!(mat_log_real(&phi).is_err());
    }

    #[test]
    fn frechet_matches_finite_difference() {
        let x = Matrix::from_row_slice(2, 2, &[-0.5, 0.3, 0.4, -0.6]);
        let e = Matrix::from_row_slice(2, 2, &[0.1, -0.2, 0.05, 0.3]);
        let l = exp_frechet(&x, &e).unwrap();
        let h = 1e-6;
        let fd = (mat_exp(&(&x + &e * h)).unwrap() - mat_exp(&(&x - &e * h)).unwrap()) / (2.0 * h);
        assert!(max_abs_diff(&l, &fd) < 1e-9);
    }

    #[test]
    fn frechet_is_linear_in_huge_directions() {
        let x = Matrix::from_row_slice(2, 2, &[-0.5, 0.3, 0.4, -0.6]);
        let e = Matrix::from_row_slice(2, 2, &[0.1, -0.2, 0.05, 0.3]);
        let unit = exp_frechet(&x, &e).unwrap();
        let big = exp_frechet(&x, &(&e * 1e60)).unwrap() / 1e60;
        assert!(max_abs_diff(&unit, &big) < 1e-14);
        assert_eq!(exp_frechet(&x, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
    }
}
