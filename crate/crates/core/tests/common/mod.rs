#![allow(dead_code)]

use cdcm::identifiability::audit;
use cdcm::linalg::Matrix;
use cdcm::model::{block_partition, Hypothesis, ParamSet, StimulusDesign};
use rand::{Rng, RngCore};

pub const TRS: [f64; 3] = [0.72, 2.0, 3.22];

fn signed<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let v = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Random hypothesis with `d <= 4`, `m <= 3`, random masks and parameters,
/// and a random block design covering rest, each unit stimulus and two
/// random stimulus vectors.
pub fn random_case<R: RngCore>(rng: &mut R) -> (Hypothesis, ParamSet, StimulusDesign) {
    let d = rng.random_range(1..=4usize);
    let m = rng.random_range(1..=3usize);
    let mut mask_a = vec![vec![false; d]; d];
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                mask_a[i][i] = true;
                a[(i, i)] = -rng.random_range(0.3..1.0);
            } else if rng.random_bool(0.4) {
                mask_a[i][j] = true;
                a[(i, j)] = signed(rng, 0.1, 0.4);
            }
        }
    }
    let mut mask_b = vec![vec![vec![false; d]; d]; m];
    let mut bs = vec![Matrix::zeros(d, d); m];
    for k in 0..m {
        for i in 0..d {
            for j in 0..d {
                if rng.random_bool(0.2) {
                    mask_b[k][i][j] = true;
                    bs[k][(i, j)] = signed(rng, 0.1, 0.3);
                }
            }
        }
    }
    let mut mask_c = vec![vec![false; m]; d];
    let mut c = Matrix::zeros(d, m);
    for i in 0..d {
        for k in 0..m {
            if rng.random_bool(0.5) {
                mask_c[i][k] = true;
                c[(i, k)] = signed(rng, 0.3, 1.0);
            }
        }
    }
    let h = Hypothesis::new(mask_a, mask_b, mask_c).expect("valid masks");
    let s_star: Vec<f64> = (0..d).map(|_| signed(rng, 0.05, 0.5)).collect();
    let p = ParamSet::from_matrices(&h, &a, &bs, &c, &s_star).expect("negative diagonal");

    let mut stimuli: Vec<Vec<f64>> = vec![vec![0.0; m]];
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        stimuli.push(e);
    }
    for _ in 0..2 {
        stimuli.push((0..m).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect());
    }
    let mut u: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        for s in &stimuli {
            let len = rng.random_range(d + 2..=d + 8);
            u.extend(std::iter::repeat_n(s.clone(), len));
        }
    }
    let r = TRS[rng.random_range(0..TRS.len())];
    let design = block_partition(u, r).expect("binary design");
    (h, p, design)
}

/// Rejection-samples [`random_case`] until the full audit passes.
pub fn identifiable_case<R: RngCore>(rng: &mut R) -> (Hypothesis, ParamSet, StimulusDesign) {
    loop {
        let (h, p, design) = random_case(rng);
        if audit(&p, &h, &design).map(|rep| rep.all_pass()).unwrap_or(false) {
            return (h, p, design);
        }
    }
}

/// Relabels ROIs: ROI `i` becomes `perm[i]`. Returns the permuted hypothesis
/// and parameters.
pub fn permute_rois(h: &Hypothesis, p: &ParamSet, perm: &[usize]) -> (Hypothesis, ParamSet) {
    let d = h.d;
    let pm = Matrix::from_fn(d, d, |i, j| if perm[j] == i { 1.0 } else { 0.0 });
    let hp = h.permute_rois(perm);
    let a = &pm * p.a_matrix(h) * pm.transpose();
    let bs: Vec<Matrix> = p.b_matrices(h).iter().map(|b| &pm * b * pm.transpose()).collect();
    let c = &pm * p.c_matrix(h);
    let mut s_star = vec![0.0; d];
    let mut beta = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    for i in 0..d {
        s_star[perm[i]] = p.s_star[i];
        beta[perm[i]] = p.beta[i];
        sigma[perm[i]] = p.sigma[i];
    }
    let mut out = ParamSet::from_matrices(&hp, &a, &bs, &c, &s_star).unwrap();
    out.beta = beta;
    out.sigma = sigma;
    (hp, out)
}

/// Permutes the columns of a data matrix so that column `i` moves to `perm[i]`.
pub fn permute_columns(y: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = y.clone();
    for (i, target) in perm.iter().enumerate() {
        out.set_column(*target, &y.column(i));
    }
    out
}

/// Largest relative error over `truth`, falling back to absolute error on
/// entries that are exactly zero.
pub fn max_rel_err(est: &[f64], truth: &[f64]) -> f64 {
    est.iter()
        .zip(truth)
        .map(|(e, t)| if *t == 0.0 { e.abs() } else { ((e - t) / t).abs() })
        .fold(0.0, f64::max)
}

pub fn flatten(ms: &[&Matrix]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.iter().copied()).collect()
}

/// Richardson-extrapolated central difference of `f` along coordinate `i`.
pub fn richardson_partial(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, step: f64) -> f64 {
    let central = |h: f64| {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    };
    (4.0 * central(step / 2.0) - central(step)) / 3.0
}

/// Max absolute gap between `grad` and finite differences, relative to the
/// largest finite-difference component (floored at 1).
pub fn gradient_error(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    let mut err: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..x.len() {
        let fd = richardson_partial(&f, x, i, 1e-5 * x[i].abs().max(1.0));
        err = err.max((fd - grad[i]).abs());
        scale = scale.max(fd.abs());
    }
    err / scale
}
