//! Benchmark designs, ground-truth models and SNR-targeted data generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::linalg::Matrix;
use crate::model::design::{block_partition, StimulusDesign};
use crate::model::dynamics::{convolve, neural_trajectory};
use crate::model::hrf::hrf_kernel;
use crate::model::hypothesis::{Hypothesis, ParamSet};

/// Largest admissible range of a BOLD series.
pub const MAX_RANGE: f64 = 4.0;
/// Weight of the forward link between consecutive copies in [`chain_models`].
pub const CHAIN_FORWARD: f64 = 0.3;
/// Weight of the backward link between consecutive copies in [`chain_models`].
pub const CHAIN_BACKWARD: f64 = 0.1;

/// 150 scans at `r = 2` s, two stimuli, 10-TR blocks cycling rest, U1, rest, U2.
pub fn benchmark_design() -> StimulusDesign {
    let pattern = [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
    let u = (0..150).map(|j| pattern[(j / 10) % 4].to_vec()).collect();
    block_partition(u, 2.0).expect("benchmark design is valid")
}

/// Two-ROI, two-stimulus model with known parameters.
pub fn simple_model_truth() -> (Hypothesis, ParamSet) {
    chain_models(1).expect("k = 1 is valid")
}

/// `k` copies of the simple model on the block diagonal. Copy `i` feeds copy
/// `i + 1` through its second ROI, with a weaker link back.
pub fn chain_models(k: usize) -> Result<(Hypothesis, ParamSet)> {
    if k == 0 {
        return Err(CdcmError::InvalidInput("chain needs at least one copy".into()));
    }
    let d = 2 * k;
    let m = 2;
    let mut a = Matrix::zeros(d, d);
    let mut b2 = Matrix::zeros(d, d);
    let mut c = Matrix::zeros(d, m);
    let mut mask_a = vec![vec![false; d]; d];
    let mut mask_b = vec![vec![vec![false; d]; d]; m];
    let mut mask_c = vec![vec![false; m]; d];
    for i in 0..k {
        let (p, q) = (2 * i, 2 * i + 1);
        a[(p, p)] = -0.55;
        a[(q, q)] = -0.55;
        a[(p, q)] = 0.3;
        a[(q, p)] = 0.4;
        b2[(p, q)] = -0.2;
        c[(p, 0)] = 0.7;
        for (r, s) in [(p, p), (q, q), (p, q), (q, p)] {
            mask_a[r][s] = true;
        }
        mask_b[1][p][q] = true;
        mask_c[p][0] = true;
        if i + 1 < k {
            let next = q + 1;
            a[(next, q)] = CHAIN_FORWARD;
            a[(q, next)] = CHAIN_BACKWARD;
            mask_a[next][q] = true;
            mask_a[q][next] = true;
        }
    }
    let h = Hypothesis::new(mask_a, mask_b, mask_c)?;
    let bs = vec![Matrix::zeros(d, d), b2];
    let p = ParamSet::from_matrices(&h, &a, &bs, &c, &vec![0.1; d])?;
    Ok((h, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub truth: ParamSet,
    pub hypothesis: Hypothesis,
    pub design: StimulusDesign,
    pub snr: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub range_clamp: bool,
}

fn default_true() -> bool {
    true
}

/// Latent states, noiseless BOLD means and observed BOLD, each `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub z: Matrix,
    /// Convolved mean, without the baseline `β`.
    pub mu: Matrix,
    pub y: Matrix,
    /// Noise SD per ROI before clamping.
    pub noise_sd: Vec<f64>,
    /// Multiplier applied to the noise by the range clamp (1 when inactive).
    pub clamp_factor: f64,
}

fn sample_sd(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = x.clone().count() as f64;
    let mean = x.clone().sum::<f64>() / n;
    (x.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn matrix_range(m: &Matrix) -> f64 {
    m.max() - m.min()
}

pub fn simulate(spec: &SimulationSpec) -> Result<TrajectoryBundle> {
    if !(spec.snr > 0.0) {
        return Err(CdcmError::InvalidInput(format!("snr must be positive, got {}", spec.snr)));
    }
    let h = &spec.hypothesis;
    h.validate()?;
    spec.truth.check(h)?;
    let n = spec.design.n;
    let d = h.d;
    let z = neural_trajectory(&spec.truth, h, &spec.design)?;
    let mu = convolve(&z, &hrf_kernel(spec.design.r, n)?)?;

    let mut noise_sd = Vec::with_capacity(d);
    for l in 0..d {
        let sd = sample_sd(mu.column(l).iter().copied());
        if !(sd > 0.0) {
            return Err(CdcmError::DegenerateSignal(format!(
                "noiseless signal of ROI {} has zero variance",
                l + 1
            )));
        }
        noise_sd.push(sd / spec.snr);
    }

    let mut base = mu.clone();
    let mut noise = Matrix::zeros(n, d);
    for l in 0..d {
        base.column_mut(l).add_scalar_mut(spec.truth.beta[l]);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(l as u64);
        for j in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            noise[(j, l)] = noise_sd[l] * e;
        }
    }

    let mut clamp_factor = 1.0;
    if spec.range_clamp && matrix_range(&(&base + &noise)) > MAX_RANGE {
        if matrix_range(&base) > MAX_RANGE {
            return Err(CdcmError::InvalidInput(format!(
                "noiseless signal range {:.4} already exceeds {MAX_RANGE}",
                matrix_range(&base)
            )));
        }
        // The range is convex in the noise multiplier, so the feasible set is [0, λ*].
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if matrix_range(&(&base + &noise * mid)) <= MAX_RANGE {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        clamp_factor = lo;
        noise *= lo;
    }
    let y = base + noise;
    Ok(TrajectoryBundle {
        z,
        mu,
        y,
        noise_sd,
        clamp_factor,
    })
}
