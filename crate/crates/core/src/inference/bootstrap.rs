//! Circular moving-block bootstrap for the mean squared residual.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapMse {
    pub mse: f64,
    pub se: f64,
    pub ci_95: (f64, f64),
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn block_bootstrap_mse(obs: &[f64], pred: &[f64], block_len: usize, reps: usize, seed: u64) -> Result<BootstrapMse> {
    let n = obs.len();
    if pred.len() != n {
        return Err(CdcmError::DimensionMismatch(format!(
            "{n} observations but {} predictions",
            pred.len()
        )));
    }
    if block_len == 0 || n < block_len {
        return Err(CdcmError::InvalidInput(format!(
            "block length {block_len} must be in 1..={n}"
        )));
    }
    if reps < 100 {
        return Err(CdcmError::InvalidInput(format!("need at least 100 replicates, got {reps}")));
    }
    let sq: Vec<f64> = obs.iter().zip(pred).map(|(o, p)| (o - p).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / n as f64;
    if block_len == n {
        // Every replicate is a rotation of the full series.
        return Ok(BootstrapMse {
            mse,
            se: 0.0,
            ci_95: (mse, mse),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = n.div_ceil(block_len);
    let mut stats = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut acc = 0.0;
        let mut taken = 0;
        for _ in 0..blocks {
            let start = rng.random_range(0..n);
            for k in 0..block_len.min(n - taken) {
                acc += sq[(start + k) % n];
            }
            taken += block_len.min(n - taken);
        }
        stats.push(acc / n as f64);
    }
    let mean = stats.iter().sum::<f64>() / reps as f64;
    let se = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    stats.sort_by(f64::total_cmp);
    Ok(BootstrapMse {
        mse,
        se,
        ci_95: (percentile(&stats, 0.025), percentile(&stats, 0.975)),
    })
}
