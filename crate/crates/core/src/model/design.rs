//! Block stimulus designs.
//!
//! Row `j` of `U` is the stimulus at scan `t_{j+1} = (j+1) r`; it governs the
//! dynamics on `[t_{j+1}, t_{j+2})`. The pre-scan interval `[0, r)` runs at
//! rest when `prescan_rest` is set and under `U`'s first row otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};

/// Maximal run of identical stimulus rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// First row of `U` in the block.
    pub start: usize,
    /// Number of rows in the block.
    pub len: usize,
    pub stimulus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusDesign {
    pub u: Vec<Vec<f64>>,
    pub r: f64,
    pub n: usize,
    pub m: usize,
    pub blocks: Vec<Block>,
    pub prescan_rest: bool,
}

/// Splits `U` into maximal runs of identical rows.
pub fn block_partition(u: Vec<Vec<f64>>, r: f64) -> Result<StimulusDesign> {
    if u.is_empty() {
        return Err(CdcmError::InvalidInput("stimulus matrix has no rows".into()));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(CdcmError::InvalidInput(format!(
            "repetition time must be positive, got {r}"
        )));
    }
    let m = u[0].len();
    if m == 0 {
        return Err(CdcmError::InvalidInput("stimulus matrix has no columns".into()));
    }
    for (j, row) in u.iter().enumerate() {
        if row.len() != m {
            return Err(CdcmError::DimensionMismatch(format!(
                "stimulus row {j} has {} columns, expected {m}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(CdcmError::InvalidInput(format!(
                "stimulus row {j} has non-binary entry {v}"
            )));
        }
    }
    let mut blocks: Vec<Block> = Vec::new();
    for (j, row) in u.iter().enumerate() {
        match blocks.last_mut() {
            Some(b) if b.stimulus == *row => b.len += 1,
            _ => blocks.push(Block {
                start: j,
                len: 1,
                stimulus: row.clone(),
            }),
        }
    }
    Ok(StimulusDesign {
        n: u.len(),
        m,
        u,
        r,
        blocks,
        prescan_rest: true,
    })
}

impl StimulusDesign {
    pub fn with_prescan_rest(mut self, prescan_rest: bool) -> Self {
        self.prescan_rest = prescan_rest;
        self
    }

    /// Stimulus active on `[0, r)`.
    pub fn prescan_stimulus(&self) -> Vec<f64> {
        if self.prescan_rest {
            vec![0.0; self.m]
        } else {
            self.u[0].clone()
        }
    }

    /// Stimulus governing the interval `[t_j, t_{j+1})`.
    pub fn interval_stimulus(&self, j: usize) -> Vec<f64> {
        if j == 0 {
            self.prescan_stimulus()
        } else {
            self.u[(j - 1).min(self.n - 1)].clone()
        }
    }

    /// Distinct stimulus vectors over the first `intervals` unit steps and the
    /// index of the vector governing each step.
    pub fn interval_systems(&self, intervals: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        let mut index = Vec::with_capacity(intervals);
        let lookup = |s: &[f64], distinct: &mut Vec<Vec<f64>>| -> usize {
            if let Some(k) = distinct.iter().position(|d| d.as_slice() == s) {
                k
            } else {
                distinct.push(s.to_vec());
                distinct.len() - 1
            }
        };
        for j in 0..intervals {
            let k = lookup(&self.interval_stimulus(j), &mut distinct);
            index.push(k);
        }
        (distinct, index)
    }

    /// Index into the latent trajectory of a block's initial state `z(t^(b))`.
    pub fn block_state_index(&self, block: &Block) -> usize {
        block.start + 1
    }
}
