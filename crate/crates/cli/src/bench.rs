use std::path::PathBuf;
use std::time::Instant;

use cdcm::io::write_json;
use cdcm::model::neural_trajectory;
use cdcm::ode::{rk_trajectory, Tolerance};
use cdcm::simulator::{benchmark_design, chain_models};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, write_snapshot};
use crate::{CliError, Outcome};

const ORACLE: &str = "Dormand-Prince 5(4) adaptive Runge-Kutta with rtol = atol = tol, restarted at every scan";

#[derive(Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// `simple` or `complex`.
    #[arg(long)]
    pub model: Option<String>,
    /// Timed repetitions of each solver.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Oracle tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub model: String,
    pub reps: usize,
    pub tol: f64,
    pub out: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            model: "simple".into(),
            reps: 20,
            tol: 1e-9,
            out: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub d: usize,
    pub scans: usize,
    pub reps: usize,
    pub analytic_seconds: f64,
    pub rk_seconds: f64,
    pub speedup: f64,
    pub max_abs_error: f64,
    pub rk_accepted_steps: usize,
    pub oracle: String,
}

pub fn run(args: &BenchArgs) -> Result<Outcome, CliError> {
    let s: BenchSettings = resolve(args, args.config.as_deref())?;
    let copies = match s.model.as_str() {
        "simple" => 1,
        "complex" => 3,
        other => return Err(CliError::User(format!("unknown model '{other}' (use simple or complex)"))),
    };
    if s.reps == 0 || !(s.tol > 0.0) {
        return Err(CliError::User("reps and tol must be positive".into()));
    }
    let (h, p) = chain_models(copies)?;
    let design = benchmark_design();
    let tol = Tolerance { rtol: s.tol, atol: s.tol };

    let start = Instant::now();
    let mut z = neural_trajectory(&p, &h, &design)?;
    for _ in 1..s.reps {
        z = neural_trajectory(&p, &h, &design)?;
    }
    let analytic = start.elapsed().as_secs_f64() / s.reps as f64;

    let start = Instant::now();
    let (mut z_rk, mut stats) = rk_trajectory(&p, &h, &design, tol)?;
    for _ in 1..s.reps {
        (z_rk, stats) = rk_trajectory(&p, &h, &design, tol)?;
    }
    let rk = start.elapsed().as_secs_f64() / s.reps as f64;

    let report = BenchReport {
        model: s.model.clone(),
        d: h.d,
        scans: design.n,
        reps: s.reps,
        analytic_seconds: analytic,
        rk_seconds: rk,
        speedup: rk / analytic,
        max_abs_error: (&z - &z_rk).amax(),
        rk_accepted_steps: stats.accepted,
        oracle: format!("{ORACLE}, tol = {:e}", s.tol),
    };
    crate::emit_json(&report)?;
    if let Some(out) = &s.out {
        write_json(&out.join("bench.json"), &report)?;
        write_snapshot(out, "bench", &s)?;
    }
    Ok(Outcome::Success)
}
