use std::path::PathBuf;

use cdcm::io::{read_design, read_json, write_design, write_json, write_matrix_csv};
use cdcm::model::{Hypothesis, ParamSet};
use cdcm::simulator::{benchmark_design, chain_models, simulate, SimulationSpec};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{required, resolve, seed, write_snapshot};
use crate::{CliError, Outcome};

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// JSON file with default settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Built-in model: `simple` or `complex` (three chained copies).
    #[arg(long)]
    pub model: Option<String>,
    /// Hypothesis JSON; overrides --model together with --truth.
    #[arg(long)]
    pub hypothesis: Option<PathBuf>,
    /// Ground-truth parameter JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Stimulus CSV; the built-in benchmark design when absent.
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Repetition time in seconds (overrides the design sidecar).
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the noise level even if the BOLD range exceeds 4.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub no_clamp: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub model: String,
    pub hypothesis: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub tr: Option<f64>,
    pub snr: f64,
    pub seed: Option<u64>,
    pub no_clamp: bool,
    pub out: Option<PathBuf>,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            model: "simple".into(),
            hypothesis: None,
            truth: None,
            design: None,
            tr: None,
            snr: 1.68,
            seed: None,
            no_clamp: false,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct SimulationRecord<'a> {
    snr: f64,
    seed: u64,
    noise_sd: &'a [f64],
    clamp_factor: f64,
}

pub fn run(args: &SimulateArgs, strict: bool) -> Result<Outcome, CliError> {
    let mut s: SimulateSettings = resolve(args, args.config.as_deref())?;
    let seed = seed(s.seed, strict)?;
    s.seed = Some(seed);
    let out = required(&s.out, "out")?;
    let (hypothesis, truth): (Hypothesis, ParamSet) = match (&s.hypothesis, &s.truth) {
        (Some(h), Some(t)) => (read_json(h)?, read_json(t)?),
        (None, None) => match s.model.as_str() {
            "simple" => chain_models(1)?,
            "complex" => chain_models(3)?,
            other => return Err(CliError::User(format!("unknown model '{other}' (use simple or complex)"))),
        },
        _ => return Err(CliError::User("--hypothesis and --truth must be given together".into())),
    };
    let design = match &s.design {
        Some(path) => read_design(path, s.tr)?,
        None => benchmark_design(),
    };
    let spec = SimulationSpec {
        truth: truth.clone(),
        hypothesis: hypothesis.clone(),
        design: design.clone(),
        snr: s.snr,
        seed,
        range_clamp: !s.no_clamp,
    };
    let sim = simulate(&spec)?;
    let rois: Vec<String> = (1..=hypothesis.d).map(|l| format!("roi{l}")).collect();
    write_matrix_csv(&out.join("bold.csv"), &rois, &sim.y)?;
    write_matrix_csv(&out.join("mean.csv"), &rois, &sim.mu)?;
    write_matrix_csv(&out.join("neural.csv"), &rois, &sim.z)?;
    write_design(&out.join("design.csv"), &design)?;
    write_json(&out.join("hypothesis.json"), &hypothesis)?;
    write_json(&out.join("truth.json"), &truth)?;
    write_json(
        &out.join("simulation.json"),
        &SimulationRecord {
            snr: s.snr,
            seed,
            noise_sd: &sim.noise_sd,
            clamp_factor: sim.clamp_factor,
        },
    )?;
    write_snapshot(&out, "simulate", &s)?;
    crate::emit(&format!("wrote simulated data for {} ROIs and {} scans to {}", hypothesis.d, design.n, out.display()));
    Ok(Outcome::Success)
}
