use std::path::PathBuf;

use cdcm::identifiability::{audit, check_design};
use cdcm::io::{read_design, read_json, write_json};
use cdcm::model::{Hypothesis, ParamSet};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{required, resolve, write_snapshot};
use crate::{CliError, Outcome};

#[derive(Args, Serialize)]
pub struct CheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Stimulus CSV (one column per stimulus).
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub tr: Option<f64>,
    /// Number of ROIs.
    #[arg(long)]
    pub rois: Option<usize>,
    /// Hypothesis JSON; with --truth also runs the model-dependent checks.
    #[arg(long)]
    pub hypothesis: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Directory for the report; it is printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckSettings {
    pub design: Option<PathBuf>,
    pub tr: Option<f64>,
    pub rois: Option<usize>,
    pub hypothesis: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn run(args: &CheckArgs) -> Result<Outcome, CliError> {
    let s: CheckSettings = resolve(args, args.config.as_deref())?;
    let design = read_design(&required(&s.design, "design")?, s.tr)?;
    let report = match (&s.hypothesis, &s.truth) {
        (Some(h), Some(t)) => {
            let h: Hypothesis = read_json(h)?;
            let p: ParamSet = read_json(t)?;
            if s.rois.is_some_and(|d| d != h.d) {
                return Err(CliError::User(format!("--rois disagrees with the hypothesis (d = {})", h.d)));
            }
            audit(&p, &h, &design)?
        }
        (None, None) => check_design(&design, required(&s.rois, "rois")?),
        _ => return Err(CliError::User("--hypothesis and --truth must be given together".into())),
    };
    crate::emit_json(&report)?;
    if let Some(out) = &s.out {
        write_json(&out.join("design_report.json"), &report)?;
        write_snapshot(out, "check-design", &s)?;
    }
    Ok(if report.all_pass() { Outcome::Success } else { Outcome::Failed })
}
