use std::path::PathBuf;

use cdcm::identifiability::{deconvolution_condition, recover_from_bold, recover_from_trajectory, Recovery};
use cdcm::io::{read_bold_csv, read_design, write_json};
use cdcm::model::hrf_kernel;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{required, resolve, write_snapshot};
use crate::{rows, CliError, Outcome};

#[derive(Args, Serialize)]
pub struct RecoverArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Noiseless BOLD mean (baseline removed), deconvolved before recovery.
    #[arg(long)]
    pub bold: Option<PathBuf>,
    /// Noiseless latent trajectory; used as is.
    #[arg(long)]
    pub neural: Option<PathBuf>,
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverSettings {
    pub bold: Option<PathBuf>,
    pub neural: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub tr: Option<f64>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RecoveryReport {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<Vec<f64>>>,
    c: Vec<Vec<f64>>,
    s_star: Vec<f64>,
    blocks: Vec<usize>,
    residual: f64,
    condition_number: f64,
    deconvolution_condition: Option<f64>,
}

impl RecoveryReport {
    fn new(rec: &Recovery, deconvolution_condition: Option<f64>) -> Self {
        RecoveryReport {
            a: rows(&rec.global.a),
            b: rec.global.b.iter().map(rows).collect(),
            c: rows(&rec.global.c),
            s_star: rec.s_star.iter().copied().collect(),
            blocks: rec.blocks.clone(),
            residual: rec.global.residual,
            condition_number: rec.global.condition_number,
            deconvolution_condition,
        }
    }
}

pub fn run(args: &RecoverArgs) -> Result<Outcome, CliError> {
    let s: RecoverSettings = resolve(args, args.config.as_deref())?;
    let design = read_design(&required(&s.design, "design")?, s.tr)?;
    let report = match (&s.bold, &s.neural) {
        (Some(path), None) => {
            let mu = read_bold_csv(path)?.y;
            let cond = deconvolution_condition(&hrf_kernel(design.r, design.n)?, design.n)?;
            if cond > 1e8 {
                eprintln!("warning: deconvolution condition number {cond:.3e}; recovered values may be inaccurate");
            }
            RecoveryReport::new(&recover_from_bold(&mu, &design)?, Some(cond))
        }
        (None, Some(path)) => {
            let z = read_bold_csv(path)?.y;
            RecoveryReport::new(&recover_from_trajectory(&z, &design)?, None)
        }
        _ => return Err(CliError::User("give exactly one of --bold and --neural".into())),
    };
    crate::emit_json(&report)?;
    if let Some(out) = &s.out {
        write_json(&out.join("recovery.json"), &report)?;
        write_snapshot(out, "recover", &s)?;
    }
    Ok(Outcome::Success)
}
