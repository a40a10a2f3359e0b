use std::fs;
use std::path::{Path, PathBuf};

use cdcm::group::{encode_covariates, group_fit, group_sampler_defaults, CovariateColumn, SubjectRecord};
use cdcm::inference::{summarize, SamplerConfig};
use cdcm::io::{format_f64, read_covariates, read_json, write_draws_csv, write_json, write_text};
use cdcm::linalg::Matrix;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{required, resolve, seed, write_snapshot};
use crate::{CliError, Outcome};

#[derive(Args, Serialize)]
pub struct GroupArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of subject summaries: `<id>.json` or `<id>/summary.json`.
    #[arg(long)]
    pub subjects: Option<PathBuf>,
    /// Covariate CSV; an optional `subject` column matches rows to ids.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub num_samples: Option<usize>,
    #[arg(long)]
    pub target_accept: Option<f64>,
    #[arg(long)]
    pub max_treedepth: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSettings {
    pub subjects: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub chains: usize,
    pub warmup: usize,
    pub num_samples: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
}

impl Default for GroupSettings {
    fn default() -> Self {
        let d = group_sampler_defaults();
        GroupSettings {
            subjects: None,
            covariates: None,
            out: None,
            seed: None,
            chains: d.chains,
            warmup: d.warmup,
            num_samples: d.num_samples.unwrap_or(5000),
            target_accept: d.target_accept,
            max_treedepth: d.max_treedepth,
        }
    }
}

/// The fields of a `fit` summary the group model needs.
#[derive(Deserialize)]
struct SubjectSummary {
    neural_names: Vec<String>,
    theta_hat: Vec<f64>,
    s_matrix: Vec<Vec<f64>>,
}

fn discover(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::User(format!("{}: {e}", dir.display())))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::User(e.to_string()))?.path();
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if path.is_dir() && path.join("summary.json").is_file() {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            found.push((name, path.join("summary.json")));
        } else if path.extension().is_some_and(|e| e == "json") {
            found.push((id, path));
        }
    }
    found.sort();
    if found.len() < 2 {
        return Err(CliError::User(format!("{}: need at least 2 subject summaries", dir.display())));
    }
    Ok(found)
}

fn reorder(col: &CovariateColumn, idx: &[usize]) -> CovariateColumn {
    match col {
        CovariateColumn::Continuous { name, values } => CovariateColumn::Continuous {
            name: name.clone(),
            values: idx.iter().map(|i| values[*i]).collect(),
        },
        CovariateColumn::Categorical { name, values } => CovariateColumn::Categorical {
            name: name.clone(),
            values: idx.iter().map(|i| values[*i].clone()).collect(),
        },
    }
}

#[derive(Serialize)]
struct Estimate {
    name: String,
    mean: f64,
    sd: f64,
    hpd_95: (f64, f64),
}

#[derive(Serialize)]
struct GroupSummary {
    subjects: Vec<String>,
    neural_names: Vec<String>,
    covariate_names: Vec<String>,
    alpha: Vec<Estimate>,
    theta: Vec<Estimate>,
    tau: Vec<Estimate>,
    omega: Vec<Estimate>,
    diagnostics: crate::fit::Diagnostics,
}

pub fn run(args: &GroupArgs, strict: bool) -> Result<Outcome, CliError> {
    let mut s: GroupSettings = resolve(args, args.config.as_deref())?;
    let seed = seed(s.seed, strict)?;
    s.seed = Some(seed);
    let out = required(&s.out, "out")?;
    let subjects = discover(&required(&s.subjects, "subjects")?)?;
    let ids: Vec<String> = subjects.iter().map(|(id, _)| id.clone()).collect();

    let (covariate_names, b) = match &s.covariates {
        None => (Vec::new(), Matrix::zeros(ids.len(), 0)),
        Some(path) => {
            let table = read_covariates(path)?;
            let idx: Vec<usize> = match &table.subjects {
                Some(keys) => ids
                    .iter()
                    .map(|id| {
                        keys.iter().position(|k| k == id).ok_or_else(|| {
                            CliError::User(format!("{}: no covariates for subject '{id}'", path.display()))
                        })
                    })
                    .collect::<Result<_, _>>()?,
                None if table.columns.first().map_or(0, |c| match c {
                    CovariateColumn::Continuous { values, .. } => values.len(),
                    CovariateColumn::Categorical { values, .. } => values.len(),
                }) == ids.len() => (0..ids.len()).collect(),
                None => {
                    return Err(CliError::User(format!(
                        "{}: row count differs from the {} subjects and there is no 'subject' column",
                        path.display(),
                        ids.len()
                    )))
                }
            };
            let cols: Vec<CovariateColumn> = table.columns.iter().map(|c| reorder(c, &idx)).collect();
            let enc = encode_covariates(&cols)?;
            (enc.names, enc.matrix)
        }
    };

    let mut records = Vec::with_capacity(ids.len());
    let mut neural_names: Option<Vec<String>> = None;
    for (k, (id, path)) in subjects.iter().enumerate() {
        let sum: SubjectSummary = read_json(path)?;
        if neural_names.as_ref().is_some_and(|n| *n != sum.neural_names) {
            return Err(CliError::User(format!("subject '{id}' has different neural parameters")));
        }
        let p = sum.theta_hat.len();
        if sum.s_matrix.len() != p || sum.s_matrix.iter().any(|r| r.len() != p) {
            return Err(CliError::User(format!("subject '{id}': s_matrix is not {p}x{p}")));
        }
        let s_k = Matrix::from_fn(p, p, |i, j| sum.s_matrix[i][j]);
        let b_k: Vec<f64> = b.row(k).iter().copied().collect();
        records.push(SubjectRecord::new(sum.theta_hat, s_k, b_k)?);
        neural_names.get_or_insert(sum.neural_names);
    }
    let neural_names = neural_names.unwrap_or_default();

    let cfg = SamplerConfig {
        chains: s.chains,
        warmup: s.warmup,
        num_samples: Some(s.num_samples),
        target_accept: s.target_accept,
        max_treedepth: s.max_treedepth,
        seed,
        ..SamplerConfig::default()
    };
    let pd = group_fit(records, &cfg)?;
    let summary = summarize(&pd, None)?;
    let mut alpha = Vec::new();
    let mut theta = Vec::new();
    let mut tau = Vec::new();
    let mut omega = Vec::new();
    for p in summary.parameters {
        let est = Estimate {
            name: p.name.clone(),
            mean: p.mean,
            sd: p.sd,
            hpd_95: p.hpd_95,
        };
        match p.name.split('[').next() {
            Some("alpha") => alpha.push(est),
            Some("Theta") => theta.push(est),
            Some("tau") => tau.push(est),
            _ => omega.push(est),
        }
    }
    let mut plot = String::from("parameter,neural_name,mean,hpd_lower,hpd_upper\n");
    for (i, a) in alpha.iter().enumerate() {
        plot.push_str(&format!(
            "{},{},{},{},{}\n",
            a.name,
            cdcm::io::csv_field(neural_names.get(i).map_or("", String::as_str)),
            format_f64(a.mean),
            format_f64(a.hpd_95.0),
            format_f64(a.hpd_95.1)
        ));
    }
    write_text(&out.join("group_alpha.csv"), &plot)?;
    write_draws_csv(&out.join("group_draws.csv"), &pd)?;
    let diagnostics = crate::fit::Diagnostics::from_draws(&pd, s.chains);
    if let Some(w) = &diagnostics.warning {
        eprintln!("warning: {w}");
    }
    write_json(
        &out.join("group_summary.json"),
        &GroupSummary {
            subjects: ids,
            neural_names,
            covariate_names,
            alpha,
            theta,
            tau,
            omega,
            diagnostics,
        },
    )?;
    write_snapshot(&out, "group", &s)?;
    crate::emit(&format!("wrote group summary to {}", out.display()));
    Ok(Outcome::Success)
}
