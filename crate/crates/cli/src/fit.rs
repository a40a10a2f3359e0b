use std::path::{Path, PathBuf};

use cdcm::inference::{
    initialize, nuts_sample, summarize, CdcmPosterior, InitConfig, PosteriorDraws, PosteriorSummary, SamplerConfig,
};
use cdcm::io::{read_bold_csv, read_design, read_draws_csv, read_json, write_draws_csv, write_json, write_text};
use cdcm::model::Hypothesis;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::{required, resolve, seed, write_snapshot};
use crate::{CliError, Outcome};

#[derive(Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// BOLD CSV, one column per ROI.
    #[arg(long)]
    pub bold: Option<PathBuf>,
    #[arg(long)]
    pub design: Option<PathBuf>,
    #[arg(long)]
    pub tr: Option<f64>,
    #[arg(long)]
    pub hypothesis: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub target_accept: Option<f64>,
    #[arg(long)]
    pub max_treedepth: Option<usize>,
    #[arg(long)]
    pub ess_alpha: Option<f64>,
    #[arg(long)]
    pub ess_eps: Option<f64>,
    /// Cap on post-warmup draws, pooled over chains.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Fixed draws per chain instead of ESS-based stopping.
    #[arg(long)]
    pub num_samples: Option<usize>,
    /// Prior draws screened for each chain's starting point.
    #[arg(long)]
    pub init_draws: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub bold: Option<PathBuf>,
    pub design: Option<PathBuf>,
    pub tr: Option<f64>,
    pub hypothesis: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub chains: usize,
    pub warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub ess_alpha: f64,
    pub ess_eps: f64,
    pub max_iterations: usize,
    pub num_samples: Option<usize>,
    pub init_draws: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        let s = SamplerConfig::default();
        FitSettings {
            bold: None,
            design: None,
            tr: None,
            hypothesis: None,
            out: None,
            seed: None,
            chains: s.chains,
            warmup: s.warmup,
            target_accept: s.target_accept,
            max_treedepth: s.max_treedepth,
            ess_alpha: s.ess_alpha,
            ess_eps: s.ess_eps,
            max_iterations: s.max_iterations,
            num_samples: None,
            init_draws: InitConfig::default().prior_draws,
        }
    }
}

/// Sampler diagnostics written next to the summary.
#[derive(Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub draws: usize,
    pub chains: usize,
    pub warmup: usize,
    pub seed: u64,
    pub step_size: f64,
    pub divergences: usize,
    pub max_treedepth_hits: usize,
    pub mean_accept_stat: f64,
    pub multi_ess: Option<f64>,
    pub ess_threshold: f64,
    pub converged: bool,
    pub warning: Option<String>,
}

impl Diagnostics {
    pub fn from_draws(pd: &PosteriorDraws, chains: usize) -> Self {
        Diagnostics {
            draws: pd.len(),
            chains,
            warmup: pd.warmup,
            seed: pd.seed,
            step_size: pd.step_size,
            divergences: pd.divergence_count,
            max_treedepth_hits: pd.max_depth_hits,
            mean_accept_stat: pd.mean_accept_stat,
            multi_ess: pd.multi_ess,
            ess_threshold: pd.ess_threshold,
            converged: pd.converged,
            warning: pd.divergence_warning.clone(),
        }
    }
}

#[derive(Serialize)]
struct FitSummary<'a> {
    #[serde(flatten)]
    posterior: &'a PosteriorSummary,
    diagnostics: Diagnostics,
}

/// `parameter,mean,hpd_lower,hpd_upper` on the natural scale.
pub fn write_hpd_csv(path: &Path, summary: &PosteriorSummary) -> Result<(), CliError> {
    let mut text = String::from("parameter,mean,hpd_lower,hpd_upper\n");
    for p in &summary.parameters {
        text.push_str(&format!(
            "{},{},{},{}\n",
            cdcm::io::csv_field(&p.natural_name),
            cdcm::io::format_f64(p.natural_mean),
            cdcm::io::format_f64(p.natural_hpd_95.0),
            cdcm::io::format_f64(p.natural_hpd_95.1)
        ));
    }
    write_text(path, &text)?;
    Ok(())
}

pub fn run(args: &FitArgs, strict: bool) -> Result<Outcome, CliError> {
    let mut s: FitSettings = resolve(args, args.config.as_deref())?;
    let seed = seed(s.seed, strict)?;
    s.seed = Some(seed);
    let out = required(&s.out, "out")?;
    let bold = read_bold_csv(&required(&s.bold, "bold")?)?;
    if let Some(w) = &bold.range_warning {
        eprintln!("warning: {w}");
    }
    let design = read_design(&required(&s.design, "design")?, s.tr)?;
    let hypothesis: Hypothesis = read_json(&required(&s.hypothesis, "hypothesis")?)?;
    let post = CdcmPosterior::new(hypothesis.clone(), design, bold.y)?;
    let cfg = SamplerConfig {
        warmup: s.warmup,
        target_accept: s.target_accept,
        max_treedepth: s.max_treedepth,
        ess_alpha: s.ess_alpha,
        ess_eps: s.ess_eps,
        max_iterations: s.max_iterations,
        chains: s.chains,
        seed,
        num_samples: s.num_samples,
        ..SamplerConfig::default()
    };
    cfg.validate()?;
    let init = InitConfig {
        prior_draws: s.init_draws,
        seed,
        ..InitConfig::default()
    };
    let inits = initialize(&post, &init, s.chains)?;
    let pd = nuts_sample(&post, &cfg, &inits, post.names())?;
    let summary = summarize(&pd, Some(&hypothesis))?;
    write_draws_csv(&out.join("draws.csv"), &pd)?;
    let diagnostics = Diagnostics::from_draws(&pd, s.chains);
    if let Some(w) = &diagnostics.warning {
        eprintln!("warning: {w}");
    }
    let converged = pd.converged || s.num_samples.is_some();
    write_json(
        &out.join("summary.json"),
        &FitSummary {
            posterior: &summary,
            diagnostics,
        },
    )?;
    write_hpd_csv(&out.join("hpd.csv"), &summary)?;
    write_snapshot(&out, "fit", &s)?;
    if !converged {
        eprintln!(
            "warning: multivariate ESS {:?} below the target {:.1} after {} draws",
            pd.multi_ess,
            pd.ess_threshold,
            pd.len()
        );
        return Ok(Outcome::Failed);
    }
    crate::emit(&format!("wrote {} draws to {}", pd.len(), out.display()));
    Ok(Outcome::Success)
}

#[derive(Args, Serialize)]
pub struct SummarizeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Draws CSV as written by `fit`.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    /// Hypothesis JSON for natural-scale names and the neural covariance.
    #[arg(long)]
    pub hypothesis: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeSettings {
    pub draws: Option<PathBuf>,
    pub hypothesis: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn summarize_run(args: &SummarizeArgs) -> Result<Outcome, CliError> {
    let s: SummarizeSettings = resolve(args, args.config.as_deref())?;
    let out = required(&s.out, "out")?;
    let pd = read_draws_csv(&required(&s.draws, "draws")?)?;
    let hypothesis: Option<Hypothesis> = s.hypothesis.as_deref().map(read_json).transpose()?;
    let summary = summarize(&pd, hypothesis.as_ref())?;
    write_json(&out.join("summary.json"), &summary)?;
    write_hpd_csv(&out.join("hpd.csv"), &summary)?;
    write_snapshot(&out, "summarize", &s)?;
    Ok(Outcome::Success)
}
