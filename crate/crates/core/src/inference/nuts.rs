//! No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
//! step size adaptation and a windowed diagonal metric.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdcmError, Result};
use crate::inference::ess::{ess_threshold, multi_ess_chains};
use crate::inference::LogDensity;
use crate::linalg::Matrix;

/// Energy error beyond which a trajectory is flagged divergent.
const MAX_DELTA_H: f64 = 1000.0;
const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub warmup: usize,
    pub target_accept: f64,
    pub max_treedepth: usize,
    pub ess_alpha: f64,
    pub ess_eps: f64,
    /// Cap on post-warmup draws, pooled over chains.
    pub max_iterations: usize,
    pub chains: usize,
    pub seed: u64,
    /// Draws per chain. `None` samples until the multivariate ESS reaches
    /// the threshold for `(ess_alpha, ess_eps)`.
    pub num_samples: Option<usize>,
    /// Pooled draws between ESS checks.
    pub check_every: usize,
    pub adapt_metric: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            warmup: 5000,
            target_accept: 0.9,
            max_treedepth: 10,
            ess_alpha: 0.05,
            ess_eps: 0.05,
            max_iterations: 100_000,
            chains: 1,
            seed: 0,
            num_samples: None,
            check_every: 1000,
            adapt_metric: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(CdcmError::InvalidInput(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.warmup < 100 {
            return Err(CdcmError::InvalidInput(format!("warmup must be at least 100, got {}", self.warmup)));
        }
        if self.chains == 0 || self.max_treedepth == 0 || self.check_every == 0 {
            return Err(CdcmError::InvalidInput(
                "chains, max_treedepth and check_every must be positive".into(),
            ));
        }
        if !(self.ess_alpha > 0.0 && self.ess_alpha < 1.0) || !(self.ess_eps > 0.0) {
            return Err(CdcmError::InvalidInput("ess_alpha must lie in (0, 1) and ess_eps be positive".into()));
        }
        if self.num_samples == Some(0) {
            return Err(CdcmError::InvalidInput("num_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Post-warmup draws and sampler diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    /// `N x P`, chains stacked in order.
    pub draws: Matrix,
    /// Chain index of each row of `draws`.
    pub chain: Vec<usize>,
    /// Mean adapted step size over chains.
    pub step_size: f64,
    pub step_sizes: Vec<f64>,
    /// Adapted inverse metric (diagonal) per chain.
    pub inv_metric: Vec<Vec<f64>>,
    pub divergence_count: usize,
    pub max_depth_hits: usize,
    pub mean_accept_stat: f64,
    pub seed: u64,
    pub warmup: usize,
    pub converged: bool,
    pub multi_ess: Option<f64>,
    pub ess_threshold: f64,
    pub divergence_warning: Option<String>,
}

impl PosteriorDraws {
    /// Wraps a bare draw matrix (single chain, no diagnostics).
    pub fn from_matrix(names: Vec<String>, draws: Matrix) -> Self {
        let n = draws.nrows();
        PosteriorDraws {
            names,
            draws,
            chain: vec![0; n],
            step_size: f64::NAN,
            step_sizes: Vec::new(),
            inv_metric: Vec::new(),
            divergence_count: 0,
            max_depth_hits: 0,
            mean_accept_stat: f64::NAN,
            seed: 0,
            warmup: 0,
            converged: false,
            multi_ess: None,
            ess_threshold: f64::NAN,
            divergence_warning: None,
        }
    }

    pub fn len(&self) -> usize {
        self.draws.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.nrows() == 0
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.draws.column(j).iter().copied().collect())
    }

    /// Draws of each chain as separate matrices.
    pub fn chain_draws(&self) -> Vec<Matrix> {
        let k = self.chain.iter().copied().max().map_or(0, |m| m + 1);
        (0..k)
            .map(|c| {
                let rows: Vec<usize> = (0..self.len()).filter(|i| self.chain[*i] == c).collect();
                self.draws.select_rows(&rows)
            })
            .collect()
    }
}

/// Worker threads for chain parallelism, capped by `CDCM_THREADS`.
pub fn thread_count() -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("CDCM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .map_or(default, |n| n.min(default.max(n)))
}

#[derive(Debug, Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

#[derive(Debug, Default)]
struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Transition {
    accept_stat: f64,
    depth: usize,
    divergent: bool,
}

/// Dual averaging of `log ε` towards a target acceptance statistic.
#[derive(Debug, Clone)]
struct DualAveraging {
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(delta: f64, eps: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            delta,
        }
    }

    fn restart(&mut self, eps: f64) {
        *self = DualAveraging::new(self.delta, eps);
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Expanding-window variance estimation for the diagonal metric.
#[derive(Debug, Clone)]
struct MetricWindows {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    counter: usize,
    next_window: usize,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MetricWindows {
    fn new(num_warmup: usize, dim: usize) -> Self {
        let (init_buffer, term_buffer, window_size) = if num_warmup < INIT_BUFFER + TERM_BUFFER + BASE_WINDOW {
            let init = (0.15 * num_warmup as f64) as usize;
            let term = (0.1 * num_warmup as f64) as usize;
            (init, term, num_warmup - init - term)
        } else {
            (INIT_BUFFER, TERM_BUFFER, BASE_WINDOW)
        };
        MetricWindows {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size,
            counter: 0,
            next_window: init_buffer + window_size - 1,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= last {
            self.next_window = last;
        }
    }

    /// Adds a draw; returns a regularized variance at the end of a window.
    fn learn(&mut self, q: &[f64]) -> Option<Vec<f64>> {
        if self.in_window() {
            self.n += 1;
            for i in 0..q.len() {
                let delta = q[i] - self.mean[i];
                self.mean[i] += delta / self.n as f64;
                self.m2[i] += delta * (q[i] - self.mean[i]);
            }
        }
        let out = if self.end_of_window() {
            self.compute_next_window();
            let n = self.n as f64;
            let var: Vec<f64> = self
                .m2
                .iter()
                .map(|m| {
                    let v = if n > 1.0 { m / (n - 1.0) } else { 1.0 };
                    (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))
                })
                .collect();
            self.n = 0;
            self.mean.iter_mut().for_each(|v| *v = 0.0);
            self.m2.iter_mut().for_each(|v| *v = 0.0);
            Some(var)
        } else {
            None
        };
        self.counter += 1;
        out
    }
}

struct Chain<'a, T: LogDensity> {
    target: &'a T,
    rng: ChaCha8Rng,
    q: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
    eps: f64,
    inv_metric: Vec<f64>,
    max_depth: usize,
    draws: Vec<Vec<f64>>,
    divergences: usize,
    depth_hits: usize,
    accept_sum: f64,
}

impl<'a, T: LogDensity> Chain<'a, T> {
    fn new(target: &'a T, init: &[f64], rng: ChaCha8Rng, max_depth: usize) -> Result<Self> {
        let mut grad = vec![0.0; init.len()];
        let logp = target.log_density_and_grad(init, &mut grad);
        if !logp.is_finite() {
            return Err(CdcmError::Initialization(
                "log-density is not finite at the initial point".into(),
            ));
        }
        Ok(Chain {
            target,
            rng,
            q: init.to_vec(),
            logp,
            grad,
            eps: 1.0,
            inv_metric: vec![1.0; init.len()],
            max_depth,
            draws: Vec::new(),
            divergences: 0,
            depth_hits: 0,
            accept_sum: 0.0,
        })
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = 0.5 * z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>();
        let h = -z.logp + kinetic;
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.q.len());
        for m in &self.inv_metric {
            let e: f64 = self.rng.sample(StandardNormal);
            p.push(e / m.sqrt());
        }
        p
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for i in 0..z.q.len() {
            z.p[i] += 0.5 * eps * z.grad[i];
        }
        for i in 0..z.q.len() {
            z.q[i] += eps * self.inv_metric[i] * z.p[i];
        }
        z.logp = self.target.log_density_and_grad(&z.q, &mut z.grad);
        if z.logp.is_finite() {
            for i in 0..z.q.len() {
                z.p[i] += 0.5 * eps * z.grad[i];
            }
        }
    }

    fn current_point(&mut self) -> Point {
        Point {
            q: self.q.clone(),
            p: self.sample_momentum(),
            logp: self.logp,
            grad: self.grad.clone(),
        }
    }

    /// Doubles the step until the one-step acceptance crosses 0.8.
    fn init_stepsize(&mut self) {
        let log08 = 0.8f64.ln();
        let trial = |chain: &mut Self, eps: f64| -> f64 {
            let mut z = chain.current_point();
            let h0 = chain.hamiltonian(&z);
            chain.leapfrog(&mut z, eps);
            h0 - chain.hamiltonian(&z)
        };
        let delta_h = trial(self, self.eps);
        let direction = if delta_h > log08 { 1.0 } else { -1.0 };
        for _ in 0..100 {
            self.eps = if direction > 0.0 { 2.0 * self.eps } else { 0.5 * self.eps };
            let delta_h = trial(self, self.eps);
            if (direction > 0.0 && !(delta_h > log08)) || (direction < 0.0 && !(delta_h < log08)) {
                break;
            }
            if self.eps > 1e7 || self.eps < 1e-12 {
                break;
            }
        }
        self.eps = self.eps.clamp(1e-12, 1e7);
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut Vec<f64>,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        eps: f64,
        stats: &mut TreeStats,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, eps);
            stats.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > MAX_DELTA_H {
                stats.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            stats.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *z_propose = z.clone();
            *p_sharp_beg = self.velocity(&z.p);
            *p_sharp_end = p_sharp_beg.clone();
            for (r, p) in rho.iter_mut().zip(&z.p) {
                *r += p;
            }
            *p_beg = z.p.clone();
            *p_end = z.p.clone();
            return !stats.divergent;
        }
        let dim = z.q.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            eps,
            stats,
            &mut lsw_init,
        ) {
            return false;
        }
        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            eps,
            stats,
            &mut lsw_final,
        ) {
            return false;
        }
        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let rho_ext = add(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &rho_ext);
        let rho_ext = add(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &rho_ext);
        persist
    }

    fn transition(&mut self) -> Transition {
        let z0 = self.current_point();
        let h0 = self.hamiltonian(&z0);
        let dim = z0.q.len();
        let mut z_fwd = z0.clone();
        let mut z_bck = z0.clone();
        let mut z_sample = z0.clone();
        let mut z_propose = z0.clone();

        let v0 = self.velocity(&z0.p);
        let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
            (z0.p.clone(), z0.p.clone(), z0.p.clone(), z0.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) =
            (v0.clone(), v0.clone(), v0.clone(), v0);
        let mut rho = z0.p.clone();
        let mut log_sum_weight = 0.0;
        let mut depth = 0;
        let mut stats = TreeStats::default();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_fwd);
                ps_bck_fwd.clone_from(&ps_fwd_fwd);
                let mut z = z_fwd.clone();
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    self.eps,
                    &mut stats,
                    &mut lsw_subtree,
                );
                z_fwd = z;
                ok
            } else {
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_bck);
                ps_fwd_bck.clone_from(&ps_bck_bck);
                let mut z = z_bck.clone();
                let ok = self.build_tree(
                    depth,
                    &mut z,
                    &mut z_propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -self.eps,
                    &mut stats,
                    &mut lsw_subtree,
                );
                z_bck = z;
                ok
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let rho_ext = add(&rho_bck, &p_fwd_bck);
            persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &rho_ext);
            let rho_ext = add(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &rho_ext);
            if !persist {
                break;
            }
        }
        self.q = z_sample.q;
        self.logp = z_sample.logp;
        self.grad = z_sample.grad;
        Transition {
            accept_stat: if stats.n_leapfrog > 0 {
                stats.sum_metro_prob / stats.n_leapfrog as f64
            } else {
                0.0
            },
            depth,
            divergent: stats.divergent,
        }
    }

    fn warmup(&mut self, cfg: &SamplerConfig) {
        self.init_stepsize();
        let mut da = DualAveraging::new(cfg.target_accept, self.eps);
        let mut windows = MetricWindows::new(cfg.warmup, self.q.len());
        for _ in 0..cfg.warmup {
            let t = self.transition();
            self.eps = da.learn(t.accept_stat);
            if cfg.adapt_metric {
                if let Some(var) = windows.learn(&self.q) {
                    self.inv_metric = var;
                    self.init_stepsize();
                    da.restart(self.eps);
                }
            }
        }
        self.eps = da.final_step();
    }

    fn sample(&mut self, n: usize) {
        for _ in 0..n {
            let t = self.transition();
            if t.divergent {
                self.divergences += 1;
            }
            if t.depth >= self.max_depth {
                self.depth_hits += 1;
            }
            self.accept_sum += t.accept_stat;
            self.draws.push(self.q.clone());
        }
    }
}

/// Runs `cfg.chains` NUTS chains in parallel. `inits` holds one start point
/// shared by all chains or one per chain.
pub fn nuts_sample<T: LogDensity>(
    target: &T,
    cfg: &SamplerConfig,
    inits: &[Vec<f64>],
    names: Vec<String>,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let dim = target.dim();
    if names.len() != dim {
        return Err(CdcmError::DimensionMismatch(format!(
            "{} parameter names for a {dim}-dimensional target",
            names.len()
        )));
    }
    if inits.len() != 1 && inits.len() != cfg.chains {
        return Err(CdcmError::InvalidInput(format!(
            "expected 1 or {} initial points, got {}",
            cfg.chains,
            inits.len()
        )));
    }
    if let Some(bad) = inits.iter().find(|x| x.len() != dim) {
        return Err(CdcmError::DimensionMismatch(format!(
            "initial point has length {}, expected {dim}",
            bad.len()
        )));
    }
    let mut chains = (0..cfg.chains)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            Chain::new(target, &inits[c.min(inits.len() - 1)], rng, cfg.max_treedepth)
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count().min(cfg.chains))
        .build()
        .map_err(|e| CdcmError::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| chains.par_iter_mut().for_each(|c| c.warmup(cfg)));

    let threshold = ess_threshold(dim, cfg.ess_alpha, cfg.ess_eps)?;
    let mut total = 0usize;
    let (ess, converged) = loop {
        let per_chain = match cfg.num_samples {
            Some(n) => n,
            None => {
                let remaining = cfg.max_iterations.saturating_sub(total);
                cfg.check_every.div_ceil(cfg.chains).min(remaining.div_ceil(cfg.chains)).max(1)
            }
        };
        pool.install(|| chains.par_iter_mut().for_each(|c| c.sample(per_chain)));
        total += per_chain * cfg.chains;
        let mats: Vec<Matrix> = chains
            .iter()
            .map(|c| Matrix::from_fn(c.draws.len(), dim, |i, j| c.draws[i][j]))
            .collect();
        let refs: Vec<&Matrix> = mats.iter().collect();
        let ess = match multi_ess_chains(&refs) {
            Ok(v) => v,
            Err(CdcmError::DegenerateDraws(msg)) => {
                log::warn!("multivariate ESS not available: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        let converged = ess.is_some_and(|e| e >= threshold);
        if cfg.num_samples.is_some() || converged || total >= cfg.max_iterations {
            break (ess, converged);
        }
        log::debug!("{total} draws, multivariate ESS {ess:?} of {threshold:.1}");
    };

    let n_total: usize = chains.iter().map(|c| c.draws.len()).sum();
    let mut draws = Matrix::zeros(n_total, dim);
    let mut chain_ids = Vec::with_capacity(n_total);
    let mut row = 0;
    for (k, c) in chains.iter().enumerate() {
        for d in &c.draws {
            draws.row_mut(row).copy_from_slice(d);
            chain_ids.push(k);
            row += 1;
        }
    }
    let divergence_count: usize = chains.iter().map(|c| c.divergences).sum();
    let divergence_warning = (divergence_count as f64 > 0.01 * n_total as f64).then(|| {
        let msg = format!(
            "{divergence_count} of {n_total} post-warmup transitions diverged; \
             rerun with target_accept 0.95 or 0.99"
        );
        log::warn!("{msg}");
        msg
    });
    if !converged && cfg.num_samples.is_none() {
        log::warn!("sampling stopped at {total} draws before the ESS target {threshold:.1}");
    }
    let step_sizes: Vec<f64> = chains.iter().map(|c| c.eps).collect();
    Ok(PosteriorDraws {
        names,
        draws,
        chain: chain_ids,
        step_size: step_sizes.iter().sum::<f64>() / step_sizes.len() as f64,
        step_sizes,
        inv_metric: chains.iter().map(|c| c.inv_metric.clone()).collect(),
        divergence_count,
        max_depth_hits: chains.iter().map(|c| c.depth_hits).sum(),
        mean_accept_stat: chains.iter().map(|c| c.accept_sum).sum::<f64>() / n_total as f64,
        seed: cfg.seed,
        warmup: cfg.warmup,
        converged,
        multi_ess: ess,
        ess_threshold: threshold,
        divergence_warning,
    })
}
