//! Gradient-based MCMC: the No-U-Turn sampler with multinomial
//! trajectory sampling, dual-averaging step-size adaptation and
//! diagonal mass-matrix estimation over expanding warmup windows, plus
//! split R-hat / effective-sample-size diagnostics and posterior
//! percentile summaries.
//!
//! Chains run concurrently; each chain's RNG stream is derived from
//! (seed, chain index), so results are bit-identical regardless of how
//! the chains are scheduled.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{derive_rng, normal_quantile, percentile_sorted};

/// A target distribution: unnormalized log density with exact gradient.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Write the gradient into `grad` and return the log density.
    /// Non-finite values signal regions the sampler must reject.
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    fn coordinate_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Chain initialization; the default draws uniformly from (-2, 2).
    fn initial_point(&self, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, 0x6465_6661);
        (0..self.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Total iterations per chain, warmup included.
    pub n_iterations: usize,
    pub n_warmup: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Check the analytic gradient against finite differences at the
    /// initial point of each chain.
    pub validate_gradient: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iterations: 9000,
            n_warmup: 4500,
            n_chains: 4,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            validate_gradient: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_warmup >= self.n_iterations {
            return Err(Error::Sampler(format!(
                "warmup ({}) must be smaller than total iterations ({})",
                self.n_warmup, self.n_iterations
            )));
        }
        if self.n_chains == 0 {
            return Err(Error::Sampler("need at least one chain".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Sampler("target_accept must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn n_retained(&self) -> usize {
        self.n_iterations - self.n_warmup
    }
}

/// Per-chain acceptance and stability statistics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ChainStats {
    pub mean_accept: f64,
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub step_size: f64,
}

/// Retained draws from all chains plus bookkeeping.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub n_chains: usize,
    pub n_retained: usize,
    pub dim: usize,
    /// chain-major storage: draw(c, t, k) = draws[(c * n_retained + t) * dim + k]
    draws: Vec<f64>,
    pub chain_stats: Vec<ChainStats>,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn get(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.draws[(chain * self.n_retained + iter) * self.dim + param]
    }

    pub fn coordinate_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// All retained draws of one coordinate, pooled across chains.
    pub fn pooled(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_chains * self.n_retained);
        for c in 0..self.n_chains {
            for t in 0..self.n_retained {
                out.push(self.get(c, t, param));
            }
        }
        out
    }

    /// One chain's draws of one coordinate.
    pub fn chain(&self, chain: usize, param: usize) -> Vec<f64> {
        (0..self.n_retained).map(|t| self.get(chain, t, param)).collect()
    }

    pub fn total_divergences(&self) -> usize {
        self.chain_stats.iter().map(|s| s.divergences).sum()
    }
}

/// Run NUTS over `cfg.n_chains` chains. Deterministic under
/// (model, cfg.seed): chain c uses the RNG stream derived from
/// (seed, c) regardless of scheduling.
pub fn sample<M: LogDensity>(model: &M, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let dim = model.dim();
    let chains: Vec<Result<(Vec<f64>, ChainStats)>> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, c as u64))
        .collect();

    let n_retained = cfg.n_retained();
    let mut draws = vec![0.0; cfg.n_chains * n_retained * dim];
    let mut chain_stats = Vec::with_capacity(cfg.n_chains);
    for (c, result) in chains.into_iter().enumerate() {
        let (chain_draws, stats) = result?;
        draws[c * n_retained * dim..(c + 1) * n_retained * dim].copy_from_slice(&chain_draws);
        chain_stats.push(stats);
    }

    let mut warnings = Vec::new();
    let total_post: usize = chain_stats.iter().map(|s| s.divergences).sum();
    let budget = cfg.n_chains * n_retained;
    if total_post * 10 > budget {
        warnings.push(format!(
            "HARD WARNING: divergence rate {:.1}% exceeds 10% after warmup; estimates are unreliable",
            100.0 * total_post as f64 / budget as f64
        ));
    }
    if draws.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampler("non-finite draw recorded".into()));
    }

    Ok(PosteriorDraws {
        names: model.coordinate_names(),
        n_chains: cfg.n_chains,
        n_retained,
        dim,
        draws,
        chain_stats,
        warnings,
    })
}

const DIVERGENCE_ENERGY: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: usize,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0,
            target,
        }
    }

    fn update(&mut self, accept_stat: f64) {
        self.count += 1;
        let t = self.count as f64;
        let w = 1.0 / (t + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat);
        self.log_eps = self.mu - t.sqrt() / Self::GAMMA * self.h_bar;
        let eta = t.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }

    fn eps(&self) -> f64 {
        self.log_eps.exp()
    }

    fn eps_bar(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Online mean/variance for mass-matrix windows.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean.fill(0.0);
        self.m2.fill(0.0);
    }

    fn update(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    /// Regularized variance estimate, shrunk toward a small constant,
    /// as used for mass-matrix adaptation.
    fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.n < 5 {
            return None;
        }
        let n = self.n as f64;
        let shrink = n / (n + 5.0);
        Some(
            self.m2
                .iter()
                .map(|&m2| (shrink * (m2 / (n - 1.0)) + 1e-3 * (1.0 - shrink)).max(1e-10))
                .collect(),
        )
    }
}

/// Warmup staging: an initial step-size-only buffer, expanding
/// mass-matrix windows (25, 50, 100, ...), and a final step-size buffer.
fn mass_window_ends(n_warmup: usize) -> (usize, usize, Vec<usize>) {
    let (init_buffer, term_buffer, base_window) = if n_warmup >= 150 {
        (75usize, 50usize, 25usize)
    } else {
        let init = (n_warmup * 15 / 100).max(1);
        let term = (n_warmup * 10 / 100).max(1);
        (init, term, (n_warmup - init - term).max(1))
    };
    let slow_end = n_warmup.saturating_sub(term_buffer);
    let mut ends = Vec::new();
    let mut start = init_buffer;
    let mut width = base_window;
    while start < slow_end {
        let mut end = start + width;
        if end + 2 * width > slow_end {
            end = slow_end;
        }
        ends.push(end.min(slow_end));
        start = end;
        width = width.saturating_mul(2);
    }
    (init_buffer, slow_end, ends)
}

struct Hamiltonian<'a, M: LogDensity> {
    model: &'a M,
    inv_mass: Vec<f64>,
}

#[derive(Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl<M: LogDensity> Hamiltonian<'_, M> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_mass)
            .map(|(&pi, &im)| pi * pi * im)
            .sum::<f64>()
    }

    /// Log joint (negative Hamiltonian).
    fn log_joint(&self, s: &State) -> f64 {
        s.logp - self.kinetic(&s.p)
    }

    fn sample_momentum(&self, rng: &mut ChaCha8Rng, p: &mut [f64]) {
        for (pi, &im) in p.iter_mut().zip(&self.inv_mass) {
            let z: f64 = rng.sample(StandardNormal);
            *pi = z / im.sqrt();
        }
    }

    fn leapfrog(&self, s: &State, dir: f64, eps: f64) -> State {
        let mut out = s.clone();
        let h = dir * eps;
        for k in 0..out.p.len() {
            out.p[k] += 0.5 * h * out.grad[k];
        }
        for k in 0..out.q.len() {
            out.q[k] += h * self.inv_mass[k] * out.p[k];
        }
        out.logp = self.model.logp_grad(&out.q, &mut out.grad);
        for k in 0..out.p.len() {
            out.p[k] += 0.5 * h * out.grad[k];
        }
        out
    }

    /// U-turn termination across endpoints.
    fn turning(&self, minus: &State, plus: &State) -> bool {
        let mut dot_minus = 0.0;
        let mut dot_plus = 0.0;
        for k in 0..minus.q.len() {
            let dq = plus.q[k] - minus.q[k];
            dot_minus += dq * self.inv_mass[k] * minus.p[k];
            dot_plus += dq * self.inv_mass[k] * plus.p[k];
        }
        dot_minus < 0.0 || dot_plus < 0.0
    }
}

struct Subtree {
    minus: State,
    plus: State,
    proposal: State,
    log_sum_weight: f64,
    sum_alpha: f64,
    n_alpha: usize,
    turning: bool,
    divergent: bool,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[allow(clippy::too_many_arguments)]
fn build_tree<M: LogDensity>(
    ham: &Hamiltonian<M>,
    rng: &mut ChaCha8Rng,
    from: &State,
    depth: usize,
    dir: f64,
    eps: f64,
    log_joint_0: f64,
) -> Subtree {
    if depth == 0 {
        let next = ham.leapfrog(from, dir, eps);
        let lj = ham.log_joint(&next);
        let delta = lj - log_joint_0;
        let divergent = !delta.is_finite() || delta < -DIVERGENCE_ENERGY;
        let alpha = if delta.is_finite() { delta.exp().min(1.0) } else { 0.0 };
        return Subtree {
            minus: next.clone(),
            plus: next.clone(),
            proposal: next,
            log_sum_weight: if divergent { f64::NEG_INFINITY } else { delta },
            sum_alpha: alpha,
            n_alpha: 1,
            turning: false,
            divergent,
        };
    }

    let first = build_tree(ham, rng, from, depth - 1, dir, eps, log_joint_0);
    if first.turning || first.divergent {
        return first;
    }
    let grow_from = if dir < 0.0 { first.minus.clone() } else { first.plus.clone() };
    let second = build_tree(ham, rng, &grow_from, depth - 1, dir, eps, log_joint_0);

    let minus = if dir < 0.0 { second.minus.clone() } else { first.minus.clone() };
    let plus = if dir < 0.0 { first.plus.clone() } else { second.plus.clone() };
    let log_sum = log_add_exp(first.log_sum_weight, second.log_sum_weight);
    // Unbiased multinomial selection within a subtree.
    let take_second = if second.log_sum_weight == f64::NEG_INFINITY {
        false
    } else {
        let u: f64 = rng.random();
        u.ln() < second.log_sum_weight - log_sum
    };
    let proposal = if take_second { second.proposal.clone() } else { first.proposal.clone() };
    let turning = second.turning || second.divergent || ham.turning(&minus, &plus);

    Subtree {
        minus,
        plus,
        proposal,
        log_sum_weight: log_sum,
        sum_alpha: first.sum_alpha + second.sum_alpha,
        n_alpha: first.n_alpha + second.n_alpha,
        turning,
        divergent: second.divergent,
    }
}

struct StepOutcome {
    accept_stat: f64,
    divergent: bool,
    depth_hit: bool,
}

fn nuts_step<M: LogDensity>(
    ham: &Hamiltonian<M>,
    rng: &mut ChaCha8Rng,
    state: &mut State,
    eps: f64,
    max_depth: usize,
) -> StepOutcome {
    ham.sample_momentum(rng, &mut state.p);
    let log_joint_0 = ham.log_joint(state);

    let mut minus = state.clone();
    let mut plus = state.clone();
    let mut log_sum_weight = 0.0f64; // the root has relative weight exp(0)
    let mut sum_alpha = 0.0;
    let mut n_alpha = 0usize;
    let mut divergent = false;
    let mut depth = 0;
    let mut depth_hit = false;

    while depth < max_depth {
        let dir: f64 = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        let grow_from = if dir < 0.0 { minus.clone() } else { plus.clone() };
        let tree = build_tree(ham, rng, &grow_from, depth, dir, eps, log_joint_0);
        sum_alpha += tree.sum_alpha;
        n_alpha += tree.n_alpha;

        if tree.divergent {
            divergent = true;
            break;
        }
        if dir < 0.0 {
            minus = tree.minus.clone();
        } else {
            plus = tree.plus.clone();
        }
        if tree.turning {
            break;
        }
        // Biased progressive sampling: favor the fresh subtree.
        let accept_new = {
            let log_ratio = tree.log_sum_weight - log_sum_weight;
            log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
        };
        if accept_new {
            state.q = tree.proposal.q.clone();
            state.grad = tree.proposal.grad.clone();
            state.logp = tree.proposal.logp;
            state.p = tree.proposal.p.clone();
        }
        log_sum_weight = log_add_exp(log_sum_weight, tree.log_sum_weight);
        if ham.turning(&minus, &plus) {
            break;
        }
        depth += 1;
        if depth == max_depth {
            depth_hit = true;
        }
    }

    StepOutcome {
        accept_stat: if n_alpha > 0 { sum_alpha / n_alpha as f64 } else { 0.0 },
        divergent,
        depth_hit,
    }
}

fn find_reasonable_epsilon<M: LogDensity>(
    ham: &Hamiltonian<M>,
    rng: &mut ChaCha8Rng,
    state: &State,
) -> f64 {
    let mut eps = 1.0f64;
    let mut probe = state.clone();
    ham.sample_momentum(rng, &mut probe.p);
    let lj0 = ham.log_joint(&probe);

    let mut next = ham.leapfrog(&probe, 1.0, eps);
    let mut delta = ham.log_joint(&next) - lj0;
    let mut guard = 0;
    while !delta.is_finite() && guard < 60 {
        eps *= 0.5;
        next = ham.leapfrog(&probe, 1.0, eps);
        delta = ham.log_joint(&next) - lj0;
        guard += 1;
    }
    if !delta.is_finite() {
        return 1e-6;
    }
    let dir: f64 = if delta > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..100 {
        if dir * delta <= -dir * (2.0f64).ln() {
            break;
        }
        eps *= 2.0f64.powf(dir);
        if !(1e-10..=1e10).contains(&eps) {
            break;
        }
        next = ham.leapfrog(&probe, 1.0, eps);
        delta = ham.log_joint(&next) - lj0;
        if !delta.is_finite() {
            eps *= 0.5;
            break;
        }
    }
    eps.clamp(1e-10, 1e10)
}

fn run_chain<M: LogDensity>(
    model: &M,
    cfg: &SamplerConfig,
    chain: u64,
) -> Result<(Vec<f64>, ChainStats)> {
    let dim = model.dim();
    let mut rng = derive_rng(cfg.seed, chain);

    // Initialization with retries on non-finite density.
    let mut state = None;
    for attempt in 0..INIT_ATTEMPTS {
        let q = model.initial_point(
            cfg.seed
                .wrapping_add(chain.wrapping_mul(0x9e37))
                .wrapping_add(attempt as u64),
        );
        let mut grad = vec![0.0; dim];
        let logp = model.logp_grad(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            state = Some(State { q, p: vec![0.0; dim], grad, logp });
            break;
        }
    }
    let mut state = state.ok_or_else(|| {
        Error::Sampler(format!(
            "non-finite density at initialization after {INIT_ATTEMPTS} retries"
        ))
    })?;

    if cfg.validate_gradient {
        validate_gradient_at(model, &state.q, &mut rng)?;
    }

    let mut ham = Hamiltonian { model, inv_mass: vec![1.0; dim] };
    let mut eps = find_reasonable_epsilon(&ham, &mut rng, &state);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let (init_buffer, slow_end, window_ends) = mass_window_ends(cfg.n_warmup);
    let mut welford = Welford::new(dim);

    let n_retained = cfg.n_retained();
    let mut draws = vec![0.0; n_retained * dim];
    let mut divergences = 0usize;
    let mut depth_hits = 0usize;
    let mut accept_sum = 0.0;

    for m in 1..=cfg.n_iterations {
        let outcome = nuts_step(&ham, &mut rng, &mut state, eps, cfg.max_tree_depth);

        if m <= cfg.n_warmup {
            da.update(outcome.accept_stat);
            eps = da.eps();
            if m > init_buffer && m <= slow_end {
                welford.update(&state.q);
            }
            if window_ends.contains(&m) {
                if let Some(var) = welford.regularized_variance() {
                    ham.inv_mass = var;
                    welford.reset();
                    eps = find_reasonable_epsilon(&ham, &mut rng, &state);
                    da = DualAveraging::new(eps, cfg.target_accept);
                }
            }
            if m == cfg.n_warmup {
                eps = da.eps_bar();
            }
        } else {
            let t = m - cfg.n_warmup - 1;
            draws[t * dim..(t + 1) * dim].copy_from_slice(&state.q);
            if outcome.divergent {
                divergences += 1;
            }
            if outcome.depth_hit {
                depth_hits += 1;
            }
            accept_sum += outcome.accept_stat;
        }
    }

    Ok((
        draws,
        ChainStats {
            mean_accept: accept_sum / n_retained as f64,
            divergences,
            max_depth_hits: depth_hits,
            step_size: eps,
        },
    ))
}

/// Spot-check the analytic gradient against central finite differences
/// at one point. All coordinates are checked in small models; large
/// models check a random subset.
fn validate_gradient_at<M: LogDensity>(
    model: &M,
    q: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dim = model.dim();
    let mut grad = vec![0.0; dim];
    model.logp_grad(q, &mut grad);
    let coords: Vec<usize> = if dim <= 32 {
        (0..dim).collect()
    } else {
        (0..32).map(|_| rng.random_range(0..dim)).collect()
    };
    let mut scratch = vec![0.0; dim];
    let mut work = q.to_vec();
    let step = 1e-5;
    for &k in &coords {
        let orig = work[k];
        work[k] = orig + step;
        let up = model.logp_grad(&work, &mut scratch);
        work[k] = orig - step;
        let down = model.logp_grad(&work, &mut scratch);
        work[k] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (grad[k] - fd).abs() / (1.0 + fd.abs());
        if !rel.is_finite() || rel > 1e-4 {
            return Err(Error::Sampler(format!(
                "gradient check failed at coordinate {k}: analytic {} vs finite-difference {fd}",
                grad[k]
            )));
        }
    }
    Ok(())
}

/// Per-coordinate convergence diagnostics.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Diagnostic {
    pub name: String,
    pub split_rhat: f64,
    pub ess_bulk: f64,
}

/// Rank-normalized split R-hat and bulk effective sample size for every
/// coordinate. Needs at least two chains and 100 retained draws.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Vec<Diagnostic>> {
    if draws.n_chains < 2 {
        return Err(Error::Sampler("diagnostics need >= 2 chains".into()));
    }
    if draws.n_retained < 100 {
        return Err(Error::Sampler(format!(
            "diagnostics need >= 100 retained draws, have {}",
            draws.n_retained
        )));
    }
    let out: Vec<Diagnostic> = (0..draws.dim)
        .into_par_iter()
        .map(|k| {
            let chains: Vec<Vec<f64>> =
                (0..draws.n_chains).map(|c| draws.chain(c, k)).collect();
            let (rhat, ess) = rank_normalized_diagnostics(&chains);
            Diagnostic { name: draws.names[k].clone(), split_rhat: rhat, ess_bulk: ess }
        })
        .collect();
    Ok(out)
}

/// Diagnostics for a single named coordinate.
pub fn diagnostics_for(draws: &PosteriorDraws, name: &str) -> Result<Diagnostic> {
    let k = draws
        .coordinate_index(name)
        .ok_or_else(|| Error::Sampler(format!("unknown coordinate `{name}`")))?;
    let chains: Vec<Vec<f64>> = (0..draws.n_chains).map(|c| draws.chain(c, k)).collect();
    let (rhat, ess) = rank_normalized_diagnostics(&chains);
    Ok(Diagnostic { name: name.to_string(), split_rhat: rhat, ess_bulk: ess })
}

/// Split each chain in half, rank-normalize across the pooled draws,
/// then compute R-hat and the autocorrelation ESS with Geyer's initial
/// monotone truncation.
pub fn rank_normalized_diagnostics(chains: &[Vec<f64>]) -> (f64, f64) {
    let split = split_chains(chains);
    let normalized = rank_normalize(&split);
    (basic_rhat(&normalized), autocorr_ess(&normalized))
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains.iter().map(|c| c.len()).min().unwrap_or(0) / 2;
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replace values by normal quantiles of their pooled fractional ranks
/// (average ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut flat_ix = 0;
    for c in chains {
        for &v in c {
            indexed.push((v, flat_ix));
            flat_ix += 1;
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut jj = i;
        while jj + 1 < total && indexed[jj + 1].0 == indexed[i].0 {
            jj += 1;
        }
        let avg_rank = (i + jj) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=jj] {
            ranks[item.1] = avg_rank;
        }
        i = jj + 1;
    }
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    let mut flat_ix = 0;
    for c in chains {
        let mut z = Vec::with_capacity(c.len());
        for _ in c {
            let r = ranks[flat_ix];
            z.push(normal_quantile((r - 0.375) / (s + 0.25)));
            flat_ix += 1;
        }
        out.push(z);
    }
    out
}

fn chain_mean_var(chain: &[f64]) -> (f64, f64) {
    let n = chain.len() as f64;
    let mean = chain.iter().sum::<f64>() / n;
    let var = chain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| chain_mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b = n * stats.iter().map(|s| (s.0 - grand) * (s.0 - grand)).sum::<f64>() / (m - 1.0);
    let var_plus = (n - 1.0) / n * w + b / n;
    if w <= 0.0 {
        return 1.0;
    }
    (var_plus / w).sqrt()
}

/// Effective sample size from multi-chain autocorrelations, truncated
/// where Geyer's paired sums first go negative and forced monotone.
/// May exceed the number of draws for antithetic chains; no cap is
/// applied.
fn autocorr_ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| chain_mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let b = if m > 1 {
        n as f64 * stats.iter().map(|s| (s.0 - grand) * (s.0 - grand)).sum::<f64>()
            / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    // autocovariance at lag t for one chain (biased, n divisor)
    let autocov = |c: &[f64], mean: f64, t: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - t {
            s += (c[i] - mean) * (c[i + t] - mean);
        }
        s / n as f64
    };

    let rho = |t: usize, cached: &mut Vec<Option<f64>>| -> f64 {
        if let Some(Some(v)) = cached.get(t) {
            return *v;
        }
        let mean_ct = chains
            .iter()
            .zip(&stats)
            .map(|(c, s)| autocov(c, s.0, t))
            .sum::<f64>()
            / m as f64;
        let v = 1.0 - (w - mean_ct) / var_plus;
        if cached.len() <= t {
            cached.resize(t + 1, None);
        }
        cached[t] = Some(v);
        v
    };

    let mut cache: Vec<Option<f64>> = Vec::new();
    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let max_pairs = (n - 1) / 2;
    for k in 0..max_pairs {
        let pair = rho(2 * k, &mut cache) + rho(2 * k + 1, &mut cache);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += pair;
    }
    let tau = 2.0 * tau - 1.0;
    let tau = tau.max(1.0 / (m as f64 * n as f64)); // guard against nonpositive
    (m * n) as f64 / tau
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryTransform {
    Identity,
    Exp,
}

/// Percentile row (min, 5, 25, 50, 75, 95, max) of the pooled retained
/// draws of one coordinate, optionally exp-transformed (odds-ratio rows
/// from log-odds rows). The transform is applied to the percentile
/// values, so it commutes with the percentiles exactly.
pub fn summarize(
    draws: &PosteriorDraws,
    coordinate: &str,
    transform: SummaryTransform,
) -> Result<[f64; 7]> {
    let k = draws
        .coordinate_index(coordinate)
        .ok_or_else(|| Error::Sampler(format!("unknown coordinate `{coordinate}`")))?;
    let mut pooled = draws.pooled(k);
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut row = [
        pooled[0],
        percentile_sorted(&pooled, 0.05),
        percentile_sorted(&pooled, 0.25),
        percentile_sorted(&pooled, 0.50),
        percentile_sorted(&pooled, 0.75),
        percentile_sorted(&pooled, 0.95),
        pooled[pooled.len() - 1],
    ];
    if transform == SummaryTransform::Exp {
        for v in &mut row {
            *v = v.exp();
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent standard normal in `dim` dimensions.
    struct StdNormal {
        dim: usize,
    }

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for k in 0..self.dim {
                lp -= 0.5 * q[k] * q[k];
                grad[k] = -q[k];
            }
            lp
        }
    }

    /// Bivariate normal with correlation rho.
    struct Correlated2d {
        rho: f64,
    }

    impl LogDensity for Correlated2d {
        fn dim(&self) -> usize {
            2
        }
        fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
            let r = self.rho;
            let det = 1.0 - r * r;
            // precision matrix [[1,-r],[-r,1]]/det
            let gx = (q[0] - r * q[1]) / det;
            let gy = (q[1] - r * q[0]) / det;
            grad[0] = -gx;
            grad[1] = -gy;
            -0.5 * (q[0] * gx + q[1] * gy)
        }
    }

    /// Neal's funnel: v ~ N(0,3), x_k ~ N(0, exp(v/2)).
    struct Funnel {
        dim: usize,
    }

    impl LogDensity for Funnel {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
            let v = q[0];
            let inv_ev = (-v).exp();
            let mut lp = -v * v / 18.0;
            grad[0] = -v / 9.0;
            for k in 1..self.dim {
                let x = q[k];
                lp += -0.5 * v - 0.5 * x * x * inv_ev;
                grad[0] += -0.5 + 0.5 * x * x * inv_ev;
                grad[k] = -x * inv_ev;
            }
            lp
        }
    }

    fn quick_cfg(n_iterations: usize, n_warmup: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_iterations,
            n_warmup,
            n_chains: 4,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed,
            validate_gradient: true,
        }
    }

    #[test]
    fn standard_normal_moments() {
        let model = StdNormal { dim: 1 };
        let draws = sample(&model, &quick_cfg(3000, 1000, 42)).unwrap();
        let pooled = draws.pooled(0);
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let var = pooled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
        let d = diagnostics(&draws).unwrap();
        assert!(d[0].split_rhat < 1.01, "rhat {}", d[0].split_rhat);
    }

    #[test]
    fn correlated_normal_covariance() {
        let model = Correlated2d { rho: 0.9 };
        let draws = sample(&model, &quick_cfg(3000, 1000, 7)).unwrap();
        let x = draws.pooled(0);
        let y = draws.pooled(1);
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut cxx = 0.0;
        let mut cyy = 0.0;
        let mut cxy = 0.0;
        for i in 0..x.len() {
            cxx += (x[i] - mx) * (x[i] - mx);
            cyy += (y[i] - my) * (y[i] - my);
            cxy += (x[i] - mx) * (y[i] - my);
        }
        cxx /= n - 1.0;
        cyy /= n - 1.0;
        cxy /= n - 1.0;
        assert!((cxx - 1.0).abs() < 0.1, "var x {cxx}");
        assert!((cyy - 1.0).abs() < 0.1, "var y {cyy}");
        assert!((cxy - 0.9).abs() < 0.05, "cov {cxy}");
    }

    #[test]
    fn funnel_divergences_decrease_with_target_accept() {
        let model = Funnel { dim: 10 };
        let mut cfg = quick_cfg(2000, 1000, 11);
        cfg.target_accept = 0.8;
        let loose = sample(&model, &cfg).unwrap();
        cfg.target_accept = 0.99;
        let tight = sample(&model, &cfg).unwrap();
        assert!(
            loose.total_divergences() > 0,
            "expected divergences on the funnel at 0.8"
        );
        assert!(
            tight.total_divergences() < loose.total_divergences(),
            "divergences did not decrease: {} -> {}",
            loose.total_divergences(),
            tight.total_divergences()
        );
    }

    #[test]
    fn bit_exact_reproducibility() {
        let model = StdNormal { dim: 3 };
        let a = sample(&model, &quick_cfg(500, 250, 99)).unwrap();
        let b = sample(&model, &quick_cfg(500, 250, 99)).unwrap();
        for c in 0..a.n_chains {
            for t in 0..a.n_retained {
                for k in 0..a.dim {
                    assert_eq!(a.get(c, t, k).to_bits(), b.get(c, t, k).to_bits());
                }
            }
        }
        let c = sample(&model, &quick_cfg(500, 250, 100)).unwrap();
        assert_ne!(a.get(0, 0, 0).to_bits(), c.get(0, 0, 0).to_bits());
    }

    #[test]
    fn detailed_balance_ks_smoke() {
        let model = StdNormal { dim: 1 };
        let mut cfg = quick_cfg(9000, 1000, 3);
        cfg.n_chains = 4;
        let draws = sample(&model, &cfg).unwrap();
        let mut pooled = draws.pooled(0);
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // effective draws ~ 4 * 3500 correlated; KS on the pooled sample
        // with n replaced by the estimated ESS.
        let d = diagnostics(&draws).unwrap()[0].ess_bulk;
        let n_eff = d.min(pooled.len() as f64);
        assert!(n_eff >= 1e4, "need >= 1e4 effective draws, have {n_eff}");
        let mut ks = 0.0f64;
        let n = pooled.len() as f64;
        for (i, &v) in pooled.iter().enumerate() {
            let f = crate::numeric::normal_cdf(v);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((f - lo).abs()).max((f - hi).abs());
        }
        let t = n_eff.sqrt() * ks;
        // Kolmogorov asymptotic p-value
        let p: f64 = 2.0
            * (1..100)
                .map(|k| {
                    let k = k as f64;
                    (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * t * t).exp()
                })
                .sum::<f64>();
        assert!(p > 0.01, "KS test rejected: D={ks}, p={p}");
    }

    #[test]
    fn energy_conservation_small_step() {
        let model = Correlated2d { rho: 0.5 };
        let ham = Hamiltonian { model: &model, inv_mass: vec![1.0; 2] };
        let mut grad = vec![0.0; 2];
        let q = vec![0.3, -0.7];
        let logp = model.logp_grad(&q, &mut grad);
        let state = State { q, p: vec![0.4, 0.9], grad, logp };
        let h0 = -ham.log_joint(&state);
        let mut s = state;
        let mut max_drift = 0.0f64;
        for _ in 0..200 {
            s = ham.leapfrog(&s, 1.0, 1e-3);
            let h = -ham.log_joint(&s);
            max_drift = max_drift.max((h - h0).abs());
        }
        assert!(max_drift < 1e-4, "Hamiltonian drift {max_drift}");
    }

    #[test]
    fn rhat_flags_disagreeing_chains() {
        // Chains centered far apart. Under rank normalization two
        // disjoint chains top out near 1.83 however far apart they sit,
        // so the constructed disagreement uses four separated centers.
        let mut chains = Vec::new();
        let mut rng = derive_rng(5, 0);
        for center in [-15.0, -5.0, 5.0, 15.0] {
            let mut c = Vec::with_capacity(500);
            for _ in 0..500 {
                let z: f64 = rng.sample(StandardNormal);
                c.push(center + z);
            }
            chains.push(c);
        }
        let (rhat, _) = rank_normalized_diagnostics(&chains);
        assert!(rhat > 2.0, "rhat {rhat}");
        // the two-chain version still flags hard, just below 2
        let (rhat2, _) =
            rank_normalized_diagnostics(&[chains[0].clone(), chains[3].clone()]);
        assert!(rhat2 > 1.7, "rhat {rhat2}");
    }

    #[test]
    fn iid_chains_look_converged() {
        let mut chains = Vec::new();
        let mut rng = derive_rng(6, 0);
        for _ in 0..4 {
            let mut c = Vec::with_capacity(1000);
            for _ in 0..1000 {
                c.push(rng.sample::<f64, _>(StandardNormal));
            }
            chains.push(c);
        }
        let (rhat, ess) = rank_normalized_diagnostics(&chains);
        assert!(rhat < 1.01, "rhat {rhat}");
        assert!(ess > 0.5 * 4000.0, "ess {ess}");
    }

    #[test]
    fn antithetic_chain_ess_exceeds_draws() {
        // alternating sequences are super-efficient for the mean
        let mut chains = Vec::new();
        let mut rng = derive_rng(8, 0);
        for _ in 0..2 {
            let mut c = Vec::with_capacity(600);
            for t in 0..600 {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                let z: f64 = rng.sample(StandardNormal);
                c.push(sign * 1.0 + 0.01 * z);
            }
            chains.push(c);
        }
        let (_, ess) = rank_normalized_diagnostics(&chains);
        assert!(ess > 1200.0, "expected super-efficiency, ess {ess}");
    }

    #[test]
    fn diagnostics_preconditions() {
        let model = StdNormal { dim: 1 };
        let mut cfg = quick_cfg(130, 100, 1);
        cfg.n_chains = 2;
        let draws = sample(&model, &cfg).unwrap();
        assert!(diagnostics(&draws).is_err()); // 30 retained < 100
    }

    #[test]
    fn summarize_percentiles() {
        let model = StdNormal { dim: 1 };
        let draws = sample(&model, &quick_cfg(600, 300, 2)).unwrap();
        let row = summarize(&draws, "x[0]", SummaryTransform::Identity).unwrap();
        for wdw in row.windows(2) {
            assert!(wdw[0] <= wdw[1], "percentiles not monotone: {row:?}");
        }
        let exp_row = summarize(&draws, "x[0]", SummaryTransform::Exp).unwrap();
        for k in 0..7 {
            assert_abs_diff_eq!(exp_row[k], row[k].exp(), epsilon = 1e-12);
        }
        assert!(summarize(&draws, "nope", SummaryTransform::Identity).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SamplerConfig::default();
        cfg.n_warmup = cfg.n_iterations;
        assert!(cfg.validate().is_err());
        let mut cfg = SamplerConfig::default();
        cfg.n_chains = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = SamplerConfig::default();
        cfg.target_accept = 1.0;
        assert!(cfg.validate().is_err());
    }
}
