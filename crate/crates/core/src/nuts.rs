//! No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
//! step size adaptation and windowed diagonal metric estimation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelContext;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_DELTA_H: f64 = 1000.0;

pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Log density at `x`; `grad` receives its gradient.
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl LogDensity for ModelContext {
    fn dim(&self) -> usize {
        ModelContext::dim(self)
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(x, grad)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NutsError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("chain {chain}: no finite starting point found after {attempts} attempts")]
    Initialization { chain: usize, attempts: usize },
    #[error("chain {chain}: every warmup transition diverged (final step size {step_size:e}); the posterior is likely improper or the model misspecified")]
    AllDivergent { chain: usize, step_size: f64 },
    #[error("chain {chain}: step size search failed ({0})", .reason)]
    StepSize { chain: usize, reason: String },
    #[error("chain {chain} panicked")]
    Panic { chain: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub iter: usize,
    pub warmup: usize,
    pub chains: usize,
    pub cores: usize,
    pub adapt_delta: f64,
    pub max_treedepth: usize,
    pub seed: u64,
    /// Initial values are drawn uniformly from `(-init_radius, init_radius)`.
    pub init_radius: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iter: 2000,
            warmup: 1000,
            chains: 4,
            cores: 1,
            adapt_delta: 0.8,
            max_treedepth: 10,
            seed: 1234,
            init_radius: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), NutsError> {
        let fail = |m: &str| Err(NutsError::Config(m.to_string()));
        if self.iter == 0 {
            return fail("iter must be positive");
        }
        if self.warmup >= self.iter {
            return fail("warmup must be smaller than iter");
        }
        if self.chains == 0 {
            return fail("chains must be positive");
        }
        if self.cores == 0 {
            return fail("cores must be positive");
        }
        if !(self.adapt_delta > 0.0 && self.adapt_delta < 1.0) {
            return fail("adapt_delta must lie in (0, 1)");
        }
        if self.max_treedepth == 0 {
            return fail("max_treedepth must be positive");
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return fail("init_radius must be a nonnegative number");
        }
        Ok(())
    }
}

/// Post-warmup output of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub chain_id: usize,
    /// Unconstrained draws, one row per iteration.
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub divergent: Vec<bool>,
    pub tree_depth: Vec<usize>,
    pub n_leapfrog: Vec<usize>,
    pub accept_stat: Vec<f64>,
    pub energy: Vec<f64>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub warmup_divergences: usize,
    pub max_treedepth_hits: usize,
}

impl ChainOutput {
    pub fn divergences(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

/// One leapfrog step of size `eps` under the diagonal inverse metric.
/// Returns the new log density.
pub fn leapfrog<M: LogDensity + ?Sized>(
    model: &M,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    inv_metric: &[f64],
    eps: f64,
) -> f64 {
    for (pi, g) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * eps * g;
    }
    for ((qi, pi), m) in q.iter_mut().zip(p.iter()).zip(inv_metric) {
        *qi += eps * m * pi;
    }
    let logp = model.log_density_and_gradient(q, grad);
    for (pi, g) in p.iter_mut().zip(grad.iter()) {
        *pi += 0.5 * eps * g;
    }
    logp
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
}

fn hamiltonian(s: &State, inv_metric: &[f64]) -> f64 {
    let h = -s.logp + kinetic(&s.p, inv_metric);
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
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

fn sharp(p: &[f64], inv_metric: &[f64]) -> Vec<f64> {
    p.iter().zip(inv_metric).map(|(p, m)| p * m).collect()
}

fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    let dot = |a: &[f64]| a.iter().zip(rho).map(|(a, r)| a * r).sum::<f64>();
    dot(p_sharp_minus) > 0.0 && dot(p_sharp_plus) > 0.0
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| a + b).collect()
}

/// Endpoint momenta of a subtree.
struct Edge {
    p: Vec<f64>,
    p_sharp: Vec<f64>,
}

struct Transition<'a, M: LogDensity + ?Sized> {
    model: &'a M,
    inv_metric: &'a [f64],
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<M: LogDensity + ?Sized> Transition<'_, M> {
    /// Extend the trajectory by `2^depth` leapfrog steps from `z` in the
    /// direction given by the sign of `eps`. Returns `(valid, sample,
    /// log_sum_weight, rho, begin edge, end edge)`.
    fn build_tree<R: Rng>(
        &mut self,
        depth: usize,
        z: &mut State,
        rng: &mut R,
    ) -> (bool, State, f64, Vec<f64>, Edge, Edge) {
        if depth == 0 {
            z.logp = leapfrog(self.model, &mut z.q, &mut z.p, &mut z.grad, self.inv_metric, self.eps);
            self.n_leapfrog += 1;
            let h = hamiltonian(z, self.inv_metric);
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            let lw = self.h0 - h;
            self.sum_metro_prob += if lw > 0.0 { 1.0 } else { lw.exp() };
            let ps = sharp(&z.p, self.inv_metric);
            let edge = || Edge { p: z.p.clone(), p_sharp: ps.clone() };
            let (b, e) = (edge(), edge());
            return (!self.divergent, z.clone(), lw, z.p.clone(), b, e);
        }

        let (valid, init_sample, lsw_init, rho_init, beg, init_end) = self.build_tree(depth - 1, z, rng);
        if !valid {
            return (false, init_sample, lsw_init, rho_init, beg, init_end);
        }
        let (valid, final_sample, lsw_final, rho_final, final_beg, end) = self.build_tree(depth - 1, z, rng);
        if !valid {
            return (false, final_sample, lsw_final, rho_final, beg, end);
        }

        let lsw = log_sum_exp(lsw_init, lsw_final);
        let accept = (lsw_final - lsw).exp();
        let sample = if rng.random::<f64>() < accept { final_sample } else { init_sample };

        let rho = add(&rho_init, &rho_final);
        let mut persist = no_u_turn(&beg.p_sharp, &end.p_sharp, &rho);
        persist &= no_u_turn(&beg.p_sharp, &final_beg.p_sharp, &add(&rho_init, &final_beg.p));
        persist &= no_u_turn(&init_end.p_sharp, &end.p_sharp, &add(&rho_final, &init_end.p));
        (persist, sample, lsw, rho, beg, end)
    }
}

/// Result of one NUTS transition.
#[derive(Debug, Clone)]
struct Step {
    accept_stat: f64,
    depth: usize,
    n_leapfrog: usize,
    divergent: bool,
    energy: f64,
}

fn sample_momentum<R: Rng>(p: &mut [f64], inv_metric: &[f64], rng: &mut R) {
    for (pi, m) in p.iter_mut().zip(inv_metric) {
        let z: f64 = rng.sample(StandardNormal);
        *pi = z / m.sqrt();
    }
}

fn transition<M: LogDensity + ?Sized, R: Rng>(
    model: &M,
    current: &mut State,
    inv_metric: &[f64],
    eps: f64,
    max_depth: usize,
    rng: &mut R,
) -> Step {
    sample_momentum(&mut current.p, inv_metric, rng);
    let h0 = hamiltonian(current, inv_metric);
    let mut t = Transition { model, inv_metric, eps, h0, n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };

    let ps = sharp(&current.p, inv_metric);
    let mut fwd = current.clone();
    let mut bck = current.clone();
    let mut left = Edge { p: current.p.clone(), p_sharp: ps.clone() };
    let mut right = Edge { p: current.p.clone(), p_sharp: ps };
    let mut rho = current.p.clone();
    let mut log_sum_weight = 0.0;
    let mut sample = current.clone();
    let mut depth = 0;

    while depth < max_depth {
        let forward = rng.random::<f64>() > 0.5;
        t.eps = if forward { eps } else { -eps };
        let z = if forward { &mut fwd } else { &mut bck };
        let (valid, proposal, lsw_sub, rho_sub, inner, outer) = t.build_tree(depth, z, rng);
        if !valid {
            break;
        }
        depth += 1;

        if lsw_sub > log_sum_weight || rng.random::<f64>() < (lsw_sub - log_sum_weight).exp() {
            sample = proposal;
        }
        log_sum_weight = log_sum_exp(log_sum_weight, lsw_sub);
        let rho_old = rho;
        rho = add(&rho_old, &rho_sub);

        // Check the whole trajectory, then each half extended by the first
        // state of the other half.
        let persist = if forward {
            let old_right = std::mem::replace(&mut right, outer);
            no_u_turn(&left.p_sharp, &right.p_sharp, &rho)
                && no_u_turn(&left.p_sharp, &inner.p_sharp, &add(&rho_old, &inner.p))
                && no_u_turn(&old_right.p_sharp, &right.p_sharp, &add(&rho_sub, &old_right.p))
        } else {
            let old_left = std::mem::replace(&mut left, outer);
            no_u_turn(&left.p_sharp, &right.p_sharp, &rho)
                && no_u_turn(&left.p_sharp, &old_left.p_sharp, &add(&rho_sub, &old_left.p))
                && no_u_turn(&inner.p_sharp, &right.p_sharp, &add(&rho_old, &inner.p))
        };
        if !persist {
            break;
        }
    }

    let energy = hamiltonian(&sample, inv_metric);
    let n = t.n_leapfrog;
    current.q = sample.q;
    current.grad = sample.grad;
    current.logp = sample.logp;
    Step {
        accept_stat: if n > 0 { t.sum_metro_prob / n as f64 } else { 0.0 },
        depth,
        n_leapfrog: n,
        divergent: t.divergent,
        energy,
    }
}

/// Dual-averaging step size adaptation.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    delta: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(delta: f64, eps: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps).ln(),
            delta,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Update with the latest acceptance statistic; returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Windowed schedule for diagonal metric estimation.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
}

impl WindowSchedule {
    pub fn new(warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if warmup < init + term + base {
            init = (0.15 * warmup as f64) as usize;
            term = (0.1 * warmup as f64) as usize;
            base = warmup - (init + term);
        }
        WindowSchedule {
            warmup,
            init_buffer: init,
            term_buffer: term,
            window_size: base,
            next_window: (init + base).saturating_sub(1),
            counter: 0,
        }
    }

    /// Buffers and the first window length.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.init_buffer, self.window_size, self.term_buffer)
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn window_end(&self) -> bool {
        self.counter == self.next_window && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last {
            let boundary = self.next_window + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_window = last;
            }
        }
    }
}

/// Streaming sample variance (Welford).
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n as f64;
            *s += d * (v - *m);
        }
    }

    /// Regularized variance estimate shrunk toward `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

fn find_reasonable_step_size<M: LogDensity + ?Sized, R: Rng>(
    model: &M,
    state: &State,
    inv_metric: &[f64],
    mut eps: f64,
    chain: usize,
    rng: &mut R,
) -> Result<f64, NutsError> {
    let target = 0.8f64.ln();
    let mut z = state.clone();
    sample_momentum(&mut z.p, inv_metric, rng);
    let h0 = hamiltonian(&z, inv_metric);
    z.logp = leapfrog(model, &mut z.q, &mut z.p, &mut z.grad, inv_metric, eps);
    let dh = h0 - hamiltonian(&z, inv_metric);
    let direction = if dh > target { 1.0 } else { -1.0 };
    loop {
        let mut z = state.clone();
        sample_momentum(&mut z.p, inv_metric, rng);
        let h0 = hamiltonian(&z, inv_metric);
        z.logp = leapfrog(model, &mut z.q, &mut z.p, &mut z.grad, inv_metric, eps);
        let dh = h0 - hamiltonian(&z, inv_metric);
        if (direction > 0.0 && !(dh > target)) || (direction < 0.0 && !(dh < target)) {
            return Ok(eps);
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(NutsError::StepSize { chain, reason: "posterior appears improper".into() });
        }
        if eps == 0.0 {
            return Err(NutsError::StepSize { chain, reason: "no acceptable step size".into() });
        }
    }
}

fn initial_state<M: LogDensity + ?Sized, R: Rng>(
    model: &M,
    radius: f64,
    chain: usize,
    rng: &mut R,
) -> Result<State, NutsError> {
    let dim = model.dim();
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let q: Vec<f64> = (0..dim)
            .map(|_| if radius > 0.0 { rng.random_range(-radius..radius) } else { 0.0 })
            .collect();
        let mut grad = vec![0.0; dim];
        let logp = model.log_density_and_gradient(&q, &mut grad);
        if logp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(State { q, p: vec![0.0; dim], grad, logp });
        }
    }
    Err(NutsError::Initialization { chain, attempts: ATTEMPTS })
}

/// Per-chain generator: one stream per chain from the shared seed.
pub fn chain_rng(seed: u64, chain_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_id as u64);
    rng
}

/// Run warmup and sampling for one chain.
pub fn sample_chain<M: LogDensity + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    chain_id: usize,
) -> Result<ChainOutput, NutsError> {
    config.validate()?;
    let dim = model.dim();
    if dim == 0 {
        return Err(NutsError::Config("the target has no parameters".into()));
    }
    let mut rng = chain_rng(config.seed, chain_id);
    let mut state = initial_state(model, config.init_radius, chain_id, &mut rng)?;
    let mut inv_metric = vec![1.0; dim];
    let mut eps = find_reasonable_step_size(model, &state, &inv_metric, 1.0, chain_id, &mut rng)?;
    let mut da = DualAveraging::new(config.adapt_delta, eps);
    let mut windows = WindowSchedule::new(config.warmup);
    let mut welford = Welford::new(dim);
    let mut warmup_divergences = 0;

    for _ in 0..config.warmup {
        let step = transition(model, &mut state, &inv_metric, eps, config.max_treedepth, &mut rng);
        warmup_divergences += step.divergent as usize;
        eps = da.learn(step.accept_stat);

        if windows.in_window() {
            welford.add(&state.q);
        }
        if windows.window_end() {
            windows.compute_next_window();
            inv_metric = welford.regularized();
            welford = Welford::new(dim);
            eps = find_reasonable_step_size(model, &state, &inv_metric, eps, chain_id, &mut rng)?;
            da.restart(eps);
        }
        windows.counter += 1;
    }
    if config.warmup > 0 {
        if warmup_divergences == config.warmup {
            return Err(NutsError::AllDivergent { chain: chain_id, step_size: eps });
        }
        eps = da.final_step_size();
    }

    let n = config.iter - config.warmup;
    let mut out = ChainOutput {
        chain_id,
        draws: Vec::with_capacity(n),
        log_density: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        tree_depth: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        energy: Vec::with_capacity(n),
        step_size: eps,
        inv_metric: inv_metric.clone(),
        warmup_divergences,
        max_treedepth_hits: 0,
    };
    for _ in 0..n {
        let step = transition(model, &mut state, &inv_metric, eps, config.max_treedepth, &mut rng);
        out.draws.push(state.q.clone());
        out.log_density.push(state.logp);
        out.divergent.push(step.divergent);
        out.tree_depth.push(step.depth);
        out.n_leapfrog.push(step.n_leapfrog);
        out.accept_stat.push(step.accept_stat);
        out.energy.push(step.energy);
        out.max_treedepth_hits += (step.depth >= config.max_treedepth) as usize;
    }
    Ok(out)
}

/// Run every chain, at most `config.cores` at a time. Output order follows
/// chain id regardless of scheduling.
pub fn sample<M: LogDensity + ?Sized>(model: &M, config: &SamplerConfig) -> Result<Vec<ChainOutput>, NutsError> {
    config.validate()?;
    let workers = config.cores.min(config.chains);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<ChainOutput, NutsError>>>> =
        Mutex::new((0..config.chains).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let chain = next.fetch_add(1, Ordering::SeqCst);
                if chain >= config.chains {
                    break;
                }
                let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    sample_chain(model, config, chain)
                }))
                .unwrap_or(Err(NutsError::Panic { chain }));
                results.lock().unwrap()[chain] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every chain ran"))
        .collect()
}
