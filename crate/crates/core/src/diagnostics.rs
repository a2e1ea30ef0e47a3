//! Convergence and model comparison statistics.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{logistic, Family, ModelContext};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("need at least {need} draws per chain, got {got}")]
    TooFewDraws { need: usize, got: usize },
    #[error("chains have different lengths")]
    Ragged,
    #[error("draws are constant; the statistic is undefined")]
    Degenerate,
    #[error("pointwise log likelihood matrix is empty or ragged")]
    BadMatrix,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Split every chain into two halves, dropping the middle draw of odd chains.
fn split(chains: &[Vec<f64>], min_len: usize) -> Result<Vec<&[f64]>, DiagnosticError> {
    let n = chains.first().map_or(0, Vec::len);
    if chains.iter().any(|c| c.len() != n) {
        return Err(DiagnosticError::Ragged);
    }
    if n < min_len {
        return Err(DiagnosticError::TooFewDraws { need: min_len, got: n });
    }
    let half = n / 2;
    Ok(chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect())
}

fn all_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flat_map(|c| c.first()).next();
    match first {
        Some(v) => chains.iter().flatten().all(|x| x == v),
        None => true,
    }
}

/// Split-chain potential scale reduction, `sqrt(V / W)`.
///
/// Chains that are individually constant at different values give
/// `f64::INFINITY`; all-constant input is reported as degenerate.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticError> {
    let parts = split(chains, 4)?;
    if all_constant(chains) {
        return Err(DiagnosticError::Degenerate);
    }
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let w = mean(&parts.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b = n * sample_var(&means);
    if w == 0.0 {
        return Ok(f64::INFINITY);
    }
    let v = (n - 1.0) / n * w + b / n;
    Ok((v / w).sqrt())
}

/// Biased autocovariance at lags `0..max_lag`.
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..max_lag.min(n))
        .map(|t| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Effective sample size from split chains using Geyer's initial positive
/// and initial monotone sequence estimators.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64, DiagnosticError> {
    let parts = split(chains, 8)?;
    if all_constant(chains) {
        return Err(DiagnosticError::Degenerate);
    }
    let m = parts.len();
    let n = parts[0].len();
    // Autocovariances are computed in blocks as the sequence grows.
    let mut acov: Vec<Vec<f64>> = parts.iter().map(|c| autocovariance(c, 64.min(n))).collect();
    let grow = |acov: &mut Vec<Vec<f64>>, lag: usize| {
        if lag >= acov[0].len() && acov[0].len() < n {
            let want = (2 * lag).min(n);
            for (a, c) in acov.iter_mut().zip(&parts) {
                *a = autocovariance(c, want);
            }
        }
    };
    let chain_means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let chain_var: Vec<f64> = acov.iter().map(|a| a[0] * n as f64 / (n - 1) as f64).collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (n - 1) as f64 / n as f64;
    if m > 1 {
        var_plus += sample_var(&chain_means);
    }
    if var_plus <= 0.0 {
        return Err(DiagnosticError::Degenerate);
    }
    let mean_acov = |acov: &Vec<Vec<f64>>, t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;

    let mut rho = vec![0.0; n + 3];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = 1.0 - (mean_var - mean_acov(&acov, 1)) / var_plus;
    rho[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        grow(&mut acov, t + 2);
        even = 1.0 - (mean_var - mean_acov(&acov, t + 1)) / var_plus;
        odd = 1.0 - (mean_var - mean_acov(&acov, t + 2)) / var_plus;
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 4 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    Ok(total / tau)
}

/// Posterior standard deviation divided by the square root of the ESS.
pub fn mcse(chains: &[Vec<f64>]) -> Result<f64, DiagnosticError> {
    let e = ess(chains)?;
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    Ok(sample_var(&all).sqrt() / e.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    pub mcse: Option<f64>,
    /// Draws were constant, so the statistics above are absent.
    pub degenerate: bool,
    /// The estimator reported more effective draws than actual draws.
    pub ess_exceeds_draws: bool,
}

pub fn parameter_diagnostics(chains: &[Vec<f64>]) -> ParameterDiagnostics {
    let rhat = split_rhat(chains).ok();
    let ess = ess(chains).ok();
    let mcse = mcse(chains).ok();
    let total: usize = chains.iter().map(Vec::len).sum();
    ParameterDiagnostics {
        rhat,
        ess,
        mcse,
        degenerate: all_constant(chains),
        ess_exceeds_draws: ess.is_some_and(|e| e > total as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicResult {
    pub waic: f64,
    pub lppd: f64,
    pub p_waic: f64,
}

/// WAIC on the deviance scale from a draws-by-observations matrix of
/// pointwise log likelihoods.
pub fn waic(loglik: &[Vec<f64>]) -> Result<WaicResult, DiagnosticError> {
    let s = loglik.len();
    let n = loglik.first().map_or(0, Vec::len);
    if s < 2 || n == 0 || loglik.iter().any(|r| r.len() != n) {
        return Err(DiagnosticError::BadMatrix);
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut col = vec![0.0; s];
    for i in 0..n {
        for (c, row) in col.iter_mut().zip(loglik) {
            *c = row[i];
        }
        let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lppd += mx + (col.iter().map(|v| (v - mx).exp()).sum::<f64>() / s as f64).ln();
        p_waic += sample_var(&col);
    }
    Ok(WaicResult { waic: -2.0 * (lppd - p_waic), lppd, p_waic })
}

/// One replicate outcome per observation given the linear predictor.
pub fn simulate_outcomes<R: Rng>(
    family: Family,
    eta: &[f64],
    sigma: f64,
    trials: Option<&[f64]>,
    rng: &mut R,
) -> Vec<f64> {
    eta.iter()
        .enumerate()
        .map(|(i, &e)| match family {
            Family::Gaussian => {
                if sigma > 0.0 {
                    Normal::new(e, sigma).map_or(e, |d| d.sample(rng))
                } else {
                    e
                }
            }
            Family::Bernoulli => (rng.random::<f64>() < logistic(e)) as u8 as f64,
            Family::Binomial => {
                let n = trials.map_or(1.0, |t| t[i]) as u64;
                Binomial::new(n, logistic(e)).map_or(f64::NAN, |d| d.sample(rng) as f64)
            }
            Family::Poisson => {
                let mu = e.exp();
                if mu > 0.0 {
                    Poisson::new(mu).map_or(f64::NAN, |d| d.sample(rng))
                } else {
                    0.0
                }
            }
        })
        .collect()
}

/// Replicate outcomes, one row per unconstrained draw.
pub fn posterior_predict<R: Rng>(ctx: &ModelContext, draws: &[Vec<f64>], rng: &mut R) -> Vec<Vec<f64>> {
    draws
        .iter()
        .map(|x| {
            let eta = ctx.linear_predictor(x);
            let sigma = ctx.sigma(x).unwrap_or(0.0);
            simulate_outcomes(ctx.family(), &eta, sigma, ctx.data.trials.as_deref(), rng)
        })
        .collect()
}

/// Per-draw mean of the replicated outcomes.
pub fn mean_ppd(replicates: &[Vec<f64>]) -> Vec<f64> {
    replicates.iter().map(|r| mean(r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() || bins == 0 || !lo.is_finite() || !hi.is_finite() {
            return Histogram { edges: Vec::new(), counts: Vec::new() };
        }
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Marginal energy and energy transition distributions of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDiagnostics {
    pub e_bfmi: Option<f64>,
    pub marginal: Histogram,
    pub transition: Histogram,
}

pub fn energy_diagnostics(energy: &[f64], bins: usize) -> EnergyDiagnostics {
    let m = if energy.is_empty() { 0.0 } else { mean(energy) };
    let centered: Vec<f64> = energy.iter().map(|e| e - m).collect();
    let diffs: Vec<f64> = energy.windows(2).map(|w| w[1] - w[0]).collect();
    let denom: f64 = centered.iter().map(|c| c * c).sum();
    let e_bfmi = (energy.len() > 1 && denom > 0.0).then(|| diffs.iter().map(|d| d * d).sum::<f64>() / denom);
    EnergyDiagnostics {
        e_bfmi,
        marginal: Histogram::new(&centered, bins),
        transition: Histogram::new(&diffs, bins),
    }
}
