//! Posterior summaries, printed layouts, termination distances and
//! exposure-decay curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{parameter_diagnostics, ParameterDiagnostics, WaicResult};
use crate::kernels::{termination_distance, KernelKind};

/// Normal-consistency constant for the median absolute deviation.
pub const MAD_CONSTANT: f64 = 1.4826;

pub const QUANTILE_PROBS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SummaryError {
    #[error("no draws to summarize")]
    Empty,
    #[error("termination distances are defined for spatial kernels only, got {0}")]
    NotSpatial(KernelKind),
    #[error("{what} must lie in (0, 1), got {value}")]
    OutOfUnitInterval { what: &'static str, value: f64 },
    #[error("max_value must be positive, got {0}")]
    BadMaxValue(f64),
    #[error("scale draws must be positive, found {0}")]
    NonPositiveDraw(f64),
}

/// Type-7 quantile of sorted data: linear interpolation between order
/// statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(values: &[f64]) -> f64 {
    quantile_sorted(&sorted(values), 0.5)
}

/// `1.4826 * median(|x - median(x)|)`.
pub fn mad_sd(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_CONSTANT * median(&dev)
}

/// How a quantity is grouped in the printed summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Coefficient,
    Auxiliary,
    GroupSd,
    GroupEffect,
    MeanPpd,
    LogPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub role: Role,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub mad_sd: f64,
    /// At [`QUANTILE_PROBS`].
    pub quantiles: [f64; 5],
    pub diagnostics: ParameterDiagnostics,
}

/// Summarize one quantity given its draws split by chain.
pub fn summarize_draws(name: &str, role: Role, chains: &[Vec<f64>]) -> Result<ParameterSummary, SummaryError> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(SummaryError::Empty);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = if all.len() > 1 {
        (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let s = sorted(&all);
    let quantiles = QUANTILE_PROBS.map(|p| quantile_sorted(&s, p));
    Ok(ParameterSummary {
        name: name.to_string(),
        role,
        mean,
        sd,
        median: quantiles[2],
        mad_sd: mad_sd(&all),
        quantiles,
        diagnostics: parameter_diagnostics(chains),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub factor: String,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    /// e.g. `gaussian [identity]`.
    pub family: String,
    pub formula: String,
    pub observations: usize,
    pub intercept: bool,
    pub fixed: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub spatial_temporal: usize,
    pub group: Option<GroupInfo>,
    pub response: String,
    pub posterior_sample_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerTotals {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub max_treedepth_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub engine_version: String,
    pub seed: u64,
    pub header: ModelHeader,
    pub parameters: Vec<ParameterSummary>,
    pub waic: Option<WaicResult>,
    pub sampler: SamplerTotals,
}

fn fmt_num(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    // Avoid printing "-0.0".
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn table(rows: &[(String, Vec<String>)], header: &[&str], lead: &str) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).chain([lead.len()]).max().unwrap_or(0);
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for (_, cells) in rows {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{lead:<name_w$}");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, " {h:<w$}");
    }
    out.push('\n');
    for (name, cells) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, " {c:<w$}");
        }
        out.push('\n');
    }
    out
}

impl FitSummary {
    pub fn get(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    fn with_role(&self, role: Role) -> impl Iterator<Item = &ParameterSummary> {
        self.parameters.iter().filter(move |p| p.role == role)
    }

    fn header_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        let function = if h.group.is_some() { "stap_glmer" } else { "stap_glm" };
        let _ = writeln!(out, "{function}");
        let _ = writeln!(out, " family:       {}", h.family);
        let _ = writeln!(out, " formula:      {}", h.formula);
        let _ = writeln!(out, " observations: {}", h.observations);
        let _ = writeln!(out, " Intercept:  {}", if h.intercept { "TRUE" } else { "FALSE" });
        let _ = writeln!(out, " fixed predictors:   {}", h.fixed);
        let _ = writeln!(out, " spatial predictors:  {}", h.spatial);
        let _ = writeln!(out, " temporal predictors:  {}", h.temporal);
        let _ = writeln!(out, " spatial-temporal predictors:  {}", h.spatial_temporal);
        out
    }

    /// Median / MAD_SD printout.
    pub fn render_text(&self, digits: usize) -> String {
        let mut out = self.header_text();
        out.push_str("------\n");
        let med = |p: &ParameterSummary| (p.name.clone(), vec![fmt_num(p.median, digits), fmt_num(p.mad_sd, digits)]);
        let coefs: Vec<_> = self.with_role(Role::Coefficient).map(med).collect();
        out.push_str(&table(&coefs, &["Median", "MAD_SD"], ""));
        let aux: Vec<_> = self.with_role(Role::Auxiliary).map(med).collect();
        if !aux.is_empty() {
            out.push_str("\nAuxiliary parameter(s):\n");
            out.push_str(&table(&aux, &["Median", "MAD_SD"], ""));
        }
        if let Some(g) = &self.header.group {
            out.push_str("\nError terms:\n");
            let mut rows = Vec::new();
            for p in self.with_role(Role::GroupSd) {
                rows.push((format!(" {}", g.factor), vec!["(Intercept)".to_string(), fmt_num(p.median, digits)]));
            }
            for p in self.with_role(Role::Auxiliary).filter(|p| p.name == "sigma") {
                rows.push((" Residual".to_string(), vec![String::new(), fmt_num(p.median, digits)]));
            }
            out.push_str(&table(&rows, &["Name", "Std.Dev."], " Groups"));
            let _ = writeln!(out, "Num.levels: {} {}", g.factor, g.levels);
        }
        if let Some(p) = self.with_role(Role::MeanPpd).next() {
            out.push('\n');
            out.push_str(&mean_ppd_block(&self.header.response, p, digits));
        }
        out.push_str("\n------\n");
        let _ = writeln!(out, "engine: stap {}  seed: {}", self.engine_version, self.seed);
        out
    }

    /// Mean / sd / quantile table with convergence diagnostics.
    pub fn render_detailed(&self, digits: usize) -> String {
        let h = &self.header;
        let mut out = String::from("Model Info:\n\n");
        let function = if h.group.is_some() { "stap_glmer" } else { "stap_glm" };
        let _ = writeln!(out, " function:     {function}");
        let _ = writeln!(out, " family:       {}", h.family);
        let _ = writeln!(out, " formula:      {}", h.formula);
        let _ = writeln!(out, " sample:       {} (posterior sample size)", h.posterior_sample_size);
        let _ = writeln!(out, " observations: {}", h.observations);
        if h.spatial > 0 {
            let _ = writeln!(out, " Spatial Predictors:   {}", h.spatial);
        }
        if h.temporal > 0 {
            let _ = writeln!(out, " Temporal Predictors:   {}", h.temporal);
        }
        if h.spatial_temporal > 0 {
            let _ = writeln!(out, " Spatial-Temporal Predictors:   {}", h.spatial_temporal);
        }
        if let Some(w) = &self.waic {
            let _ = writeln!(out, " WAIC: {}", fmt_num(w.waic, 0));
        }
        out.push_str("\nEstimates:\n");
        let shown: Vec<&ParameterSummary> =
            self.parameters.iter().filter(|p| p.role != Role::GroupEffect).collect();
        let rows: Vec<_> = shown
            .iter()
            .map(|p| {
                let mut cells = vec![fmt_num(p.mean, digits), fmt_num(p.sd, digits)];
                cells.extend(p.quantiles.iter().map(|q| fmt_num(*q, digits)));
                (p.name.clone(), cells)
            })
            .collect();
        out.push_str(&table(&rows, &["mean", "sd", "2.5%", "25%", "50%", "75%", "97.5%"], ""));
        out.push_str("\nDiagnostics:\n");
        let opt = |v: Option<f64>, d: usize| v.map_or("NA".to_string(), |v| fmt_num(v, d));
        let rows: Vec<_> = shown
            .iter()
            .map(|p| {
                let d = &p.diagnostics;
                (p.name.clone(), vec![opt(d.mcse, digits), opt(d.rhat, 2), opt(d.ess, 0)])
            })
            .collect();
        out.push_str(&table(&rows, &["mcse", "Rhat", "n_eff"], ""));
        out.push_str(
            "\nFor each parameter, mcse is Monte Carlo standard error, n_eff is a crude measure\n\
             of effective sample size, and Rhat is the potential scale reduction factor\n\
             on split chains (at convergence Rhat=1).\n",
        );
        out
    }
}

/// The "Sample avg. posterior predictive distribution" block.
pub fn mean_ppd_block(response: &str, p: &ParameterSummary, digits: usize) -> String {
    let row = (p.name.clone(), vec![fmt_num(p.median, digits), fmt_num(p.mad_sd, digits)]);
    format!(
        "Sample avg. posterior predictive distribution of {response}:\n{}",
        table(&[row], &["Median", "MAD_SD"], "")
    )
}

/// Lower, median and upper termination distance across draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminationRow {
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

/// Quantiles of the distance at which the spatial weight falls to
/// `exposure_limit`, per scale draw, truncated at `max_value`.
pub fn stap_termination(
    theta_draws: &[f64],
    kind: KernelKind,
    exposure_limit: f64,
    prob: f64,
    max_value: f64,
) -> Result<TerminationRow, SummaryError> {
    if !kind.is_spatial() {
        return Err(SummaryError::NotSpatial(kind));
    }
    for (what, value) in [("exposure_limit", exposure_limit), ("prob", prob)] {
        if !(value > 0.0 && value < 1.0) {
            return Err(SummaryError::OutOfUnitInterval { what, value });
        }
    }
    if !(max_value > 0.0) {
        return Err(SummaryError::BadMaxValue(max_value));
    }
    if theta_draws.is_empty() {
        return Err(SummaryError::Empty);
    }
    let mut d = Vec::with_capacity(theta_draws.len());
    for &t in theta_draws {
        if !(t > 0.0) {
            return Err(SummaryError::NonPositiveDraw(t));
        }
        let v = termination_distance(kind, t, exposure_limit).map_err(|_| SummaryError::NonPositiveDraw(t))?;
        d.push(v.min(max_value));
    }
    let s = sorted(&d);
    Ok(TerminationRow {
        lower: quantile_sorted(&s, (1.0 - prob) / 2.0),
        median: quantile_sorted(&s, 0.5),
        upper: quantile_sorted(&s, (1.0 + prob) / 2.0),
    })
}

fn percent_label(p: f64) -> String {
    let s = format!("{:.3}", p * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}

/// Comma-separated table with an unnamed label column and one column per
/// interval quantile, e.g. `,2.5%,50%,97.5%`.
pub fn termination_table(rows: &[(String, TerminationRow)], prob: f64, digits: usize) -> String {
    let mut out = format!(
        ",{},{},{}\n",
        percent_label((1.0 - prob) / 2.0),
        percent_label(0.5),
        percent_label((1.0 + prob) / 2.0)
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{label},{},{},{}",
            fmt_num(r.lower, digits),
            fmt_num(r.median, digits),
            fmt_num(r.upper, digits)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

/// Pointwise posterior interval of the kernel weight on a grid of
/// distances or times.
pub fn exposure_curve(theta_draws: &[f64], kind: KernelKind, grid: &[f64], prob: f64) -> Vec<CurvePoint> {
    grid.iter()
        .map(|&x| {
            let w: Vec<f64> = theta_draws.iter().map(|&t| kind.eval_with_scale_derivative(x, t).0).collect();
            let s = sorted(&w);
            CurvePoint {
                x,
                lower: quantile_sorted(&s, (1.0 - prob) / 2.0),
                median: quantile_sorted(&s, 0.5),
                upper: quantile_sorted(&s, (1.0 + prob) / 2.0),
            }
        })
        .collect()
}
