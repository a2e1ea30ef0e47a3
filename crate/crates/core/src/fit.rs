//! End-to-end fitting: tables in, natural-scale draws and summaries out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_exposure_index, IdColumns, Table, TermReport};
use crate::diagnostics::{
    energy_diagnostics, mean_ppd, posterior_predict, waic, EnergyDiagnostics, ParameterDiagnostics, WaicResult,
};
use crate::error::StapError;
use crate::formula::{parse_formula, FormulaSpec, Response, StapKind};
use crate::kernels::{theta_upper_bound_with_quantile, KernelKind, DEFAULT_BOUND_QUANTILE};
use crate::model::{Component, Family, ModelContext, PriorSpec};
use crate::nuts::{sample, ChainOutput, SamplerConfig};
use crate::summary::{
    stap_termination, summarize_draws, FitSummary, GroupInfo, ModelHeader, Role, SamplerTotals, TerminationRow,
};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything about the model except the data and the sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub formula: String,
    pub family: Family,
    pub subject_id: String,
    /// Extra key columns tying measurements to BEF rows, e.g. a visit ID.
    pub group_id: Vec<String>,
    pub max_distance: f64,
    pub theta_bound_quantile: f64,
    pub priors: PriorSpec,
    pub waic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            formula: String::new(),
            family: Family::Gaussian,
            subject_id: "subject_ID".to_string(),
            group_id: Vec::new(),
            max_distance: 5.0,
            theta_bound_quantile: DEFAULT_BOUND_QUANTILE,
            priors: PriorSpec::default(),
            waic: false,
        }
    }
}

/// A model ready to sample.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub formula_text: String,
    pub spec: FormulaSpec,
    pub context: ModelContext,
    pub reports: Vec<TermReport>,
}

/// Parse the formula, index the BEF tables and assemble the posterior.
pub fn prepare(
    config: &ModelConfig,
    subjects: &Table,
    distances: Option<&Table>,
    times: Option<&Table>,
) -> Result<PreparedModel, StapError> {
    let spec = parse_formula(&config.formula)?;
    let groups: Vec<&str> = config.group_id.iter().map(String::as_str).collect();
    let ids = IdColumns::new(config.subject_id.clone()).with_groups(&groups);
    let index = build_exposure_index(subjects, distances, times, &spec, &ids, config.max_distance)?;
    let kinds: Vec<KernelKind> = spec.stap_terms.iter().flat_map(|t| t.kernels()).collect();
    let bound = theta_upper_bound_with_quantile(&kinds, config.max_distance, config.theta_bound_quantile)?;
    let reports = index.report.clone();
    let context = ModelContext::from_table(&spec, config.family, subjects, index, &config.priors, bound)?;
    Ok(PreparedModel { formula_text: config.formula.trim().to_string(), spec, context, reports })
}

/// A finished fit.
#[derive(Debug, Clone)]
pub struct Fit {
    pub prepared: PreparedModel,
    pub sampler: SamplerConfig,
    pub chains: Vec<ChainOutput>,
    pub names: Vec<String>,
    /// `[chain][draw][parameter]` on the reporting scale.
    pub natural: Vec<Vec<Vec<f64>>>,
    /// Per chain, the mean of one posterior predictive replicate per draw.
    pub mean_ppd: Vec<Vec<f64>>,
    pub waic: Option<WaicResult>,
    /// Draws at which some exposure had no spread across observations.
    pub degenerate_draws: usize,
    pub summary: FitSummary,
}

fn role_of(name: &str, group_factor: Option<&str>) -> Role {
    if name == "sigma" {
        Role::Auxiliary
    } else if name.starts_with("b[") {
        Role::GroupEffect
    } else if group_factor.is_some_and(|f| name == format!("{f}_sd")) {
        Role::GroupSd
    } else {
        Role::Coefficient
    }
}

/// Generator for posterior predictive replicates, kept apart from the
/// sampler streams.
pub fn predictive_rng(seed: u64, chain_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + chain_id as u64);
    rng
}

/// Sample the posterior and summarize it.
pub fn fit_prepared(prepared: PreparedModel, sampler: &SamplerConfig, include_waic: bool) -> Result<Fit, StapError> {
    let ctx = &prepared.context;
    let chains = sample(ctx, sampler)?;
    let names = ctx.parameter_names();
    let mut natural = Vec::with_capacity(chains.len());
    let mut ppd = Vec::with_capacity(chains.len());
    let mut pointwise = Vec::new();
    let mut degenerate_draws = 0;
    for chain in &chains {
        let mut rows = Vec::with_capacity(chain.draws.len());
        for x in &chain.draws {
            let d = ctx.natural_scale(x);
            degenerate_draws += d.degenerate.iter().any(|b| *b) as usize;
            if include_waic {
                pointwise.push(d.pointwise_log_lik);
            }
            rows.push(d.values);
        }
        natural.push(rows);
        let mut rng = predictive_rng(sampler.seed, chain.chain_id);
        ppd.push(mean_ppd(&posterior_predict(ctx, &chain.draws, &mut rng)));
    }
    let waic = if include_waic { Some(waic(&pointwise)?) } else { None };

    let group_factor = ctx.data.groups.as_ref().map(|g| g.factor.as_str());
    let mut parameters = Vec::with_capacity(names.len() + 2);
    for (k, name) in names.iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = natural.iter().map(|rows| rows.iter().map(|r| r[k]).collect()).collect();
        parameters.push(summarize_draws(name, role_of(name, group_factor), &per_chain)?);
    }
    parameters.push(summarize_draws("mean_PPD", Role::MeanPpd, &ppd)?);
    let lp: Vec<Vec<f64>> = chains.iter().map(|c| c.log_density.clone()).collect();
    parameters.push(summarize_draws("log-posterior", Role::LogPosterior, &lp)?);

    let spec = &prepared.spec;
    let draws_per_chain = sampler.iter - sampler.warmup;
    let header = ModelHeader {
        family: ctx.family().to_string(),
        formula: prepared.formula_text.clone(),
        observations: ctx.n_obs(),
        intercept: spec.intercept,
        fixed: spec.fixed_terms.len(),
        spatial: spec.count_kind(StapKind::Spatial),
        temporal: spec.count_kind(StapKind::Temporal),
        spatial_temporal: spec.count_kind(StapKind::SpatialTemporal),
        group: ctx.data.groups.as_ref().map(|g| GroupInfo { factor: g.factor.clone(), levels: g.levels.len() }),
        response: match &spec.response {
            Response::Single(y) => y.clone(),
            Response::Binomial { successes, .. } => successes.clone(),
        },
        posterior_sample_size: draws_per_chain * chains.len(),
    };
    let summary = FitSummary {
        engine_version: ENGINE_VERSION.to_string(),
        seed: sampler.seed,
        header,
        parameters,
        waic: waic.clone(),
        sampler: SamplerTotals {
            chains: chains.len(),
            draws_per_chain,
            divergences: chains.iter().map(ChainOutput::divergences).sum(),
            max_treedepth_hits: chains.iter().map(|c| c.max_treedepth_hits).sum(),
        },
    };
    Ok(Fit {
        prepared,
        sampler: sampler.clone(),
        chains,
        names,
        natural,
        mean_ppd: ppd,
        waic,
        degenerate_draws,
        summary,
    })
}

/// [`prepare`] followed by [`fit_prepared`].
pub fn fit(
    config: &ModelConfig,
    sampler: &SamplerConfig,
    subjects: &Table,
    distances: Option<&Table>,
    times: Option<&Table>,
) -> Result<Fit, StapError> {
    let prepared = prepare(config, subjects, distances, times)?;
    fit_prepared(prepared, sampler, config.waic)
}

/// Telemetry columns appended to every draws table.
pub const TELEMETRY_COLUMNS: [&str; 7] =
    ["lp__", "accept_stat__", "stepsize__", "treedepth__", "n_leapfrog__", "divergent__", "energy__"];

impl Fit {
    /// Draws of one reporting quantity, split by chain.
    pub fn chains_of(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.natural.iter().map(|rows| rows.iter().map(|r| r[k]).collect()).collect())
    }

    /// Draws of one reporting quantity, chains concatenated.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        self.chains_of(name).map(|c| c.concat())
    }

    /// One row per post-warmup draw per chain: chain, draw, the reporting
    /// quantities and sampler telemetry.
    pub fn draws_table(&self) -> Table {
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(TELEMETRY_COLUMNS.iter().map(|s| s.to_string()));
        let mut table = Table::new("draws", header);
        for (chain, rows) in self.chains.iter().zip(&self.natural) {
            for (i, values) in rows.iter().enumerate() {
                let mut row = vec![chain.chain_id.to_string(), (i + 1).to_string()];
                row.extend(values.iter().map(|v| format!("{v:e}")));
                row.push(format!("{:e}", chain.log_density[i]));
                row.push(format!("{:e}", chain.accept_stat[i]));
                row.push(format!("{:e}", chain.step_size));
                row.push(chain.tree_depth[i].to_string());
                row.push(chain.n_leapfrog[i].to_string());
                row.push((chain.divergent[i] as u8).to_string());
                row.push(format!("{:e}", chain.energy[i]));
                table.push_row(row);
            }
        }
        table
    }

    /// Termination-distance quantiles for every spatial component.
    pub fn termination(
        &self,
        exposure_limit: f64,
        prob: f64,
        max_value: f64,
    ) -> Result<Vec<(String, TerminationRow)>, StapError> {
        termination_rows(&self.prepared, &self.names, &self.natural.concat(), exposure_limit, prob, max_value)
    }

    pub fn diagnostics_report(&self, energy_bins: usize) -> DiagnosticsReport {
        DiagnosticsReport {
            engine_version: ENGINE_VERSION.to_string(),
            seed: self.sampler.seed,
            parameters: self
                .summary
                .parameters
                .iter()
                .map(|p| NamedDiagnostics { name: p.name.clone(), diagnostics: p.diagnostics.clone() })
                .collect(),
            chains: self
                .chains
                .iter()
                .map(|c| ChainReport {
                    chain: c.chain_id,
                    step_size: c.step_size,
                    divergences: c.divergences(),
                    warmup_divergences: c.warmup_divergences,
                    max_treedepth_hits: c.max_treedepth_hits,
                    inv_metric: c.inv_metric.clone(),
                    energy: energy_diagnostics(&c.energy, energy_bins),
                })
                .collect(),
            divergences: self.summary.sampler.divergences,
            degenerate_draws: self.degenerate_draws,
            waic: self.waic.clone(),
            exposure: self.prepared.reports.clone(),
        }
    }
}

/// Termination rows from pooled reporting-scale draws laid out as
/// `names`. Rows are labelled by term.
pub fn termination_rows(
    prepared: &PreparedModel,
    names: &[String],
    pooled: &[Vec<f64>],
    exposure_limit: f64,
    prob: f64,
    max_value: f64,
) -> Result<Vec<(String, TerminationRow)>, StapError> {
    let ctx = &prepared.context;
    let mut rows = Vec::new();
    for (j, term) in ctx.data.terms.iter().enumerate() {
        let (Some(kind), Some(_)) = (term.spatial_kernel, ctx.theta_index(j, Component::Spatial)) else {
            continue;
        };
        let label = &ctx.data.term_labels[j];
        let column = format!("{label}_spatial_scale");
        let k = names
            .iter()
            .position(|n| *n == column)
            .ok_or_else(|| StapError::Config(format!("draws have no column '{column}'")))?;
        let draws: Vec<f64> = pooled.iter().map(|r| r[k]).collect();
        rows.push((label.clone(), stap_termination(&draws, kind, exposure_limit, prob, max_value)?));
    }
    if rows.is_empty() {
        return Err(StapError::Config("the model has no spatial component".into()));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDiagnostics {
    pub name: String,
    #[serde(flatten)]
    pub diagnostics: ParameterDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub chain: usize,
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub max_treedepth_hits: usize,
    pub inv_metric: Vec<f64>,
    pub energy: EnergyDiagnostics,
}

/// Machine-readable convergence report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub engine_version: String,
    pub seed: u64,
    pub parameters: Vec<NamedDiagnostics>,
    pub chains: Vec<ChainReport>,
    pub divergences: usize,
    pub degenerate_draws: usize,
    pub waic: Option<WaicResult>,
    pub exposure: Vec<TermReport>,
}

/// Read a draws table written by [`Fit::draws_table`] back into per-chain
/// rows of the given parameter columns, tagged with their chain id.
pub fn read_draws(table: &Table, names: &[String]) -> Result<Vec<(usize, Vec<Vec<f64>>)>, StapError> {
    let chain_ids = table.numeric_column("chain")?;
    let columns = names
        .iter()
        .map(|n| table.numeric_column(n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    for (i, &c) in chain_ids.iter().enumerate() {
        if !(c >= 0.0 && c.fract() == 0.0) {
            return Err(StapError::Config(format!("bad chain id {c} at draws row {}", i + 1)));
        }
        let c = c as usize;
        let row = columns.iter().map(|col| col[i]).collect();
        match out.iter_mut().find(|(id, _)| *id == c) {
            Some((_, rows)) => rows.push(row),
            None => out.push((c, vec![row])),
        }
    }
    if out.is_empty() {
        return Err(StapError::Config("draws table is empty".into()));
    }
    Ok(out)
}
