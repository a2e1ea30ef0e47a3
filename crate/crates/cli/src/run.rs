use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use stap_core::data::{load_table, Table};
use stap_core::diagnostics::{mean_ppd, posterior_predict};
use stap_core::fit::{predictive_rng, prepare, read_draws, termination_rows, Fit, PreparedModel, ENGINE_VERSION};
use stap_core::model::Component;
use stap_core::simulate::{
    simulate_cross_sectional, simulate_grouped_binomial, simulate_longitudinal, CrossSectionalConfig,
    GroupedBinomialConfig, LongitudinalConfig, SimulatedData,
};
use stap_core::summary::{exposure_curve, mean_ppd_block, quantile_sorted, summarize_draws, termination_table, Role};
use stap_core::StapError;

use crate::config::{Overrides, RunConfig};
use crate::{CliError, Scenario};

const CURVE_POINTS: usize = 101;
const RHAT_WARN: f64 = 1.01;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn stamp(seed: u64) -> String {
    format!("# stap {ENGINE_VERSION} seed {seed}\n")
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_table(path: &Path, table: &Table, seed: u64) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(stamp(seed).as_bytes()).map_err(io_err(path))?;
    table.write_delimited(w, b',').map_err(StapError::from)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_optional(path: Option<&PathBuf>, delimiter: u8) -> Result<Option<Table>, CliError> {
    Ok(path.map(|p| load_table(p, &[], delimiter)).transpose().map_err(StapError::from)?)
}

struct Inputs {
    subjects: Table,
    distances: Option<Table>,
    times: Option<Table>,
}

fn load_inputs(config: &RunConfig) -> Result<Inputs, CliError> {
    let d = config.delimiter as u8;
    let subject_path = config.subject_data.as_ref().ok_or_else(|| CliError::Config("no subject table given".into()))?;
    Ok(Inputs {
        subjects: load_table(subject_path, &[], d).map_err(StapError::from)?,
        distances: load_optional(config.distance_data.as_ref(), d)?,
        times: load_optional(config.time_data.as_ref(), d)?,
    })
}

fn prepare_run(config: &RunConfig) -> Result<PreparedModel, CliError> {
    let inputs = load_inputs(config)?;
    Ok(prepare(&config.model, &inputs.subjects, inputs.distances.as_ref(), inputs.times.as_ref())?)
}

fn output_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn fit(config_path: Option<&Path>, overrides: &Overrides) -> Result<(), CliError> {
    let config = RunConfig::resolve(config_path, overrides)?.absolutized();
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("stap_out"));
    output_dir(&out)?;
    let prepared = prepare_run(&config)?;
    let fit = stap_core::fit::fit_prepared(prepared, &config.sampler, config.model.waic)?;
    let seed = config.sampler.seed;

    write_text(&out.join("resolved_config.toml"), &(stamp(seed) + &config.to_toml()?))?;
    write_table(&out.join("draws.csv"), &fit.draws_table(), seed)?;
    let text = fit.summary.render_text(1);
    write_text(&out.join("summary.txt"), &format!("{text}\n{}", fit.summary.render_detailed(2)))?;
    write_json(&out.join("summary.json"), &fit.summary)?;
    write_json(&out.join("diagnostics.json"), &fit.diagnostics_report(20))?;
    write_table(&out.join("exposure_curves.csv"), &curves(&fit), seed)?;
    print!("{text}");
    let divergences = fit.summary.sampler.divergences;
    if divergences > 0 {
        eprintln!("warning: {divergences} divergent transitions after warmup");
    }
    let unmixed: Vec<&str> = fit
        .summary
        .parameters
        .iter()
        .filter(|p| p.diagnostics.rhat.is_some_and(|r| r > RHAT_WARN))
        .map(|p| p.name.as_str())
        .collect();
    if !unmixed.is_empty() {
        eprintln!("warning: split R-hat above {RHAT_WARN} for {}; chains may not have mixed", unmixed.join(", "));
    }
    Ok(())
}

/// Pointwise posterior intervals of every kernel, on a grid up to three
/// times the upper 97.5% scale quantile.
fn curves(fit: &Fit) -> Table {
    let header = ["term", "component", "x", "lower", "median", "upper"];
    let mut table = Table::new("exposure_curves", header.iter().map(|s| s.to_string()).collect());
    let ctx = &fit.prepared.context;
    for p in &ctx.scales {
        let label = &ctx.data.term_labels[p.term];
        let comp = match p.component {
            Component::Spatial => "spatial",
            Component::Temporal => "temporal",
        };
        let Some(mut draws) = fit.pooled(&format!("{label}_{comp}_scale")) else {
            continue;
        };
        draws.sort_by(f64::total_cmp);
        let top = 3.0 * quantile_sorted(&draws, 0.975);
        let grid: Vec<f64> = (0..CURVE_POINTS).map(|i| top * i as f64 / (CURVE_POINTS - 1) as f64).collect();
        for c in exposure_curve(&draws, p.kernel, &grid, 0.95) {
            table.push_row(vec![
                label.clone(),
                comp.to_string(),
                format!("{:e}", c.x),
                format!("{:e}", c.lower),
                format!("{:e}", c.median),
                format!("{:e}", c.upper),
            ]);
        }
    }
    table
}

pub fn simulate(scenario: Scenario, out: &Path, seed: Option<u64>, n: Option<usize>) -> Result<(), CliError> {
    output_dir(out)?;
    let (data, model, seed) = match scenario {
        Scenario::CrossSectional => {
            let mut c = CrossSectionalConfig::default();
            c.seed = seed.unwrap_or(c.seed);
            c.n_subjects = n.unwrap_or(c.n_subjects);
            (simulate_cross_sectional(&c), c.model_config(), c.seed)
        }
        Scenario::Longitudinal => {
            let mut c = LongitudinalConfig::default();
            c.seed = seed.unwrap_or(c.seed);
            c.n_subjects = n.unwrap_or(c.n_subjects);
            (simulate_longitudinal(&c), c.model_config(), c.seed)
        }
        Scenario::GroupedBinomial => {
            let mut c = GroupedBinomialConfig::default();
            c.seed = seed.unwrap_or(c.seed);
            c.n_schools = n.unwrap_or(c.n_schools);
            (simulate_grouped_binomial(&c), c.model_config(), c.seed)
        }
    };
    let SimulatedData { subjects, distances, times, truth, .. } = data;
    write_table(&out.join("subjects.csv"), &subjects, seed)?;
    write_table(&out.join("distances.csv"), &distances, seed)?;
    if let Some(t) = &times {
        write_table(&out.join("times.csv"), t, seed)?;
    }
    let mut truth_table = Table::new("truth", vec!["parameter".into(), "value".into()]);
    for (name, v) in truth {
        truth_table.push_row(vec![name, v.to_string()]);
    }
    write_table(&out.join("truth.csv"), &truth_table, seed)?;
    let config = RunConfig {
        model,
        subject_data: Some("subjects.csv".into()),
        distance_data: Some("distances.csv".into()),
        time_data: times.as_ref().map(|_| "times.csv".into()),
        out: Some("fit".into()),
        ..Default::default()
    };
    write_text(&out.join("config.toml"), &(stamp(seed) + &config.to_toml()?))?;
    println!("wrote {} observations to {}", subjects.len(), out.display());
    Ok(())
}

fn fitted_draws(prepared: &PreparedModel, draws: &Path) -> Result<Vec<(usize, Vec<Vec<f64>>)>, CliError> {
    let table = load_table(draws, &["chain"], b',').map_err(StapError::from)?;
    read_draws(&table, &prepared.context.parameter_names()).map_err(|e| match e {
        StapError::Data(d) => CliError::Config(format!("draws table does not match the config: {d}")),
        other => other.into(),
    })
}

pub fn termination(
    config_path: &Path,
    draws: &Path,
    exposure_limit: f64,
    prob: f64,
    max_value: Option<f64>,
    digits: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let prepared = prepare_run(&config)?;
    let chains = fitted_draws(&prepared, draws)?;
    let pooled: Vec<Vec<f64>> = chains.into_iter().flat_map(|(_, rows)| rows).collect();
    let names = prepared.context.parameter_names();
    let max_value = max_value.unwrap_or(config.model.max_distance);
    let rows = termination_rows(&prepared, &names, &pooled, exposure_limit, prob, max_value)?;
    let table = termination_table(&rows, prob, digits);
    match out {
        Some(path) => write_text(path, &(stamp(config.sampler.seed) + &table))?,
        None => print!("{table}"),
    }
    Ok(())
}

pub fn ppc(config_path: &Path, draws: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let prepared = prepare_run(&config)?;
    let ctx = &prepared.context;
    let chains = fitted_draws(&prepared, draws)?;
    let seed = config.sampler.seed;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| draws.parent().unwrap_or(Path::new(".")).to_path_buf());
    output_dir(&out)?;

    let n = ctx.n_obs();
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend((1..=n).map(|i| format!("y_rep[{i}]")));
    let mut replicates = Table::new("replicates", header);
    let mut per_chain = Vec::with_capacity(chains.len());
    for (chain, rows) in &chains {
        let xs = rows
            .iter()
            .map(|v| ctx.unconstrained_from_natural(v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(StapError::from)?;
        let mut rng = predictive_rng(seed, *chain);
        let reps = posterior_predict(ctx, &xs, &mut rng);
        for (i, r) in reps.iter().enumerate() {
            let mut row = vec![chain.to_string(), (i + 1).to_string()];
            row.extend(r.iter().map(|v| v.to_string()));
            replicates.push_row(row);
        }
        per_chain.push(mean_ppd(&reps));
    }
    let summary = summarize_draws("mean_PPD", Role::MeanPpd, &per_chain).map_err(StapError::from)?;
    let response = match &prepared.spec.response {
        stap_core::formula::Response::Single(y) => y.clone(),
        stap_core::formula::Response::Binomial { successes, .. } => successes.clone(),
    };
    let block = mean_ppd_block(&response, &summary, 1);
    write_table(&out.join("replicates.csv"), &replicates, seed)?;
    write_text(&out.join("ppc.txt"), &format!("{block}\nengine: stap {ENGINE_VERSION}  seed: {seed}\n"))?;
    print!("{block}");
    Ok(())
}
