use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stap_core::fit::ModelConfig;
use stap_core::nuts::SamplerConfig;

use crate::CliError;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_data: Option<PathBuf>,
    /// Field separator of every input table.
    pub delimiter: char,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            subject_data: None,
            distance_data: None,
            time_data: None,
            delimiter: ',',
            out: None,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Model formula, e.g. "y ~ sex + sap(Fast_Food)".
    #[arg(long)]
    pub formula: Option<String>,
    /// gaussian, bernoulli, binomial or poisson.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub subject_data: Option<PathBuf>,
    #[arg(long)]
    pub distance_data: Option<PathBuf>,
    #[arg(long)]
    pub time_data: Option<PathBuf>,
    #[arg(long)]
    pub subject_id: Option<String>,
    /// Extra key column(s) shared by the subject and BEF tables; repeatable.
    #[arg(long)]
    pub group_id: Vec<String>,
    #[arg(long)]
    pub max_distance: Option<f64>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub cores: Option<usize>,
    #[arg(long)]
    pub adapt_delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compute WAIC.
    #[arg(long)]
    pub waic: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.subject_data, &mut config.distance_data, &mut config.time_data, &mut config.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(v) = &o.formula {
            self.model.formula = v.clone();
        }
        if let Some(v) = &o.family {
            self.model.family = v.parse().map_err(|e: stap_core::model::ModelError| CliError::Config(e.to_string()))?;
        }
        if let Some(v) = &o.subject_data {
            self.subject_data = Some(v.clone());
        }
        if let Some(v) = &o.distance_data {
            self.distance_data = Some(v.clone());
        }
        if let Some(v) = &o.time_data {
            self.time_data = Some(v.clone());
        }
        if let Some(v) = &o.subject_id {
            self.model.subject_id = v.clone();
        }
        if !o.group_id.is_empty() {
            self.model.group_id = o.group_id.clone();
        }
        if let Some(v) = o.max_distance {
            self.model.max_distance = v;
        }
        let s = &mut self.sampler;
        if let Some(v) = o.iter {
            s.iter = v;
        }
        if let Some(v) = o.warmup {
            s.warmup = v;
        }
        if let Some(v) = o.chains {
            s.chains = v;
        }
        if let Some(v) = o.cores {
            s.cores = v;
        }
        if let Some(v) = o.adapt_delta {
            s.adapt_delta = v;
        }
        if let Some(v) = o.seed {
            s.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if o.waic {
            self.model.waic = true;
        }
        Ok(())
    }

    /// Config file (if any) with flags applied on top.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        config.apply(overrides)?;
        if config.model.formula.trim().is_empty() {
            return Err(CliError::Config("no formula given (use --formula or the `formula` key)".into()));
        }
        if config.subject_data.is_none() {
            return Err(CliError::Config("no subject table given (use --subject-data)".into()));
        }
        if !config.delimiter.is_ascii() {
            return Err(CliError::Config(format!("delimiter '{}' is not a single byte", config.delimiter)));
        }
        config.sampler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Paths made absolute so the written config reruns from anywhere.
    pub fn absolutized(&self) -> Self {
        let mut c = self.clone();
        for p in [&mut c.subject_data, &mut c.distance_data, &mut c.time_data, &mut c.out].into_iter().flatten() {
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        }
        c
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}
