use thiserror::Error;

use crate::data::DataError;
use crate::diagnostics::DiagnosticError;
use crate::formula::FormulaError;
use crate::kernels::KernelError;
use crate::model::ModelError;
use crate::nuts::NutsError;
use crate::summary::SummaryError;

/// Any failure of the fitting pipeline, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum StapError {
    #[error("config: {0}")]
    Config(String),
    #[error("formula: {0}")]
    Formula(#[from] FormulaError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("kernels: {0}")]
    Kernel(#[from] KernelError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("sampler: {0}")]
    Sampler(#[from] NutsError),
    #[error("diagnostics: {0}")]
    Diagnostics(#[from] DiagnosticError),
    #[error("summary: {0}")]
    Summary(#[from] SummaryError),
}

impl StapError {
    /// Process exit status: 2 for configuration errors, 3 for data errors,
    /// 4 for sampler failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            StapError::Config(_) | StapError::Formula(_) | StapError::Kernel(_) => 2,
            StapError::Data(DataError::MissingTimeTable)
            | StapError::Data(DataError::MissingDistanceTable)
            | StapError::Data(DataError::UnexpectedTimeTable)
            | StapError::Data(DataError::BadMaxDistance(_)) => 2,
            StapError::Data(_) | StapError::Diagnostics(_) | StapError::Summary(_) => 3,
            StapError::Model(e) => match e {
                ModelError::Data(DataError::MissingTimeTable)
                | ModelError::Data(DataError::MissingDistanceTable) => 2,
                ModelError::Data(_)
                | ModelError::BadResponse { .. }
                | ModelError::Dimension(_)
                | ModelError::SingleLevel(_)
                | ModelError::Natural(_) => 3,
                _ => 2,
            },
            StapError::Sampler(NutsError::Config(_)) => 2,
            StapError::Sampler(_) => 4,
        }
    }
}
