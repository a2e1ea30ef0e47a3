//! Spatial-temporal aggregated predictor (STAP) models fit by NUTS.

pub mod data;
pub mod exposure;
pub mod formula;
pub mod kernels;
pub mod special;
pub mod model;
pub mod nuts;
pub mod diagnostics;
pub mod summary;
pub mod simulate;
pub mod error;
pub mod fit;

pub use error::StapError;
pub use fit::{fit, prepare, Fit, ModelConfig, PreparedModel, ENGINE_VERSION};
pub use formula::{parse_formula, FormulaSpec};
pub use model::{Family, ModelContext, PriorSpec};
pub use nuts::SamplerConfig;
