//! Families, priors, parameter layout, and the joint log posterior with its
//! analytic gradient.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::{DataError, ExposureIndex, Table, TermIndex};
use crate::exposure::{exposure_value, ExposureValue};
use crate::formula::{FormulaSpec, Response, StapTerm};
use crate::kernels::{KernelKind, ThetaBound};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown family '{0}' (expected gaussian, bernoulli, binomial or poisson)")]
    UnknownFamily(String),
    #[error("unknown prior distribution '{0}'")]
    UnknownPrior(String),
    #[error("prior for {what} needs a positive finite scale, got {scale}")]
    BadPriorScale { what: String, scale: f64 },
    #[error("family {family} cannot use {what}")]
    ResponseForm { family: Family, what: &'static str },
    #[error("observation {row}: {message}")]
    BadResponse { row: usize, message: String },
    #[error("{0}")]
    Dimension(String),
    #[error("only one group term is supported, found {0}")]
    TooManyGroupTerms(usize),
    #[error("column '{0}' has a single level and cannot enter the model")]
    SingleLevel(String),
    #[error("invalid natural-scale draw: {0}")]
    Natural(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
    Binomial,
    Poisson,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        }
    }

    pub fn link(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Bernoulli | Family::Binomial => "logit",
            Family::Poisson => "log",
        }
    }

    pub fn has_sigma(self) -> bool {
        self == Family::Gaussian
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]", self.name(), self.link())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian-identity" | "normal" => Ok(Family::Gaussian),
            "bernoulli" | "bernoulli-logit" => Ok(Family::Bernoulli),
            "binomial" | "binomial-logit" => Ok(Family::Binomial),
            "poisson" | "poisson-log" => Ok(Family::Poisson),
            other => Err(ModelError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub location: f64,
    pub scale: f64,
    #[serde(default)]
    pub autoscale: bool,
}

impl NormalPrior {
    pub fn new(location: f64, scale: f64) -> Self {
        NormalPrior { location, scale, autoscale: false }
    }

    pub fn autoscaled(mut self) -> Self {
        self.autoscale = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaDistribution {
    LogNormal,
    FoldedNormal,
}

impl FromStr for ThetaDistribution {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "log_normal" | "lognormal" => Ok(ThetaDistribution::LogNormal),
            "folded_normal" | "foldednormal" => Ok(ThetaDistribution::FoldedNormal),
            other => Err(ModelError::UnknownPrior(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaPrior {
    pub distribution: ThetaDistribution,
    pub location: f64,
    pub scale: f64,
}

impl ThetaPrior {
    pub fn log_normal(location: f64, scale: f64) -> Self {
        ThetaPrior { distribution: ThetaDistribution::LogNormal, location, scale }
    }

    pub fn folded_normal(location: f64, scale: f64) -> Self {
        ThetaPrior { distribution: ThetaDistribution::FoldedNormal, location, scale }
    }

    /// Log density at `theta > 0` and its derivative in `theta`.
    pub fn log_density(&self, theta: f64) -> (f64, f64) {
        let (mu, s) = (self.location, self.scale);
        match self.distribution {
            ThetaDistribution::LogNormal => {
                let l = theta.ln();
                let z = (l - mu) / s;
                let lp = -l - s.ln() - LN_SQRT_2PI - 0.5 * z * z;
                (lp, -(1.0 + z / s) / theta)
            }
            ThetaDistribution::FoldedNormal => {
                let a = (theta - mu) / s;
                let b = (theta + mu) / s;
                let (la, lb) = (-0.5 * a * a, -0.5 * b * b);
                let m = la.max(lb);
                let (wa, wb) = ((la - m).exp(), (lb - m).exp());
                let lp = m + (wa + wb).ln() - s.ln() - LN_SQRT_2PI;
                let d = -(a * wa + b * wb) / ((wa + wb) * s);
                (lp, d)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfCauchy {
    pub location: f64,
    pub scale: f64,
    /// Multiply the scale by `sd(y)` for the gaussian family.
    #[serde(default)]
    pub autoscale: bool,
}

impl HalfCauchy {
    pub fn new(location: f64, scale: f64) -> Self {
        HalfCauchy { location, scale, autoscale: false }
    }

    /// Log density on `(0, inf)` and its derivative.
    pub fn log_density(&self, x: f64) -> (f64, f64) {
        let (m, s) = (self.location, self.scale);
        let r = x - m;
        let mass = 0.5 + (m / s).atan() / PI;
        let lp = -(PI * s).ln() - (1.0 + (r / s).powi(2)).ln() - mass.ln();
        (lp, -2.0 * r / (s * s + r * r))
    }
}

/// Per-term, per-component override of the scale prior.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ThetaOverride {
    #[serde(default)]
    pub spatial: Option<ThetaPrior>,
    #[serde(default)]
    pub temporal: Option<ThetaPrior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub intercept: NormalPrior,
    pub coefficients: NormalPrior,
    pub stap: NormalPrior,
    pub theta: ThetaPrior,
    /// Keyed by BEF name or term label.
    pub theta_overrides: BTreeMap<String, ThetaOverride>,
    pub aux: HalfCauchy,
    pub group_sd: HalfCauchy,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            intercept: NormalPrior::new(0.0, 10.0).autoscaled(),
            coefficients: NormalPrior::new(0.0, 2.5).autoscaled(),
            stap: NormalPrior::new(0.0, 2.5),
            theta: ThetaPrior::log_normal(1.0, 1.0),
            theta_overrides: BTreeMap::new(),
            aux: HalfCauchy::new(0.0, 5.0),
            group_sd: HalfCauchy::new(0.0, 2.5),
        }
    }
}

impl PriorSpec {
    fn validate(&self) -> Result<(), ModelError> {
        let check = |what: &str, scale: f64| {
            if scale > 0.0 && scale.is_finite() {
                Ok(())
            } else {
                Err(ModelError::BadPriorScale { what: what.to_string(), scale })
            }
        };
        check("the intercept", self.intercept.scale)?;
        check("coefficients", self.coefficients.scale)?;
        check("STAP coefficients", self.stap.scale)?;
        check("scales", self.theta.scale)?;
        check("sigma", self.aux.scale)?;
        check("the group SD", self.group_sd.scale)?;
        for (name, o) in &self.theta_overrides {
            for p in o.spatial.iter().chain(&o.temporal) {
                check(&format!("the scale of {name}"), p.scale)?;
            }
        }
        Ok(())
    }

    fn theta_for(&self, term: &StapTerm, label: &str, spatial: bool) -> ThetaPrior {
        let pick = |o: &ThetaOverride| if spatial { o.spatial } else { o.temporal };
        self.theta_overrides
            .get(label)
            .and_then(pick)
            .or_else(|| self.theta_overrides.get(&term.bef_name).and_then(pick))
            .unwrap_or(self.theta)
    }
}

/// `theta = upper * logistic(eta)` with the log-Jacobian of the map.
pub fn map_theta(eta: f64, bound: ThetaBound) -> (f64, f64) {
    let p = logistic(eta);
    let theta = bound.upper * p;
    let log_jac = bound.upper.ln() - softplus(-eta) - softplus(eta);
    (theta, log_jac)
}

/// Inverse of [`map_theta`].
pub fn unmap_theta(theta: f64, bound: ThetaBound) -> f64 {
    let p = theta / bound.upper;
    (p / (1.0 - p)).ln()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Spatial,
    Temporal,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Spatial => "spatial",
            Component::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParam {
    pub term: usize,
    pub component: Component,
    pub kernel: KernelKind,
    pub prior: ThetaPrior,
}

/// Random-intercept grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    pub factor: String,
    pub levels: Vec<String>,
    pub of_obs: Vec<usize>,
}

/// Everything the model needs, before priors are resolved.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub family: Family,
    pub y: Vec<f64>,
    pub trials: Option<Vec<f64>>,
    pub fixed_names: Vec<String>,
    /// Fixed-effect design, one vector per column.
    pub fixed: Vec<Vec<f64>>,
    pub terms: Vec<StapTerm>,
    pub term_labels: Vec<String>,
    pub index: Vec<TermIndex>,
    pub groups: Option<GroupData>,
}

/// Positions of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_fixed: usize,
    pub n_stap: usize,
    pub n_theta: usize,
    pub has_sigma: bool,
    pub n_groups: usize,
}

impl Layout {
    pub fn alpha(&self) -> usize {
        0
    }
    pub fn delta(&self) -> usize {
        1
    }
    pub fn beta(&self) -> usize {
        1 + self.n_fixed
    }
    pub fn theta(&self) -> usize {
        self.beta() + self.n_stap
    }
    pub fn log_sigma(&self) -> Option<usize> {
        self.has_sigma.then(|| self.theta() + self.n_theta)
    }
    pub fn log_tau(&self) -> Option<usize> {
        (self.n_groups > 0).then(|| self.theta() + self.n_theta + self.has_sigma as usize)
    }
    pub fn z(&self) -> usize {
        self.theta() + self.n_theta + self.has_sigma as usize + (self.n_groups > 0) as usize
    }
    pub fn dim(&self) -> usize {
        self.z() + self.n_groups
    }
}

/// Immutable model, shareable across chains.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub data: ModelData,
    pub layout: Layout,
    pub bound: ThetaBound,
    pub scales: Vec<ScaleParam>,
    intercept_prior: (f64, f64),
    coef_priors: Vec<(f64, f64)>,
    stap_priors: Vec<(f64, f64)>,
    aux_prior: HalfCauchy,
    group_prior: HalfCauchy,
    /// Constant part of each observation's log likelihood.
    ll_const: Vec<f64>,
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn positive_or_one(x: f64) -> f64 {
    if x > 1e-12 && x.is_finite() {
        x
    } else {
        1.0
    }
}

impl ModelContext {
    pub fn new(data: ModelData, priors: &PriorSpec, bound: ThetaBound) -> Result<Self, ModelError> {
        priors.validate()?;
        let n = data.y.len();
        let fam = data.family;
        if data.fixed.len() != data.fixed_names.len() {
            return Err(ModelError::Dimension("fixed names and columns differ in count".into()));
        }
        if data.fixed.iter().any(|c| c.len() != n) {
            return Err(ModelError::Dimension("fixed column length differs from response".into()));
        }
        if data.terms.len() != data.index.len() || data.terms.len() != data.term_labels.len() {
            return Err(ModelError::Dimension("STAP terms and exposure index differ".into()));
        }
        if data.index.iter().any(|ix| ix.n_obs() != n) {
            return Err(ModelError::Dimension("exposure index length differs from response".into()));
        }
        if let Some(g) = &data.groups {
            if g.of_obs.len() != n || g.of_obs.iter().any(|&k| k >= g.levels.len()) {
                return Err(ModelError::Dimension("group index inconsistent".into()));
            }
        }
        match (fam, &data.trials) {
            (Family::Binomial, None) => {
                return Err(ModelError::ResponseForm { family: fam, what: "a response without trials" })
            }
            (Family::Binomial, Some(t)) if t.len() != n => {
                return Err(ModelError::Dimension("trials length differs from response".into()))
            }
            (Family::Gaussian | Family::Bernoulli | Family::Poisson, Some(_)) => {
                return Err(ModelError::ResponseForm { family: fam, what: "a successes/failures response" })
            }
            _ => {}
        }

        let mut ll_const = vec![0.0; n];
        for (i, &y) in data.y.iter().enumerate() {
            let bad = |message: String| ModelError::BadResponse { row: i + 1, message };
            if !y.is_finite() {
                return Err(bad(format!("response {y} is not finite")));
            }
            match fam {
                Family::Gaussian => ll_const[i] = -LN_SQRT_2PI,
                Family::Bernoulli => {
                    if y != 0.0 && y != 1.0 {
                        return Err(bad(format!("bernoulli response must be 0 or 1, got {y}")));
                    }
                }
                Family::Binomial => {
                    let t = data.trials.as_ref().unwrap()[i];
                    if y < 0.0 || y.fract() != 0.0 || t.fract() != 0.0 || y > t {
                        return Err(bad(format!("need integer 0 <= successes <= trials, got {y} of {t}")));
                    }
                    ll_const[i] = ln_gamma(t + 1.0) - ln_gamma(y + 1.0) - ln_gamma(t - y + 1.0);
                }
                Family::Poisson => {
                    if y < 0.0 || y.fract() != 0.0 {
                        return Err(bad(format!("poisson response must be a count, got {y}")));
                    }
                    ll_const[i] = -ln_gamma(y + 1.0);
                }
            }
        }

        let sd_y = if fam == Family::Gaussian { positive_or_one(sample_sd(&data.y)) } else { 1.0 };
        let scaled = |p: &NormalPrior, col_sd: f64| {
            let s = if p.autoscale { p.scale * sd_y / positive_or_one(col_sd) } else { p.scale };
            (p.location, s)
        };
        let intercept_prior = scaled(&priors.intercept, 1.0);
        let coef_priors = data.fixed.iter().map(|c| scaled(&priors.coefficients, sample_sd(c))).collect();
        let stap_priors = vec![scaled(&priors.stap, 1.0); data.terms.len()];

        let mut scales = Vec::new();
        for (j, term) in data.terms.iter().enumerate() {
            if let Some(k) = term.spatial_kernel {
                let prior = priors.theta_for(term, &data.term_labels[j], true);
                scales.push(ScaleParam { term: j, component: Component::Spatial, kernel: k, prior });
            }
            if let Some(k) = term.temporal_kernel {
                let prior = priors.theta_for(term, &data.term_labels[j], false);
                scales.push(ScaleParam { term: j, component: Component::Temporal, kernel: k, prior });
            }
        }
        let layout = Layout {
            n_fixed: data.fixed.len(),
            n_stap: data.terms.len(),
            n_theta: scales.len(),
            has_sigma: fam.has_sigma(),
            n_groups: data.groups.as_ref().map_or(0, |g| g.levels.len()),
        };
        let mut aux_prior = priors.aux;
        if aux_prior.autoscale {
            aux_prior.scale *= sd_y;
        }
        Ok(ModelContext {
            data,
            layout,
            bound,
            scales,
            intercept_prior,
            coef_priors,
            stap_priors,
            aux_prior,
            group_prior: priors.group_sd,
            ll_const,
        })
    }

    /// Assemble the model from a subject table and an exposure index.
    pub fn from_table(
        spec: &FormulaSpec,
        family: Family,
        subjects: &Table,
        index: ExposureIndex,
        priors: &PriorSpec,
        bound: ThetaBound,
    ) -> Result<Self, ModelError> {
        let (y, trials) = match (&spec.response, family) {
            (Response::Single(name), Family::Binomial) => {
                let y = subjects.numeric_column(name)?;
                let t = vec![1.0; y.len()];
                (y, Some(t))
            }
            (Response::Single(name), _) => (subjects.numeric_column(name)?, None),
            (Response::Binomial { successes, failures }, Family::Binomial) => {
                let s = subjects.numeric_column(successes)?;
                let f = subjects.numeric_column(failures)?;
                for (i, v) in f.iter().enumerate() {
                    if *v < 0.0 {
                        return Err(ModelError::BadResponse {
                            row: i + 1,
                            message: format!("negative failure count {v}"),
                        });
                    }
                }
                let t = s.iter().zip(&f).map(|(a, b)| a + b).collect();
                (s, Some(t))
            }
            (Response::Binomial { .. }, fam) => {
                return Err(ModelError::ResponseForm { family: fam, what: "a cbind(successes, failures) response" })
            }
        };

        let mut fixed_names = Vec::new();
        let mut fixed = Vec::new();
        for name in &spec.fixed_terms {
            if subjects.is_numeric(name) {
                fixed_names.push(name.clone());
                fixed.push(subjects.numeric_column(name)?);
            } else {
                let text = subjects.text_column(name)?;
                let levels = sorted_levels(text.iter().copied());
                if levels.len() < 2 {
                    return Err(ModelError::SingleLevel(name.clone()));
                }
                for level in &levels[1..] {
                    fixed_names.push(format!("{name}{level}"));
                    fixed.push(text.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
                }
            }
        }

        let groups = match spec.group_terms.len() {
            0 => None,
            1 => {
                let factor = spec.group_terms[0].grouping_factor.clone();
                let text = subjects.text_column(&factor)?;
                let levels = sorted_levels(text.iter().copied());
                let pos: BTreeMap<&str, usize> =
                    levels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
                let of_obs = text.iter().map(|v| pos[v]).collect();
                Some(GroupData { factor, levels, of_obs })
            }
            n => return Err(ModelError::TooManyGroupTerms(n)),
        };

        let term_labels = (0..spec.stap_terms.len()).map(|j| spec.stap_label(j)).collect();
        let data = ModelData {
            family,
            y,
            trials,
            fixed_names,
            fixed,
            terms: spec.stap_terms.clone(),
            term_labels,
            index: index.terms,
            groups,
        };
        ModelContext::new(data, priors, bound)
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_obs(&self) -> usize {
        self.data.y.len()
    }

    pub fn family(&self) -> Family {
        self.data.family
    }

    fn thetas(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let t0 = self.layout.theta();
        (0..self.scales.len()).map(|k| map_theta(x[t0 + k], self.bound)).collect()
    }

    fn term_scales(&self, thetas: &[(f64, f64)], j: usize) -> (Option<f64>, Option<f64>) {
        let mut s = None;
        let mut t = None;
        for (k, p) in self.scales.iter().enumerate() {
            if p.term == j {
                match p.component {
                    Component::Spatial => s = Some(thetas[k].0),
                    Component::Temporal => t = Some(thetas[k].0),
                }
            }
        }
        (s, t)
    }

    fn exposures(&self, thetas: &[(f64, f64)]) -> Vec<ExposureValue> {
        (0..self.data.terms.len())
            .map(|j| {
                let (s, t) = self.term_scales(thetas, j);
                exposure_value(&self.data.index[j], &self.data.terms[j], s, t)
            })
            .collect()
    }

    fn eta_from(&self, x: &[f64], exposures: &[ExposureValue]) -> Vec<f64> {
        let l = &self.layout;
        let n = self.n_obs();
        let mut eta = vec![x[l.alpha()]; n];
        for (k, col) in self.data.fixed.iter().enumerate() {
            let d = x[l.delta() + k];
            for (e, z) in eta.iter_mut().zip(col) {
                *e += d * z;
            }
        }
        for (j, ev) in exposures.iter().enumerate() {
            let b = x[l.beta() + j];
            for (e, v) in eta.iter_mut().zip(&ev.standardized.values) {
                *e += b * v;
            }
        }
        if let (Some(g), Some(lt)) = (&self.data.groups, l.log_tau()) {
            let tau = x[lt].exp();
            for (e, &k) in eta.iter_mut().zip(&g.of_obs) {
                *e += tau * x[l.z() + k];
            }
        }
        eta
    }

    pub fn sigma(&self, x: &[f64]) -> Option<f64> {
        self.layout.log_sigma().map(|k| x[k].exp())
    }

    /// Log likelihood of one observation and its derivative in `eta`.
    #[inline]
    fn point(&self, i: usize, eta: f64, sigma: f64) -> (f64, f64) {
        let y = self.data.y[i];
        let c = self.ll_const[i];
        match self.data.family {
            Family::Gaussian => {
                let r = (y - eta) / sigma;
                (c - sigma.ln() - 0.5 * r * r, r / sigma)
            }
            Family::Bernoulli => (y * eta - softplus(eta), y - logistic(eta)),
            Family::Binomial => {
                let n = self.data.trials.as_ref().unwrap()[i];
                (c + y * eta - n * softplus(eta), y - n * logistic(eta))
            }
            Family::Poisson => {
                let mu = eta.exp();
                (c + y * eta - mu, y - mu)
            }
        }
    }

    /// Linear predictor at an unconstrained parameter vector.
    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        let thetas = self.thetas(x);
        let ex = self.exposures(&thetas);
        self.eta_from(x, &ex)
    }

    pub fn log_likelihood_pointwise(&self, x: &[f64]) -> Vec<f64> {
        let eta = self.linear_predictor(x);
        let sigma = self.sigma(x).unwrap_or(1.0);
        eta.iter().enumerate().map(|(i, &e)| self.point(i, e, sigma).0).collect()
    }

    /// Log prior including every Jacobian term, accumulating its gradient.
    fn log_prior(&self, x: &[f64], thetas: &[(f64, f64)], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let mut lp = 0.0;
        let mut normal = |idx: usize, (m, s): (f64, f64), grad: &mut [f64]| {
            let z = (x[idx] - m) / s;
            lp += -0.5 * z * z - s.ln() - LN_SQRT_2PI;
            grad[idx] -= z / s;
        };
        normal(l.alpha(), self.intercept_prior, grad);
        for (k, p) in self.coef_priors.iter().enumerate() {
            normal(l.delta() + k, *p, grad);
        }
        for (j, p) in self.stap_priors.iter().enumerate() {
            normal(l.beta() + j, *p, grad);
        }
        for k in 0..l.n_groups {
            normal(l.z() + k, (0.0, 1.0), grad);
        }
        for (k, p) in self.scales.iter().enumerate() {
            let idx = l.theta() + k;
            let (theta, log_jac) = thetas[k];
            let (prior, dprior) = p.prior.log_density(theta);
            let q = logistic(x[idx]);
            lp += prior + log_jac;
            grad[idx] += dprior * self.bound.upper * q * (1.0 - q) + 1.0 - 2.0 * q;
        }
        if let Some(ls) = l.log_sigma() {
            let sigma = x[ls].exp();
            let (p, dp) = self.aux_prior.log_density(sigma);
            lp += p + x[ls];
            grad[ls] += dp * sigma + 1.0;
        }
        if let Some(lt) = l.log_tau() {
            let tau = x[lt].exp();
            let (p, dp) = self.group_prior.log_density(tau);
            lp += p + x[lt];
            grad[lt] += dp * tau + 1.0;
        }
        lp
    }

    /// Log posterior and its gradient. `grad` is overwritten.
    pub fn log_posterior_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let thetas = self.thetas(x);
        let ex = self.exposures(&thetas);
        let eta = self.eta_from(x, &ex);
        let sigma = self.sigma(x).unwrap_or(1.0);

        let n = self.n_obs();
        let mut ll = 0.0;
        let mut score = vec![0.0; n];
        let mut dsigma = 0.0;
        for i in 0..n {
            let (v, s) = self.point(i, eta[i], sigma);
            ll += v;
            score[i] = s;
            if l.has_sigma {
                let r = (self.data.y[i] - eta[i]) / sigma;
                dsigma += r * r - 1.0;
            }
        }

        grad[l.alpha()] += score.iter().sum::<f64>();
        for (k, col) in self.data.fixed.iter().enumerate() {
            grad[l.delta() + k] += dot(&score, col);
        }
        for (j, ev) in ex.iter().enumerate() {
            grad[l.beta() + j] += dot(&score, &ev.standardized.values);
        }
        for (k, p) in self.scales.iter().enumerate() {
            let ev = &ex[p.term];
            let dx = match p.component {
                Component::Spatial => ev.d_standardized_spatial.as_ref(),
                Component::Temporal => ev.d_standardized_temporal.as_ref(),
            }
            .expect("scale component derivative");
            let q = logistic(x[l.theta() + k]);
            let dtheta = self.bound.upper * q * (1.0 - q);
            grad[l.theta() + k] += x[l.beta() + p.term] * dot(&score, dx) * dtheta;
        }
        if let Some(ls) = l.log_sigma() {
            grad[ls] += dsigma;
        }
        if let (Some(g), Some(lt)) = (&self.data.groups, l.log_tau()) {
            let tau = x[lt].exp();
            let mut per_level = vec![0.0; l.n_groups];
            for (s, &k) in score.iter().zip(&g.of_obs) {
                per_level[k] += s;
            }
            let mut dtau = 0.0;
            for (k, s) in per_level.iter().enumerate() {
                grad[l.z() + k] += tau * s;
                dtau += s * x[l.z() + k];
            }
            grad[lt] += tau * dtau;
        }

        ll + self.log_prior(x, &thetas, grad)
    }

    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_posterior_and_gradient(x, &mut g)
    }

    /// Names of the natural-scale quantities produced by [`Self::natural_scale`].
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(self.data.fixed_names.iter().cloned());
        names.extend(self.data.term_labels.iter().cloned());
        for p in &self.scales {
            names.push(format!("{}_{}_scale", self.data.term_labels[p.term], p.component.name()));
        }
        if self.layout.has_sigma {
            names.push("sigma".to_string());
        }
        if let Some(g) = &self.data.groups {
            names.push(format!("{}_sd", g.factor));
            for level in &g.levels {
                names.push(format!("b[{}:{}]", g.factor, level));
            }
        }
        names
    }

    /// Natural-scale values at one draw: STAP coefficients divided by the
    /// exposure scale, the intercept shifted by the exposure centers, scales
    /// and SDs on their own scale, and random intercepts `tau * z`.
    pub fn natural_scale(&self, x: &[f64]) -> NaturalDraw {
        let l = &self.layout;
        let thetas = self.thetas(x);
        let ex = self.exposures(&thetas);
        let mut values = Vec::with_capacity(self.parameter_names().len());
        let mut alpha = x[l.alpha()];
        let mut betas = Vec::with_capacity(l.n_stap);
        for (j, ev) in ex.iter().enumerate() {
            let bt = x[l.beta() + j];
            alpha -= bt * ev.standardized.center / ev.standardized.scale;
            betas.push(bt / ev.standardized.scale);
        }
        values.push(alpha);
        values.extend_from_slice(&x[l.delta()..l.delta() + l.n_fixed]);
        values.extend(betas);
        values.extend(thetas.iter().map(|t| t.0));
        if let Some(ls) = l.log_sigma() {
            values.push(x[ls].exp());
        }
        if let Some(lt) = l.log_tau() {
            let tau = x[lt].exp();
            values.push(tau);
            values.extend(x[l.z()..l.z() + l.n_groups].iter().map(|z| tau * z));
        }
        let eta = self.eta_from(x, &ex);
        let sigma = self.sigma(x).unwrap_or(1.0);
        let pointwise = eta.iter().enumerate().map(|(i, &e)| self.point(i, e, sigma).0).collect();
        NaturalDraw {
            values,
            eta,
            pointwise_log_lik: pointwise,
            degenerate: ex.iter().map(|e| e.standardized.degenerate).collect(),
        }
    }

    /// Inverse of [`Self::natural_scale`]: recover the unconstrained vector
    /// from the reported values, in [`Self::parameter_names`] order.
    pub fn unconstrained_from_natural(&self, values: &[f64]) -> Result<Vec<f64>, ModelError> {
        let l = &self.layout;
        let expected = self.parameter_names().len();
        if values.len() != expected {
            return Err(ModelError::Dimension(format!(
                "expected {expected} natural-scale values, got {}",
                values.len()
            )));
        }
        let mut x = vec![0.0; l.dim()];
        let mut k = 1 + l.n_fixed + l.n_stap;
        x[l.delta()..l.delta() + l.n_fixed].copy_from_slice(&values[1..1 + l.n_fixed]);
        let mut thetas = Vec::with_capacity(l.n_theta);
        for i in 0..l.n_theta {
            let t = values[k + i];
            if !(t > 0.0 && t < self.bound.upper) {
                return Err(ModelError::Natural(format!("scale {t} outside (0, {})", self.bound.upper)));
            }
            let eta = unmap_theta(t, self.bound);
            x[l.theta() + i] = eta;
            thetas.push(map_theta(eta, self.bound));
        }
        k += l.n_theta;
        let ex = self.exposures(&thetas);
        let mut alpha = values[0];
        for (j, ev) in ex.iter().enumerate() {
            let bt = values[1 + l.n_fixed + j] * ev.standardized.scale;
            x[l.beta() + j] = bt;
            alpha += bt * ev.standardized.center / ev.standardized.scale;
        }
        x[l.alpha()] = alpha;
        let positive_log = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(v.ln())
            } else {
                Err(ModelError::Natural(format!("{what} must be positive, got {v}")))
            }
        };
        if let Some(ls) = l.log_sigma() {
            x[ls] = positive_log(values[k], "sigma")?;
            k += 1;
        }
        if let Some(lt) = l.log_tau() {
            let tau = values[k];
            x[lt] = positive_log(tau, "the group SD")?;
            for g in 0..l.n_groups {
                x[l.z() + g] = values[k + 1 + g] / tau;
            }
        }
        Ok(x)
    }

    /// Position of a scale parameter among the `theta` coordinates.
    pub fn theta_index(&self, term: usize, component: Component) -> Option<usize> {
        self.scales.iter().position(|p| p.term == term && p.component == component)
    }
}

/// One draw mapped to reporting quantities.
#[derive(Debug, Clone)]
pub struct NaturalDraw {
    pub values: Vec<f64>,
    pub eta: Vec<f64>,
    pub pointwise_log_lik: Vec<f64>,
    pub degenerate: Vec<bool>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distinct values, numerically ordered when every value parses as a number.
pub fn sorted_levels<'a>(values: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut levels: Vec<String> = values.map(str::to_string).collect();
    levels.sort();
    levels.dedup();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(levels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        levels = pairs.into_iter().map(|p| p.1).collect();
    }
    levels
}

/// Binomial coefficient term, exposed for reference checks.
pub fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}
