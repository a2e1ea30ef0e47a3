//! Synthetic data generators writing tables in the ingest format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Table, BEF_ID, BEF_NAME, DISTANCE, TIME};
use crate::diagnostics::simulate_outcomes;
use crate::fit::ModelConfig;
use crate::kernels::KernelKind;
use crate::model::{logistic, Family, HalfCauchy, NormalPrior, PriorSpec, ThetaOverride, ThetaPrior};

pub type Point = (f64, f64);

/// Subjects on the centered inner square, BEFs on the outer square.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLayout {
    pub subjects: Vec<Point>,
    pub befs: Vec<Point>,
}

impl SpatialLayout {
    pub fn random<R: Rng>(n_subjects: usize, n_befs: usize, bef_side: f64, subject_side: f64, rng: &mut R) -> Self {
        let lo = (bef_side - subject_side) / 2.0;
        let subjects = (0..n_subjects).map(|_| inner_point(lo, subject_side, rng)).collect();
        let befs = (0..n_befs)
            .map(|_| (rng.random::<f64>() * bef_side, rng.random::<f64>() * bef_side))
            .collect();
        SpatialLayout { subjects, befs }
    }
}

fn inner_point<R: Rng>(lo: f64, side: f64, rng: &mut R) -> Point {
    (lo + rng.random::<f64>() * side, lo + rng.random::<f64>() * side)
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// Generated tables plus the true values used to build them.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub subjects: Table,
    pub distances: Table,
    pub times: Option<Table>,
    /// True parameter values keyed by reported parameter name.
    pub truth: Vec<(String, f64)>,
    /// True raw exposure per observation.
    pub exposure: Vec<f64>,
    /// True random intercept per observation (zero without groups).
    pub group_effect: Vec<f64>,
}

impl SimulatedData {
    pub fn truth(&self, name: &str) -> Option<f64> {
        self.truth.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossSectionalConfig {
    pub n_subjects: usize,
    pub n_befs: usize,
    pub bef_side: f64,
    pub subject_side: f64,
    pub alpha: f64,
    /// Effect of the female indicator `sex = 1`.
    pub delta_sex: f64,
    pub beta: f64,
    pub theta_s: f64,
    pub sigma: f64,
    pub kernel: KernelKind,
    pub family: Family,
    pub bef_name: String,
    pub seed: u64,
}

impl Default for CrossSectionalConfig {
    fn default() -> Self {
        CrossSectionalConfig {
            n_subjects: 950,
            n_befs: 50,
            bef_side: 3.0,
            subject_side: 1.0,
            alpha: 22.5,
            delta_sex: -0.8,
            beta: 1.2,
            theta_s: 0.5,
            sigma: 2.3,
            kernel: KernelKind::SpatialErfc,
            family: Family::Gaussian,
            bef_name: "Fast_Food".to_string(),
            seed: 2,
        }
    }
}

impl CrossSectionalConfig {
    /// Model matching the generator, with fixed (non-autoscaled) priors
    /// centered on plausible BMI values.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            formula: format!("y ~ sex + {}", term_text("sap", &self.bef_name, &[self.kernel])),
            family: self.family,
            subject_id: "subject_ID".to_string(),
            max_distance: 5.0,
            priors: fixed_priors(),
            waic: true,
            ..Default::default()
        }
    }
}

/// A STAP call, spelling out kernels only when they differ from the defaults.
fn term_text(keyword: &str, bef: &str, kernels: &[KernelKind]) -> String {
    let defaults = [KernelKind::SpatialErfc, KernelKind::TemporalErf];
    if kernels.iter().all(|k| defaults.contains(k)) {
        format!("{keyword}({bef})")
    } else {
        let names: Vec<&str> = kernels.iter().map(|k| k.keyword()).collect();
        format!("{keyword}({bef}, {})", names.join(", "))
    }
}

fn fixed_priors() -> PriorSpec {
    PriorSpec {
        intercept: NormalPrior::new(26.0, 4.0),
        coefficients: NormalPrior::new(0.0, 4.0),
        stap: NormalPrior::new(0.0, 4.0),
        theta: ThetaPrior::log_normal(1.0, 1.0),
        aux: HalfCauchy::new(0.0, 5.0),
        ..Default::default()
    }
}

/// One observation per subject with spatial exposure to one BEF class.
pub fn simulate_cross_sectional(config: &CrossSectionalConfig) -> SimulatedData {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout =
        SpatialLayout::random(config.n_subjects, config.n_befs, config.bef_side, config.subject_side, &mut rng);
    simulate_cross_sectional_on(config, &layout, &mut rng)
}

pub fn simulate_cross_sectional_on<R: Rng>(config: &CrossSectionalConfig, layout: &SpatialLayout, rng: &mut R) -> SimulatedData {
    let mut subjects = Table::new("subjects", header(&["subject_ID", "sex", "y"]));
    let mut distances = Table::new("distances", header(&["subject_ID", BEF_NAME, BEF_ID, DISTANCE]));
    let n = layout.subjects.len();
    let mut exposure = vec![0.0; n];
    let mut eta = vec![0.0; n];
    let mut sex = vec![0.0; n];
    for (i, &s) in layout.subjects.iter().enumerate() {
        sex[i] = (rng.random::<f64>() < 0.5) as u8 as f64;
        for (k, &b) in layout.befs.iter().enumerate() {
            let d = dist(s, b);
            exposure[i] += config.kernel.eval_with_scale_derivative(d, config.theta_s).0;
            distances.push_row(vec![(i + 1).to_string(), config.bef_name.clone(), (k + 1).to_string(), d.to_string()]);
        }
        eta[i] = config.alpha + config.delta_sex * sex[i] + config.beta * exposure[i];
    }
    let trials = vec![1.0; n];
    let y = simulate_outcomes(config.family, &eta, config.sigma, Some(&trials), rng);
    for i in 0..n {
        subjects.push_row(vec![(i + 1).to_string(), sex[i].to_string(), y[i].to_string()]);
    }
    let b = &config.bef_name;
    let mut truth = vec![
        ("(Intercept)".to_string(), config.alpha),
        ("sex".to_string(), config.delta_sex),
        (b.clone(), config.beta),
        (format!("{b}_spatial_scale"), config.theta_s),
    ];
    if config.family == Family::Gaussian {
        truth.push(("sigma".to_string(), config.sigma));
    }
    SimulatedData { subjects, distances, times: None, truth, exposure, group_effect: vec![0.0; n] }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongitudinalConfig {
    pub n_subjects: usize,
    pub visits: usize,
    /// Probability that a visit after the first is missing (and all later ones).
    pub dropout: f64,
    /// Probability of moving to a fresh location before each later visit.
    pub relocation: f64,
    pub n_befs: usize,
    pub bef_side: f64,
    pub subject_side: f64,
    pub alpha: f64,
    pub delta_sex: f64,
    pub beta: f64,
    pub theta_s: f64,
    pub theta_t: f64,
    pub tau: f64,
    pub sigma: f64,
    /// Time at the current location is uniform on `[0, time_max]`.
    pub time_max: f64,
    pub spatial_kernel: KernelKind,
    pub temporal_kernel: KernelKind,
    pub bef_name: String,
    pub seed: u64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        LongitudinalConfig {
            n_subjects: 350,
            visits: 2,
            dropout: 0.12,
            relocation: 0.5,
            n_befs: 50,
            bef_side: 3.0,
            subject_side: 1.0,
            alpha: 21.0,
            delta_sex: 1.3,
            beta: 1.0,
            theta_s: 0.8,
            theta_t: 18.0,
            tau: 1.5,
            sigma: 2.0,
            time_max: 40.0,
            spatial_kernel: KernelKind::SpatialErfc,
            temporal_kernel: KernelKind::TemporalErf,
            bef_name: "Coffee_Shop".to_string(),
            seed: 7,
        }
    }
}

impl LongitudinalConfig {
    /// The cross-sectional priors plus a wider temporal scale prior. The
    /// inclusion radius covers the whole BEF square so the scale bound sits
    /// above the temporal truth.
    pub fn model_config(&self) -> ModelConfig {
        let mut priors = fixed_priors();
        priors.theta_overrides.insert(
            self.bef_name.clone(),
            ThetaOverride {
                spatial: Some(ThetaPrior::log_normal(1.0, 1.0)),
                temporal: Some(ThetaPrior::log_normal(1.0, 2.0)),
            },
        );
        ModelConfig {
            formula: format!(
                "y ~ sex + {} + (1 | subj_ID)",
                term_text("stap", &self.bef_name, &[self.spatial_kernel, self.temporal_kernel])
            ),
            family: Family::Gaussian,
            subject_id: "subj_ID".to_string(),
            group_id: vec!["m_ID".to_string()],
            max_distance: 40.0,
            priors,
            waic: true,
            ..Default::default()
        }
    }
}

/// Repeated measurements with spatial-temporal exposure and a subject-level
/// random intercept. Tables are keyed by `subj_ID` and visit `m_ID`.
pub fn simulate_longitudinal(config: &LongitudinalConfig) -> SimulatedData {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout =
        SpatialLayout::random(config.n_subjects, config.n_befs, config.bef_side, config.subject_side, &mut rng);
    let lo = (config.bef_side - config.subject_side) / 2.0;
    let noise = Normal::new(0.0, config.sigma).expect("sigma");
    let keys = ["subj_ID", "m_ID"];
    let mut subjects = Table::new("subjects", header(&["subj_ID", "m_ID", "sex", "y"]));
    let mut distances = Table::new("distances", header(&[keys[0], keys[1], BEF_NAME, BEF_ID, DISTANCE]));
    let mut times = Table::new("times", header(&[keys[0], keys[1], BEF_NAME, BEF_ID, TIME]));
    let mut exposure = Vec::new();
    let mut group_effect = Vec::new();

    for (i, &home) in layout.subjects.iter().enumerate() {
        let sex = (rng.random::<f64>() < 0.5) as u8 as f64;
        let b = config.tau * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let mut loc = home;
        for visit in 0..config.visits {
            if visit > 0 {
                if rng.random::<f64>() < config.dropout {
                    break;
                }
                if rng.random::<f64>() < config.relocation {
                    loc = inner_point(lo, config.subject_side, &mut rng);
                }
            }
            let t = if config.time_max > 0.0 { rng.random::<f64>() * config.time_max } else { 0.0 };
            let wt = config.temporal_kernel.eval_with_scale_derivative(t, config.theta_t).0;
            let mut x = 0.0;
            let (sid, mid) = ((i + 1).to_string(), (visit + 1).to_string());
            for (k, &bef) in layout.befs.iter().enumerate() {
                let d = dist(loc, bef);
                x += config.spatial_kernel.eval_with_scale_derivative(d, config.theta_s).0 * wt;
                let id = (k + 1).to_string();
                distances.push_row(vec![sid.clone(), mid.clone(), config.bef_name.clone(), id.clone(), d.to_string()]);
                times.push_row(vec![sid.clone(), mid.clone(), config.bef_name.clone(), id, t.to_string()]);
            }
            let y = config.alpha + config.delta_sex * sex + config.beta * x + b + noise.sample(&mut rng);
            subjects.push_row(vec![sid, mid, sex.to_string(), y.to_string()]);
            exposure.push(x);
            group_effect.push(b);
        }
    }
    let name = &config.bef_name;
    let truth = vec![
        ("(Intercept)".to_string(), config.alpha),
        ("sex".to_string(), config.delta_sex),
        (name.clone(), config.beta),
        (format!("{name}_spatial_scale"), config.theta_s),
        (format!("{name}_temporal_scale"), config.theta_t),
        ("sigma".to_string(), config.sigma),
        ("subj_ID_sd".to_string(), config.tau),
    ];
    SimulatedData { subjects, distances, times: Some(times), truth, exposure, group_effect }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupedBinomialConfig {
    pub n_schools: usize,
    pub n_befs: usize,
    pub bef_side: f64,
    pub subject_side: f64,
    pub alpha: f64,
    /// Effect of the `Girls` row relative to `Boys`.
    pub delta_girls: f64,
    pub beta: f64,
    pub theta_s: f64,
    pub tau: f64,
    pub min_trials: u64,
    pub max_trials: u64,
    pub kernel: KernelKind,
    pub bef_name: String,
    pub seed: u64,
}

impl Default for GroupedBinomialConfig {
    fn default() -> Self {
        GroupedBinomialConfig {
            n_schools: 150,
            n_befs: 50,
            bef_side: 3.0,
            subject_side: 1.0,
            alpha: -1.2,
            delta_girls: -0.3,
            beta: 0.35,
            theta_s: 0.5,
            tau: 0.3,
            min_trials: 40,
            max_trials: 120,
            kernel: KernelKind::SpatialErfc,
            bef_name: "FFR".to_string(),
            seed: 20190303,
        }
    }
}

impl GroupedBinomialConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            formula: format!(
                "cbind(successes, failures) ~ Gender_CAT + {} + (1 | school_ID)",
                term_text("sap", &self.bef_name, &[self.kernel])
            ),
            family: Family::Binomial,
            subject_id: "school_ID".to_string(),
            group_id: vec!["Gender_CAT".to_string()],
            max_distance: 5.0,
            priors: PriorSpec {
                intercept: NormalPrior::new(0.0, 3.0),
                coefficients: NormalPrior::new(0.0, 2.0),
                stap: NormalPrior::new(0.0, 2.0),
                theta: ThetaPrior::log_normal(1.0, 1.0),
                ..Default::default()
            },
            waic: true,
            ..Default::default()
        }
    }
}

/// School-level aggregated counts, one row per school and gender, with the
/// school's distances copied to both rows.
pub fn simulate_grouped_binomial(config: &GroupedBinomialConfig) -> SimulatedData {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout =
        SpatialLayout::random(config.n_schools, config.n_befs, config.bef_side, config.subject_side, &mut rng);
    let mut subjects = Table::new("subjects", header(&["school_ID", "Gender_CAT", "successes", "failures"]));
    let mut distances = Table::new("distances", header(&["school_ID", "Gender_CAT", BEF_NAME, BEF_ID, DISTANCE]));
    let mut exposure = Vec::new();
    let mut group_effect = Vec::new();
    for (i, &s) in layout.subjects.iter().enumerate() {
        let b = config.tau * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let ds: Vec<f64> = layout.befs.iter().map(|&p| dist(s, p)).collect();
        let x: f64 = ds.iter().map(|&d| config.kernel.eval_with_scale_derivative(d, config.theta_s).0).sum();
        let sid = (i + 1).to_string();
        for (g, girls) in [("Boys", 0.0), ("Girls", 1.0)] {
            let n = rng.random_range(config.min_trials..=config.max_trials);
            let p = logistic(config.alpha + config.delta_girls * girls + config.beta * x + b);
            let y = Binomial::new(n, p).expect("probability").sample(&mut rng);
            subjects.push_row(vec![sid.clone(), g.to_string(), y.to_string(), (n - y).to_string()]);
            for (k, d) in ds.iter().enumerate() {
                distances.push_row(vec![
                    sid.clone(),
                    g.to_string(),
                    config.bef_name.clone(),
                    (k + 1).to_string(),
                    d.to_string(),
                ]);
            }
            exposure.push(x);
            group_effect.push(b);
        }
    }
    let name = &config.bef_name;
    let truth = vec![
        ("(Intercept)".to_string(), config.alpha),
        ("Gender_CATGirls".to_string(), config.delta_girls),
        (name.clone(), config.beta),
        (format!("{name}_spatial_scale"), config.theta_s),
        ("school_ID_sd".to_string(), config.tau),
    ];
    SimulatedData { subjects, distances, times: None, truth, exposure, group_effect }
}
