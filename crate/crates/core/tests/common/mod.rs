#![allow(dead_code)]

use stap_core::nuts::LogDensity;

/// Independent standard normals.
pub struct StdNormal(pub usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = -v;
        }
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Bivariate normal with unit variances and correlation `rho`.
pub struct CorrelatedNormal(pub f64);

impl LogDensity for CorrelatedNormal {
    fn dim(&self) -> usize {
        2
    }
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let r = self.0;
        let k = 1.0 / (1.0 - r * r);
        grad[0] = -k * (x[0] - r * x[1]);
        grad[1] = -k * (x[1] - r * x[0]);
        -0.5 * k * (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1])
    }
}

/// Per-dimension draws of every chain: `out[d][chain]`.
pub fn by_dimension(chains: &[stap_core::nuts::ChainOutput]) -> Vec<Vec<Vec<f64>>> {
    let dim = chains[0].draws[0].len();
    (0..dim)
        .map(|d| chains.iter().map(|c| c.draws.iter().map(|x| x[d]).collect()).collect())
        .collect()
}

pub fn mean_sd(chains: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let m = all.iter().sum::<f64>() / n;
    let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

use rand::Rng;
use stap_core::data::TermIndex;
use stap_core::formula::{StapKind, StapTerm};
use stap_core::kernels::{KernelKind, ThetaBound};
use stap_core::model::{Family, GroupData, ModelContext, ModelData, PriorSpec};

/// Kernel pairs exercised by the gradient suite.
pub const KERNEL_PAIRS: [(KernelKind, KernelKind); 2] = [
    (KernelKind::SpatialErfc, KernelKind::TemporalErf),
    (KernelKind::SpatialExp, KernelKind::TemporalCexp),
];

pub const FAMILIES: [Family; 4] = [Family::Gaussian, Family::Bernoulli, Family::Binomial, Family::Poisson];

pub const KINDS: [StapKind; 3] = [StapKind::Spatial, StapKind::Temporal, StapKind::SpatialTemporal];

/// A random model with one fixed covariate, one STAP term, and a random
/// intercept, with up to `max_rows` BEF rows per observation.
pub fn random_model<R: Rng>(
    family: Family,
    kind: StapKind,
    kernels: (KernelKind, KernelKind),
    n: usize,
    max_rows: usize,
    rng: &mut R,
) -> ModelContext {
    let mut dists = Vec::new();
    let mut times = Vec::new();
    for _ in 0..n {
        let k = rng.random_range(0..=max_rows);
        dists.push((0..k).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<f64>>());
        times.push((0..k).map(|_| rng.random_range(0.0..3.0)).collect::<Vec<f64>>());
    }
    let index = match kind {
        StapKind::Spatial => TermIndex::from_lists(dists, vec![]),
        StapKind::Temporal => TermIndex::from_lists(vec![], times),
        StapKind::SpatialTemporal => TermIndex::from_lists(dists, times),
    };
    let trials: Vec<f64> = (0..n).map(|_| rng.random_range(1..8) as f64).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| match family {
            Family::Gaussian => rng.random_range(-3.0..3.0),
            Family::Bernoulli => rng.random_range(0..2) as f64,
            Family::Binomial => rng.random_range(0..=trials[i] as usize) as f64,
            Family::Poisson => rng.random_range(0..6) as f64,
        })
        .collect();
    let levels = 4;
    let data = ModelData {
        family,
        y,
        trials: (family == Family::Binomial).then_some(trials),
        fixed_names: vec!["z".into()],
        fixed: vec![(0..n).map(|_| rng.random_range(-1.0..1.0)).collect()],
        terms: vec![StapTerm::new("B", kind).with_kernels(Some(kernels.0), Some(kernels.1))],
        term_labels: vec!["B".into()],
        index: vec![index],
        groups: Some(GroupData {
            factor: "g".into(),
            levels: (0..levels).map(|k| k.to_string()).collect(),
            of_obs: (0..n).map(|i| i % levels).collect(),
        }),
    };
    ModelContext::new(data, &PriorSpec::default(), ThetaBound { upper: 3.0 }).unwrap()
}

/// Worst discrepancy between the analytic gradient and central differences
/// with step `1e-5 * (1 + |x|)`, relative to the larger magnitude (floored
/// at `1e-6` so exactly-zero components compare absolutely).
pub fn gradient_error(model: &ModelContext, x: &[f64]) -> f64 {
    let mut grad = vec![0.0; x.len()];
    model.log_posterior_and_gradient(x, &mut grad);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-5 * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let up = model.log_posterior(&xp);
        xp[k] = x[k] - h;
        let dn = model.log_posterior(&xp);
        xp[k] = x[k];
        let fd = (up - dn) / (2.0 * h);
        let err = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
