//! STAP covariates `X(theta)`, their scale derivatives, and standardization.

use thiserror::Error;

use crate::data::TermIndex;
use crate::formula::StapTerm;
use crate::kernels::{KernelKind, ThetaBound};

/// Sample standard deviations below this are treated as zero.
pub const DEGENERATE_SCALE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("scale for the {component} component of '{bef}' must lie in (0, {upper}], got {value}")]
    ScaleOutOfRange { bef: String, component: &'static str, value: f64, upper: f64 },
    #[error("'{bef}' needs a {component} scale")]
    MissingScale { bef: String, component: &'static str },
    #[error("'{bef}' has no {component} component but a {component} scale was given")]
    UnexpectedScale { bef: String, component: &'static str },
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Raw exposure and its derivative with respect to each scale component.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExposure {
    pub values: Vec<f64>,
    pub d_spatial: Option<Vec<f64>>,
    pub d_temporal: Option<Vec<f64>>,
}

fn check_scale(
    term: &StapTerm,
    component: &'static str,
    present: bool,
    theta: Option<f64>,
    bound: Option<ThetaBound>,
) -> Result<(), ExposureError> {
    let bef = || term.bef_name.clone();
    match (present, theta) {
        (true, None) => Err(ExposureError::MissingScale { bef: bef(), component }),
        (false, Some(_)) => Err(ExposureError::UnexpectedScale { bef: bef(), component }),
        (true, Some(v)) => {
            let upper = bound.map_or(f64::INFINITY, |b| b.upper);
            if v > 0.0 && v <= upper && v.is_finite() {
                Ok(())
            } else {
                Err(ExposureError::ScaleOutOfRange { bef: bef(), component, value: v, upper })
            }
        }
        (false, None) => Ok(()),
    }
}

fn validate(
    term: &StapTerm,
    theta_s: Option<f64>,
    theta_t: Option<f64>,
    bound: Option<ThetaBound>,
) -> Result<(), ExposureError> {
    check_scale(term, "spatial", term.kind.has_spatial(), theta_s, bound)?;
    check_scale(term, "temporal", term.kind.has_temporal(), theta_t, bound)
}

/// `X_i = sum K_s(d / theta_s)`, `sum K_t(t / theta_t)`, or the sum of
/// products for spatial-temporal terms.
pub fn compute_exposure(
    index: &TermIndex,
    term: &StapTerm,
    theta_s: Option<f64>,
    theta_t: Option<f64>,
    bound: Option<ThetaBound>,
) -> Result<Vec<f64>, ExposureError> {
    validate(term, theta_s, theta_t, bound)?;
    Ok(evaluate(index, term, theta_s, theta_t).values)
}

/// Derivatives of `X` with respect to the spatial and temporal scales.
pub fn compute_exposure_gradient(
    index: &TermIndex,
    term: &StapTerm,
    theta_s: Option<f64>,
    theta_t: Option<f64>,
    bound: Option<ThetaBound>,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>), ExposureError> {
    validate(term, theta_s, theta_t, bound)?;
    let raw = evaluate(index, term, theta_s, theta_t);
    Ok((raw.d_spatial, raw.d_temporal))
}

/// Exposure and scale derivatives in one pass, without argument checks.
pub fn evaluate(
    index: &TermIndex,
    term: &StapTerm,
    theta_s: Option<f64>,
    theta_t: Option<f64>,
) -> RawExposure {
    let n = index.n_obs();
    let mut values = vec![0.0; n];
    match (term.spatial_kernel, term.temporal_kernel) {
        (Some(ks), None) => {
            let theta = theta_s.expect("spatial scale");
            let mut grad = vec![0.0; n];
            for i in 0..n {
                let (v, g) = single_component(ks, index.distances(i), theta);
                values[i] = v;
                grad[i] = g;
            }
            RawExposure { values, d_spatial: Some(grad), d_temporal: None }
        }
        (None, Some(kt)) => {
            let theta = theta_t.expect("temporal scale");
            let mut grad = vec![0.0; n];
            for i in 0..n {
                let (v, g) = single_component(kt, index.times(i), theta);
                values[i] = v;
                grad[i] = g;
            }
            RawExposure { values, d_spatial: None, d_temporal: Some(grad) }
        }
        (Some(ks), Some(kt)) => {
            let (ts, tt) = (theta_s.expect("spatial scale"), theta_t.expect("temporal scale"));
            let mut gs = vec![0.0; n];
            let mut gt = vec![0.0; n];
            for i in 0..n {
                let mut x = Kahan::default();
                let mut ds = Kahan::default();
                let mut dt = Kahan::default();
                for (&d, &t) in index.distances(i).iter().zip(index.times(i)) {
                    let (ws, dws) = ks.eval_with_scale_derivative(d, ts);
                    let (wt, dwt) = kt.eval_with_scale_derivative(t, tt);
                    x.add(ws * wt);
                    ds.add(dws * wt);
                    dt.add(ws * dwt);
                }
                values[i] = x.sum;
                gs[i] = ds.sum;
                gt[i] = dt.sum;
            }
            RawExposure { values, d_spatial: Some(gs), d_temporal: Some(gt) }
        }
        (None, None) => unreachable!("STAP term without kernels"),
    }
}

#[inline]
fn single_component(kind: KernelKind, xs: &[f64], theta: f64) -> (f64, f64) {
    let mut v = Kahan::default();
    let mut g = Kahan::default();
    for &x in xs {
        let (w, dw) = kind.eval_with_scale_derivative(x, theta);
        v.add(w);
        g.add(dw);
    }
    (v.sum, g.sum)
}

/// Centered and scaled covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: Vec<f64>,
    pub center: f64,
    pub scale: f64,
    /// Set when the sample standard deviation vanished and `scale` was
    /// replaced by 1.
    pub degenerate: bool,
}

/// Center by the sample mean and scale by the sample standard deviation
/// (`n - 1` denominator).
pub fn standardize(raw: &[f64]) -> Standardized {
    let n = raw.len();
    if n == 0 {
        return Standardized { values: Vec::new(), center: 0.0, scale: 1.0, degenerate: true };
    }
    let center = raw.iter().sum::<f64>() / n as f64;
    let ss: f64 = raw.iter().map(|x| (x - center) * (x - center)).sum();
    let sd = if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 };
    let degenerate = !(sd >= DEGENERATE_SCALE);
    let scale = if degenerate { 1.0 } else { sd };
    let values = raw.iter().map(|x| (x - center) / scale).collect();
    Standardized { values, center, scale, degenerate }
}

/// Derivative of the standardized covariate given the raw derivative,
/// including the dependence of the center and scale on theta.
pub fn standardized_derivative(raw: &[f64], draw: &[f64], std: &Standardized) -> Vec<f64> {
    let n = raw.len();
    if n == 0 {
        return Vec::new();
    }
    let dm = draw.iter().sum::<f64>() / n as f64;
    if std.degenerate {
        return draw.iter().map(|d| d - dm).collect();
    }
    let s = std.scale;
    let ds = raw
        .iter()
        .zip(draw)
        .map(|(x, d)| (x - std.center) * (d - dm))
        .sum::<f64>()
        / ((n - 1) as f64 * s);
    raw.iter()
        .zip(draw)
        .map(|(x, d)| (d - dm) / s - (x - std.center) * ds / (s * s))
        .collect()
}

/// Full evaluation for one term: raw and standardized values with their
/// derivatives.
#[derive(Debug, Clone)]
pub struct ExposureValue {
    pub raw: RawExposure,
    pub standardized: Standardized,
    pub d_standardized_spatial: Option<Vec<f64>>,
    pub d_standardized_temporal: Option<Vec<f64>>,
}

pub fn exposure_value(
    index: &TermIndex,
    term: &StapTerm,
    theta_s: Option<f64>,
    theta_t: Option<f64>,
) -> ExposureValue {
    let raw = evaluate(index, term, theta_s, theta_t);
    let standardized = standardize(&raw.values);
    let d_standardized_spatial =
        raw.d_spatial.as_ref().map(|d| standardized_derivative(&raw.values, d, &standardized));
    let d_standardized_temporal =
        raw.d_temporal.as_ref().map(|d| standardized_derivative(&raw.values, d, &standardized));
    ExposureValue { raw, standardized, d_standardized_spatial, d_standardized_temporal }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::StapKind;
    use crate::kernels::KernelKind::*;
    use rand::{Rng, SeedableRng};

    fn term(kind: StapKind, s: Option<KernelKind>, t: Option<KernelKind>) -> StapTerm {
        StapTerm::new("B", kind).with_kernels(s, t)
    }

    #[test]
    fn table_one_subject_one() {
        let idx = TermIndex::from_lists(vec![vec![0.351, 0.891]], vec![]);
        let x = compute_exposure(&idx, &term(StapKind::Spatial, None, None), Some(0.5), None, None)
            .unwrap();
        // 40-digit oracle: erfc(0.702) + erfc(1.782)
        assert!((x[0] - 0.332_549_389_682_615_9).abs() < 1e-13, "{}", x[0]);
    }

    #[test]
    fn empty_and_zero_time() {
        let idx = TermIndex::from_lists(vec![vec![], vec![0.2, 0.4]], vec![vec![], vec![0.0, 0.0]]);
        let t = term(StapKind::SpatialTemporal, None, None);
        let x = compute_exposure(&idx, &t, Some(1.0), Some(2.0), None).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        let (gs, gt) = compute_exposure_gradient(&idx, &t, Some(1.0), Some(2.0), None).unwrap();
        assert_eq!(gs.unwrap()[0], 0.0);
        assert_eq!(gt.unwrap()[0], 0.0);
    }

    #[test]
    fn exp_gradient_closed_form() {
        let idx = TermIndex::from_lists(vec![vec![1.0]], vec![]);
        let t = term(StapKind::Spatial, Some(SpatialExp), None);
        let (g, _) = compute_exposure_gradient(&idx, &t, Some(1.0), None, None).unwrap();
        assert!((g.unwrap()[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn scale_checks() {
        let idx = TermIndex::from_lists(vec![vec![1.0]], vec![]);
        let t = term(StapKind::Spatial, None, None);
        let b = Some(ThetaBound { upper: 2.0 });
        assert!(compute_exposure(&idx, &t, Some(2.0), None, b).is_ok());
        assert!(compute_exposure(&idx, &t, Some(2.5), None, b).is_err());
        assert!(compute_exposure(&idx, &t, Some(0.0), None, b).is_err());
        assert!(compute_exposure(&idx, &t, None, None, b).is_err());
        assert!(compute_exposure(&idx, &t, Some(1.0), Some(1.0), b).is_err());
    }

    #[test]
    fn standardize_examples() {
        let s = standardize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.values, vec![-1.0, 0.0, 1.0]);
        assert_eq!((s.center, s.scale, s.degenerate), (2.0, 1.0, false));
        let c = standardize(&[4.0; 5]);
        assert!(c.degenerate);
        assert_eq!(c.values, vec![0.0; 5]);
    }

    fn random_index(rng: &mut impl Rng, n: usize, max_rows: usize) -> TermIndex {
        let mut d = Vec::new();
        let mut t = Vec::new();
        for _ in 0..n {
            let k = rng.random_range(0..=max_rows);
            d.push((0..k).map(|_| rng.random_range(0.0..5.0)).collect());
            t.push((0..k).map(|_| rng.random_range(0.0..40.0)).collect());
        }
        TermIndex::from_lists(d, t)
    }

    fn all_terms() -> Vec<StapTerm> {
        let mut v = Vec::new();
        for s in [SpatialErfc, SpatialExp] {
            v.push(term(StapKind::Spatial, Some(s), None));
            for t in [TemporalErf, TemporalCexp] {
                v.push(term(StapKind::SpatialTemporal, Some(s), Some(t)));
            }
        }
        for t in [TemporalErf, TemporalCexp] {
            v.push(term(StapKind::Temporal, None, Some(t)));
        }
        v
    }

    fn rel_close(a: f64, b: f64, tol: f64, floor: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(floor)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for term in all_terms() {
            for _ in 0..5 {
                let idx = random_index(&mut rng, 8, 200);
                let ts = term.kind.has_spatial().then(|| rng.random_range(0.2..3.0));
                let tt = term.kind.has_temporal().then(|| rng.random_range(2.0..30.0));
                let v = exposure_value(&idx, &term, ts, tt);
                if let Some(theta) = ts {
                    let h = 1e-6 * theta;
                    let up = exposure_value(&idx, &term, Some(theta + h), tt);
                    let dn = exposure_value(&idx, &term, Some(theta - h), tt);
                    for i in 0..8 {
                        let fd = (up.raw.values[i] - dn.raw.values[i]) / (2.0 * h);
                        let an = v.raw.d_spatial.as_ref().unwrap()[i];
                        assert!(rel_close(an, fd, 1e-6, 1e-4), "{term} raw {an} vs {fd}");
                        let fd = (up.standardized.values[i] - dn.standardized.values[i]) / (2.0 * h);
                        let an = v.d_standardized_spatial.as_ref().unwrap()[i];
                        assert!(rel_close(an, fd, 1e-6, 1e-4), "{term} std {an} vs {fd}");
                    }
                }
                if let Some(theta) = tt {
                    let h = 1e-6 * theta;
                    let up = exposure_value(&idx, &term, ts, Some(theta + h));
                    let dn = exposure_value(&idx, &term, ts, Some(theta - h));
                    for i in 0..8 {
                        let fd = (up.raw.values[i] - dn.raw.values[i]) / (2.0 * h);
                        let an = v.raw.d_temporal.as_ref().unwrap()[i];
                        assert!(rel_close(an, fd, 1e-6, 1e-4), "{term} raw {an} vs {fd}");
                        let fd = (up.standardized.values[i] - dn.standardized.values[i]) / (2.0 * h);
                        let an = v.d_standardized_temporal.as_ref().unwrap()[i];
                        assert!(rel_close(an, fd, 1e-6, 1e-4), "{term} std {an} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_in_scale_and_limits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut idx_lists = vec![vec![0.0, 0.0, 1.0]];
        idx_lists.push((0..20).map(|_| rng.random_range(0.0..3.0)).collect());
        let idx = TermIndex::from_lists(idx_lists, vec![]);
        for k in [SpatialErfc, SpatialExp] {
            let t = term(StapKind::Spatial, Some(k), None);
            let mut prev = vec![0.0; 2];
            for j in 1..50 {
                let theta = 0.05 * j as f64;
                let x = compute_exposure(&idx, &t, Some(theta), None, None).unwrap();
                assert!(x.iter().zip(&prev).all(|(a, b)| a >= b));
                prev = x;
            }
            let tiny = compute_exposure(&idx, &t, Some(1e-9), None, None).unwrap();
            assert!((tiny[0] - 2.0).abs() < 1e-12);
            let huge = compute_exposure(&idx, &t, Some(1e9), None, None).unwrap();
            assert!((huge[1] - 20.0).abs() < 1e-6);
        }
        let times = TermIndex::from_lists(vec![], vec![vec![1.0, 5.0, 12.0]]);
        for k in [TemporalErf, TemporalCexp] {
            let t = term(StapKind::Temporal, None, Some(k));
            let mut prev = f64::INFINITY;
            for j in 1..50 {
                let x = compute_exposure(&times, &t, None, Some(0.5 * j as f64), None).unwrap()[0];
                assert!(x <= prev);
                prev = x;
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn standardized_has_zero_mean_unit_sd(raw in prop::collection::vec(-50.0f64..50.0, 2..40)) {
                let s = standardize(&raw);
                prop_assume!(!s.degenerate);
                let n = raw.len() as f64;
                let mean = s.values.iter().sum::<f64>() / n;
                let var = s.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                prop_assert!(mean.abs() < 1e-12);
                prop_assert!((var - 1.0).abs() < 1e-10);
                for (x, v) in raw.iter().zip(&s.values) {
                    prop_assert!(((x - s.center) / s.scale - v).abs() < 1e-12);
                }
            }

            #[test]
            fn raw_exposure_bounded_by_row_count(
                lists in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 0..30), 1..10),
                theta in 0.01f64..10.0,
            ) {
                let idx = TermIndex::from_lists(lists.clone(), vec![]);
                let x = compute_exposure(&idx, &term(StapKind::Spatial, None, None), Some(theta), None, None).unwrap();
                for (xi, l) in x.iter().zip(&lists) {
                    prop_assert!(*xi >= 0.0 && *xi <= l.len() as f64 + 1e-12);
                }
            }
        }
    }
}
