//! Distance and time weight functions, their scale derivatives, the shared
//! upper bound on scale parameters, and termination distances.

use std::f64::consts::FRAC_2_SQRT_PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{erf, erfc};

/// Fraction of a kernel's range that defines its characteristic abscissa
/// when bounding the scale parameters.
pub const DEFAULT_BOUND_QUANTILE: f64 = 0.975;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("scale parameter must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("kernel argument must be nonnegative, got {0}")]
    NegativeArgument(f64),
    #[error("termination distance is only defined for spatial kernels, got {0}")]
    NotSpatial(KernelKind),
    #[error("exposure limit must lie in (0, 1), got {0}")]
    BadLimit(f64),
    #[error("at least one kernel is required")]
    NoKernels,
    #[error("max distance must be positive and finite, got {0}")]
    BadMaxDistance(f64),
    #[error("bound quantile must lie in (0, 1), got {0}")]
    BadQuantile(f64),
}

/// Weight function family.
///
/// Spatial kernels decay from 1 at zero distance towards 0; temporal kernels
/// accrue from 0 at zero time towards 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    SpatialErfc,
    SpatialExp,
    TemporalErf,
    TemporalCexp,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::SpatialErfc,
        KernelKind::SpatialExp,
        KernelKind::TemporalErf,
        KernelKind::TemporalCexp,
    ];

    pub fn is_spatial(self) -> bool {
        matches!(self, KernelKind::SpatialErfc | KernelKind::SpatialExp)
    }

    /// Keyword used for this kernel in model formulas.
    pub fn keyword(self) -> &'static str {
        match self {
            KernelKind::SpatialErfc => "erfc",
            KernelKind::SpatialExp => "exp",
            KernelKind::TemporalErf => "erf",
            KernelKind::TemporalCexp => "cexp",
        }
    }

    /// Weight at the unitless argument `u = x / theta`.
    #[inline]
    pub fn eval_unit(self, u: f64) -> f64 {
        match self {
            KernelKind::SpatialErfc => erfc(u),
            KernelKind::SpatialExp => (-u).exp(),
            KernelKind::TemporalErf => erf(u),
            KernelKind::TemporalCexp => -(-u).exp_m1(),
        }
    }

    /// Weight and its derivative with respect to theta, at `x` and `theta`.
    ///
    /// No argument validation; callers own the `x >= 0`, `theta > 0` contract.
    #[inline]
    pub fn eval_with_scale_derivative(self, x: f64, theta: f64) -> (f64, f64) {
        let u = x / theta;
        // d/dtheta K(x/theta) = -K'(u) * u / theta
        match self {
            KernelKind::SpatialErfc => {
                let g = (-u * u).exp();
                (erfc(u), FRAC_2_SQRT_PI * g * u / theta)
            }
            KernelKind::SpatialExp => {
                let e = (-u).exp();
                (e, e * u / theta)
            }
            KernelKind::TemporalErf => {
                let g = (-u * u).exp();
                (erf(u), -FRAC_2_SQRT_PI * g * u / theta)
            }
            KernelKind::TemporalCexp => {
                let e = (-u).exp();
                (-(-u).exp_m1(), -e * u / theta)
            }
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelKind::SpatialErfc => "spatial-erfc",
            KernelKind::SpatialExp => "spatial-exp",
            KernelKind::TemporalErf => "temporal-erf",
            KernelKind::TemporalCexp => "temporal-cexp",
        };
        f.write_str(s)
    }
}

fn check_args(x: f64, theta: f64) -> Result<(), KernelError> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(KernelError::NonPositiveScale(theta));
    }
    if !(x >= 0.0) {
        return Err(KernelError::NegativeArgument(x));
    }
    Ok(())
}

/// Kernel weight `K(x / theta)`, always in `[0, 1]`.
pub fn weight(kind: KernelKind, x: f64, theta: f64) -> Result<f64, KernelError> {
    check_args(x, theta)?;
    Ok(kind.eval_unit(x / theta))
}

/// Closed-form `dK(x / theta) / dtheta`.
pub fn dweight_dtheta(kind: KernelKind, x: f64, theta: f64) -> Result<f64, KernelError> {
    check_args(x, theta)?;
    Ok(kind.eval_with_scale_derivative(x, theta).1)
}

/// Shared upper bound on every scale parameter of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBound {
    pub upper: f64,
}

/// Solve `K(u) = target` for the unitless argument `u`, by bisection.
///
/// Every kernel is strictly monotone on `(0, inf)`, so the root is unique
/// for `target` strictly inside the kernel's range.
fn solve_unit(kind: KernelKind, target: f64) -> f64 {
    let decreasing = kind.is_spatial();
    let below = |u: f64| {
        let v = kind.eval_unit(u);
        if decreasing {
            v > target
        } else {
            v < target
        }
    };
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    while below(hi) {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Unitless abscissa at which a kernel has covered `quantile` of its range:
/// spatial kernels fall to `1 - quantile`, temporal kernels rise to `quantile`.
pub fn characteristic_abscissa(kind: KernelKind, quantile: f64) -> f64 {
    match kind {
        KernelKind::SpatialExp => -(1.0 - quantile).ln(),
        KernelKind::TemporalCexp => -(1.0 - quantile).ln(),
        KernelKind::SpatialErfc => solve_unit(kind, 1.0 - quantile),
        KernelKind::TemporalErf => solve_unit(kind, quantile),
    }
}

/// Upper bound on the scale parameters: `max_distance / min_j d*_j`.
pub fn theta_upper_bound(
    kinds: &[KernelKind],
    max_distance: f64,
) -> Result<ThetaBound, KernelError> {
    theta_upper_bound_with_quantile(kinds, max_distance, DEFAULT_BOUND_QUANTILE)
}

pub fn theta_upper_bound_with_quantile(
    kinds: &[KernelKind],
    max_distance: f64,
    quantile: f64,
) -> Result<ThetaBound, KernelError> {
    if kinds.is_empty() {
        return Err(KernelError::NoKernels);
    }
    if !(max_distance > 0.0) || !max_distance.is_finite() {
        return Err(KernelError::BadMaxDistance(max_distance));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(KernelError::BadQuantile(quantile));
    }
    let min_abscissa = kinds
        .iter()
        .map(|&k| characteristic_abscissa(k, quantile))
        .fold(f64::INFINITY, f64::min);
    Ok(ThetaBound { upper: max_distance / min_abscissa })
}

/// Distance at which a spatial kernel with scale `theta` falls to
/// `exposure_limit`.
pub fn termination_distance(
    kind: KernelKind,
    theta: f64,
    exposure_limit: f64,
) -> Result<f64, KernelError> {
    if !kind.is_spatial() {
        return Err(KernelError::NotSpatial(kind));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(KernelError::NonPositiveScale(theta));
    }
    if !(exposure_limit > 0.0 && exposure_limit < 1.0) {
        return Err(KernelError::BadLimit(exposure_limit));
    }
    let unit = match kind {
        KernelKind::SpatialExp => -exposure_limit.ln(),
        _ => solve_unit(kind, exposure_limit),
    };
    Ok(theta * unit)
}
