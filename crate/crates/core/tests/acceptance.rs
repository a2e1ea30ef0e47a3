//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
//!
//! Pass a substring as the first argument to run only matching criteria,
//! e.g. `cargo test --test acceptance -- parser`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{by_dimension, gradient_error, mean_sd, random_model, CorrelatedNormal, StdNormal, FAMILIES, KERNEL_PAIRS, KINDS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stap_core::diagnostics::{ess, split_rhat, waic};
use stap_core::fit::{fit, Fit, ModelConfig};
use stap_core::formula::{parse_formula, FormulaError, FormulaSpec, GroupTerm, Response, StapKind, StapTerm};
use stap_core::kernels::{termination_distance, theta_upper_bound, KernelKind};
use stap_core::nuts::{sample, LogDensity, SamplerConfig};
use stap_core::simulate::{
    simulate_cross_sectional, simulate_grouped_binomial, simulate_longitudinal, CrossSectionalConfig,
    GroupedBinomialConfig, LongitudinalConfig, SimulatedData,
};
use stap_core::summary::termination_table;
use statrs::function::gamma::gamma_ur;

struct Outcome {
    name: String,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Report(Vec<Outcome>);

impl Report {
    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        let o = Outcome { name: name.into(), pass, detail: detail.into() };
        println!("{}  {}", if o.pass { "PASS" } else { "FAIL" }, o.name);
        for line in o.detail.lines() {
            println!("      {line}");
        }
        self.0.push(o);
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut failures = Vec::new();
    for family in FAMILIES {
        for kind in KINDS {
            for pair in KERNEL_PAIRS {
                let model = random_model(family, kind, pair, 20, 200, &mut rng);
                for _ in 0..20 {
                    let x: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
                    let err = gradient_error(&model, &x);
                    points += 1;
                    if !(err < 1e-6) {
                        failures.push(format!("{family:?} {kind:?} {pair:?}: {err:e}"));
                    }
                    worst = worst.max(err);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let mut detail = format!("{points} points, worst relative error {worst:.2e}, {}", secs(elapsed));
    for f in failures.iter().take(5) {
        detail += &format!("\n{f}");
    }
    r.check("gradient suite: analytic vs central differences < 1e-6", failures.is_empty(), detail);
    r.check("gradient suite runtime < 60s", elapsed < Duration::from_secs(60), secs(elapsed));
}

// ----------------------------------------------------------------- sampler

fn calibrate<M: LogDensity>(r: &mut Report, label: &str, model: &M, seed: u64) {
    let config = SamplerConfig { iter: 2000, warmup: 1000, chains: 4, seed, ..Default::default() };
    let chains = sample(model, &config).expect("sampler runs");
    let draws: usize = chains.iter().map(|c| c.draws.len()).sum();
    let divergences: usize = chains.iter().map(|c| c.divergences()).sum();
    let mut ok = (divergences as f64) < 0.01 * draws as f64;
    let mut detail = format!("divergences {divergences}/{draws}");
    for (d, per_chain) in by_dimension(&chains).iter().enumerate() {
        let (m, s) = mean_sd(per_chain);
        let rhat = split_rhat(per_chain).unwrap();
        ok &= m.abs() <= 0.05 && (s - 1.0).abs() <= 0.05 && rhat < 1.01;
        detail += &format!("\ndim {d}: mean {m:+.4} sd {s:.4} rhat {rhat:.4}");
    }
    r.check(format!("sampler calibration: {label}"), ok, detail);
}

fn sampler(r: &mut Report) {
    let start = Instant::now();
    calibrate(r, "10-d standard normal", &StdNormal(10), 20240611);
    calibrate(r, "bivariate normal, rho 0.9", &CorrelatedNormal(0.9), 77);
    let elapsed = start.elapsed();
    r.check("sampler calibration runtime < 120s", elapsed < Duration::from_secs(120), secs(elapsed));
}

// ------------------------------------------------------------- simulations

fn fit_sim(sim: &SimulatedData, config: &ModelConfig) -> (Fit, Duration) {
    let start = Instant::now();
    let sampler = SamplerConfig { seed: 1, ..Default::default() };
    let f = fit(config, &sampler, &sim.subjects, Some(&sim.distances), sim.times.as_ref()).expect("fit runs");
    (f, start.elapsed())
}

/// Every planted value inside its central 95% interval.
fn coverage(f: &Fit, sim: &SimulatedData) -> (bool, String) {
    let mut ok = true;
    let mut detail = String::new();
    for (name, truth) in &sim.truth {
        let p = f.summary.get(name).unwrap_or_else(|| panic!("no summary for {name}"));
        let (lo, hi) = (p.quantiles[0], p.quantiles[4]);
        let inside = lo <= *truth && *truth <= hi;
        ok &= inside;
        detail += &format!(
            "{name}: truth {truth} median {:.3} 95% [{lo:.3}, {hi:.3}]{}\n",
            p.median,
            if inside { "" } else { "  <- outside" }
        );
    }
    (ok, detail.trim_end().to_string())
}

fn median_of(f: &Fit, name: &str) -> f64 {
    f.summary.get(name).unwrap_or_else(|| panic!("no summary for {name}")).median
}

fn max_rhat(f: &Fit) -> (f64, String) {
    f.summary
        .parameters
        .iter()
        .filter_map(|p| p.diagnostics.rhat.map(|r| (r, p.name.clone())))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}

fn close(r: &mut Report, label: String, value: f64, target: f64, tol: f64) {
    let pass = (value - target).abs() <= tol;
    r.check(label, pass, format!("{value:.4} vs {target} (tolerance {tol})"));
}

/// Data seed of the reduced cross-sectional profile.
const REDUCED_CROSS_SECTIONAL_SEED: u64 = 3;

fn sim_one(r: &mut Report, reduced: Option<(usize, u64)>, scale: f64, limit: Duration) {
    let mut config = CrossSectionalConfig::default();
    if let Some((n, seed)) = reduced {
        config.n_subjects = n;
        config.seed = seed;
    }
    let tag = format!("cross-sectional n={} seed {}", config.n_subjects, config.seed);
    let sim = simulate_cross_sectional(&config);
    let (f, elapsed) = fit_sim(&sim, &config.model_config());
    let (ok, detail) = coverage(&f, &sim);
    r.check(format!("{tag}: truths inside 95% intervals"), ok, detail);
    close(r, format!("{tag}: beta median"), median_of(&f, "Fast_Food"), 1.2, 0.15 * scale);
    close(r, format!("{tag}: spatial scale median"), median_of(&f, "Fast_Food_spatial_scale"), 0.5, 0.1 * scale);
    let (rhat, worst) = max_rhat(&f);
    let rhat_limit = 1.0 + 0.01 * scale;
    r.check(format!("{tag}: all R-hat <= {rhat_limit}"), rhat <= rhat_limit, format!("max {rhat:.4} ({worst})"));
    let y = sim.subjects.numeric_column("y").unwrap();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    close(r, format!("{tag}: mean_PPD median vs sample mean of y"), median_of(&f, "mean_PPD"), ybar, 0.5 * scale);
    r.check(format!("{tag}: runtime < {}", secs(limit)), elapsed < limit, secs(elapsed));
}

fn sim_two(r: &mut Report, n_subjects: Option<usize>, scale: f64, limit: Duration) {
    let mut config = LongitudinalConfig::default();
    if let Some(n) = n_subjects {
        config.n_subjects = n;
    }
    let sim = simulate_longitudinal(&config);
    let tag = format!("longitudinal {} subjects / {} obs", config.n_subjects, sim.subjects.len());
    let (f, elapsed) = fit_sim(&sim, &config.model_config());
    let (ok, detail) = coverage(&f, &sim);
    let (rhat, worst) = max_rhat(&f);
    r.check(format!("{tag}: truths inside 95% intervals"), ok, format!("{detail}\nmax R-hat {rhat:.4} ({worst})"));
    close(r, format!("{tag}: spatial scale median"), median_of(&f, "Coffee_Shop_spatial_scale"), 0.8, 0.15 * scale);
    close(r, format!("{tag}: temporal scale median"), median_of(&f, "Coffee_Shop_temporal_scale"), 18.0, 2.5 * scale);
    close(r, format!("{tag}: group SD median"), median_of(&f, "subj_ID_sd"), 1.5, 0.4 * scale);
    r.check(format!("{tag}: runtime < {}", secs(limit)), elapsed < limit, secs(elapsed));
}

fn simulation_one(r: &mut Report) {
    sim_one(r, None, 1.0, Duration::from_secs(15 * 60));
    sim_one(r, Some((300, REDUCED_CROSS_SECTIONAL_SEED)), 2.0, Duration::from_secs(4 * 60));
}

fn simulation_two(r: &mut Report) {
    sim_two(r, None, 1.0, Duration::from_secs(30 * 60));
    sim_two(r, Some(150), 2.0, Duration::from_secs(8 * 60));
}

// ----------------------------------------------------------------- kernels

/// Reference erfc through the regularized upper incomplete gamma function,
/// `erfc(u) = Q(1/2, u^2)` for `u >= 0`.
fn erfc(u: f64) -> f64 {
    gamma_ur(0.5, u * u)
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    // f decreasing with a sign change on [lo, hi]
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn kernels(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = true;
    let mut worst_erfc: f64 = 0.0;
    for _ in 0..200 {
        let theta = rng.random_range(0.01..20.0);
        let limit = rng.random_range(1e-6..0.99);
        let got = termination_distance(KernelKind::SpatialExp, theta, limit).unwrap();
        exact &= got == -theta * limit.ln();
        let got = termination_distance(KernelKind::SpatialErfc, theta, limit).unwrap();
        let want = bisect(|d| erfc(d / theta) - limit, 0.0, 10.0 * theta);
        worst_erfc = worst_erfc.max((got - want).abs());
    }
    r.check("termination distance, exp kernel: equals -theta ln(limit) exactly", exact, "200 random (theta, limit) pairs");
    r.check(
        "termination distance, erfc kernel: matches bisection within 1e-10",
        worst_erfc <= 1e-10,
        format!("worst abs difference {worst_erfc:.2e}"),
    );

    let exp_bound = theta_upper_bound(&[KernelKind::SpatialExp], 5.0).unwrap().upper;
    let want = 5.0 / 40f64.ln();
    r.check(
        "scale bound, exp kernel, max_distance 5: 5 / ln 40 ~ 1.3554",
        (exp_bound - want).abs() <= 1e-12 && (exp_bound - 1.3554).abs() < 5e-5,
        format!("{exp_bound:.10} vs {want:.10}"),
    );
    let u = bisect(|u| erfc(u) - 0.025, 0.0, 10.0);
    let erfc_bound = theta_upper_bound(&[KernelKind::SpatialErfc], 5.0).unwrap().upper;
    let mixed = theta_upper_bound(&[KernelKind::SpatialErfc, KernelKind::TemporalCexp], 5.0).unwrap().upper;
    r.check(
        "scale bound, erfc kernel and erfc+cexp mix: match independent solves",
        (erfc_bound - 5.0 / u).abs() <= 1e-10 && (mixed - 5.0 / u.min(40f64.ln())).abs() <= 1e-10,
        format!("erfc {erfc_bound:.10} vs {:.10}; mixed {mixed:.10}", 5.0 / u),
    );
}

// ------------------------------------------------------------- diagnostics

fn naive_mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn naive_var(x: &[f64]) -> f64 {
    let m = naive_mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

fn naive_rhat(chains: &[Vec<f64>]) -> f64 {
    let parts = halves(chains);
    let n = parts[0].len() as f64;
    let w = naive_mean(&parts.iter().map(|p| naive_var(p)).collect::<Vec<_>>());
    let b = n * naive_var(&parts.iter().map(|p| naive_mean(p)).collect::<Vec<_>>());
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Geyer initial positive and monotone sequence estimator over the full
/// autocovariance, computed directly.
fn naive_ess(chains: &[Vec<f64>]) -> f64 {
    let parts = halves(chains);
    let m = parts.len();
    let n = parts[0].len();
    let acov: Vec<Vec<f64>> = parts
        .iter()
        .map(|p| {
            let mu = naive_mean(p);
            (0..n).map(|t| (0..n - t).map(|i| (p[i] - mu) * (p[i + t] - mu)).sum::<f64>() / n as f64).collect()
        })
        .collect();
    let w = naive_mean(&parts.iter().map(|p| naive_var(p)).collect::<Vec<_>>());
    let var_plus = w * (n as f64 - 1.0) / n as f64 + naive_var(&parts.iter().map(|p| naive_mean(p)).collect::<Vec<_>>());
    let rho_at = |t: usize| 1.0 - (w - acov.iter().map(|a| a[t]).sum::<f64>() / m as f64) / var_plus;

    let mut rho = vec![0.0; n + 3];
    rho[0] = 1.0;
    rho[1] = rho_at(1);
    let (mut even, mut odd) = (1.0, rho[1]);
    let mut t = 1;
    while t < n - 5 && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t <= max_t - 4 {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1];
    total / tau.max(1.0 / total.log10())
}

fn naive_waic(ll: &[Vec<f64>]) -> f64 {
    let s = ll.len();
    let mut lppd = 0.0;
    let mut p = 0.0;
    for i in 0..ll[0].len() {
        let col: Vec<f64> = ll.iter().map(|row| row[i]).collect();
        lppd += (col.iter().map(|v| v.exp()).sum::<f64>() / s as f64).ln();
        p += naive_var(&col);
    }
    -2.0 * (lppd - p)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn ar1(rng: &mut ChaCha8Rng, phi: f64, n: usize) -> Vec<f64> {
    let scale = (1.0 - phi * phi).sqrt();
    let mut x: f64 = rng.sample::<f64, _>(StandardNormal);
    (0..n)
        .map(|_| {
            x = phi * x + scale * rng.sample::<f64, _>(StandardNormal);
            x
        })
        .collect()
}

fn diagnostics(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut w_err, mut r_err, mut e_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..10 {
        let draws = 40 + 17 * trial;
        let obs = 5 + 3 * trial;
        let ll: Vec<Vec<f64>> = (0..draws).map(|_| (0..obs).map(|_| rng.random_range(-4.0..0.0)).collect()).collect();
        w_err = w_err.max(rel(waic(&ll).unwrap().waic, naive_waic(&ll)));

        let len = 50 + 31 * trial;
        let chains: Vec<Vec<f64>> = (0..4).map(|c| ar1(&mut rng, 0.2 * c as f64, len)).collect();
        r_err = r_err.max(rel(split_rhat(&chains).unwrap(), naive_rhat(&chains)));
        e_err = e_err.max(rel(ess(&chains).unwrap(), naive_ess(&chains)));
    }
    r.check("WAIC matches naive reference within 1e-10", w_err <= 1e-10, format!("worst relative difference {w_err:.2e}"));
    r.check("split R-hat matches naive reference within 1e-10", r_err <= 1e-10, format!("worst relative difference {r_err:.2e}"));
    r.check("ESS matches naive reference within 1e-10", e_err <= 1e-10, format!("worst relative difference {e_err:.2e}"));

    let chains: Vec<Vec<f64>> = (0..4).map(|_| ar1(&mut rng, 0.9, 5000)).collect();
    let ratio = ess(&chains).unwrap() / 20000.0;
    let target = 0.1 / 1.9;
    r.check(
        "AR(1) phi 0.9: ESS/N within 30% of 0.0526",
        (ratio - target).abs() <= 0.3 * target,
        format!("ESS/N {ratio:.4}"),
    );

    let one: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let rhat = split_rhat(&vec![one; 4]).unwrap();
    r.check("identical chains: R-hat within 0.01 of 1", (rhat - 1.0).abs() <= 0.01, format!("R-hat {rhat:.5}"));
}

// ------------------------------------------------------------------ parser

fn spec(response: Response, fixed: &[&str], stap: Vec<StapTerm>, group: &[&str]) -> FormulaSpec {
    FormulaSpec {
        response,
        fixed_terms: fixed.iter().map(|s| s.to_string()).collect(),
        intercept: true,
        stap_terms: stap,
        group_terms: group.iter().map(|g| GroupTerm { grouping_factor: g.to_string() }).collect(),
    }
}

fn single(y: &str) -> Response {
    Response::Single(y.into())
}

fn cbind(s: &str, f: &str) -> Response {
    Response::Binomial { successes: s.into(), failures: f.into() }
}

fn parser(r: &mut Report) {
    use KernelKind::*;
    use StapKind::*;
    let cs = |kind, s, t| StapTerm::new("Coffee_Shop", kind).with_kernels(s, t);
    let valid: Vec<(&str, FormulaSpec)> = vec![
        ("BMI ~ sex + sap(Coffee_Shop)", spec(single("BMI"), &["sex"], vec![cs(Spatial, Some(SpatialErfc), None)], &[])),
        ("BMI ~ sex + tap(Coffee_Shop)", spec(single("BMI"), &["sex"], vec![cs(Temporal, None, Some(TemporalErf))], &[])),
        (
            "BMI ~ sex + stap(Coffee_Shop)",
            spec(single("BMI"), &["sex"], vec![cs(SpatialTemporal, Some(SpatialErfc), Some(TemporalErf))], &[]),
        ),
        ("BMI ~ sex + sap(Coffee_Shop, exp)", spec(single("BMI"), &["sex"], vec![cs(Spatial, Some(SpatialExp), None)], &[])),
        (
            "BMI ~ sex + tap(Coffee_Shop, cexp)",
            spec(single("BMI"), &["sex"], vec![cs(Temporal, None, Some(TemporalCexp))], &[]),
        ),
        (
            "BMI ~ sex + stap(Coffee_Shop, exp, cexp)",
            spec(single("BMI"), &["sex"], vec![cs(SpatialTemporal, Some(SpatialExp), Some(TemporalCexp))], &[]),
        ),
        ("BMI ~ sex + sap(Fast_Food)", spec(single("BMI"), &["sex"], vec![StapTerm::new("Fast_Food", Spatial)], &[])),
        (
            "y ~ sex + stap(Coffee_Shop) + (1 | subj_ID)",
            spec(single("y"), &["sex"], vec![StapTerm::new("Coffee_Shop", SpatialTemporal)], &["subj_ID"]),
        ),
        (
            "cbind(Num_Obese,Num_NotObese) ~ Charter_I + MedianIncome_centered + Majority_Race + Percent_Educated + frpm + sap(FFR)",
            spec(
                cbind("Num_Obese", "Num_NotObese"),
                &["Charter_I", "MedianIncome_centered", "Majority_Race", "Percent_Educated", "frpm"],
                vec![StapTerm::new("FFR", Spatial)],
                &[],
            ),
        ),
        (
            "cbind(NoStud5c,NoStud_NObese) ~ Charter_I + MedianIncome_centered + Majority_Race + Gender_CAT + Percent_Educated + frpm + sap(FFR) + (1|school_ID)",
            spec(
                cbind("NoStud5c", "NoStud_NObese"),
                &["Charter_I", "MedianIncome_centered", "Majority_Race", "Gender_CAT", "Percent_Educated", "frpm"],
                vec![StapTerm::new("FFR", Spatial)],
                &["school_ID"],
            ),
        ),
    ];
    let mut ok = true;
    let mut detail = format!("{} formulas", valid.len());
    for (text, want) in &valid {
        match parse_formula(text) {
            Ok(got) if got == *want => {}
            other => {
                ok = false;
                detail += &format!("\n{text}: {other:?}");
            }
        }
    }
    r.check("parser: documented formulas parse to their specs", ok, detail);

    type Want = fn(&FormulaError) -> bool;
    let malformed: Vec<(&str, Want)> = vec![
        ("", |e| matches!(e, FormulaError::Empty)),
        ("   ", |e| matches!(e, FormulaError::Empty)),
        ("BMI sex + sap(F)", |e| matches!(e, FormulaError::Tilde(0))),
        ("BMI ~ sex ~ sap(F)", |e| matches!(e, FormulaError::Tilde(2))),
        ("BMI ~ sex + sap(F) $", |e| matches!(e, FormulaError::BadCharacter { ch: '$', .. })),
        ("BMI ~ sex + sap(F", |e| matches!(e, FormulaError::Unexpected { .. })),
        ("BMI ~ sex + + sap(F)", |e| matches!(e, FormulaError::Unexpected { .. })),
        ("BMI ~ sex + sap(F, gauss)", |e| matches!(e, FormulaError::UnknownKernel { .. })),
        ("BMI ~ sex + tap(F, exp)", |e| matches!(e, FormulaError::UnknownKernel { .. })),
        ("BMI ~ sex + sap(F, exp, cexp)", |e| matches!(e, FormulaError::TooManyKernels { .. })),
        ("BMI ~ sex + stap(F, exp, cexp, erf)", |e| matches!(e, FormulaError::TooManyKernels { .. })),
        ("BMI ~ sex + sap(F) + sap(F, exp)", |e| matches!(e, FormulaError::DuplicateStapTerm { .. })),
        ("BMI ~ sex + sex + sap(F)", |e| matches!(e, FormulaError::DuplicateFixedTerm(_))),
        ("BMI ~ F + sap(F)", |e| matches!(e, FormulaError::NameConflict(_))),
        ("BMI ~ sap(F) + (sex | g)", |e| matches!(e, FormulaError::UnsupportedGroupTerm)),
        ("BMI ~ sap(F) + (1 | g) + (1 | g)", |e| matches!(e, FormulaError::DuplicateGroupTerm(_))),
        ("BMI ~ 0 + sap(F)", |e| matches!(e, FormulaError::InterceptRemoval)),
        ("BMI ~ sap(F) - 1", |e| matches!(e, FormulaError::InterceptRemoval)),
        ("BMI ~ log(income) + sap(F)", |e| matches!(e, FormulaError::UnsupportedCall(_))),
        ("BMI ~ sex", |e| matches!(e, FormulaError::NoStapTerm)),
    ];
    let mut ok = true;
    let mut detail = format!("{} variants", malformed.len());
    for (text, want) in &malformed {
        match parse_formula(text) {
            Err(e) if want(&e) => {}
            other => {
                ok = false;
                detail += &format!("\n{text:?}: {other:?}");
            }
        }
    }
    r.check("parser: malformed formulas give targeted errors", ok, detail);
}

// -------------------------------------------------------- grouped binomial

fn grouped_binomial(r: &mut Report) {
    let config = GroupedBinomialConfig::default();
    let sim = simulate_grouped_binomial(&config);
    let (f, elapsed) = fit_sim(&sim, &config.model_config());
    let rows = f.termination(0.01, 0.95, config.model_config().max_distance).expect("termination rows");
    let table = termination_table(&rows, 0.95, 2);
    let mut lines = table.lines();
    let header_ok = lines.next() == Some(",2.5%,50%,97.5%");
    let body: Vec<&str> = lines.collect();
    let rows_ok = body.len() == 1
        && body.iter().all(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            cells.len() == 4 && cells[0] == config.bef_name && cells[1..].iter().all(|c| c.parse::<f64>().is_ok())
        });
    r.check(
        "grouped binomial: termination table layout",
        header_ok && rows_ok,
        format!("{}fit {}", table, secs(elapsed)),
    );
    let name = format!("{}_spatial_scale", config.bef_name);
    let p = f.summary.get(&name).expect("scale summary");
    let inside = p.quantiles[0] <= config.theta_s && config.theta_s <= p.quantiles[4];
    r.check(
        "grouped binomial: planted spatial scale inside 95% interval",
        inside,
        format!("truth {} median {:.3} 95% [{:.3}, {:.3}]", config.theta_s, p.median, p.quantiles[0], p.quantiles[4]),
    );
}

fn main() -> ExitCode {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-')).unwrap_or_default();
    let sections: [(&str, fn(&mut Report)); 8] = [
        ("gradients", gradients),
        ("sampler", sampler),
        ("kernels", kernels),
        ("diagnostics", diagnostics),
        ("parser", parser),
        ("binomial", grouped_binomial),
        ("simulation-one", simulation_one),
        ("simulation-two", simulation_two),
    ];
    let mut report = Report::default();
    for (name, run) in sections {
        if name.contains(&filter) {
            println!("== {name}");
            run(&mut report);
        }
    }
    let failed = report.0.iter().filter(|o| !o.pass).count();
    println!("\n{} criteria, {} passed, {failed} failed", report.0.len(), report.0.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
