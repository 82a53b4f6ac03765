//! Desk-scale experiments: propagation-of-chaos rates, the averaging
//! principle, coupling inequalities, empirical-measure rates, strong order
//! of the scheme, the Picard fixed point and chain ergodicity.
//!
//! Expectations over the common noise are taken by replicating chain paths
//! (outer loop, one derived root per replicate); the inner expectation over
//! idiosyncratic noise is the ensemble average.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{
    ergodic_profile, invariant_measure, least_squares, ChainPath, CtmcError, ErgodicProfile, QMatrix,
};
use crate::measures::{
    coupling_upper_bound, w2_squared_1d_quantile, w2_squared_assignment_with_limit,
    EmpiricalMeasure, MeasureError,
};
use crate::model::{average, Coefficients, ModelError, SwitchingMfOu};
use crate::noise::{derive_stream, replicate_seed, PointLaw};
use crate::simulate::{
    picard_solve, run_auxiliary, run_averaged_on, run_particle_system, simulate_ensemble, LawSource,
    ParticleEnsemble, PicardOptions, RunSpec, SimError,
};

#[derive(Debug, Error, PartialEq)]
pub enum ExperimentError {
    #[error("rate fit needs positive data; entry {index} is ({x}, {y})")]
    NonPositiveData { index: usize, x: f64, y: f64 },
    #[error("rate fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("need at least {min} replicates, got {got}")]
    InsufficientReplicates { min: usize, got: usize },
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("coupling inequality violated on replicate {replicate}: {lhs} > {rhs}")]
    InequalityViolated { replicate: usize, lhs: f64, rhs: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Ordinary least squares of `log y` on `log x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Standard errors of `ys`; reported, not used as weights.
    pub ses: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub residual_norm: f64,
}

pub fn rate_fit(xs: &[f64], ys: &[f64], ses: &[f64]) -> Result<RateFit, ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::InvalidConfig(format!(
            "{} abscissae but {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(ExperimentError::TooFewPoints(xs.len()));
    }
    for (index, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            return Err(ExperimentError::NonPositiveData { index, x, y });
        }
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (slope, intercept) = least_squares(&lx, &ly);
    let residuals: Vec<f64> = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let residual_norm = residuals.iter().map(|r| r * r).sum::<f64>().sqrt();
    Ok(RateFit {
        xs: xs.to_vec(),
        ys: ys.to_vec(),
        ses: ses.to_vec(),
        slope,
        intercept,
        residuals,
        residual_norm,
    })
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// True when `errors[j + 1] - errors[j] <= sigmas * sqrt(se_j^2 + se_{j+1}^2)`
/// for every consecutive pair.
pub fn nonincreasing_within(errors: &[f64], ses: &[f64], sigmas: f64) -> bool {
    errors
        .windows(2)
        .zip(ses.windows(2))
        .all(|(e, s)| e[1] - e[0] <= sigmas * (s[0] * s[0] + s[1] * s[1]).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Aggregate table, fits, raw per-replicate statistics and verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config: serde_json::Value,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub fits: BTreeMap<String, RateFit>,
    pub raw: serde_json::Value,
    pub metadata: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub elapsed_seconds: f64,
}

impl ExperimentReport {
    fn new(experiment: &str, config: serde_json::Value, columns: &[&str]) -> Self {
        Self {
            experiment: experiment.to_string(),
            config,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            fits: BTreeMap::new(),
            raw: serde_json::Value::Null,
            metadata: BTreeMap::new(),
            verdicts: Vec::new(),
            elapsed_seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    /// The aggregate table as CSV (shortest round-trip floats).
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| x.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One line per fit: `name slope=.. intercept=.. residual_norm=..`.
    pub fn fit_lines(&self) -> Vec<String> {
        self.fits
            .iter()
            .map(|(name, f)| {
                format!(
                    "{name} slope={} intercept={} residual_norm={}",
                    f.slope, f.intercept, f.residual_norm
                )
            })
            .collect()
    }
}

fn default_replicates() -> usize {
    16
}
fn default_m_factor() -> usize {
    4
}
fn default_rate_threshold() -> f64 {
    -0.4
}
fn default_eps() -> f64 {
    1.0
}
fn default_tracked() -> usize {
    50
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    /// Increasing system sizes, at least three.
    pub sizes: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Auxiliary size is `m_factor * N`.
    #[serde(default = "default_m_factor")]
    pub m_factor: usize,
    /// Number of leading particles averaged in the pathwise statistic.
    #[serde(default = "default_tracked")]
    pub tracked: usize,
    #[serde(default = "default_rate_threshold")]
    pub slope_threshold: f64,
    #[serde(default = "default_eps")]
    pub time_scale: f64,
    /// Estimate the proxy error by rerunning the smallest size with `2M`.
    #[serde(default = "default_true")]
    pub proxy_check: bool,
}

impl ChaosConfig {
    pub fn new(sizes: Vec<usize>) -> Self {
        Self {
            sizes,
            replicates: default_replicates(),
            m_factor: default_m_factor(),
            tracked: default_tracked(),
            slope_threshold: default_rate_threshold(),
            time_scale: 1.0,
            proxy_check: true,
        }
    }
}

pub const MIN_CHAOS_REPLICATES: usize = 8;

/// Per-replicate statistics of the chaos experiment at one system size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosSample {
    pub size: usize,
    pub replicate: usize,
    /// Mean over tracked particles of `sup_t |X^k - X̂^k|^2`.
    pub pathwise: f64,
    /// `W_2^2(mu_T^N, size-N subsample of the auxiliary cloud)`.
    pub w2sq: f64,
    /// `sup_t |X^k - X̂^k|^2` for particles 0 and 1.
    pub first_two: [f64; 2],
    /// `W_2^2(mu_T^N, nu_T^N)` and the paired bound, with `nu^N` the
    /// empirical measure of the first `N` auxiliary particles.
    pub coupling_lhs: f64,
    pub coupling_rhs: f64,
}

fn sup_sq_distance(a: &ParticleEnsemble, b: &ParticleEnsemble, k: usize) -> f64 {
    (0..a.grid.len())
        .map(|j| {
            a.position(j, k)
                .iter()
                .zip(b.position(j, k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn first_n(e: &ParticleEnsemble, j: usize, n: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::new(e.dim, e.column(j)[..n * e.dim].to_vec()).expect("finite ensemble")
}

/// Propagation of chaos: the `N`-particle system against its synchronously
/// coupled auxiliary system of size `m_factor * N`, over replicated chain
/// paths. Reports the pathwise statistic and the terminal `W_2^2`
/// statistic with log-log fits against `N`.
pub fn chaos_experiment(
    coeffs: &dyn Coefficients,
    q: &QMatrix,
    initial_state: usize,
    spec: &RunSpec,
    cfg: &ChaosConfig,
    root: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let started = Instant::now();
    if cfg.sizes.len() < 3 || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) || cfg.sizes[0] == 0 {
        return Err(ExperimentError::InvalidConfig(
            "sizes must be increasing, positive, at least three".into(),
        ));
    }
    if cfg.replicates < MIN_CHAOS_REPLICATES {
        return Err(ExperimentError::InsufficientReplicates {
            min: MIN_CHAOS_REPLICATES,
            got: cfg.replicates,
        });
    }
    if cfg.m_factor == 0 {
        return Err(ExperimentError::InvalidConfig("m_factor must be >= 1".into()));
    }
    if !coeffs.g_state_free() {
        log::warn!("chaos experiment with a state-dependent jump coefficient");
    }
    let tracked = cfg.tracked.min(cfg.sizes[0]).max(1);
    let mut samples: Vec<ChaosSample> = Vec::new();
    let mut proxy_pathwise = Vec::new();
    let mut proxy_w2 = Vec::new();

    for r in 0..cfg.replicates {
        let seed = replicate_seed(root, r as u64);
        for &n in &cfg.sizes {
            let system = run_particle_system(coeffs, q, initial_state, n, spec, seed, cfg.time_scale)?;
            let m = cfg.m_factor * n;
            let aux = run_auxiliary(coeffs, &system, m, spec)?;
            let pathwise = (0..tracked)
                .map(|k| sup_sq_distance(&system, &aux, k))
                .sum::<f64>()
                / tracked as f64;
            let first_two = [
                sup_sq_distance(&system, &aux, 0),
                sup_sq_distance(&system, &aux, 1.min(n - 1)),
            ];
            let last = system.grid.len() - 1;
            let mu = system.measure_at(last);
            let aux_cloud = aux.measure_at(last);
            let mut pick = derive_stream(seed, "subsample", n as u64);
            let idx = sample_indices(&mut pick, m, n).into_vec();
            let sub = aux_cloud.select(&idx);
            let w2sq = w2_squared_assignment_with_limit(&mu, &sub, usize::MAX)?;
            let paired = first_n(&aux, last, n);
            let coupling_lhs = w2_squared_assignment_with_limit(&mu, &paired, usize::MAX)?;
            let coupling_rhs = coupling_upper_bound(&mu, &paired)?;
            samples.push(ChaosSample {
                size: n,
                replicate: r,
                pathwise,
                w2sq,
                first_two,
                coupling_lhs,
                coupling_rhs,
            });
            if cfg.proxy_check && n == cfg.sizes[0] {
                let double = run_auxiliary(coeffs, &system, 2 * m, spec)?;
                let p = (0..tracked)
                    .map(|k| sup_sq_distance(&aux, &double, k))
                    .sum::<f64>()
                    / tracked as f64;
                proxy_pathwise.push(p);
                let big = double.measure_at(last);
                let mut pick = derive_stream(seed, "subsample-proxy", m as u64);
                let idx = sample_indices(&mut pick, 2 * m, m).into_vec();
                proxy_w2.push(w2_squared_assignment_with_limit(
                    &aux_cloud,
                    &big.select(&idx),
                    usize::MAX,
                )?);
            }
        }
    }

    let mut report = ExperimentReport::new(
        "chaos",
        serde_json::json!({ "chaos": cfg, "run": spec, "initial_state": initial_state, "root": root }),
        &["n", "pathwise", "pathwise_se", "w2sq", "w2sq_se", "m"],
    );
    let xs: Vec<f64> = cfg.sizes.iter().map(|&n| n as f64).collect();
    let (mut e1, mut s1, mut e2, mut s2) = (vec![], vec![], vec![], vec![]);
    for &n in &cfg.sizes {
        let at: Vec<&ChaosSample> = samples.iter().filter(|s| s.size == n).collect();
        let (m1, se1) = mean_se(&at.iter().map(|s| s.pathwise).collect::<Vec<_>>());
        let (m2, se2) = mean_se(&at.iter().map(|s| s.w2sq).collect::<Vec<_>>());
        report.rows.push(vec![n as f64, m1, se1, m2, se2, (cfg.m_factor * n) as f64]);
        e1.push(m1);
        s1.push(se1);
        e2.push(m2);
        s2.push(se2);
    }

    let slope_verdict = |name: &str, key: &str, e: &[f64], s: &[f64], report: &mut ExperimentReport| {
        match rate_fit(&xs, e, s) {
            Ok(fit) => {
                let ok = fit.slope <= cfg.slope_threshold;
                report.verdicts.push(Verdict::new(
                    name,
                    ok,
                    format!("slope {} vs threshold {}", fit.slope, cfg.slope_threshold),
                ));
                report.fits.insert(key.to_string(), fit);
            }
            Err(e) => report
                .verdicts
                .push(Verdict::new(name, false, format!("fit failed: {e}"))),
        }
    };
    slope_verdict("pathwise_rate", "pathwise", &e1, &s1, &mut report);
    report.verdicts.push(Verdict::new(
        "pathwise_monotone",
        nonincreasing_within(&e1, &s1, 3.0),
        format!("errors {e1:?}"),
    ));
    slope_verdict("w2_rate", "w2sq", &e2, &s2, &mut report);

    // Self-calibrated constant from the smallest N with eps_N = N^{-1/2}.
    let c_tilde = e1[0] * xs[0].sqrt();
    let bound_ok = e1
        .iter()
        .zip(&s1)
        .zip(&xs)
        .all(|((e, s), n)| *e <= c_tilde / n.sqrt() + 3.0 * s);
    report.metadata.insert("c_tilde".into(), c_tilde);
    report.verdicts.push(Verdict::new(
        "rate_bound",
        bound_ok,
        format!("C = {c_tilde} calibrated at N = {}", xs[0]),
    ));

    let first: Vec<f64> = samples
        .iter()
        .filter(|s| s.size == cfg.sizes[0])
        .map(|s| s.first_two[0])
        .collect();
    let second: Vec<f64> = samples
        .iter()
        .filter(|s| s.size == cfg.sizes[0])
        .map(|s| s.first_two[1])
        .collect();
    let (ma, sa) = mean_se(&first);
    let (mb, sb) = mean_se(&second);
    report.metadata.insert("particle0_mean".into(), ma);
    report.metadata.insert("particle1_mean".into(), mb);
    report.verdicts.push(Verdict::new(
        "exchangeable",
        (ma - mb).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(),
        format!("particle 0: {ma} ± {sa}, particle 1: {mb} ± {sb}"),
    ));

    let violations = samples
        .iter()
        .filter(|s| s.coupling_lhs > s.coupling_rhs + 1e-10)
        .count();
    let strict = samples
        .iter()
        .filter(|s| s.coupling_rhs - s.coupling_lhs > 1e-9)
        .count();
    report.metadata.insert("coupling_strict_witnesses".into(), strict as f64);
    report.verdicts.push(Verdict::new(
        "coupling_inequality",
        violations == 0,
        format!("{violations} violations, {strict} strict witnesses"),
    ));

    if !proxy_pathwise.is_empty() {
        let (p1, p1se) = mean_se(&proxy_pathwise);
        let (p2, p2se) = mean_se(&proxy_w2);
        report.metadata.insert("proxy_pathwise_m_vs_2m".into(), p1);
        report.metadata.insert("proxy_pathwise_m_vs_2m_se".into(), p1se);
        report.metadata.insert("proxy_w2sq_m_vs_2m".into(), p2);
        report.metadata.insert("proxy_w2sq_m_vs_2m_se".into(), p2se);
    }
    report.raw = serde_json::to_value(&samples).expect("serializable samples");
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Result of checking `W_2^2(a, b) <= (1/n) sum |a_k - b_k|^2` on coupled
/// clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub mean_lhs: f64,
    pub mean_rhs: f64,
    /// Number of pairs with `rhs - lhs > 1e-9`.
    pub strict_witnesses: usize,
}

/// Checks the coupling inequality on every pair of index-wise coupled
/// clouds; a violation can only come from a transport-solver bug.
pub fn coupling_check(
    pairs: &[(EmpiricalMeasure, EmpiricalMeasure)],
) -> Result<CouplingCheck, ExperimentError> {
    let mut lhs = Vec::with_capacity(pairs.len());
    let mut rhs = Vec::with_capacity(pairs.len());
    for (replicate, (a, b)) in pairs.iter().enumerate() {
        let l = w2_squared_assignment_with_limit(a, b, usize::MAX)?;
        let r = coupling_upper_bound(a, b)?;
        if l > r + 1e-10 {
            return Err(ExperimentError::InequalityViolated {
                replicate,
                lhs: l,
                rhs: r,
            });
        }
        lhs.push(l);
        rhs.push(r);
    }
    let n = pairs.len().max(1) as f64;
    Ok(CouplingCheck {
        mean_lhs: lhs.iter().sum::<f64>() / n,
        mean_rhs: rhs.iter().sum::<f64>() / n,
        strict_witnesses: lhs.iter().zip(&rhs).filter(|(l, r)| *r - *l > 1e-9).count(),
        lhs,
        rhs,
    })
}

fn default_avg_replicates() -> usize {
    32
}
fn default_avg_size() -> usize {
    256
}
fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingConfig {
    /// Decreasing time scales.
    pub time_scales: Vec<f64>,
    #[serde(default = "default_avg_replicates")]
    pub replicates: usize,
    /// Ensemble size used as law proxy for both systems.
    #[serde(default = "default_avg_size")]
    pub ensemble_size: usize,
    /// Required `error(eps_min) / error(eps_max)` upper bound.
    #[serde(default = "default_fraction")]
    pub final_fraction: f64,
}

impl AveragingConfig {
    pub fn new(time_scales: Vec<f64>) -> Self {
        Self {
            time_scales,
            replicates: default_avg_replicates(),
            ensemble_size: default_avg_size(),
            final_fraction: default_fraction(),
        }
    }
}

/// Averaging principle: `E|Y_T^eps - Ȳ_T|^2` for the switching system with
/// chain generator `Q / eps` against the averaged system, both driven by the
/// same Brownian and Poisson streams and stepped on the same grid. Chain paths of one replicate come from
/// the same stream for every `eps`, so they are time-rescaled copies.
pub fn averaging_experiment(
    coeffs: Arc<dyn Coefficients>,
    q: &QMatrix,
    initial_state: usize,
    spec: &RunSpec,
    cfg: &AveragingConfig,
    root: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let started = Instant::now();
    if cfg.time_scales.is_empty() || cfg.time_scales.windows(2).any(|w| w[0] <= w[1]) {
        return Err(ExperimentError::InvalidConfig(
            "time scales must be non-empty and decreasing".into(),
        ));
    }
    if cfg.replicates < 2 || cfg.ensemble_size == 0 {
        return Err(ExperimentError::InvalidConfig(
            "need at least 2 replicates and a positive ensemble size".into(),
        ));
    }
    if !coeffs.g_state_free() {
        return Err(ExperimentError::Model(ModelError::GNotStateFree));
    }
    let pi = invariant_measure(q)?;
    let averaged = average(coeffs.clone(), &pi)?;

    let scales = cfg.time_scales.len();
    let mut errors = vec![Vec::with_capacity(cfg.replicates); scales];
    let mut pairs: Vec<Vec<(EmpiricalMeasure, EmpiricalMeasure)>> = vec![Vec::new(); scales];
    for r in 0..cfg.replicates {
        let seed = replicate_seed(root, r as u64);
        for (e, &eps) in cfg.time_scales.iter().enumerate() {
            let y = run_particle_system(
                coeffs.as_ref(),
                q,
                initial_state,
                cfg.ensemble_size,
                spec,
                seed,
                eps,
            )?;
            let bar = run_averaged_on(&averaged, &y.path, cfg.ensemble_size, spec, seed)?;
            let bar_t = bar.measure_at(bar.grid.len() - 1);
            let y_t = y.measure_at(y.grid.len() - 1);
            errors[e].push(coupling_upper_bound(&y_t, &bar_t)?);
            pairs[e].push((y_t, bar_t.clone()));
        }
    }

    let mut report = ExperimentReport::new(
        "average",
        serde_json::json!({ "average": cfg, "run": spec, "initial_state": initial_state, "root": root }),
        &["eps", "error", "error_se", "w2sq", "w2sq_se"],
    );
    let (mut es, mut ss) = (vec![], vec![]);
    let mut checks = Vec::new();
    for (e, &eps) in cfg.time_scales.iter().enumerate() {
        let (m, se) = mean_se(&errors[e]);
        let check = coupling_check(&pairs[e])?;
        let (wm, wse) = mean_se(&check.lhs);
        report.rows.push(vec![eps, m, se, wm, wse]);
        es.push(m);
        ss.push(se);
        checks.push(check);
    }
    report.verdicts.push(Verdict::new(
        "monotone",
        nonincreasing_within(&es, &ss, 3.0),
        format!("errors {es:?}"),
    ));
    let first = es[0];
    let last = *es.last().expect("non-empty");
    report.verdicts.push(Verdict::new(
        "final_fraction",
        last <= cfg.final_fraction * first,
        format!("error(eps_min) = {last}, error(eps_max) = {first}"),
    ));
    let strict: usize = checks.iter().map(|c| c.strict_witnesses).sum();
    report.metadata.insert("coupling_strict_witnesses".into(), strict as f64);
    report.verdicts.push(Verdict::new(
        "coupling_inequality",
        true,
        format!("all {} replicate pairs satisfy it", scales * cfg.replicates),
    ));
    if scales >= 3 && es.iter().all(|&e| e > 0.0) {
        if let Ok(fit) = rate_fit(&cfg.time_scales, &es, &ss) {
            report.fits.insert("error_vs_eps".into(), fit);
        }
    }
    report.raw = serde_json::json!({ "errors": errors, "coupling": checks });
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn default_reference() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fg14Config {
    pub law: PointLaw,
    pub sizes: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_reference")]
    pub reference_size: usize,
    /// Defaults to `-0.4` for `d <= 4` and `-0.8 * 2 / d` above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_threshold: Option<f64>,
}

impl Fg14Config {
    pub fn new(law: PointLaw, sizes: Vec<usize>) -> Self {
        Self {
            law,
            sizes,
            replicates: default_replicates(),
            reference_size: default_reference(),
            slope_threshold: None,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.slope_threshold.unwrap_or_else(|| {
            let d = self.law.dim() as f64;
            if d <= 4.0 {
                -0.4
            } else {
                -0.8 * 2.0 / d
            }
        })
    }
}

/// Empirical-measure rate: `E W_2^2(mu_N, reference)` against `N`.
///
/// In one dimension the distance to the full reference cloud is exact
/// (quantile coupling of unequal-size clouds). In higher dimension the
/// reference is subsampled to `N` points and the equal-size distance is
/// solved exactly; that doubles the sampling error but keeps the rate.
pub fn fg14_experiment(cfg: &Fg14Config, root: u64) -> Result<ExperimentReport, ExperimentError> {
    let started = Instant::now();
    cfg.law.validate().map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
    if cfg.sizes.is_empty() || cfg.replicates == 0 || cfg.reference_size == 0 {
        return Err(ExperimentError::InvalidConfig(
            "sizes, replicates and reference size must be positive".into(),
        ));
    }
    let d = cfg.law.dim();
    let mut ref_stream = derive_stream(root, "fg14-reference", 0);
    let reference = EmpiricalMeasure::new(d, cfg.law.sample_many(&mut ref_stream, cfg.reference_size))?;

    let mut raw = vec![Vec::with_capacity(cfg.replicates); cfg.sizes.len()];
    for r in 0..cfg.replicates {
        let seed = replicate_seed(root, r as u64);
        for (i, &n) in cfg.sizes.iter().enumerate() {
            let mut s = derive_stream(seed, "fg14-sample", n as u64);
            let sample = EmpiricalMeasure::new(d, cfg.law.sample_many(&mut s, n))?;
            let value = if d == 1 {
                w2_squared_1d_quantile(&sample, &reference)?
            } else {
                let mut pick = derive_stream(seed, "fg14-subsample", n as u64);
                let idx = sample_indices(&mut pick, cfg.reference_size, n.min(cfg.reference_size))
                    .into_vec();
                w2_squared_assignment_with_limit(&sample, &reference.select(&idx), usize::MAX)?
            };
            raw[i].push(value);
        }
    }

    let mut report = ExperimentReport::new(
        "fg14",
        serde_json::json!({ "fg14": cfg, "root": root }),
        &["n", "w2sq", "w2sq_se"],
    );
    let xs: Vec<f64> = cfg.sizes.iter().map(|&n| n as f64).collect();
    let (mut es, mut ss) = (vec![], vec![]);
    for (i, &n) in cfg.sizes.iter().enumerate() {
        let (m, se) = mean_se(&raw[i]);
        report.rows.push(vec![n as f64, m, se]);
        es.push(m);
        ss.push(se);
    }
    let threshold = cfg.threshold();
    if es.iter().all(|&e| e == 0.0) {
        report.verdicts.push(Verdict::new(
            "rate",
            true,
            "all distances vanish (degenerate law)".into(),
        ));
    } else {
        match rate_fit(&xs, &es, &ss) {
            Ok(fit) => {
                report.verdicts.push(Verdict::new(
                    "rate",
                    fit.slope <= threshold,
                    format!("slope {} vs threshold {threshold}", fit.slope),
                ));
                report.fits.insert("w2sq".into(), fit);
            }
            Err(e) => report
                .verdicts
                .push(Verdict::new("rate", false, format!("fit failed: {e}"))),
        }
    }
    report.raw = serde_json::json!(raw);
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn default_refinement() -> usize {
    16
}
fn default_order_threshold() -> f64 {
    -0.3
}
fn default_order_particles() -> usize {
    64
}
fn default_order_replicates() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongOrderConfig {
    /// Step multipliers `k`: runs use step `k * h` with the run spec's `h`
    /// as the coarsest reference unit; the reference step is `h / refinement`.
    pub multipliers: Vec<usize>,
    #[serde(default = "default_refinement")]
    pub refinement: usize,
    #[serde(default = "default_order_particles")]
    pub particles: usize,
    #[serde(default = "default_order_replicates")]
    pub replicates: usize,
    /// Threshold on the slope of log RMS error against log step count.
    #[serde(default = "default_order_threshold")]
    pub slope_threshold: f64,
}

/// Strong error of the scheme at `T` against a fine reference run sharing
/// the same Brownian path and Poisson points (fine noise grid `h / refinement`
/// for every run). The fit is against the number of steps, so a method of
/// strong order `p` gives a slope near `-p`.
pub fn strong_order_experiment(
    coeffs: &dyn Coefficients,
    q: &QMatrix,
    initial_state: usize,
    spec: &RunSpec,
    cfg: &StrongOrderConfig,
    root: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let started = Instant::now();
    if cfg.multipliers.len() < 3 || cfg.refinement == 0 || cfg.particles == 0 || cfg.replicates < 2 {
        return Err(ExperimentError::InvalidConfig(
            "need >= 3 multipliers, positive refinement and particles, >= 2 replicates".into(),
        ));
    }
    let fine_step = spec.step / cfg.refinement as f64;
    let reference_spec = RunSpec {
        step: fine_step,
        noise_resolution: 1,
        ..spec.clone()
    };
    let mut raw = vec![Vec::with_capacity(cfg.replicates); cfg.multipliers.len()];
    for r in 0..cfg.replicates {
        let seed = replicate_seed(root, r as u64);
        let reference =
            run_particle_system(coeffs, q, initial_state, cfg.particles, &reference_spec, seed, 1.0)?;
        let ref_t = reference.terminal();
        for (i, &k) in cfg.multipliers.iter().enumerate() {
            let fine = k * cfg.refinement;
            let run_spec = RunSpec {
                step: fine_step * fine as f64,
                noise_resolution: fine,
                ..spec.clone()
            };
            let run = simulate_ensemble(
                coeffs,
                reference.path.clone(),
                cfg.particles,
                &run_spec,
                seed,
                LawSource::Own,
            )?;
            let err = run
                .terminal()
                .iter()
                .zip(ref_t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / cfg.particles as f64;
            raw[i].push(err);
        }
    }
    let mut report = ExperimentReport::new(
        "strong-order",
        serde_json::json!({ "strong_order": cfg, "run": spec, "root": root }),
        &["step", "steps", "rms_error", "mse", "mse_se"],
    );
    let (mut xs, mut es, mut ss) = (vec![], vec![], vec![]);
    for (i, &k) in cfg.multipliers.iter().enumerate() {
        let h = fine_step * (k * cfg.refinement) as f64;
        let steps = (spec.horizon / h).round();
        let (m, se) = mean_se(&raw[i]);
        report.rows.push(vec![h, steps, m.sqrt(), m, se]);
        xs.push(steps);
        es.push(m.sqrt());
        ss.push(if m > 0.0 { se / (2.0 * m.sqrt()) } else { 0.0 });
    }
    match rate_fit(&xs, &es, &ss) {
        Ok(fit) => {
            report.verdicts.push(Verdict::new(
                "strong_order",
                fit.slope <= cfg.slope_threshold,
                format!("slope {} vs threshold {}", fit.slope, cfg.slope_threshold),
            ));
            report.fits.insert("rms_error_vs_steps".into(), fit);
        }
        Err(e) => report
            .verdicts
            .push(Verdict::new("strong_order", false, format!("fit failed: {e}"))),
    }
    report.raw = serde_json::json!(raw);
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Picard fixed point along one chain path, with the contraction verdicts
/// and, for the OU model, the conditional-mean comparison.
pub fn picard_experiment(
    coeffs: &dyn Coefficients,
    path: Arc<ChainPath>,
    spec: &RunSpec,
    options: &PicardOptions,
    root: u64,
    oracle: Option<&SwitchingMfOu>,
) -> Result<ExperimentReport, ExperimentError> {
    let started = Instant::now();
    let mut report = ExperimentReport::new(
        "picard",
        serde_json::json!({ "picard": options, "run": spec, "root": root }),
        &["iteration", "distance", "ratio"],
    );
    let result = match picard_solve(coeffs, path.clone(), spec, root, options) {
        Ok(r) => r,
        Err(SimError::NoConvergence { distances }) => {
            for (i, d) in distances.iter().enumerate() {
                let ratio = if i > 0 { d / distances[i - 1] } else { f64::NAN };
                report.rows.push(vec![(i + 1) as f64, *d, ratio]);
            }
            report.verdicts.push(Verdict::new(
                "converged",
                false,
                format!("no convergence in {} iterations", options.max_iter),
            ));
            report.raw = serde_json::json!({ "distances": distances });
            report.elapsed_seconds = started.elapsed().as_secs_f64();
            return Ok(report);
        }
        Err(e) => return Err(e.into()),
    };
    let ds = &result.distances;
    for (i, d) in ds.iter().enumerate() {
        let ratio = if i > 0 { d / ds[i - 1] } else { f64::NAN };
        report.rows.push(vec![(i + 1) as f64, *d, ratio]);
    }
    report.verdicts.push(Verdict::new(
        "converged",
        true,
        format!("{} iterations, final distance {}", ds.len(), ds[ds.len() - 1]),
    ));
    let nonincreasing = ds.windows(2).skip(1).all(|w| w[1] <= 1.1 * w[0]);
    let terminal_ratio = if ds.len() >= 2 && ds[ds.len() - 2] > 0.0 {
        ds[ds.len() - 1] / ds[ds.len() - 2]
    } else {
        0.0
    };
    report.metadata.insert("terminal_ratio".into(), terminal_ratio);
    report.verdicts.push(Verdict::new(
        "contraction",
        nonincreasing && terminal_ratio < 1.0,
        format!("terminal ratio {terminal_ratio}"),
    ));
    if let Some(ou) = oracle {
        let (worst, ok) = oracle_mean_check(ou, &result.ensemble, spec);
        report.metadata.insert("oracle_max_z".into(), worst);
        report.verdicts.push(Verdict::new(
            "mean_oracle",
            ok,
            format!("largest |mean - oracle| / SE = {worst}"),
        ));
    }
    report.raw = serde_json::json!({ "distances": ds });
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Largest `|ensemble mean - oracle| / SE` over base grid times and
/// coordinates, and whether it stays within 3.
pub fn oracle_mean_check(ou: &SwitchingMfOu, ensemble: &ParticleEnsemble, spec: &RunSpec) -> (f64, bool) {
    let m0 = spec.initial_law.mean();
    let v0 = spec.initial_law.coordinate_variances();
    let mut worst: f64 = 0.0;
    for &j in &ensemble.grid.base_index[1..] {
        let t = ensemble.grid.times[j];
        let oracle = ou.mean_oracle(&m0, &ensemble.path, t);
        let var = ou.mean_noise_variance(&v0, &ensemble.path, t);
        let mean = ensemble.mean_at(j);
        for k in 0..ensemble.dim {
            let se = (var[k] / ensemble.count as f64).sqrt();
            let diff = (mean[k] - oracle[k]).abs();
            let z = if se > 0.0 {
                diff / se
            } else if diff < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
    }
    (worst, worst <= 3.0)
}

/// Total-variation decay of the chain toward its invariant law, with the
/// monotonicity verdict and, for two states, the closed-form comparison.
pub fn ergodicity_experiment(q: &QMatrix, grid: &[f64]) -> Result<(ExperimentReport, ErgodicProfile), ExperimentError> {
    let started = Instant::now();
    let profile = ergodic_profile(q, grid)?;
    let mut report = ExperimentReport::new(
        "ergodicity",
        serde_json::json!({ "q": q, "grid": grid }),
        &["t", "state", "tv"],
    );
    for (j, &t) in profile.times.iter().enumerate() {
        for (i, tv) in profile.tv.iter().enumerate() {
            report.rows.push(vec![t, i as f64, tv[j]]);
        }
    }
    let monotone = profile
        .tv
        .iter()
        .all(|row| row.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    report.verdicts.push(Verdict::new(
        "monotone",
        monotone,
        "tv nonincreasing per state within 1e-10".into(),
    ));
    report.metadata.insert("decay_rate".into(), profile.decay_rate);
    for (i, p) in profile.invariant.iter().enumerate() {
        report.metadata.insert(format!("pi_{i}"), *p);
    }
    if q.size() == 2 {
        let (a, b) = (q.rate(0, 1), q.rate(1, 0));
        let pi = [b / (a + b), a / (a + b)];
        let mut worst: f64 = 0.0;
        for (j, &t) in profile.times.iter().enumerate() {
            for (i, row) in profile.tv.iter().enumerate() {
                let closed = 2.0 * pi[1 - i] * (-(a + b) * t).exp();
                worst = worst.max((row[j] - closed).abs());
            }
        }
        report.metadata.insert("closed_form_max_error".into(), worst);
        report.verdicts.push(Verdict::new(
            "closed_form",
            worst <= 1e-8,
            format!("max deviation from 2 pi_other exp(-(a+b)t): {worst}"),
        ));
    }
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((report, profile))
}
