//! Coefficient triples `(b, sigma, g)` of a regime-switching McKean-Vlasov
//! SDE with jumps.
//!
//! Measure dependence goes through [`MeasureView`], which exposes the mean,
//! the second moment and kernel expectations of an equal-weight cloud.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{ChainPath, ProbVector};
use crate::measures::{w2_squared_assignment_with_limit, EmpiricalMeasure};
use crate::noise::{JumpSpec, NoiseError, PointLaw, RngStream};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("invalid parameters for `{model}`: {message}")]
    InvalidParams { model: String, message: String },
    #[error("model has {expected} states but {got} weights were given")]
    StateMismatch { expected: usize, got: usize },
    #[error("the jump coefficient depends on the state or the measure")]
    GNotStateFree,
    #[error("jump coefficient declared state-free but varies with (x, mu) in state {state}")]
    GStateFreeViolated { state: usize },
    #[error("envelope violated in state {state} at mark {mark:?}: |g| = {value} > h = {bound}")]
    EnvelopeViolated {
        state: usize,
        mark: Vec<f64>,
        value: f64,
        bound: f64,
    },
    #[error("need at least {min} probes, got {got}")]
    TooFewProbes { min: usize, got: usize },
    #[error("probe radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Read-only functionals of an equal-weight point cloud.
///
/// Mean and second moment are computed once, in index order, so every
/// evaluation against the same cloud sees bit-identical values.
#[derive(Debug, Clone)]
pub struct MeasureView<'a> {
    dim: usize,
    points: &'a [f64],
    mean: Vec<f64>,
    second_moment: f64,
}

impl<'a> MeasureView<'a> {
    /// `points` is row-major `n x dim` with `n >= 1`.
    pub fn new(dim: usize, points: &'a [f64]) -> Self {
        assert!(dim > 0 && !points.is_empty() && points.len().is_multiple_of(dim));
        let n = points.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut m2 = 0.0;
        for p in points.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
                m2 += x * x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Self {
            dim,
            points,
            mean,
            second_moment: m2 / n as f64,
        }
    }

    pub fn from_measure(measure: &'a EmpiricalMeasure) -> Self {
        Self::new(measure.dim(), measure.points())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &'a [f64] {
        self.points
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `m_2(mu) = ∫|y|^2 mu(dy)`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// `∫ phi(y, x) mu(dy)` at the query point `x`.
    pub fn kernel_expectation<F>(&self, x: &[f64], phi: F) -> f64
    where
        F: Fn(&[f64], &[f64]) -> f64,
    {
        let total: f64 = self.points.chunks_exact(self.dim).map(|y| phi(y, x)).sum();
        total / self.len() as f64
    }
}

/// Coefficients `b(x, mu, i)`, `sigma(x, mu, i)` and `g(x, mu, i, z)` together
/// with the jump intensity.
///
/// All evaluations write into caller-provided buffers; `sigma` is `d x d`
/// row-major and multiplies a `d`-dimensional Brownian increment. Marks live
/// in `R^{jump_spec().dim()}`, which may differ from `d`.
pub trait Coefficients: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Number of switching states the coefficients are indexed by.
    fn states(&self) -> usize;

    fn jump_spec(&self) -> &JumpSpec;

    fn drift(&self, x: &[f64], mu: &MeasureView, state: usize, out: &mut [f64]);

    fn diffusion(&self, x: &[f64], mu: &MeasureView, state: usize, out: &mut [f64]);

    fn jump(&self, x: &[f64], mu: &MeasureView, state: usize, z: &[f64], out: &mut [f64]);

    /// True when `g` does not depend on `x` or `mu`.
    fn g_state_free(&self) -> bool {
        false
    }

    /// `∫ g(x, mu, i, z) lambda(dz)`. The default integrates with the mark
    /// law's quadrature rule.
    fn jump_compensator(&self, x: &[f64], mu: &MeasureView, state: usize, out: &mut [f64]) {
        let spec = self.jump_spec();
        let mut g = vec![0.0; out.len()];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (w, z) in spec.marks.quadrature() {
            self.jump(x, mu, state, &z, &mut g);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += spec.rate * w * gi;
            }
        }
    }
}

fn check_per_state(model: &str, name: &str, values: &[f64], states: usize) -> Result<(), ModelError> {
    if values.len() != states {
        return Err(ModelError::InvalidParams {
            model: model.to_string(),
            message: format!("`{name}` has {} entries, expected {states}", values.len()),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::InvalidParams {
            model: model.to_string(),
            message: format!("`{name}` contains a non-finite value"),
        });
    }
    Ok(())
}

fn one() -> usize {
    1
}

/// Parameters of the switching mean-field Ornstein-Uhlenbeck model
/// `b = a_i (mean(mu) - x) + c_i`, `sigma = s_i I`, `g = gamma_i z`.
///
/// `a`, `c`, `s`, `gamma` hold one scalar per state; `c_i` is added to every
/// coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchingOuParams {
    #[serde(default = "one")]
    pub dim: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub gamma: Vec<f64>,
    pub jumps: JumpSpec,
}

/// As [`SwitchingOuParams`] plus the coupling `kappa` of the jump term
/// `g = gamma_i z + kappa (mean(mu) - x) |z|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchingOuJumpParams {
    #[serde(default = "one")]
    pub dim: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: f64,
    pub jumps: JumpSpec,
}

/// Switching mean-field OU model with additive or measure-dependent jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingMfOu {
    pub dim: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: f64,
    pub jumps: JumpSpec,
    mark_mean: Vec<f64>,
    mark_abs_mean: f64,
}

impl SwitchingMfOu {
    pub const NAME: &'static str = "switching-mf-ou";
    pub const NAME_GXMU: &'static str = "switching-mf-ou-gxmu";

    pub fn new(params: SwitchingOuParams) -> Result<Self, ModelError> {
        Self::build(Self::NAME, params, 0.0)
    }

    pub fn with_jump_coupling(params: SwitchingOuJumpParams) -> Result<Self, ModelError> {
        let SwitchingOuJumpParams {
            dim,
            a,
            c,
            s,
            gamma,
            kappa,
            jumps,
        } = params;
        if !kappa.is_finite() {
            return Err(ModelError::InvalidParams {
                model: Self::NAME_GXMU.into(),
                message: "`kappa` must be finite".into(),
            });
        }
        let base = SwitchingOuParams {
            dim,
            a,
            c,
            s,
            gamma,
            jumps,
        };
        Self::build(Self::NAME_GXMU, base, kappa)
    }

    fn build(name: &str, p: SwitchingOuParams, kappa: f64) -> Result<Self, ModelError> {
        let states = p.a.len();
        if states == 0 || p.dim == 0 {
            return Err(ModelError::InvalidParams {
                model: name.into(),
                message: "need at least one state and dimension >= 1".into(),
            });
        }
        for (label, v) in [("a", &p.a), ("c", &p.c), ("s", &p.s), ("gamma", &p.gamma)] {
            check_per_state(name, label, v, states)?;
        }
        p.jumps.validate()?;
        if p.jumps.dim() != p.dim {
            return Err(ModelError::InvalidParams {
                model: name.into(),
                message: format!(
                    "marks live in R^{} but the state is in R^{}",
                    p.jumps.dim(),
                    p.dim
                ),
            });
        }
        let mark_mean = p.jumps.marks.mean();
        let mark_abs_mean = if kappa != 0.0 {
            p.jumps.marks.abs_mean()
        } else {
            0.0
        };
        Ok(Self {
            dim: p.dim,
            a: p.a,
            c: p.c,
            s: p.s,
            gamma: p.gamma,
            kappa,
            jumps: p.jumps,
            mark_mean,
            mark_abs_mean,
        })
    }

    /// Conditional mean given the chain path:
    /// `m(t) = m(0) + ∫_0^t c_{Lambda_s} ds` in every coordinate.
    ///
    /// Mean reversion cancels in the ensemble average and compensated
    /// jumps have zero mean, so this is exact for the particle system.
    pub fn mean_oracle(&self, initial_mean: &[f64], path: &ChainPath, t: f64) -> Vec<f64> {
        let drift = path.integrate(t, |i| self.c[i]);
        initial_mean.iter().map(|m| m + drift).collect()
    }

    /// Per-coordinate variance of `N` times the ensemble mean given the chain
    /// path: `Var_0 + ∫_0^t (s^2 + gamma^2 rate E z_k^2)_{Lambda_s} ds`.
    ///
    /// The standard error of an `N`-particle ensemble mean is
    /// `sqrt(value / N)`. Exact when `kappa = 0`.
    pub fn mean_noise_variance(&self, initial_var: &[f64], path: &ChainPath, t: f64) -> Vec<f64> {
        let rate = self.jumps.rate;
        self.jumps
            .marks
            .coordinate_second_moments()
            .iter()
            .zip(initial_var)
            .map(|(ez2, v0)| {
                v0 + path.integrate(t, |i| {
                    self.s[i] * self.s[i] + self.gamma[i] * self.gamma[i] * rate * ez2
                })
            })
            .collect()
    }
}

impl Coefficients for SwitchingMfOu {
    fn dim(&self) -> usize {
        self.dim
    }

    fn states(&self) -> usize {
        self.a.len()
    }

    fn jump_spec(&self) -> &JumpSpec {
        &self.jumps
    }

    fn drift(&self, x: &[f64], mu: &MeasureView, state: usize, out: &mut [f64]) {
        let (a, c) = (self.a[state], self.c[state]);
        for ((o, xi), m) in out.iter_mut().zip(x).zip(mu.mean()) {
            *o = a * (m - xi) + c;
        }
    }

    fn diffusion(&self, _x: &[f64], _mu: &MeasureView, state: usize, out: &mut [f64]) {
        let d = self.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..d {
            out[k * d + k] = self.s[state];
        }
    }

    fn jump(&self, x: &[f64], mu: &MeasureView, state: usize, z: &[f64], out: &mut [f64]) {
        let gamma = self.gamma[state];
        let norm = if self.kappa != 0.0 {
            z.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            0.0
        };
        for (((o, zi), xi), m) in out.iter_mut().zip(z).zip(x).zip(mu.mean()) {
            *o = gamma * zi;
            if self.kappa != 0.0 {
                *o += self.kappa * (m - xi) * norm;
            }
        }
    }

    fn g_state_free(&self) -> bool {
        self.kappa == 0.0
    }

    fn jump_compensator(&self, x: &[f64], mu: &MeasureView, state: usize, out: &mut [f64]) {
        let rate = self.jumps.rate;
        let gamma = self.gamma[state];
        for (((o, ez), xi), m) in out.iter_mut().zip(&self.mark_mean).zip(x).zip(mu.mean()) {
            *o = rate * gamma * ez;
            if self.kappa != 0.0 {
                *o += rate * self.kappa * (m - xi) * self.mark_abs_mean;
            }
        }
    }
}

/// Parameters of the constant model: `b = b_i`, `sigma = s_i I`, `g = g_i`
/// (each a scalar per state broadcast to every coordinate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantParams {
    #[serde(default = "one")]
    pub dim: usize,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
    pub g: Vec<f64>,
    pub jumps: JumpSpec,
}

/// Coefficients that depend on the switching state only.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    params: ConstantParams,
}

impl ConstantModel {
    pub const NAME: &'static str = "constant";

    pub fn new(params: ConstantParams) -> Result<Self, ModelError> {
        let states = params.b.len();
        if states == 0 || params.dim == 0 {
            return Err(ModelError::InvalidParams {
                model: Self::NAME.into(),
                message: "need at least one state and dimension >= 1".into(),
            });
        }
        for (label, v) in [("b", &params.b), ("s", &params.s), ("g", &params.g)] {
            check_per_state(Self::NAME, label, v, states)?;
        }
        params.jumps.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ConstantParams {
        &self.params
    }
}

impl Coefficients for ConstantModel {
    fn dim(&self) -> usize {
        self.params.dim
    }

    fn states(&self) -> usize {
        self.params.b.len()
    }

    fn jump_spec(&self) -> &JumpSpec {
        &self.params.jumps
    }

    fn drift(&self, _x: &[f64], _mu: &MeasureView, state: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = self.params.b[state]);
    }

    fn diffusion(&self, _x: &[f64], _mu: &MeasureView, state: usize, out: &mut [f64]) {
        let d = self.params.dim;
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..d {
            out[k * d + k] = self.params.s[state];
        }
    }

    fn jump(&self, _x: &[f64], _mu: &MeasureView, state: usize, _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = self.params.g[state]);
    }

    fn g_state_free(&self) -> bool {
        true
    }

    fn jump_compensator(&self, _x: &[f64], _mu: &MeasureView, state: usize, out: &mut [f64]) {
        let v = self.params.jumps.rate * self.params.g[state];
        out.iter_mut().for_each(|o| *o = v);
    }
}

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 3] = [
    SwitchingMfOu::NAME,
    SwitchingMfOu::NAME_GXMU,
    ConstantModel::NAME,
];

fn parse_params<T: serde::de::DeserializeOwned>(
    model: &str,
    params: &toml::Table,
) -> Result<T, ModelError> {
    toml::Value::Table(params.clone())
        .try_into()
        .map_err(|e: toml::de::Error| ModelError::InvalidParams {
            model: model.to_string(),
            message: e.message().to_string(),
        })
}

/// Instantiates a gallery model from its name and parameter table.
pub fn builtin_model(name: &str, params: &toml::Table) -> Result<Arc<dyn Coefficients>, ModelError> {
    match name {
        SwitchingMfOu::NAME => Ok(Arc::new(SwitchingMfOu::new(parse_params(name, params)?)?)),
        SwitchingMfOu::NAME_GXMU => Ok(Arc::new(SwitchingMfOu::with_jump_coupling(
            parse_params(name, params)?,
        )?)),
        ConstantModel::NAME => Ok(Arc::new(ConstantModel::new(parse_params(name, params)?)?)),
        other => Err(ModelError::UnknownModel(other.to_string())),
    }
}

/// Returns the OU model behind a gallery name, if it is one.
pub fn builtin_ou(name: &str, params: &toml::Table) -> Result<Option<SwitchingMfOu>, ModelError> {
    match name {
        SwitchingMfOu::NAME => Ok(Some(SwitchingMfOu::new(parse_params(name, params)?)?)),
        SwitchingMfOu::NAME_GXMU => Ok(Some(SwitchingMfOu::with_jump_coupling(parse_params(
            name, params,
        )?)?)),
        _ => Ok(None),
    }
}

/// Coefficients averaged against the invariant law of the chain:
/// `b̄(x, mu) = Σ_i pi_i b(x, mu, i)` and likewise for `sigma` and `g`.
///
/// Exposed as a one-state [`Coefficients`]; the `state` argument is ignored.
#[derive(Debug, Clone)]
pub struct AveragedCoefficients {
    inner: Arc<dyn Coefficients>,
    weights: Vec<f64>,
}

impl AveragedCoefficients {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn inner(&self) -> &Arc<dyn Coefficients> {
        &self.inner
    }

    fn mix<F>(&self, out: &mut [f64], mut eval: F)
    where
        F: FnMut(usize, &mut [f64]),
    {
        let mut buf = vec![0.0; out.len()];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &w) in self.weights.iter().enumerate() {
            eval(i, &mut buf);
            for (o, v) in out.iter_mut().zip(&buf) {
                *o += w * v;
            }
        }
    }
}

/// Averages `coeffs` against `pi`. Requires a state-free jump coefficient.
pub fn average(
    coeffs: Arc<dyn Coefficients>,
    pi: &ProbVector,
) -> Result<AveragedCoefficients, ModelError> {
    if pi.weights().len() != coeffs.states() {
        return Err(ModelError::StateMismatch {
            expected: coeffs.states(),
            got: pi.weights().len(),
        });
    }
    if !coeffs.g_state_free() {
        return Err(ModelError::GNotStateFree);
    }
    Ok(AveragedCoefficients {
        weights: pi.weights().to_vec(),
        inner: coeffs,
    })
}

impl Coefficients for AveragedCoefficients {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn states(&self) -> usize {
        1
    }

    fn jump_spec(&self) -> &JumpSpec {
        self.inner.jump_spec()
    }

    fn drift(&self, x: &[f64], mu: &MeasureView, _state: usize, out: &mut [f64]) {
        self.mix(out, |i, buf| self.inner.drift(x, mu, i, buf));
    }

    fn diffusion(&self, x: &[f64], mu: &MeasureView, _state: usize, out: &mut [f64]) {
        self.mix(out, |i, buf| self.inner.diffusion(x, mu, i, buf));
    }

    fn jump(&self, x: &[f64], mu: &MeasureView, _state: usize, z: &[f64], out: &mut [f64]) {
        self.mix(out, |i, buf| self.inner.jump(x, mu, i, z, buf));
    }

    fn g_state_free(&self) -> bool {
        true
    }

    fn jump_compensator(&self, x: &[f64], mu: &MeasureView, _state: usize, out: &mut [f64]) {
        self.mix(out, |i, buf| self.inner.jump_compensator(x, mu, i, buf));
    }
}

/// Inputs at which a probe ratio was largest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub state: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `W_2^2(mu, nu)` of the probe clouds (growth probes use `m_2(mu)`).
    pub measure_term: f64,
    pub ratio: f64,
}

/// Monte Carlo estimates of the Lipschitz and linear-growth constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Largest probe ratio of the Lipschitz inequality.
    pub k1: f64,
    /// Largest probe ratio of the growth inequality.
    pub k2: f64,
    /// `None` when no envelope is declared.
    pub envelope_ok: Option<bool>,
    pub probes: usize,
    pub k1_witness: Option<Witness>,
    pub k2_witness: Option<Witness>,
}

pub const MIN_PROBES: usize = 100;
const MAX_PROBE_CLOUD: usize = 16;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

fn point_in_ball(stream: &mut RngStream, dim: usize, radius: f64, out: &mut [f64]) {
    loop {
        for o in out.iter_mut() {
            *o = stream.standard_normal();
        }
        let n = sq_norm(out).sqrt();
        if n > 0.0 {
            let r = radius * stream.uniform().powf(1.0 / dim as f64);
            out.iter_mut().for_each(|o| *o *= r / n);
            return;
        }
    }
}

/// Probes the Lipschitz bound
/// `|b(x,mu,i) - b(y,nu,i)|^2 + |sigma(..) - sigma(..)|_F^2 + ∫|g(..) - g(..)|^2 dlambda
///  <= K1 (|x - y|^2 + W_2^2(mu, nu))`
/// and the growth bound
/// `|b|^2 + |sigma|_F^2 + ∫|g|^2 dlambda <= K2 (1 + |x|^2 + m_2(mu))`
/// at random points of the `radius` ball and random clouds of at most 16
/// points; also checks a declared jump envelope and the state-free flag.
///
/// `lambda` integrals use the mark law's quadrature rule. Each probe draws
/// from `stream` in sequence, so a longer run extends a shorter one.
pub fn validate_assumptions(
    coeffs: &dyn Coefficients,
    probes: usize,
    radius: f64,
    stream: &mut RngStream,
) -> Result<AssumptionReport, ModelError> {
    if probes < MIN_PROBES {
        return Err(ModelError::TooFewProbes {
            min: MIN_PROBES,
            got: probes,
        });
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(ModelError::InvalidRadius(radius));
    }
    let spec = coeffs.jump_spec();
    spec.validate()?;
    let d = coeffs.dim();
    let states = coeffs.states();
    let rule = spec.marks.quadrature();
    let mark_dim = spec.dim();

    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let (mut bx, mut by) = (vec![0.0; d], vec![0.0; d]);
    let (mut sx, mut sy) = (vec![0.0; d * d], vec![0.0; d * d]);
    let (mut gx, mut gy) = (vec![0.0; d], vec![0.0; d]);
    let mut z = vec![0.0; mark_dim];

    let mut report = AssumptionReport {
        k1: 0.0,
        k2: 0.0,
        envelope_ok: spec.envelope.as_ref().map(|_| true),
        probes,
        k1_witness: None,
        k2_witness: None,
    };

    let check_envelope = |state: usize, z: &[f64], g: &[f64]| -> Result<(), ModelError> {
        if let Some(h) = &spec.envelope {
            let value = sq_norm(g).sqrt();
            let bound = h.eval(z);
            if value > bound * (1.0 + 1e-12) + 1e-300 {
                return Err(ModelError::EnvelopeViolated {
                    state,
                    mark: z.to_vec(),
                    value,
                    bound,
                });
            }
        }
        Ok(())
    };

    for _ in 0..probes {
        let state = (stream.uniform() * states as f64) as usize % states;
        let size = 2 + (stream.uniform() * (MAX_PROBE_CLOUD - 1) as f64) as usize;
        let size = size.min(MAX_PROBE_CLOUD);
        point_in_ball(stream, d, radius, &mut x);
        point_in_ball(stream, d, radius, &mut y);
        let mut mu = vec![0.0; size * d];
        let mut nu = vec![0.0; size * d];
        for p in mu.chunks_exact_mut(d) {
            point_in_ball(stream, d, radius, p);
        }
        for p in nu.chunks_exact_mut(d) {
            point_in_ball(stream, d, radius, p);
        }
        spec.marks.sample_into(stream, &mut z);

        let mu_view = MeasureView::new(d, &mu);
        let nu_view = MeasureView::new(d, &nu);
        let w2sq = w2_squared_assignment_with_limit(
            &EmpiricalMeasure::new(d, mu.clone()).expect("finite probe cloud"),
            &EmpiricalMeasure::new(d, nu.clone()).expect("finite probe cloud"),
            MAX_PROBE_CLOUD,
        )
        .expect("equal-size probe clouds");

        coeffs.drift(&x, &mu_view, state, &mut bx);
        coeffs.drift(&y, &nu_view, state, &mut by);
        coeffs.diffusion(&x, &mu_view, state, &mut sx);
        coeffs.diffusion(&y, &nu_view, state, &mut sy);
        let mut jump_diff = 0.0;
        let mut jump_size = 0.0;
        for (w, q) in &rule {
            coeffs.jump(&x, &mu_view, state, q, &mut gx);
            coeffs.jump(&y, &nu_view, state, q, &mut gy);
            jump_diff += w * sq_dist(&gx, &gy);
            jump_size += w * sq_norm(&gx);
            check_envelope(state, q, &gx)?;
        }
        let lhs1 = sq_dist(&bx, &by) + sq_dist(&sx, &sy) + spec.rate * jump_diff;
        let lhs2 = sq_norm(&bx) + sq_norm(&sx) + spec.rate * jump_size;

        coeffs.jump(&x, &mu_view, state, &z, &mut gx);
        coeffs.jump(&y, &nu_view, state, &z, &mut gy);
        check_envelope(state, &z, &gx)?;
        if coeffs.g_state_free() {
            let scale = 1.0 + sq_norm(&gx).sqrt();
            if sq_dist(&gx, &gy).sqrt() > 1e-12 * scale {
                return Err(ModelError::GStateFreeViolated { state });
            }
        }

        let denom1 = sq_dist(&x, &y) + w2sq;
        if denom1 > 1e-12 {
            let ratio = lhs1 / denom1;
            if ratio > report.k1 || report.k1_witness.is_none() {
                report.k1 = report.k1.max(ratio);
                report.k1_witness = Some(Witness {
                    state,
                    x: x.clone(),
                    y: y.clone(),
                    measure_term: w2sq,
                    ratio,
                });
            }
        }
        let denom2 = 1.0 + sq_norm(&x) + mu_view.second_moment();
        let ratio = lhs2 / denom2;
        if ratio > report.k2 || report.k2_witness.is_none() {
            report.k2 = report.k2.max(ratio);
            report.k2_witness = Some(Witness {
                state,
                x: x.clone(),
                y: Vec::new(),
                measure_term: mu_view.second_moment(),
                ratio,
            });
        }
    }
    Ok(report)
}

/// Convenience: the OU model with per-state parameters and Gaussian or
/// uniform marks, used throughout examples and tests.
pub fn switching_ou(
    a: &[f64],
    c: &[f64],
    s: &[f64],
    gamma: &[f64],
    jumps: JumpSpec,
) -> Result<SwitchingMfOu, ModelError> {
    SwitchingMfOu::new(SwitchingOuParams {
        dim: jumps.dim(),
        a: a.to_vec(),
        c: c.to_vec(),
        s: s.to_vec(),
        gamma: gamma.to_vec(),
        jumps,
    })
}

/// Marks of a one-dimensional uniform law on `[lower, upper]`.
pub fn uniform_marks(rate: f64, lower: f64, upper: f64) -> JumpSpec {
    JumpSpec::new(
        rate,
        PointLaw::UniformBox {
            lower: vec![lower],
            upper: vec![upper],
        },
    )
}
