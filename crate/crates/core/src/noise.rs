//! Reproducible randomness for the two noise sources of the model.
//!
//! The common environment (the switching chain) and the idiosyncratic
//! per-particle noise (Brownian motions, Poisson random measures) live on
//! separate probability spaces. Here that split is realized by deriving
//! independent random streams from one root seed and a structured label
//! such as `("omega0", 0)` or `("omega1", k)`.
//!
//! Streams are ChaCha12 generators keyed by a SHA-256 digest of
//! `(root, component, index)`, so the same label yields the same bits on
//! every platform and distinct labels give unrelated keys.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid jump law: {0}")]
    InvalidJumpSpec(String),
    #[error("invalid law: {0}")]
    InvalidLaw(String),
}

/// Structured label of a random stream, e.g. `("omega1", 17)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamLabel {
    pub component: String,
    pub index: u64,
}

impl StreamLabel {
    pub fn new(component: impl Into<String>, index: u64) -> Self {
        Self {
            component: component.into(),
            index,
        }
    }
}

impl std::fmt::Display for StreamLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.component, self.index)
    }
}

/// Stream labels used by the simulators.
pub mod labels {
    /// The switching chain.
    pub const CHAIN: &str = "omega0";
    /// Per-particle Brownian increments.
    pub const BROWNIAN: &str = "omega1";
    /// Per-particle Poisson random measures.
    pub const JUMPS: &str = "omega1-jump";
    /// Per-particle initial values.
    pub const INITIAL: &str = "omega1-init";
    /// Per-particle Brownian bridge draws at chain switching times.
    pub const BRIDGE: &str = "omega1-bridge";
    /// Per-replicate root seeds.
    pub const REPLICATE: &str = "replicate";
}

/// A reproducible random stream identified by `(root, label)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    root: u64,
    label: StreamLabel,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(root: u64, label: StreamLabel) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"switching-mkv/stream/v1");
        hasher.update(root.to_le_bytes());
        hasher.update((label.component.len() as u64).to_le_bytes());
        hasher.update(label.component.as_bytes());
        hasher.update(label.index.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Self {
            root,
            label,
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn label(&self) -> &StreamLabel {
        &self.label
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Derives the stream for `(root, (component, index))`.
pub fn derive_stream(root: u64, component: &str, index: u64) -> RngStream {
    RngStream::new(root, StreamLabel::new(component, index))
}

/// Root seed of replicate `r` of an experiment rooted at `root`.
pub fn replicate_seed(root: u64, replicate: u64) -> u64 {
    derive_stream(root, labels::REPLICATE, replicate).next_u64()
}

/// `count` i.i.d. `N(0, h I_d)` vectors, flattened row-major (`count x dim`).
pub fn brownian_increments(
    stream: &mut RngStream,
    h: f64,
    dim: usize,
    count: usize,
) -> Result<Vec<f64>, NoiseError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NoiseError::InvalidStep(h));
    }
    let scale = h.sqrt();
    Ok((0..count * dim)
        .map(|_| scale * stream.standard_normal())
        .collect())
}

/// Probability laws on `R^d` with closed-form moments.
///
/// Used both as jump-mark distributions and as initial laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PointLaw {
    PointMass { at: Vec<f64> },
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
    /// Isotropic Gaussian `N(mean, std^2 I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// `first` with probability `weight_first`, else `second`.
    TwoPoint {
        first: Vec<f64>,
        second: Vec<f64>,
        weight_first: f64,
    },
}

impl PointLaw {
    pub fn standard_gaussian(dim: usize) -> Self {
        PointLaw::Gaussian {
            mean: vec![0.0; dim],
            std: 1.0,
        }
    }

    pub fn unit_cube(dim: usize) -> Self {
        PointLaw::UniformBox {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PointLaw::PointMass { at } => at.len(),
            PointLaw::UniformBox { lower, .. } => lower.len(),
            PointLaw::Gaussian { mean, .. } => mean.len(),
            PointLaw::TwoPoint { first, .. } => first.len(),
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let bad = |msg: &str| Err(NoiseError::InvalidLaw(msg.to_string()));
        if self.dim() == 0 {
            return bad("dimension must be at least 1");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            PointLaw::PointMass { at } if !finite(at) => bad("non-finite point"),
            PointLaw::UniformBox { lower, upper } => {
                if lower.len() != upper.len() {
                    bad("box bounds differ in length")
                } else if !finite(lower) || !finite(upper) {
                    bad("non-finite box bound")
                } else if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    bad("lower bound exceeds upper bound")
                } else {
                    Ok(())
                }
            }
            PointLaw::Gaussian { mean, std } => {
                if !finite(mean) || !(std.is_finite() && *std >= 0.0) {
                    bad("gaussian needs finite mean and nonnegative std")
                } else {
                    Ok(())
                }
            }
            PointLaw::TwoPoint {
                first,
                second,
                weight_first,
            } => {
                if first.len() != second.len() {
                    bad("two-point atoms differ in length")
                } else if !finite(first) || !finite(second) {
                    bad("non-finite atom")
                } else if !(0.0..=1.0).contains(weight_first) {
                    bad("weight must lie in [0, 1]")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Draws one point into `out` (length `dim`).
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            PointLaw::PointMass { at } => out.copy_from_slice(at),
            PointLaw::UniformBox { lower, upper } => {
                for ((o, l), u) in out.iter_mut().zip(lower).zip(upper) {
                    *o = l + (u - l) * rng.random::<f64>();
                }
            }
            PointLaw::Gaussian { mean, std } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = m + std * z;
                }
            }
            PointLaw::TwoPoint {
                first,
                second,
                weight_first,
            } => {
                let u: f64 = rng.random();
                out.copy_from_slice(if u < *weight_first { first } else { second });
            }
        }
    }

    /// `count` i.i.d. points, flattened row-major.
    pub fn sample_many<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; count * d];
        for chunk in out.chunks_exact_mut(d) {
            self.sample_into(rng, chunk);
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            PointLaw::PointMass { at } => at.clone(),
            PointLaw::UniformBox { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect()
            }
            PointLaw::Gaussian { mean, .. } => mean.clone(),
            PointLaw::TwoPoint {
                first,
                second,
                weight_first: w,
            } => first
                .iter()
                .zip(second)
                .map(|(a, b)| w * a + (1.0 - w) * b)
                .collect(),
        }
    }

    /// Per-coordinate `E[z_k^2]`.
    pub fn coordinate_second_moments(&self) -> Vec<f64> {
        match self {
            PointLaw::PointMass { at } => at.iter().map(|a| a * a).collect(),
            PointLaw::UniformBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| (l * l + l * u + u * u) / 3.0)
                .collect(),
            PointLaw::Gaussian { mean, std } => {
                mean.iter().map(|m| m * m + std * std).collect()
            }
            PointLaw::TwoPoint {
                first,
                second,
                weight_first: w,
            } => first
                .iter()
                .zip(second)
                .map(|(a, b)| w * a * a + (1.0 - w) * b * b)
                .collect(),
        }
    }

    /// `E|z|^2`.
    pub fn second_moment(&self) -> f64 {
        self.coordinate_second_moments().iter().sum()
    }

    /// Per-coordinate variance.
    pub fn coordinate_variances(&self) -> Vec<f64> {
        self.coordinate_second_moments()
            .iter()
            .zip(self.mean())
            .map(|(s, m)| s - m * m)
            .collect()
    }

    /// `E|z|`: closed form where one exists, otherwise a fixed-seed Monte
    /// Carlo estimate with 2^20 draws.
    pub fn abs_mean(&self) -> f64 {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        match self {
            PointLaw::PointMass { at } => norm(at),
            PointLaw::TwoPoint {
                first,
                second,
                weight_first: w,
            } => w * norm(first) + (1.0 - w) * norm(second),
            PointLaw::UniformBox { lower, upper } if lower.len() == 1 => {
                let (l, u) = (lower[0], upper[0]);
                if l >= 0.0 || u <= 0.0 || u == l {
                    (0.5 * (l + u)).abs()
                } else {
                    (l * l + u * u) / (2.0 * (u - l))
                }
            }
            PointLaw::Gaussian { mean, std } if *std == 0.0 => norm(mean),
            PointLaw::Gaussian { mean, std } if mean.len() == 1 => {
                let (m, s) = (mean[0], *std);
                s * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * s * s)).exp()
                    + m * statrs::function::erf::erf(m / (s * std::f64::consts::SQRT_2))
            }
            PointLaw::Gaussian { mean, std } if mean.iter().all(|&m| m == 0.0) => {
                let d = mean.len() as f64;
                let ln = statrs::function::gamma::ln_gamma;
                std * std::f64::consts::SQRT_2 * (ln(0.5 * (d + 1.0)) - ln(0.5 * d)).exp()
            }
            _ => {
                let mut rng = derive_stream(0, "abs-mean", 0);
                let draws = 1usize << 20;
                let mut z = vec![0.0; self.dim()];
                let mut total = 0.0;
                for _ in 0..draws {
                    self.sample_into(&mut rng, &mut z);
                    total += norm(&z);
                }
                total / draws as f64
            }
        }
    }

    /// Nodes and weights integrating polynomials of degree up to 9 in each
    /// coordinate exactly (tensor Gauss rules for the continuous laws).
    pub fn quadrature(&self) -> Vec<(f64, Vec<f64>)> {
        match self {
            PointLaw::PointMass { at } => vec![(1.0, at.clone())],
            PointLaw::TwoPoint {
                first,
                second,
                weight_first: w,
            } => vec![(*w, first.clone()), (1.0 - w, second.clone())],
            PointLaw::UniformBox { lower, upper } => {
                let axes: Vec<Vec<(f64, f64)>> = lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| {
                        GAUSS_LEGENDRE_5
                            .iter()
                            .map(|&(x, w)| (0.5 * w, l + 0.5 * (u - l) * (x + 1.0)))
                            .collect()
                    })
                    .collect();
                tensor_rule(&axes)
            }
            PointLaw::Gaussian { mean, std } => {
                let axes: Vec<Vec<(f64, f64)>> = mean
                    .iter()
                    .map(|m| {
                        GAUSS_HERMITE_PROB_5
                            .iter()
                            .map(|&(x, w)| (w, m + std * x))
                            .collect()
                    })
                    .collect();
                tensor_rule(&axes)
            }
        }
    }
}

// Nodes/weights on [-1, 1], weights summing to 2.
const GAUSS_LEGENDRE_5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

// Probabilists' Gauss-Hermite rule for N(0, 1), weights summing to 1.
#[allow(clippy::excessive_precision)]
const GAUSS_HERMITE_PROB_5: [(f64, f64); 5] = [
    (-2.856_970_013_872_805_6, 0.011_257_411_327_720_69),
    (-1.355_626_179_974_265_9, 0.222_075_922_005_612_6),
    (0.0, 0.533_333_333_333_333_3),
    (1.355_626_179_974_265_9, 0.222_075_922_005_612_6),
    (2.856_970_013_872_805_6, 0.011_257_411_327_720_69),
];

fn tensor_rule(axes: &[Vec<(f64, f64)>]) -> Vec<(f64, Vec<f64>)> {
    let mut rule = vec![(1.0, Vec::with_capacity(axes.len()))];
    for axis in axes {
        rule = rule
            .into_iter()
            .flat_map(|(w, p)| {
                axis.iter().map(move |&(aw, ax)| {
                    let mut q = p.clone();
                    q.push(ax);
                    (w * aw, q)
                })
            })
            .collect();
    }
    rule
}

/// Scalar bound `h(z) = constant + slope * |z|` on the jump coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Envelope {
    Affine { constant: f64, slope: f64 },
}

impl Envelope {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Envelope::Affine { constant, slope } => {
                constant + slope * z.iter().map(|x| x * x).sum::<f64>().sqrt()
            }
        }
    }
}

/// Finite Lévy measure `lambda(dz) = rate * marks(dz)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    /// Total mass `lambda(R^d \ {0})`.
    pub rate: f64,
    pub marks: PointLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
}

impl JumpSpec {
    pub fn new(rate: f64, marks: PointLaw) -> Self {
        Self {
            rate,
            marks,
            envelope: None,
        }
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = Some(envelope);
        self
    }

    pub fn dim(&self) -> usize {
        self.marks.dim()
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(NoiseError::InvalidJumpSpec(format!(
                "total rate must be positive and finite, got {}",
                self.rate
            )));
        }
        self.marks.validate()
    }

    /// `∫|z|^2 lambda(dz) / rate`.
    pub fn mark_second_moment(&self) -> f64 {
        self.marks.second_moment()
    }
}

/// Jumps of one Poisson random measure inside a step `[t, t + h)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JumpBatch {
    pub times: Vec<f64>,
    /// Row-major `len x dim`.
    pub marks: Vec<f64>,
    pub dim: usize,
}

impl JumpBatch {
    pub fn empty(dim: usize) -> Self {
        Self {
            times: Vec::new(),
            marks: Vec::new(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mark(&self, j: usize) -> &[f64] {
        &self.marks[j * self.dim..(j + 1) * self.dim]
    }

    pub fn clear(&mut self) {
        self.times.clear();
        self.marks.clear();
    }
}

/// Poisson draw by inversion for small means, library sampler otherwise.
pub(crate) fn poisson_count(stream: &mut RngStream, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    if mean < 30.0 {
        let u = stream.uniform();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0usize;
        while u >= cdf && k < 1000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k
    } else {
        Poisson::new(mean)
            .expect("positive finite mean")
            .sample(stream) as usize
    }
}

/// Appends the jumps of `[t, t + h)` to `batch` (times unsorted across calls).
pub(crate) fn append_jumps(
    spec: &JumpSpec,
    t: f64,
    h: f64,
    stream: &mut RngStream,
    batch: &mut JumpBatch,
) {
    let count = poisson_count(stream, spec.rate * h);
    let d = spec.dim();
    let start = batch.times.len();
    for _ in 0..count {
        batch.times.push(t + h * stream.uniform());
        let offset = batch.marks.len();
        batch.marks.resize(offset + d, 0.0);
        spec.marks.sample_into(stream, &mut batch.marks[offset..]);
    }
    sort_batch_tail(batch, start);
}

fn sort_batch_tail(batch: &mut JumpBatch, start: usize) {
    let n = batch.times.len() - start;
    if n < 2 {
        return;
    }
    let d = batch.dim;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch.times[start + a].total_cmp(&batch.times[start + b]));
    let times: Vec<f64> = order.iter().map(|&k| batch.times[start + k]).collect();
    let marks: Vec<f64> = order
        .iter()
        .flat_map(|&k| batch.marks[(start + k) * d..(start + k + 1) * d].to_vec())
        .collect();
    batch.times.truncate(start);
    batch.times.extend(times);
    batch.marks.truncate(start * d);
    batch.marks.extend(marks);
}

/// Samples the jumps of the Poisson random measure with intensity
/// `lambda(dz) dt` inside `[t, t + h)`.
pub fn sample_jump_batch(
    spec: &JumpSpec,
    t: f64,
    h: f64,
    stream: &mut RngStream,
) -> Result<JumpBatch, NoiseError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(NoiseError::InvalidStep(h));
    }
    let mut batch = JumpBatch::empty(spec.dim());
    append_jumps(spec, t, h, stream, &mut batch);
    Ok(batch)
}

/// Compensated Poisson integral over one step:
/// `sum_j f(z_j) - h * ∫ f dlambda`.
pub fn compensate_integral(
    batch: &JumpBatch,
    values: &[f64],
    compensator_mean: f64,
    h: f64,
) -> Result<f64, NoiseError> {
    if values.len() != batch.len() {
        return Err(NoiseError::LengthMismatch {
            left: batch.len(),
            right: values.len(),
        });
    }
    Ok(values.iter().sum::<f64>() - h * compensator_mean)
}
