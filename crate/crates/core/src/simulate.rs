//! Euler scheme for regime-switching McKean-Vlasov SDEs with jumps.
//!
//! A run fixes one chain path (the common noise) and advances an ensemble of
//! particles on a [`TimeGrid`] that merges the base grid `k h` with the
//! chain's switching times, so no substep straddles a switch. Coefficients
//! are frozen at the left endpoint of every substep.
//!
//! Idiosyncratic noise is drawn per base step from per-particle streams:
//! `noise_resolution` fine Brownian increments and fine Poisson batches. When
//! a switch falls inside a base step, the Brownian path is split there by a
//! Brownian bridge drawn from a separate stream. Base-step increments are
//! therefore identical across runs that share the root seed, whatever the
//! chain path, which is what synchronous coupling needs.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{sample_path, ChainPath, CtmcError, QMatrix};
use crate::measures::{w2_1d, w2_squared_assignment_with_limit, EmpiricalMeasure, MeasureError};
use crate::model::{AveragedCoefficients, Coefficients, MeasureView, ModelError};
use crate::noise::{
    append_jumps, derive_stream, labels, JumpBatch, NoiseError, PointLaw, RngStream, StreamLabel,
};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("particle {particle} left the finite range at t = {time} (coordinate {coordinate})")]
    NonFiniteState {
        particle: usize,
        time: f64,
        coordinate: usize,
    },
    #[error("ensembles were run on different chain paths or grids")]
    GridMismatch,
    #[error("the jump coefficient depends on the state or the measure")]
    GNotStateFree,
    #[error("no convergence after {} iterations; distances {distances:?}", distances.len())]
    NoConvergence { distances: Vec<f64> },
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Horizon, step, initial law and noise resolution of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub horizon: f64,
    pub step: f64,
    pub initial_law: PointLaw,
    /// Number of fine noise intervals per base step.
    #[serde(default = "one")]
    pub noise_resolution: usize,
}

fn one() -> usize {
    1
}

impl RunSpec {
    pub fn new(horizon: f64, step: f64, initial_law: PointLaw) -> Self {
        Self {
            horizon,
            step,
            initial_law,
            noise_resolution: 1,
        }
    }

    pub fn with_noise_resolution(mut self, fine: usize) -> Self {
        self.noise_resolution = fine;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<(), SimError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidSpec(format!("horizon {}", self.horizon)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(SimError::InvalidSpec(format!("step {}", self.step)));
        }
        if self.noise_resolution == 0 {
            return Err(SimError::InvalidSpec("noise_resolution must be >= 1".into()));
        }
        self.initial_law.validate()?;
        if self.initial_law.dim() != dim {
            return Err(SimError::InvalidSpec(format!(
                "initial law lives in R^{} but the model in R^{dim}",
                self.initial_law.dim()
            )));
        }
        Ok(())
    }
}

/// Base grid `k h` merged with the chain's switching times in `(0, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub step: f64,
    /// All event times, increasing, from 0 to `horizon`.
    pub times: Vec<f64>,
    /// Position in `times` of each base grid point.
    pub base_index: Vec<usize>,
}

impl TimeGrid {
    pub fn new(horizon: f64, step: f64, path: &ChainPath) -> Self {
        let steps = ((horizon / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let base: Vec<f64> = (0..=steps)
            .map(|k| if k == steps { horizon } else { k as f64 * step })
            .collect();
        let mut times = Vec::with_capacity(base.len() + path.jump_count());
        let mut base_index = Vec::with_capacity(base.len());
        let mut switches = path
            .jump_times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t < horizon)
            .peekable();
        for &b in &base {
            while let Some(&s) = switches.peek() {
                if s < b {
                    times.push(s);
                    switches.next();
                } else {
                    if s == b {
                        switches.next();
                    }
                    break;
                }
            }
            base_index.push(times.len());
            times.push(b);
        }
        Self {
            horizon,
            step,
            times,
            base_index,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn base_steps(&self) -> usize {
        self.base_index.len() - 1
    }

    pub fn max_substep(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// `N` trajectories on a common grid driven by one chain path.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub count: usize,
    pub grid: TimeGrid,
    /// `states[j]` is the chain state on `[times[j], times[j + 1])`.
    pub states: Vec<usize>,
    /// Row-major `[time][particle][coordinate]`.
    pub values: Vec<f64>,
    pub path: Arc<ChainPath>,
    pub root: u64,
}

impl ParticleEnsemble {
    pub fn times(&self) -> &[f64] {
        &self.grid.times
    }

    /// All particles at grid index `j`, row-major `count x dim`.
    pub fn column(&self, j: usize) -> &[f64] {
        let w = self.count * self.dim;
        &self.values[j * w..(j + 1) * w]
    }

    pub fn position(&self, j: usize, particle: usize) -> &[f64] {
        let c = self.column(j);
        &c[particle * self.dim..(particle + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.column(self.grid.len() - 1)
    }

    pub fn measure_at(&self, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim, self.column(j).to_vec()).expect("finite ensemble")
    }

    pub fn mean_at(&self, j: usize) -> Vec<f64> {
        MeasureView::new(self.dim, self.column(j)).mean().to_vec()
    }

    pub fn flow(&self) -> MeasureFlow {
        MeasureFlow {
            dim: self.dim,
            size: self.count,
            times: self.grid.times.clone(),
            clouds: self.values.clone(),
        }
    }

    /// Stream labels `(brownian, jumps, initial)` of particle `k`.
    pub fn stream_labels(&self, k: usize) -> [StreamLabel; 3] {
        particle_labels(k)
    }

    /// CSV with columns `time, particle, coord_0.., state`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string(), "particle".to_string()];
        header.extend((0..self.dim).map(|k| format!("coord_{k}")));
        header.push("state".into());
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(self.dim + 3);
        for (j, &t) in self.grid.times.iter().enumerate() {
            for k in 0..self.count {
                row.clear();
                row.push(t.to_string());
                row.push(k.to_string());
                row.extend(self.position(j, k).iter().map(|x| x.to_string()));
                row.push(self.states[j].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One equal-weight cloud of fixed size per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    pub dim: usize,
    pub size: usize,
    pub times: Vec<f64>,
    /// Row-major `[time][point][coordinate]`.
    pub clouds: Vec<f64>,
}

impl MeasureFlow {
    /// The flow that stays at `cloud` for every time in `times`.
    pub fn constant(dim: usize, cloud: &[f64], times: &[f64]) -> Self {
        let mut clouds = Vec::with_capacity(cloud.len() * times.len());
        for _ in times {
            clouds.extend_from_slice(cloud);
        }
        Self {
            dim,
            size: cloud.len() / dim,
            times: times.to_vec(),
            clouds,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn cloud(&self, j: usize) -> &[f64] {
        let w = self.size * self.dim;
        &self.clouds[j * w..(j + 1) * w]
    }

    pub fn measure(&self, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.dim, self.cloud(j).to_vec()).expect("finite flow")
    }

    pub fn mean(&self, j: usize) -> Vec<f64> {
        MeasureView::new(self.dim, self.cloud(j)).mean().to_vec()
    }

    /// Writes `flow_<j>.csv` (columns `coord_0..`) for every grid index.
    pub fn write_csv_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for j in 0..self.len() {
            let file = std::fs::File::create(dir.join(format!("flow_{j}.csv")))?;
            let mut w = csv::Writer::from_writer(file);
            let header: Vec<String> = (0..self.dim).map(|k| format!("coord_{k}")).collect();
            w.write_record(&header)?;
            for p in self.cloud(j).chunks_exact(self.dim) {
                w.write_record(p.iter().map(|x| x.to_string()))?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

fn particle_labels(k: usize) -> [StreamLabel; 3] {
    [
        StreamLabel::new(labels::BROWNIAN, k as u64),
        StreamLabel::new(labels::JUMPS, k as u64),
        StreamLabel::new(labels::INITIAL, k as u64),
    ]
}

struct Scratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    jump: Vec<f64>,
    comp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            sigma: vec![0.0; d * d],
            jump: vec![0.0; d],
            comp: vec![0.0; d],
        }
    }
}

/// In-place Euler update; `marks` is row-major with the mark dimension of
/// the jump spec.
#[allow(clippy::too_many_arguments)]
fn euler_update(
    coeffs: &dyn Coefficients,
    x: &mut [f64],
    mu: &MeasureView,
    state: usize,
    dw: &[f64],
    marks: &[f64],
    delta: f64,
    s: &mut Scratch,
) {
    let d = x.len();
    let mark_dim = coeffs.jump_spec().dim();
    coeffs.drift(x, mu, state, &mut s.drift);
    coeffs.diffusion(x, mu, state, &mut s.sigma);
    coeffs.jump_compensator(x, mu, state, &mut s.comp);
    // Accumulate increments before touching x: all coefficients see x(t-).
    let mut incr = [0.0f64; 8];
    let mut heap;
    let incr: &mut [f64] = if d <= 8 {
        &mut incr[..d]
    } else {
        heap = vec![0.0; d];
        &mut heap
    };
    for k in 0..d {
        let row = &s.sigma[k * d..(k + 1) * d];
        let noise: f64 = row.iter().zip(dw).map(|(a, b)| a * b).sum();
        incr[k] = s.drift[k] * delta + noise - delta * s.comp[k];
    }
    for z in marks.chunks_exact(mark_dim) {
        coeffs.jump(x, mu, state, z, &mut s.jump);
        for (i, g) in incr.iter_mut().zip(&s.jump) {
            *i += g;
        }
    }
    for (xi, i) in x.iter_mut().zip(incr.iter()) {
        *xi += i;
    }
}

/// One explicit Euler substep of length `delta` with no chain switch inside:
/// `x + b delta + sigma dW + sum_j g(z_j) - delta ∫ g dlambda`, coefficients
/// frozen at `(x, mu, state)`.
pub fn euler_step(
    coeffs: &dyn Coefficients,
    x: &[f64],
    mu: &MeasureView,
    state: usize,
    dw: &[f64],
    jumps: &JumpBatch,
    delta: f64,
) -> Result<Vec<f64>, SimError> {
    let d = coeffs.dim();
    if x.len() != d || dw.len() != d {
        return Err(SimError::InvalidSpec(format!(
            "state and increment must have length {d}"
        )));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(SimError::InvalidSpec(format!("substep {delta}")));
    }
    if !jumps.is_empty() && jumps.dim != coeffs.jump_spec().dim() {
        return Err(SimError::InvalidSpec("mark dimension mismatch".into()));
    }
    let mut out = x.to_vec();
    let mut scratch = Scratch::new(d);
    euler_update(coeffs, &mut out, mu, state, dw, &jumps.marks, delta, &mut scratch);
    if let Some(k) = out.iter().position(|v| !v.is_finite()) {
        return Err(SimError::NonFiniteState {
            particle: 0,
            time: f64::NAN,
            coordinate: k,
        });
    }
    Ok(out)
}

/// Per-particle noise for one base step.
struct ParticleNoise {
    brownian: RngStream,
    jumps: RngStream,
    bridge: RngStream,
    /// Brownian values at the fine points, then substep increments.
    fine_w: Vec<f64>,
    dw: Vec<f64>,
    batch: JumpBatch,
    /// `jump_ranges[s]` is the range of `batch` inside substep `s`.
    jump_ranges: Vec<(usize, usize)>,
}

impl ParticleNoise {
    fn new(root: u64, k: usize, mark_dim: usize) -> Self {
        let [bm, jp, _] = particle_labels(k);
        Self {
            brownian: RngStream::new(root, bm),
            jumps: RngStream::new(root, jp),
            bridge: derive_stream(root, labels::BRIDGE, k as u64),
            fine_w: Vec::new(),
            dw: Vec::new(),
            batch: JumpBatch::empty(mark_dim),
            jump_ranges: Vec::new(),
        }
    }

    /// Draws the noise of base step `[a, b]` and cuts it at `cuts`
    /// (substep boundaries, starting with `a` and ending with `b`).
    fn draw(
        &mut self,
        d: usize,
        fine: usize,
        cuts: &[f64],
        spec: &crate::noise::JumpSpec,
    ) {
        let (a, b) = (cuts[0], *cuts.last().expect("non-empty"));
        let hf = (b - a) / fine as f64;
        let scale = hf.sqrt();
        self.fine_w.clear();
        self.fine_w.resize((fine + 1) * d, 0.0);
        for f in 0..fine {
            for k in 0..d {
                let inc = scale * self.brownian.standard_normal();
                self.fine_w[(f + 1) * d + k] = self.fine_w[f * d + k] + inc;
            }
        }
        self.batch.clear();
        for f in 0..fine {
            let start = if f == 0 { a } else { a + f as f64 * hf };
            let end = if f + 1 == fine { b } else { a + (f + 1) as f64 * hf };
            append_jumps(spec, start, end - start, &mut self.jumps, &mut self.batch);
        }

        let subs = cuts.len() - 1;
        self.dw.clear();
        self.dw.resize(subs * d, 0.0);
        self.jump_ranges.clear();
        if subs == 1 {
            for k in 0..d {
                self.dw[k] = self.fine_w[fine * d + k];
            }
            self.jump_ranges.push((0, self.batch.len()));
            return;
        }

        // Brownian values at interior cuts, bridged between the nearest known
        // points on each side.
        let fine_time = |f: usize| {
            if f == fine {
                b
            } else {
                a + f as f64 * hf
            }
        };
        let mut prev_t = a;
        let mut prev_w: Vec<f64> = self.fine_w[..d].to_vec();
        let mut w_at = vec![0.0; d];
        for (s, &cut) in cuts[1..].iter().enumerate() {
            if s + 1 == subs {
                w_at.copy_from_slice(&self.fine_w[fine * d..]);
            } else {
                let mut f = (((cut - a) / hf).floor() as usize).min(fine - 1);
                while f > 0 && fine_time(f) > cut {
                    f -= 1;
                }
                while f + 1 < fine && fine_time(f + 1) <= cut {
                    f += 1;
                }
                // right fine point strictly after the cut
                let right = f + 1;
                let left_t = fine_time(f);
                let (lt, lw): (f64, Vec<f64>) = if prev_t >= left_t {
                    (prev_t, prev_w.clone())
                } else {
                    (left_t, self.fine_w[f * d..(f + 1) * d].to_vec())
                };
                let rt = fine_time(right);
                let rw = &self.fine_w[right * d..(right + 1) * d];
                let span = rt - lt;
                let frac = if span > 0.0 { (cut - lt) / span } else { 0.0 };
                let sd = if span > 0.0 {
                    ((cut - lt) * (rt - cut) / span).max(0.0).sqrt()
                } else {
                    0.0
                };
                for k in 0..d {
                    let xi = self.bridge.standard_normal();
                    w_at[k] = lw[k] + frac * (rw[k] - lw[k]) + sd * xi;
                }
            }
            for k in 0..d {
                self.dw[s * d + k] = w_at[k] - prev_w[k];
            }
            prev_w.copy_from_slice(&w_at);
            prev_t = cut;
        }
        let mut lo = 0;
        for s in 0..subs {
            let end = if s + 1 == subs {
                self.batch.len()
            } else {
                let cut = cuts[s + 1];
                lo + self.batch.times[lo..].partition_point(|&t| t < cut)
            };
            self.jump_ranges.push((lo, end));
            lo = end;
        }
    }
}

/// Where the measure argument comes from.
#[derive(Debug, Clone, Copy)]
pub enum LawSource<'a> {
    /// The ensemble's own empirical measure.
    Own,
    /// A frozen flow on the same grid.
    Frozen(&'a MeasureFlow),
}

/// Runs `count` particles along `path`. Particle `k` draws its initial value,
/// Brownian increments and jumps from streams labelled `k` under `root`.
pub fn simulate_ensemble(
    coeffs: &dyn Coefficients,
    path: Arc<ChainPath>,
    count: usize,
    spec: &RunSpec,
    root: u64,
    law: LawSource,
) -> Result<ParticleEnsemble, SimError> {
    let d = coeffs.dim();
    spec.validate(d)?;
    coeffs.jump_spec().validate()?;
    if count == 0 {
        return Err(SimError::InvalidSpec("need at least one particle".into()));
    }
    if path.horizon < spec.horizon * (1.0 - 1e-12) {
        return Err(SimError::InvalidSpec(format!(
            "chain path ends at {} before the horizon {}",
            path.horizon, spec.horizon
        )));
    }
    let max_state = std::iter::once(path.initial)
        .chain(path.states.iter().copied())
        .max()
        .unwrap_or(0);
    if max_state >= coeffs.states() {
        return Err(SimError::InvalidSpec(format!(
            "chain visits state {max_state} but the model has {} states",
            coeffs.states()
        )));
    }
    let grid = TimeGrid::new(spec.horizon, spec.step, &path);
    if let LawSource::Frozen(flow) = law {
        if flow.times != grid.times || flow.dim != d {
            return Err(SimError::GridMismatch);
        }
    }
    let jump_spec = coeffs.jump_spec();
    let mark_dim = jump_spec.dim();
    let fine = spec.noise_resolution;

    let mut noise: Vec<ParticleNoise> = (0..count)
        .map(|k| ParticleNoise::new(root, k, mark_dim))
        .collect();
    let mut x = vec![0.0; count * d];
    for (k, p) in x.chunks_exact_mut(d).enumerate() {
        let mut s = RngStream::new(root, particle_labels(k)[2].clone());
        spec.initial_law.sample_into(&mut s, p);
    }

    let times = &grid.times;
    let states: Vec<usize> = times.iter().map(|&t| path.state_at(t)).collect();
    let mut values = Vec::with_capacity(times.len() * count * d);
    values.extend_from_slice(&x);

    for k in 0..grid.base_steps() {
        let (i0, i1) = (grid.base_index[k], grid.base_index[k + 1]);
        let cuts = &times[i0..=i1];
        noise
            .par_iter_mut()
            .for_each(|pn| pn.draw(d, fine, cuts, jump_spec));

        for s in 0..(i1 - i0) {
            let j = i0 + s;
            let delta = times[j + 1] - times[j];
            let state = states[j];
            let frozen = x.clone();
            let view = match law {
                LawSource::Own => MeasureView::new(d, &frozen),
                LawSource::Frozen(flow) => MeasureView::new(d, flow.cloud(j)),
            };
            x.par_chunks_mut(d).zip(noise.par_iter()).for_each_init(
                || Scratch::new(d),
                |scratch, (xp, pn)| {
                    let (lo, hi) = pn.jump_ranges[s];
                    let marks = &pn.batch.marks[lo * mark_dim..hi * mark_dim];
                    let dw = &pn.dw[s * d..(s + 1) * d];
                    euler_update(coeffs, xp, &view, state, dw, marks, delta, scratch);
                },
            );
            if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
                return Err(SimError::NonFiniteState {
                    particle: pos / d,
                    time: times[j + 1],
                    coordinate: pos % d,
                });
            }
            values.extend_from_slice(&x);
        }
    }

    Ok(ParticleEnsemble {
        dim: d,
        count,
        grid,
        states,
        values,
        path,
        root,
    })
}

/// Samples the chain path of a run: stream `("omega0", 0)`, generator `Q / eps`.
pub fn chain_path_for(
    q: &QMatrix,
    initial_state: usize,
    horizon: f64,
    eps: f64,
    root: u64,
) -> Result<Arc<ChainPath>, SimError> {
    let mut stream = derive_stream(root, labels::CHAIN, 0);
    Ok(Arc::new(sample_path(q, initial_state, horizon, eps, &mut stream)?))
}

/// The `N`-particle system with mean-field interaction through its own
/// empirical measure, driven by one chain path with time scale `eps`.
pub fn run_particle_system(
    coeffs: &dyn Coefficients,
    q: &QMatrix,
    initial_state: usize,
    count: usize,
    spec: &RunSpec,
    root: u64,
    eps: f64,
) -> Result<ParticleEnsemble, SimError> {
    let path = chain_path_for(q, initial_state, spec.horizon, eps, root)?;
    simulate_ensemble(coeffs, path, count, spec, root, LawSource::Own)
}

/// Auxiliary system of `size` particles on the chain path of `system`.
///
/// Its first `system.count` particles reuse the system's streams and
/// initial values; the rest use fresh labels. The conditional law is
/// proxied by the auxiliary ensemble's own empirical measure.
pub fn run_auxiliary(
    coeffs: &dyn Coefficients,
    system: &ParticleEnsemble,
    size: usize,
    spec: &RunSpec,
) -> Result<ParticleEnsemble, SimError> {
    if size < system.count {
        return Err(SimError::InvalidSpec(format!(
            "auxiliary size {size} is below the system size {}",
            system.count
        )));
    }
    let aux = simulate_ensemble(
        coeffs,
        system.path.clone(),
        size,
        spec,
        system.root,
        LawSource::Own,
    )?;
    check_coupled(system, &aux)?;
    Ok(aux)
}

/// Errors unless both ensembles ran on the same chain path and grid.
pub fn check_coupled(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Result<(), SimError> {
    if a.path != b.path || a.grid.times != b.grid.times || a.dim != b.dim {
        return Err(SimError::GridMismatch);
    }
    Ok(())
}

/// System of `count` particles plus its auxiliary system of `size`.
#[allow(clippy::too_many_arguments)]
pub fn run_auxiliary_coupled(
    coeffs: &dyn Coefficients,
    q: &QMatrix,
    initial_state: usize,
    count: usize,
    size: usize,
    spec: &RunSpec,
    root: u64,
    eps: f64,
) -> Result<(ParticleEnsemble, ParticleEnsemble), SimError> {
    let system = run_particle_system(coeffs, q, initial_state, count, spec, root, eps)?;
    let aux = run_auxiliary(coeffs, &system, size, spec)?;
    Ok((system, aux))
}

/// The averaged McKean-Vlasov system on a constant environment, with its
/// own size-`count` ensemble as law proxy. Streams match a switching run
/// with the same root, so the two are synchronously coupled.
pub fn run_averaged(
    averaged: &AveragedCoefficients,
    count: usize,
    spec: &RunSpec,
    root: u64,
) -> Result<ParticleEnsemble, SimError> {
    if !averaged.inner().g_state_free() {
        return Err(SimError::GNotStateFree);
    }
    let path = Arc::new(ChainPath::constant(0, spec.horizon));
    simulate_ensemble(averaged, path, count, spec, root, LawSource::Own)
}

/// Like [`run_averaged`], but stepped on the grid of a switching run: the
/// switch times of `switching` become grid points while the coefficients stay
/// averaged. A switching run on the same path and root then differs from this
/// one only through its coefficients.
pub fn run_averaged_on(
    averaged: &AveragedCoefficients,
    switching: &ChainPath,
    count: usize,
    spec: &RunSpec,
    root: u64,
) -> Result<ParticleEnsemble, SimError> {
    if !averaged.inner().g_state_free() {
        return Err(SimError::GNotStateFree);
    }
    let path = Arc::new(ChainPath {
        initial: 0,
        jump_times: switching.jump_times.clone(),
        states: vec![0; switching.states.len()],
        horizon: switching.horizon,
        time_scale: switching.time_scale,
    });
    simulate_ensemble(averaged, path, count, spec, root, LawSource::Own)
}

/// Options of [`picard_solve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardOptions {
    /// Cloud size `M`.
    #[serde(default = "default_picard_size")]
    pub size: usize,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
    #[serde(default = "default_picard_iter")]
    pub max_iter: usize,
}

fn default_picard_size() -> usize {
    500
}

fn default_picard_tol() -> f64 {
    1e-2
}

fn default_picard_iter() -> usize {
    15
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            size: default_picard_size(),
            tol: default_picard_tol(),
            max_iter: default_picard_iter(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardResult {
    pub flow: MeasureFlow,
    /// `distances[n] = sup_t W_2(mu^(n), mu^(n+1))`.
    pub distances: Vec<f64>,
    pub ensemble: ParticleEnsemble,
}

impl PicardResult {
    pub fn iterations(&self) -> usize {
        self.distances.len()
    }
}

/// Time indices at which flows are compared: all of them in one dimension,
/// at most 64 evenly spaced ones (including the last) otherwise.
fn comparison_indices(len: usize, dim: usize) -> Vec<usize> {
    if dim == 1 || len <= 64 {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..64).map(|k| k * (len - 1) / 63).collect();
    idx.dedup();
    idx
}

/// `sup_t W_2` between two flows on the same grid.
pub fn flow_distance(a: &MeasureFlow, b: &MeasureFlow) -> Result<f64, SimError> {
    if a.times != b.times || a.dim != b.dim || a.size != b.size {
        return Err(SimError::GridMismatch);
    }
    let idx = comparison_indices(a.len(), a.dim);
    let dists: Result<Vec<f64>, MeasureError> = idx
        .par_iter()
        .map(|&j| {
            let (ma, mb) = (a.measure(j), b.measure(j));
            if a.dim == 1 {
                w2_1d(&ma, &mb)
            } else {
                Ok(w2_squared_assignment_with_limit(&ma, &mb, usize::MAX)?.sqrt())
            }
        })
        .collect();
    Ok(dists?.into_iter().fold(0.0, f64::max))
}

/// Fixed point of the decoupling map: freeze a measure flow, solve `M`
/// decoupled paths along `path` with the same per-particle streams, read
/// off the new flow, repeat until `sup_t W_2` between successive flows is
/// below `tol`.
///
/// The first iterate is the image of the flow that stays at the initial
/// cloud; `distances[n]` compares iterates `n` and `n + 1`.
pub fn picard_solve(
    coeffs: &dyn Coefficients,
    path: Arc<ChainPath>,
    spec: &RunSpec,
    root: u64,
    options: &PicardOptions,
) -> Result<PicardResult, SimError> {
    if !coeffs.g_state_free() {
        return Err(SimError::GNotStateFree);
    }
    if !(options.tol > 0.0) {
        return Err(SimError::InvalidSpec(format!("tolerance {}", options.tol)));
    }
    if options.size == 0 || options.max_iter == 0 {
        return Err(SimError::InvalidSpec("size and max_iter must be positive".into()));
    }
    let grid = TimeGrid::new(spec.horizon, spec.step, &path);
    let mut initial = vec![0.0; options.size * coeffs.dim()];
    for (k, p) in initial.chunks_exact_mut(coeffs.dim()).enumerate() {
        let mut s = RngStream::new(root, particle_labels(k)[2].clone());
        spec.initial_law.sample_into(&mut s, p);
    }
    let start = MeasureFlow::constant(coeffs.dim(), &initial, &grid.times);
    let mut ensemble = simulate_ensemble(
        coeffs,
        path.clone(),
        options.size,
        spec,
        root,
        LawSource::Frozen(&start),
    )?;
    let mut flow = ensemble.flow();
    let mut distances = Vec::new();
    for _ in 0..options.max_iter {
        let next = simulate_ensemble(
            coeffs,
            path.clone(),
            options.size,
            spec,
            root,
            LawSource::Frozen(&flow),
        )?;
        let next_flow = next.flow();
        let dist = flow_distance(&flow, &next_flow)?;
        distances.push(dist);
        ensemble = next;
        flow = next_flow;
        log::debug!("picard iteration {}: distance {dist:e}", distances.len());
        if dist < options.tol {
            return Ok(PicardResult {
                flow,
                distances,
                ensemble,
            });
        }
    }
    Err(SimError::NoConvergence { distances })
}
