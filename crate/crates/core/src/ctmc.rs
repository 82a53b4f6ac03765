//! Finite continuous-time Markov chains driving the regime switching.
//!
//! Covers validation of Q-matrices, the invariant law, the transition
//! semigroup by uniformization, total-variation ergodicity profiles and
//! exact path sampling (optionally accelerated by a time scale `eps`, in
//! which case the generator is `Q / eps`).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum CtmcError {
    #[error("rate matrix must be square and non-empty")]
    BadShape,
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("negative off-diagonal rate {rate} at ({row}, {col})")]
    NegativeRate { row: usize, col: usize, rate: f64 },
    #[error("row {row} sums to {sum}, not 0")]
    NonConservative { row: usize, sum: f64 },
    #[error("chain is reducible: state {to} is not reachable from state {from}")]
    Reducible { from: usize, to: usize },
    #[error("invariant measure solve failed")]
    SolveFailed,
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("time scale must be positive and finite, got {0}")]
    InvalidTimeScale(f64),
    #[error("time grid must be increasing with at least {min} points")]
    InvalidGrid { min: usize },
    #[error("state {state} out of range for {size} states")]
    InvalidState { state: usize, size: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("not a probability vector: {0}")]
    NotProbability(String),
}

const ROW_SUM_TOL: f64 = 1e-9;
const TAIL_MASS: f64 = 1e-14;
// Poisson means above this are split via the semigroup property.
const MAX_UNIFORMIZATION_MEAN: f64 = 40.0;

/// Conservative, irreducible transition rate matrix on a finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct QMatrix {
    size: usize,
    rates: Vec<f64>,
}

impl QMatrix {
    /// Builds from a full matrix. When every diagonal entry is zero the
    /// input is read as off-diagonal rates and the diagonal is filled in;
    /// otherwise rows must sum to zero.
    pub fn build(rates: &[Vec<f64>]) -> Result<Self, CtmcError> {
        let n = rates.len();
        if n >= 2 && rates.iter().all(|r| r.len() == n) && (0..n).all(|i| rates[i][i] == 0.0) {
            Self::from_off_diagonal(rates)
        } else {
            Self::from_full(rates)
        }
    }

    /// Diagonal entries of `rates` are ignored and recomputed.
    pub fn from_off_diagonal(rates: &[Vec<f64>]) -> Result<Self, CtmcError> {
        let size = check_shape(rates)?;
        let mut flat = vec![0.0; size * size];
        for i in 0..size {
            let mut exit = 0.0;
            for j in 0..size {
                if i == j {
                    continue;
                }
                let r = rates[i][j];
                check_rate(i, j, r)?;
                flat[i * size + j] = r;
                exit += r;
            }
            flat[i * size + i] = -exit;
        }
        Self::finish(size, flat)
    }

    pub fn from_full(rates: &[Vec<f64>]) -> Result<Self, CtmcError> {
        let size = check_shape(rates)?;
        let mut flat = vec![0.0; size * size];
        for i in 0..size {
            for j in 0..size {
                let r = rates[i][j];
                if !r.is_finite() {
                    return Err(CtmcError::NonFinite { row: i, col: j });
                }
                if i != j {
                    check_rate(i, j, r)?;
                }
                flat[i * size + j] = r;
            }
            let sum: f64 = rates[i].iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(CtmcError::NonConservative { row: i, sum });
            }
        }
        Self::finish(size, flat)
    }

    fn finish(size: usize, rates: Vec<f64>) -> Result<Self, CtmcError> {
        let q = Self { size, rates };
        q.check_irreducible()?;
        Ok(q)
    }

    // Forward and backward reachability from state 0 over positive rates.
    fn check_irreducible(&self) -> Result<(), CtmcError> {
        let n = self.size;
        for forward in [true, false] {
            let mut seen = vec![false; n];
            let mut queue = std::collections::VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..n {
                    let r = if forward { self.rate(i, j) } else { self.rate(j, i) };
                    if i != j && r > 0.0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if let Some(k) = seen.iter().position(|s| !s) {
                let (from, to) = if forward { (0, k) } else { (k, 0) };
                return Err(CtmcError::Reducible { from, to });
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.size + j]
    }

    /// `|q_ii|`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rate(i, i)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.size).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.rates.chunks(self.size).map(|r| r.to_vec()).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size, self.size, &self.rates)
    }

    /// Same chain accelerated by `1 / eps`.
    pub fn scaled(&self, eps: f64) -> Result<Self, CtmcError> {
        check_time_scale(eps)?;
        Ok(Self {
            size: self.size,
            rates: self.rates.iter().map(|r| r / eps).collect(),
        })
    }
}

impl TryFrom<Vec<Vec<f64>>> for QMatrix {
    type Error = CtmcError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        QMatrix::build(&rows)
    }
}

impl From<QMatrix> for Vec<Vec<f64>> {
    fn from(q: QMatrix) -> Self {
        q.rows()
    }
}

fn check_shape(rates: &[Vec<f64>]) -> Result<usize, CtmcError> {
    let n = rates.len();
    if n == 0 || rates.iter().any(|r| r.len() != n) {
        return Err(CtmcError::BadShape);
    }
    Ok(n)
}

fn check_rate(row: usize, col: usize, rate: f64) -> Result<(), CtmcError> {
    if !rate.is_finite() {
        Err(CtmcError::NonFinite { row, col })
    } else if rate < 0.0 {
        Err(CtmcError::NegativeRate { row, col, rate })
    } else {
        Ok(())
    }
}

fn check_time_scale(eps: f64) -> Result<(), CtmcError> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(CtmcError::InvalidTimeScale(eps))
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const MASS_TOL: f64 = 1e-12;

    pub fn new(weights: Vec<f64>) -> Result<Self, CtmcError> {
        if weights.is_empty() {
            return Err(CtmcError::NotProbability("empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(CtmcError::NotProbability(format!("weight {w}")));
        }
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > Self::MASS_TOL {
            return Err(CtmcError::NotProbability(format!("total mass {mass}")));
        }
        Ok(Self(weights))
    }

    pub fn dirac(size: usize, state: usize) -> Self {
        let mut w = vec![0.0; size];
        w[state] = 1.0;
        Self(w)
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = CtmcError;
    fn try_from(w: Vec<f64>) -> Result<Self, Self::Error> {
        ProbVector::new(w)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Unique `pi` with `pi Q = 0`, `sum pi = 1`.
///
/// Solves the transposed system `Q^T pi = 0` with the normalization row
/// appended, in the least-squares sense via SVD.
pub fn invariant_measure(q: &QMatrix) -> Result<ProbVector, CtmcError> {
    let n = q.size();
    let mut a = DMatrix::<f64>::zeros(n + 1, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = q.rate(i, j);
        }
    }
    for j in 0..n {
        a[(n, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs[n] = 1.0;

    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-13 {
        return Err(CtmcError::SolveFailed);
    }
    let x = svd.solve(&rhs, 0.0).map_err(|_| CtmcError::SolveFailed)?;
    // Clip roundoff negatives and renormalize.
    let mut w: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let mass: f64 = w.iter().sum();
    if !(mass > 0.0) {
        return Err(CtmcError::SolveFailed);
    }
    w.iter_mut().for_each(|v| *v /= mass);
    ProbVector::new(w)
}

/// `P_t = exp(tQ)` by uniformization.
pub fn transition_matrix(q: &QMatrix, t: f64) -> Result<DMatrix<f64>, CtmcError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(CtmcError::InvalidTime(t));
    }
    let n = q.size();
    let lambda = q.max_exit_rate();
    if t == 0.0 || lambda == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let total = lambda * t;
    let pieces = (total / MAX_UNIFORMIZATION_MEAN).ceil().max(1.0) as u32;
    let piece = uniformized(q, lambda, t / pieces as f64);
    let mut result = piece.clone();
    for _ in 1..pieces {
        result = &result * &piece;
    }
    Ok(result)
}

fn uniformized(q: &QMatrix, lambda: f64, t: f64) -> DMatrix<f64> {
    let n = q.size();
    let jump = DMatrix::identity(n, n) + q.to_matrix() / lambda;
    let mean = lambda * t;
    let mut weight = (-mean).exp();
    let mut cumulative = weight;
    let mut power = DMatrix::identity(n, n);
    let mut result = &power * weight;
    let mut k = 0u32;
    while 1.0 - cumulative > TAIL_MASS && k < 10_000 {
        k += 1;
        power = &power * &jump;
        weight *= mean / k as f64;
        cumulative += weight;
        result += &power * weight;
    }
    result
}

/// Total-variation distance `sum_i |p_i - q_i|`, in `[0, 2]`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, CtmcError> {
    if p.len() != q.len() {
        return Err(CtmcError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// `||P_t(i, .) - pi||_var` tabulated over a time grid.
#[derive(Debug, Clone, Serialize)]
pub struct ErgodicProfile {
    pub times: Vec<f64>,
    /// `tv[state][time_index]`.
    pub tv: Vec<Vec<f64>>,
    pub invariant: Vec<f64>,
    /// Least-squares exponential rate of the state-wise maximum.
    pub decay_rate: f64,
}

impl ErgodicProfile {
    /// Columns `t,state,tv`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "state", "tv"])?;
        for (k, t) in self.times.iter().enumerate() {
            for (i, row) in self.tv.iter().enumerate() {
                w.write_record([t.to_string(), i.to_string(), row[k].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn max_over_states(&self, time_index: usize) -> f64 {
        self.tv.iter().map(|r| r[time_index]).fold(0.0, f64::max)
    }
}

pub fn ergodic_profile(q: &QMatrix, grid: &[f64]) -> Result<ErgodicProfile, CtmcError> {
    if grid.len() < 3
        || grid.windows(2).any(|w| !(w[1] > w[0]))
        || grid.iter().any(|t| !(t.is_finite() && *t >= 0.0))
    {
        return Err(CtmcError::InvalidGrid { min: 3 });
    }
    let pi = invariant_measure(q)?;
    let n = q.size();
    let mut tv = vec![Vec::with_capacity(grid.len()); n];
    for &t in grid {
        let p = transition_matrix(q, t)?;
        for (i, row) in tv.iter_mut().enumerate() {
            let pi_row: Vec<f64> = p.row(i).iter().copied().collect();
            row.push(tv_distance(&pi_row, pi.weights())?);
        }
    }
    let mut profile = ErgodicProfile {
        times: grid.to_vec(),
        tv,
        invariant: pi.weights().to_vec(),
        decay_rate: f64::NAN,
    };
    // Values below 1e-12 are dominated by truncation error.
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..grid.len())
        .map(|k| (grid[k], profile.max_over_states(k)))
        .filter(|(_, v)| *v > 1e-12)
        .map(|(t, v)| (t, v.ln()))
        .unzip();
    if xs.len() >= 2 {
        let (slope, _) = least_squares(&xs, &ys);
        profile.decay_rate = -slope;
    }
    Ok(profile)
}

pub(crate) fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// A realized right-continuous path of the chain on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPath {
    pub initial: usize,
    pub jump_times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
    pub time_scale: f64,
}

impl ChainPath {
    /// A path that never leaves `state`.
    pub fn constant(state: usize, horizon: f64) -> Self {
        Self {
            initial: state,
            jump_times: Vec::new(),
            states: Vec::new(),
            horizon,
            time_scale: 1.0,
        }
    }

    /// `Lambda_t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.initial
        } else {
            self.states[k - 1]
        }
    }

    /// `Lambda_{t-}`.
    pub fn state_before(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s < t);
        if k == 0 {
            self.initial
        } else {
            self.states[k - 1]
        }
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    /// Maximal intervals of constancy `(start, end, state)`.
    pub fn segments(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut start = 0.0;
        let mut state = self.initial;
        for (&t, &s) in self.jump_times.iter().zip(&self.states) {
            out.push((start, t, state));
            start = t;
            state = s;
        }
        out.push((start, self.horizon, state));
        out
    }

    /// `∫_0^t f(Lambda_s) ds`.
    pub fn integrate<F: Fn(usize) -> f64>(&self, t: f64, f: F) -> f64 {
        self.segments()
            .into_iter()
            .take_while(|(a, _, _)| *a < t)
            .map(|(a, b, s)| (b.min(t) - a) * f(s))
            .sum()
    }

    /// Time spent in each state over `[0, horizon]`.
    pub fn occupation(&self, size: usize) -> Vec<f64> {
        let mut occ = vec![0.0; size];
        for (a, b, s) in self.segments() {
            occ[s] += b - a;
        }
        occ
    }

    /// Copy with an extra switch to `state` at `time` (for testing the
    /// left-limit convention).
    pub fn with_switch(&self, time: f64, state: usize) -> Self {
        let k = self.jump_times.partition_point(|&s| s < time);
        let mut p = self.clone();
        p.jump_times.truncate(k);
        p.states.truncate(k);
        p.jump_times.push(time);
        p.states.push(state);
        p
    }
}

/// Gillespie simulation of the chain with generator `Q / eps` from `initial`.
pub fn sample_path(
    q: &QMatrix,
    initial: usize,
    horizon: f64,
    eps: f64,
    stream: &mut RngStream,
) -> Result<ChainPath, CtmcError> {
    if initial >= q.size() {
        return Err(CtmcError::InvalidState {
            state: initial,
            size: q.size(),
        });
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CtmcError::InvalidTime(horizon));
    }
    check_time_scale(eps)?;
    let mut path = ChainPath {
        initial,
        jump_times: Vec::new(),
        states: Vec::new(),
        horizon,
        time_scale: eps,
    };
    let mut t = 0.0;
    let mut state = initial;
    loop {
        let exit = q.exit_rate(state);
        if exit == 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(stream);
        t += hold * eps / exit;
        if t > horizon {
            break;
        }
        let target = stream.uniform() * exit;
        let mut acc = 0.0;
        let mut next = state;
        for j in 0..q.size() {
            if j == state {
                continue;
            }
            acc += q.rate(state, j);
            next = j;
            if target < acc {
                break;
            }
        }
        // Guard against landing on a zero-rate tail through roundoff.
        if q.rate(state, next) == 0.0 {
            next = (0..q.size())
                .rev()
                .find(|&j| j != state && q.rate(state, j) > 0.0)
                .expect("irreducible chain has an exit");
        }
        path.jump_times.push(t);
        path.states.push(next);
        state = next;
    }
    Ok(path)
}
