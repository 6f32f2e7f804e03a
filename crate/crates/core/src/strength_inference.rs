//! Latent perceptual strength inference.
//!
//! Every master pixel `i` carries a hidden strength `x_i` in `[0, 1]`. Each
//! labeler responds to a strength `χ` with probability `μ(χ)`, modeled as a
//! four-parameter sigmoid, and the probability of a mark at pixel `i` is the
//! Gaussian-smoothed ("soft voted") profile evaluated at `x_i`. EM alternates
//! between a kernel-regression estimate of each labeler's profile, a
//! least-squares sigmoid fit, and a per-pixel likelihood argmax over a fixed
//! strength grid.
//!
//! All updates are written so that reordering labelers or pixels yields
//! bit-identical strengths: profile estimates work on order-free histograms
//! and per-pixel log-likelihood terms are summed in sorted order.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{MasterMap, PixelId};

pub const DEFAULT_SIGMA: f64 = 0.15;
pub const DEFAULT_GRID: usize = 101;
pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-3;
/// Smallest grid resolution accepted from configuration.
pub const MIN_GRID: usize = 11;

/// Fallback profile value where the kernel regression has no support.
const EMPTY_SUPPORT_PRIOR: f64 = 0.5;
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("grid resolution {0} is below the minimum of {MIN_GRID}")]
    GridTooSmall(usize),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("epsilon must lie in [0, 0.5), got {0}")]
    InvalidEpsilon(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("max_iters must be at least 1")]
    NoIterations,
    #[error("master map has no pixels")]
    EmptyMaster,
    #[error("master map has no labelers")]
    NoLabelers,
    #[error("invalid master map: {0}")]
    InvalidMaster(#[from] crate::label_model::LabelError),
}

/// `s(χ, θ) = θ3 / (1 + exp(θ2 − θ1 χ)) − θ4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct SigmoidParams {
    pub slope: f64,
    pub offset: f64,
    pub scale: f64,
    pub shift: f64,
}

impl SigmoidParams {
    pub const fn new(slope: f64, offset: f64, scale: f64, shift: f64) -> Self {
        Self { slope, offset, scale, shift }
    }

    pub fn eval(&self, chi: f64) -> f64 {
        sigmoid(chi, self)
    }

    fn to_array(self) -> [f64; 4] {
        [self.slope, self.offset, self.scale, self.shift]
    }
}

impl From<[f64; 4]> for SigmoidParams {
    fn from(t: [f64; 4]) -> Self {
        Self::new(t[0], t[1], t[2], t[3])
    }
}

impl From<SigmoidParams> for [f64; 4] {
    fn from(p: SigmoidParams) -> Self {
        p.to_array()
    }
}

pub fn sigmoid(chi: f64, theta: &SigmoidParams) -> f64 {
    theta.scale / (1.0 + (theta.offset - theta.slope * chi).exp()) - theta.shift
}

/// Zero-mean Gaussian density.
pub fn gaussian_pdf(d: f64, sigma: f64) -> f64 {
    let z = d / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Uniform strength grid on `[0, 1]` with trapezoidal quadrature weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthGrid {
    values: Vec<f64>,
    quadrature: Vec<f64>,
    sigma: f64,
    epsilon: f64,
}

impl StrengthGrid {
    pub fn new(resolution: usize, sigma: f64, epsilon: f64) -> Result<Self, InferenceError> {
        if resolution < MIN_GRID {
            return Err(InferenceError::GridTooSmall(resolution));
        }
        Self::unchecked(resolution, sigma, epsilon)
    }

    /// Like [`StrengthGrid::new`] but only requires two grid points; for
    /// high-resolution quadrature and small hand-checked cases.
    pub(crate) fn unchecked(resolution: usize, sigma: f64, epsilon: f64) -> Result<Self, InferenceError> {
        if resolution < 2 {
            return Err(InferenceError::GridTooSmall(resolution));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(InferenceError::InvalidSigma(sigma));
        }
        if !(0.0..0.5).contains(&epsilon) {
            return Err(InferenceError::InvalidEpsilon(epsilon));
        }
        let last = (resolution - 1) as f64;
        let values: Vec<f64> = (0..resolution).map(|k| k as f64 / last).collect();
        let step = 1.0 / last;
        let mut quadrature = vec![step; resolution];
        quadrature[0] = 0.5 * step;
        quadrature[resolution - 1] = 0.5 * step;
        Ok(Self { values, quadrature, sigma, epsilon })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoidal weights: `Σ_k quadrature[k] f(χ_k) ≈ ∫_0^1 f`.
    pub fn quadrature(&self) -> &[f64] {
        &self.quadrature
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.values[1]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn clamp_prob(&self, p: f64) -> f64 {
        p.clamp(self.epsilon, 1.0 - self.epsilon)
    }
}

impl Default for StrengthGrid {
    fn default() -> Self {
        Self::new(DEFAULT_GRID, DEFAULT_SIGMA, DEFAULT_EPSILON).expect("default grid is valid")
    }
}

/// Gaussian kernel centred at `x`, truncated to `[0, 1]` and normalized to
/// unit mass under the grid's trapezoidal rule.
pub fn kernel_weights(x: f64, grid: &StrengthGrid) -> Vec<f64> {
    let mut w: Vec<f64> = grid.values.iter().map(|&chi| gaussian_pdf(x - chi, grid.sigma)).collect();
    let mass: f64 = w.iter().zip(&grid.quadrature).map(|(w, q)| w * q).sum();
    w.iter_mut().for_each(|v| *v /= mass);
    w
}

/// Unclamped `P(y = 1 | μ, x)`.
fn soft_vote(mu: &[f64], x: f64, grid: &StrengthGrid) -> f64 {
    kernel_weights(x, grid)
        .iter()
        .zip(mu)
        .zip(&grid.quadrature)
        .map(|((w, m), q)| w * m * q)
        .sum()
}

/// Probability that a labeler with profile `mu` answers `y` at strength `x`,
/// clamped to `[ε, 1 − ε]`.
pub fn response_prob(y: bool, mu: &[f64], x: f64, grid: &StrengthGrid) -> f64 {
    let p1 = soft_vote(mu, x, grid);
    grid.clamp_prob(if y { p1 } else { 1.0 - p1 })
}

/// Per-pixel strengths keyed by master pixel id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrengthField(pub BTreeMap<PixelId, f64>);

impl StrengthField {
    pub fn get(&self, id: PixelId) -> Option<f64> {
        self.0.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PixelId, f64)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    fn from_dense(values: &[f64]) -> Self {
        Self(values.iter().enumerate().map(|(i, &x)| (i as PixelId, x)).collect())
    }

    fn to_dense(&self, n: usize) -> Option<Vec<f64>> {
        (0..n as PixelId).map(|i| self.get(i)).collect()
    }
}

/// Initial guess: fraction of labelers that marked the pixel.
pub fn init_strengths(master: &MasterMap) -> StrengthField {
    StrengthField::from_dense(&initial_dense(master))
}

fn initial_dense(master: &MasterMap) -> Vec<f64> {
    let l = master.num_labelers() as f64;
    master.pixels.iter().map(|p| p.vote_count() as f64 / l).collect()
}

/// Kernel-regression estimate of one labeler's response profile.
///
/// `μ(χ_k) = Σ_i y_i φ(x_i − χ_k) / Σ_i φ(x_i − χ_k)`, clamped to
/// `[ε, 1 − ε]`; grid points without kernel support fall back to 0.5.
pub fn update_mu(strengths: &StrengthField, labeler_index: usize, master: &MasterMap, grid: &StrengthGrid) -> Vec<f64> {
    let dense = strengths
        .to_dense(master.len())
        .expect("strength field must cover every master pixel");
    let hist = response_histogram(&dense, master, labeler_index);
    mu_from_histogram(&hist, grid)
}

/// `(x, pixels at x, positive responses at x)`, sorted by `x`.
fn response_histogram(x: &[f64], master: &MasterMap, labeler: usize) -> Vec<(f64, u64, u64)> {
    let mut counts: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for (xi, p) in x.iter().zip(&master.pixels) {
        let e = counts.entry(xi.to_bits()).or_default();
        e.0 += 1;
        e.1 += u64::from(p.responses[labeler] != 0);
    }
    // strengths are nonnegative, so bit order is numeric order
    counts.into_iter().map(|(b, (n, k))| (f64::from_bits(b), n, k)).collect()
}

fn mu_from_histogram(hist: &[(f64, u64, u64)], grid: &StrengthGrid) -> Vec<f64> {
    grid.values
        .iter()
        .map(|&chi| {
            let mut num = 0.0;
            let mut den = 0.0;
            for &(x, n, k) in hist {
                let phi = gaussian_pdf(x - chi, grid.sigma);
                num += k as f64 * phi;
                den += n as f64 * phi;
            }
            if den < MIN_DENOMINATOR {
                EMPTY_SUPPORT_PRIOR
            } else {
                grid.clamp_prob(num / den)
            }
        })
        .collect()
}

/// Parameter box searched by [`fit_theta`].
pub const THETA_BOUNDS: [(f64, f64); 4] = [(0.0, 50.0), (-25.0, 25.0), (0.0, 4.0), (-1.0, 2.0)];

const SEED_GRID: [[f64; 4]; 4] = [
    [0.0, 4.0, 12.0, 36.0],
    [-2.0, 2.0, 6.0, 18.0],
    [0.5, 1.0, 1.5, 2.0],
    [-0.5, 0.0, 0.5, 1.0],
];
/// Seeds (best first) that receive a full simplex refinement.
const REFINED_SEEDS: usize = 16;
const SIMPLEX_ITERS: usize = 200;
const POLISH_ROUNDS: usize = 4;

/// Trapezoidal integrated squared error between `s(·, θ)` and `mu`.
pub fn fit_objective(theta: &SigmoidParams, mu: &[f64], grid: &StrengthGrid) -> f64 {
    grid.values
        .iter()
        .zip(mu)
        .zip(&grid.quadrature)
        .map(|((&chi, &m), &q)| {
            let d = sigmoid(chi, theta) - m;
            q * d * d
        })
        .sum()
}

/// Every point of the fixed multi-start seed grid.
pub fn theta_seeds() -> Vec<SigmoidParams> {
    let mut out = Vec::with_capacity(256);
    for &a in &SEED_GRID[0] {
        for &b in &SEED_GRID[1] {
            for &c in &SEED_GRID[2] {
                for &d in &SEED_GRID[3] {
                    out.push(SigmoidParams::new(a, b, c, d));
                }
            }
        }
    }
    out
}

/// Least-squares sigmoid fit to a sampled profile inside [`THETA_BOUNDS`].
///
/// The whole seed grid is scored, the best seeds are refined with a
/// box-projected Nelder–Mead simplex, and the winner is polished by simplex
/// restarts. The result never scores worse than any seed.
pub fn fit_theta(mu: &[f64], grid: &StrengthGrid) -> SigmoidParams {
    let f = |t: &[f64; 4]| fit_objective(&SigmoidParams::from(*t), mu, grid);
    let mut scored: Vec<([f64; 4], f64)> = theta_seeds()
        .into_iter()
        .map(|s| {
            let t = s.to_array();
            (t, f(&t))
        })
        .collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut best = scored[0];
    for &(seed, _) in scored.iter().take(REFINED_SEEDS) {
        let cand = nelder_mead(&f, seed, SIMPLEX_ITERS);
        if cand.1 < best.1 {
            best = cand;
        }
    }
    for _ in 0..POLISH_ROUNDS {
        let cand = nelder_mead(&f, best.0, SIMPLEX_ITERS);
        if cand.1 < best.1 {
            best = cand;
        } else {
            break;
        }
    }
    SigmoidParams::from(best.0)
}

fn project(mut t: [f64; 4]) -> [f64; 4] {
    for (v, (lo, hi)) in t.iter_mut().zip(THETA_BOUNDS) {
        *v = v.clamp(lo, hi);
    }
    t
}

fn nelder_mead(f: &impl Fn(&[f64; 4]) -> f64, start: [f64; 4], iters: usize) -> ([f64; 4], f64) {
    const N: usize = 4;
    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for d in 0..N {
        let (lo, hi) = THETA_BOUNDS[d];
        let step = 0.1 * (hi - lo);
        let mut v = start;
        v[d] = if v[d] + step <= hi { v[d] + step } else { v[d] - step };
        let v = project(v);
        simplex.push((v, f(&v)));
    }

    let combine = |a: &[f64; 4], b: &[f64; 4], t: f64| -> [f64; 4] {
        let mut out = [0.0; 4];
        for i in 0..N {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        project(out)
    };

    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[N].1 - simplex[0].1;
        if spread <= 1e-16 * simplex[0].1.abs().max(1e-300) {
            let size = simplex[1..]
                .iter()
                .flat_map(|v| v.0.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if size < 1e-10 {
                break;
            }
        }
        let mut centroid = [0.0; 4];
        for v in &simplex[..N] {
            for i in 0..N {
                centroid[i] += v.0[i] / N as f64;
            }
        }
        let worst = simplex[N];
        let reflected = combine(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[N] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (reflected, fr);
        } else {
            let (toward, ft) = if fr < worst.1 { (reflected, fr) } else { worst };
            let contracted = combine(&centroid, &toward, 0.5);
            let fc = f(&contracted);
            if fc < ft {
                simplex[N] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let p = combine(&best, &v.0, 0.5);
                    *v = (p, f(&p));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Log response probabilities of one labeler at every grid point.
#[derive(Debug, Clone)]
struct LogTable {
    yes: Vec<f64>,
    no: Vec<f64>,
}

impl LogTable {
    fn new(mu: &[f64], grid: &StrengthGrid) -> Self {
        let (yes, no) = grid
            .values
            .iter()
            .map(|&chi| {
                let p1 = soft_vote(mu, chi, grid);
                (grid.clamp_prob(p1).ln(), grid.clamp_prob(1.0 - p1).ln())
            })
            .unzip();
        Self { yes, no }
    }
}

/// Grid index maximizing the log-likelihood; earliest index wins ties.
fn argmax_strength(responses: &[u8], tables: &[LogTable], grid_len: usize) -> usize {
    let mut terms = vec![0.0; responses.len()];
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..grid_len {
        for ((t, &y), table) in terms.iter_mut().zip(responses).zip(tables) {
            *t = if y != 0 { table.yes[k] } else { table.no[k] };
        }
        terms.sort_by(f64::total_cmp);
        let ll: f64 = terms.iter().sum();
        if ll > best.1 {
            best = (k, ll);
        }
    }
    best.0
}

/// Maximum-likelihood strength of one pixel given labeler profiles.
pub fn update_strength(responses: &[u8], profiles: &[Vec<f64>], grid: &StrengthGrid) -> f64 {
    assert_eq!(responses.len(), profiles.len(), "one profile per response");
    let tables: Vec<LogTable> = profiles.iter().map(|mu| LogTable::new(mu, grid)).collect();
    grid.values[argmax_strength(responses, &tables, grid.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuMode {
    /// x-update uses the clamped sigmoid fit.
    #[default]
    Sigmoid,
    /// x-update uses the kernel-regression profile directly.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub sigma: f64,
    pub grid: usize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub mu_mode: MuMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            grid: DEFAULT_GRID,
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            mu_mode: MuMode::Sigmoid,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<StrengthGrid, InferenceError> {
        if self.max_iters == 0 {
            return Err(InferenceError::NoIterations);
        }
        if !(self.tol > 0.0) {
            return Err(InferenceError::InvalidTolerance(self.tol));
        }
        StrengthGrid::new(self.grid, self.sigma, self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerProfile {
    pub labeler_id: String,
    pub theta: SigmoidParams,
    /// Profile used by the strength update, sampled on the grid.
    pub mu: Vec<f64>,
    /// Kernel-regression estimate before the sigmoid fit.
    pub raw_mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub strengths: StrengthField,
    pub profiles: Vec<LabelerProfile>,
    pub iterations_run: usize,
    pub final_max_delta: f64,
    pub history: Vec<f64>,
    /// Every pixel carried the same response vector; strengths are flat.
    pub degenerate: bool,
}

fn estimate_profile(
    x: &[f64],
    master: &MasterMap,
    labeler: usize,
    grid: &StrengthGrid,
    mode: MuMode,
) -> LabelerProfile {
    let raw_mu = mu_from_histogram(&response_histogram(x, master, labeler), grid);
    let theta = fit_theta(&raw_mu, grid);
    let mu = match mode {
        MuMode::Sigmoid => grid.values.iter().map(|&chi| grid.clamp_prob(theta.eval(chi))).collect(),
        MuMode::Raw => raw_mu.clone(),
    };
    LabelerProfile {
        labeler_id: master.labeler_ids[labeler].clone(),
        theta,
        mu,
        raw_mu,
    }
}

/// Runs EM on one image's master map.
pub fn run_em(master: &MasterMap, config: &EmConfig) -> Result<EmResult, InferenceError> {
    let grid = config.validate()?;
    if master.num_labelers() == 0 {
        return Err(InferenceError::NoLabelers);
    }
    if master.is_empty() {
        return Err(InferenceError::EmptyMaster);
    }
    master.validate()?;

    // pixels sharing a response vector always share a strength
    let mut groups: HashMap<&[u8], Vec<usize>> = HashMap::new();
    for (i, p) in master.pixels.iter().enumerate() {
        groups.entry(p.responses.as_slice()).or_default().push(i);
    }
    let mut patterns: Vec<(&[u8], Vec<usize>)> = groups.into_iter().collect();
    patterns.sort_by(|a, b| a.0.cmp(b.0));
    let degenerate = patterns.len() == 1;

    let mut x = initial_dense(master);
    let mut history = Vec::new();
    let mut profiles = Vec::new();
    for _ in 0..config.max_iters {
        profiles = (0..master.num_labelers())
            .into_par_iter()
            .map(|l| estimate_profile(&x, master, l, &grid, config.mu_mode))
            .collect();
        let tables: Vec<LogTable> = profiles.iter().map(|p| LogTable::new(&p.mu, &grid)).collect();
        let chosen: Vec<f64> = patterns
            .par_iter()
            .map(|(y, _)| grid.values[argmax_strength(y, &tables, grid.len())])
            .collect();

        let mut delta = 0.0f64;
        for ((_, members), &value) in patterns.iter().zip(&chosen) {
            for &i in members {
                delta = delta.max((value - x[i]).abs());
                x[i] = value;
            }
        }
        history.push(delta);
        if delta < config.tol {
            break;
        }
    }

    Ok(EmResult {
        strengths: StrengthField::from_dense(&x),
        profiles,
        iterations_run: history.len(),
        final_max_delta: *history.last().unwrap_or(&0.0),
        history,
        degenerate,
    })
}
