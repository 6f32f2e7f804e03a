//! Synthetic labels drawn from the generative labeling model, used to check
//! that inference recovers known strengths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label_model::{MasterMap, MasterPixel};
use crate::risk_eval::{risk_utility_curve_with, CurveRow, RiskError, DEFAULT_TAUS};
use crate::strength_inference::{
    response_prob, run_em, update_strength, EmConfig, InferenceError, SigmoidParams, StrengthField, StrengthGrid,
    DEFAULT_EPSILON, DEFAULT_GRID, DEFAULT_SIGMA,
};

/// Allowed upward Monte Carlo wiggle when checking a risk curve.
pub const RISK_MONOTONE_SLACK: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario has no pixels")]
    Empty,
    #[error("scenario has no labelers")]
    NoLabelers,
    #[error("no simulated pixel received a label")]
    NothingLabeled,
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub n_pixels: usize,
    pub labelers: Vec<SigmoidParams>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub seed: u64,
    /// Size of the uniform algorithm-side strength sample.
    #[serde(default = "default_algo")]
    pub n_algo: usize,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_algo() -> usize {
    2000
}

impl SyntheticScenario {
    /// Five sharp labelers with staggered thresholds.
    pub fn sharp_panel(n_pixels: usize, seed: u64) -> Self {
        Self {
            n_pixels,
            labelers: [3.0, 4.5, 6.0, 7.5, 9.0]
                .iter()
                .map(|&offset| SigmoidParams::new(12.0, offset, 1.0, 0.0))
                .collect(),
            sigma: DEFAULT_SIGMA,
            epsilon: DEFAULT_EPSILON,
            grid: DEFAULT_GRID,
            seed,
            n_algo: default_algo(),
        }
    }

    pub fn grid(&self) -> Result<StrengthGrid, InferenceError> {
        StrengthGrid::unchecked(self.grid, self.sigma, self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLabels {
    /// Pixels nobody marked are not part of a master map and are dropped.
    pub master: MasterMap,
    /// Hidden strengths keyed by master pixel id.
    pub truth: StrengthField,
    /// Hidden strengths of the simulated pixels nobody marked.
    pub unlabeled: Vec<f64>,
}

/// Draws strengths uniformly, then each labeler's mark with probability
/// `P(y = 1 | clamp(s(·, θ)), x)` from the same soft-vote used by inference.
pub fn simulate_labels(scenario: &SyntheticScenario) -> Result<SimulatedLabels, SimError> {
    if scenario.n_pixels == 0 {
        return Err(SimError::Empty);
    }
    if scenario.labelers.is_empty() {
        return Err(SimError::NoLabelers);
    }
    let grid = scenario.grid()?;
    let profiles: Vec<Vec<f64>> = scenario
        .labelers
        .iter()
        .map(|t| grid.values().iter().map(|&c| grid.clamp_prob(t.eval(c))).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let strengths: Vec<f64> = (0..scenario.n_pixels).map(|_| rng.random::<f64>()).collect();
    let width = (scenario.n_pixels as f64).sqrt().ceil() as u32;
    let height = (scenario.n_pixels as u32).div_ceil(width);

    let mut pixels = Vec::new();
    let mut truth = StrengthField::default();
    let mut unlabeled = Vec::new();
    for (i, &x) in strengths.iter().enumerate() {
        let responses: Vec<u8> = profiles
            .iter()
            .map(|mu| u8::from(rng.random::<f64>() < response_prob(true, mu, x, &grid)))
            .collect();
        if responses.iter().all(|&y| y == 0) {
            unlabeled.push(x);
            continue;
        }
        let id = pixels.len() as u32;
        truth.0.insert(id, x);
        pixels.push(MasterPixel {
            pixel_id: id,
            row: i as u32 / width,
            col: i as u32 % width,
            responses,
        });
    }
    if pixels.is_empty() {
        return Err(SimError::NothingLabeled);
    }
    Ok(SimulatedLabels {
        master: MasterMap {
            image_id: format!("synthetic-{}", scenario.seed),
            width,
            height,
            labeler_ids: (0..scenario.labelers.len()).map(|l| format!("labeler-{l}")).collect(),
            pixels,
        },
        truth,
        unlabeled,
    })
}

/// Uniform algorithm-side strengths, from a stream independent of the labels.
pub fn algorithm_sample(scenario: &SyntheticScenario) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0xA160_5EED);
    (0..scenario.n_algo).map(|_| rng.random::<f64>()).collect()
}

/// Ranks starting at 1, tied values sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// True when no row's risk exceeds an earlier row's by more than `slack`.
pub fn nonincreasing_within(rows: &[CurveRow], slack: f64) -> bool {
    let risks: Vec<f64> = rows.iter().filter_map(|r| r.risk).collect();
    risks
        .iter()
        .enumerate()
        .all(|(i, &r)| risks[..i].iter().all(|&earlier| r <= earlier + slack))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Over every simulated pixel. Unmarked pixels take the strength the
    /// fitted profiles assign to an all-zero response vector.
    pub spearman: f64,
    /// Over marked (master) pixels only.
    pub spearman_labeled: f64,
    pub iterations_run: usize,
    pub labeled_pixels: usize,
    pub unlabeled_pixels: usize,
    /// Subsets chosen by inferred strength, scored with hidden strengths
    /// against the uniform algorithm-side sample.
    pub risk_curve: Vec<CurveRow>,
    pub risk_curve_monotone: bool,
}

pub fn recovery_experiment(scenario: &SyntheticScenario, em_config: &EmConfig) -> Result<RecoveryReport, SimError> {
    let sim = simulate_labels(scenario)?;
    let em = run_em(&sim.master, em_config)?;
    let truth: Vec<f64> = sim.truth.iter().map(|(_, x)| x).collect();
    let inferred: Vec<f64> = em.strengths.iter().map(|(_, x)| x).collect();

    let grid = em_config.validate()?;
    let profiles: Vec<Vec<f64>> = em.profiles.iter().map(|p| p.mu.clone()).collect();
    let silent = update_strength(&vec![0; profiles.len()], &profiles, &grid);
    let mut all_truth = truth.clone();
    let mut all_inferred = inferred.clone();
    all_truth.extend(&sim.unlabeled);
    all_inferred.extend(std::iter::repeat_n(silent, sim.unlabeled.len()));

    let algo = algorithm_sample(scenario);
    let risk_curve = risk_utility_curve_with(&em.strengths, &sim.truth, &DEFAULT_TAUS, &algo)?;
    Ok(RecoveryReport {
        spearman: spearman(&all_truth, &all_inferred),
        spearman_labeled: spearman(&truth, &inferred),
        iterations_run: em.iterations_run,
        labeled_pixels: sim.master.len(),
        unlabeled_pixels: sim.unlabeled.len(),
        risk_curve_monotone: nonincreasing_within(&risk_curve, RISK_MONOTONE_SLACK),
        risk_curve,
    })
}
