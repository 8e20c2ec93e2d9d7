//! Latin hypercube design over the training hyperparameters and short-budget
//! trial runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PreparedSample;
use crate::train::{train, TrainConfig, TrainError};

/// Random designs scored per call; the most spread-out one is kept.
pub const CANDIDATES: usize = 64;

pub const DOE_CSV_HEADER: &str =
    "trial,hidden,layers,eta1,eta2,eta3,learning_rate,weight_decay,batch_size,seed,epochs,val_loss,status";

#[derive(Debug, Error, PartialEq)]
pub enum DoeError {
    #[error("empty range for {0}")]
    EmptyRange(&'static str),
    #[error("at least one trial is required")]
    NoTrials,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSpace {
    pub hidden: (usize, usize),
    pub layers: (usize, usize),
    /// Shared log-scaled range of every mode weight.
    pub mode_weight: (f64, f64),
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub batch_sizes: Vec<usize>,
}

impl Default for HyperSpace {
    fn default() -> Self {
        HyperSpace {
            hidden: (8, 64),
            layers: (2, 20),
            mode_weight: (0.1, 1000.0),
            learning_rate: (1e-4, 1e-2),
            weight_decay: (1e-4, 1e-1),
            batch_sizes: vec![1, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub hidden: usize,
    pub layers: usize,
    pub mode_weights: Vec<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Assignment {
    /// `base` with this assignment's hyperparameters.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            layers: self.layers,
            mode_weights: self.mode_weights.clone(),
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            ..base.clone()
        }
    }
}

fn log_range(name: &'static str, (lo, hi): (f64, f64)) -> Result<(), DoeError> {
    if lo > 0.0 && hi >= lo && hi.is_finite() {
        Ok(())
    } else {
        Err(DoeError::EmptyRange(name))
    }
}

impl HyperSpace {
    pub fn validate(&self) -> Result<(), DoeError> {
        if self.hidden.0 == 0 || self.hidden.1 < self.hidden.0 {
            return Err(DoeError::EmptyRange("hidden"));
        }
        if self.layers.0 == 0 || self.layers.1 < self.layers.0 {
            return Err(DoeError::EmptyRange("layers"));
        }
        log_range("mode_weight", self.mode_weight)?;
        log_range("learning_rate", self.learning_rate)?;
        log_range("weight_decay", self.weight_decay)?;
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(DoeError::EmptyRange("batch_sizes"));
        }
        Ok(())
    }

    pub fn contains(&self, a: &Assignment) -> bool {
        let within = |(lo, hi): (f64, f64), v: f64| lo <= v && v <= hi;
        (self.hidden.0..=self.hidden.1).contains(&a.hidden)
            && (self.layers.0..=self.layers.1).contains(&a.layers)
            && a.mode_weights.iter().all(|&w| within(self.mode_weight, w))
            && within(self.learning_rate, a.learning_rate)
            && within(self.weight_decay, a.weight_decay)
            && self.batch_sizes.contains(&a.batch_size)
    }

    /// Maps a point of the unit cube (`5 + n_modes` coordinates) to an
    /// assignment. Integer and set-valued coordinates are split into
    /// equal-probability bins, one per admissible value.
    fn decode(&self, u: &[f64]) -> Assignment {
        let int = |(lo, hi): (usize, usize), u: f64| lo + ((u * (hi - lo + 1) as f64) as usize).min(hi - lo);
        let log = |(lo, hi): (f64, f64), u: f64| (lo.ln() + u * (hi.ln() - lo.ln())).exp();
        let n_modes = u.len() - 5;
        let bs = self.batch_sizes.len();
        Assignment {
            hidden: int(self.hidden, u[0]),
            layers: int(self.layers, u[1]),
            mode_weights: (0..n_modes).map(|m| log(self.mode_weight, u[2 + m])).collect(),
            learning_rate: log(self.learning_rate, u[2 + n_modes]),
            weight_decay: log(self.weight_decay, u[3 + n_modes]),
            batch_size: self.batch_sizes[((u[4 + n_modes] * bs as f64) as usize).min(bs - 1)],
        }
    }
}

/// One Latin hypercube design in `[0, 1)^dims`: every column places exactly
/// one point in each of the `n` equal-width strata.
pub fn lhs_unit(n: usize, dims: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dims]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..dims {
        perm.shuffle(rng);
        for (i, &stratum) in perm.iter().enumerate() {
            pts[i][d] = (stratum as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

fn min_pairwise_distance(pts: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d2: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

/// Among [`CANDIDATES`] random designs, the one with the largest minimum
/// pairwise distance.
pub fn maximin_lhs(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lhs_unit(n, dims, &mut rng);
    let mut best_score = min_pairwise_distance(&best);
    for _ in 1..CANDIDATES {
        let cand = lhs_unit(n, dims, &mut rng);
        let score = min_pairwise_distance(&cand);
        if score > best_score {
            best = cand;
            best_score = score;
        }
    }
    best
}

pub fn lhs_sample(space: &HyperSpace, n_trials: usize, n_modes: usize, seed: u64) -> Result<Vec<Assignment>, DoeError> {
    space.validate()?;
    if n_trials == 0 {
        return Err(DoeError::NoTrials);
    }
    Ok(maximin_lhs(n_trials, 5 + n_modes, seed)
        .iter()
        .map(|u| space.decode(u))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrialStatus {
    Completed,
    Diverged(usize),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub assignment: Assignment,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone)]
pub struct DoeReport {
    pub trials: Vec<Trial>,
    /// Index of the trial with the lowest validation loss.
    pub best: Option<usize>,
}

impl DoeReport {
    pub fn best_trial(&self) -> Option<&Trial> {
        self.best.map(|i| &self.trials[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(DOE_CSV_HEADER);
        s.push('\n');
        for t in &self.trials {
            let a = &t.assignment;
            let eta = |m: usize| a.mode_weights.get(m).map_or(String::new(), |v| format!("{v:e}"));
            let status = match &t.status {
                TrialStatus::Completed => "completed".to_string(),
                TrialStatus::Diverged(e) => format!("diverged@{e}"),
                TrialStatus::Failed(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{:e},{:e},{},{},{},{},{}\n",
                t.index,
                a.hidden,
                a.layers,
                eta(0),
                eta(1),
                eta(2),
                a.learning_rate,
                a.weight_decay,
                a.batch_size,
                t.seed,
                t.epochs_run,
                t.best_val_loss.map_or(String::new(), |v| format!("{v:e}")),
                status
            ));
        }
        s
    }
}

/// Trains every assignment for `base.max_epochs` epochs. Trials run in
/// parallel and are reported in index order; a diverging trial is recorded,
/// not fatal.
pub fn run_trials(
    assignments: &[Assignment],
    base: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    active_inputs: &[bool],
) -> DoeReport {
    let trials: Vec<Trial> = assignments
        .par_iter()
        .enumerate()
        .map(|(index, a)| {
            let mut cfg = a.apply(base);
            cfg.seed = base.seed.wrapping_add(index as u64);
            let (status, loss, epochs) = match train(train_set, val_set, active_inputs, &cfg) {
                Ok(out) => (TrialStatus::Completed, Some(out.best_val_loss), out.epochs_run),
                Err(TrainError::Diverged(e)) => (TrialStatus::Diverged(e), None, e),
                Err(e) => (TrialStatus::Failed(e.to_string()), None, 0),
            };
            Trial {
                index,
                assignment: a.clone(),
                seed: cfg.seed,
                epochs_run: epochs,
                best_val_loss: loss,
                status,
            }
        })
        .collect();
    let best = trials
        .iter()
        .filter_map(|t| t.best_val_loss.map(|l| (t.index, l)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    DoeReport { trials, best }
}

pub fn run_doe(
    space: &HyperSpace,
    n_trials: usize,
    base: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    active_inputs: &[bool],
) -> Result<DoeReport, DoeError> {
    let assignments = lhs_sample(space, n_trials, base.n_modes(), base.seed)?;
    Ok(run_trials(&assignments, base, train_set, val_set, active_inputs))
}
