//! Mode-weighted regression of the basis targets with AdamW and early stopping.

use std::borrow::Cow;
use std::rc::Rc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use romgnn_core::mesh::DIM;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PreparedSample;
use crate::graph::{EdgeIndex, GraphBatch};
use crate::model::{GnnModel, GnnShape};
use crate::params::AdamW;
use crate::tape::{Mat, Tape};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {0}")]
    Diverged(usize),
    #[error("{0} set is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub layers: usize,
    /// Loss weight of each mode.
    pub mode_weights: Vec<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Input noise std as a fraction of the mean absolute normalized input.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 24,
            layers: 15,
            mode_weights: vec![10.0, 1.0, 100.0],
            learning_rate: 3e-3,
            weight_decay: 5e-3,
            batch_size: 8,
            max_epochs: 5000,
            patience: 200,
            noise_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.hidden > 0
            && self.batch_size > 0
            && !self.mode_weights.is_empty()
            && self.mode_weights.iter().all(|w| *w > 0.0 && w.is_finite())
            && self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.noise_fraction >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Invalid(format!("{self:?}")))
        }
    }

    pub fn n_modes(&self) -> usize {
        self.mode_weights.len()
    }

    pub fn shape(&self, k: usize) -> GnnShape {
        GnnShape {
            k,
            hidden: self.hidden,
            layers: self.layers,
            out: self.n_modes() * DIM,
        }
    }
}

/// Per-channel loss weights: `η_m` for both components of mode `m`.
pub fn channel_weights(mode_weights: &[f64], out: usize) -> Rc<[f64]> {
    let per_mode = out / mode_weights.len();
    (0..out).map(|c| mode_weights[c / per_mode]).collect()
}

/// `Σ_m η_m · MSE_m` of one graph, where `MSE_m` averages over nodes and the
/// mode's channels.
pub fn graph_loss(pred: &Mat, target: &Mat, mode_weights: &[f64]) -> f64 {
    let per_mode = target.cols / mode_weights.len();
    let w = channel_weights(mode_weights, target.cols);
    let scale = 1.0 / (target.rows * per_mode) as f64;
    let mut total = 0.0;
    for i in 0..target.rows {
        for c in 0..target.cols {
            total += w[c] * (pred.get(i, c) - target.get(i, c)).powi(2);
        }
    }
    total * scale
}

/// Loss and parameter gradients of one graph.
pub fn loss_and_grads(
    model: &GnnModel,
    x: &Mat,
    edges: &EdgeIndex,
    target: &Mat,
    mode_weights: &[f64],
) -> (f64, Vec<Mat>) {
    let batch = GraphBatch::new(&[(x, edges)]).expect("sample shapes checked at preparation");
    let per_mode = target.cols / mode_weights.len();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true);
    let y = model.forward(&mut tape, &p, &batch);
    let row_w: Rc<[f64]> = vec![1.0 / (target.rows * per_mode) as f64; target.rows].into();
    let col_w = channel_weights(mode_weights, target.cols);
    let loss = tape.weighted_sq_err(y, Rc::new(target.clone()), row_w, col_w);
    let value = tape.value(loss).data[0];
    let mut grads = tape.backward(loss).expect("scalar loss on an acyclic tape");
    (value, model.params().collect_grads(&p, &mut grads))
}

/// Mean per-graph loss, evaluating `batch_size` graphs per forward pass.
pub fn evaluate_loss(model: &GnnModel, samples: &[PreparedSample], mode_weights: &[f64], batch_size: usize) -> f64 {
    let chunks: Vec<&[PreparedSample]> = samples.chunks(batch_size.max(1)).collect();
    let losses: Vec<f64> = chunks
        .par_iter()
        .map(|chunk| {
            let parts: Vec<(&Mat, &EdgeIndex)> = chunk.iter().map(|s| (&s.x, &s.edges)).collect();
            let batch = GraphBatch::new(&parts).expect("sample shapes checked at preparation");
            let y = model.predict(&batch);
            chunk
                .iter()
                .zip(batch.segments.iter())
                .map(|(s, &(start, len))| graph_loss(&y.rows_range(start, len), &s.target, mode_weights))
                .sum::<f64>()
        })
        .collect();
    losses.iter().sum::<f64>() / samples.len().max(1) as f64
}

/// Adds `N(0, σ²)` with `σ = fraction · mean|x|` to the columns flagged in
/// `active`.
pub fn noisy_copy(x: &Mat, fraction: f64, active: &[bool], rng: &mut ChaCha8Rng) -> Mat {
    let mut out = x.clone();
    if fraction == 0.0 {
        return out;
    }
    let mean_abs = x.data.iter().map(|v| v.abs()).sum::<f64>() / x.data.len().max(1) as f64;
    let sigma = fraction * mean_abs;
    if !(sigma > 0.0) {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for i in 0..out.rows {
        for (c, v) in out.row_mut(i).iter_mut().enumerate() {
            if active[c] {
                *v += normal.sample(rng);
            }
        }
    }
    out
}

/// Sum of per-graph gradients in a fixed order.
pub fn sum_grads(parts: Vec<(f64, Vec<Mat>)>) -> (f64, Vec<Mat>) {
    let mut it = parts.into_iter();
    let (mut loss, mut acc) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }
    (loss, acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: GnnModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

/// Deterministic per-epoch generator.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// One supervised training example of an epoch.
pub struct Example<'a> {
    pub x: Mat,
    pub edges: &'a EdgeIndex,
    pub target: Cow<'a, Mat>,
}

/// Early-stopped AdamW loop shared by the basis model and the autoregressive
/// baseline. `epoch_examples` yields the (already noised and shuffled)
/// training examples of one epoch from that epoch's generator.
pub fn fit<'a>(
    shape: GnnShape,
    cfg: &TrainConfig,
    val_set: &[PreparedSample],
    mut epoch_examples: impl FnMut(&mut ChaCha8Rng) -> Vec<Example<'a>>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut model = GnnModel::new(shape, cfg.seed);
    let mut opt = AdamW::new(model.params(), cfg.learning_rate, cfg.weight_decay);
    let eta = &cfg.mode_weights;
    let mut best = model.clone();
    let mut best_val = evaluate_loss(&model, val_set, eta, cfg.batch_size);
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let examples = epoch_examples(&mut rng);
        if examples.is_empty() {
            return Err(TrainError::EmptySplit("training"));
        }
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch_size) {
            let parts: Vec<(f64, Vec<Mat>)> = chunk
                .par_iter()
                .map(|ex| loss_and_grads(&model, &ex.x, ex.edges, &ex.target, eta))
                .collect();
            let (loss, grads) = sum_grads(parts);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged(epoch));
            }
            opt.step(model.params_mut(), &grads);
            total += loss;
        }
        if !model.params().is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let train_loss = total / examples.len() as f64;
        let val_loss = evaluate_loss(&model, val_set, eta, cfg.batch_size);
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        epochs_run = epoch;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        }
        if epoch % 25 == 0 {
            info!("epoch {epoch}: train {train_loss:.4e}, val {val_loss:.4e}, best {best_val:.4e} @ {best_epoch}");
        } else {
            debug!("epoch {epoch}: train {train_loss:.4e}, val {val_loss:.4e}");
        }
        if epoch - best_epoch >= cfg.patience {
            info!("early stop at epoch {epoch}, best {best_val:.4e} @ {best_epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_loss: best_val,
        epochs_run,
    })
}

pub fn train(
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    active_inputs: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let k = train_set[0].x.cols;
    let shape = cfg.shape(k);
    if train_set.iter().chain(val_set).any(|s| s.target.cols != shape.out || s.x.cols != k) {
        return Err(TrainError::Invalid(format!(
            "samples must have {k} features and {} target channels",
            shape.out
        )));
    }
    fit(shape, cfg, val_set, |rng| {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(rng);
        order
            .iter()
            .map(|&i| Example {
                x: noisy_copy(&train_set[i].x, cfg.noise_fraction, active_inputs, rng),
                edges: &train_set[i].edges,
                target: Cow::Borrowed(&train_set[i].target),
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use romgnn_core::mesh::Adjacency;
    use rand::Rng;

    fn sample(nx: usize, ny: usize, seed: u64, out: usize) -> PreparedSample {
        let id = |i: usize, j: usize| j * nx + i;
        let mut edges = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if i + 1 < nx {
                    edges.push((id(i, j), id(i + 1, j)));
                }
                if j + 1 < ny {
                    edges.push((id(i, j), id(i, j + 1)));
                }
            }
        }
        let n = nx * ny;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, 3, |i, c| match c {
            0 => (i % nx) as f64,
            1 => (i / nx) as f64,
            _ => rng.random_range(-1.0..1.0),
        });
        let target = Mat::from_fn(n, out, |i, c| ((i % nx) as f64 * 0.3 + c as f64 * 0.1).sin() * 0.5 + 0.5);
        PreparedSample {
            x,
            edges: EdgeIndex::from_adjacency(&Adjacency::from_edges(n, &edges)).unwrap(),
            target,
        }
    }

    #[test]
    fn loss_definition() {
        let t = Mat::from_fn(3, 2, |i, c| (i + c) as f64);
        assert_eq!(graph_loss(&t, &t, &[1.0]), 0.0);
        let shifted = Mat::from_fn(3, 2, |i, c| t.get(i, c) + 0.5);
        assert!((graph_loss(&shifted, &t, &[1.0]) - 0.25).abs() < 1e-15);
        // two modes of one channel pair each; doubling η₂ doubles only its term
        let t4 = Mat::zeros(2, 4);
        let p4 = Mat::from_fn(2, 4, |_, c| if c < 2 { 1.0 } else { 2.0 });
        let base = graph_loss(&p4, &t4, &[1.0, 1.0]);
        let doubled = graph_loss(&p4, &t4, &[1.0, 2.0]);
        assert!((base - 5.0).abs() < 1e-15);
        assert!((doubled - base - 4.0).abs() < 1e-15);
    }

    #[test]
    fn tape_loss_matches_direct_loss() {
        let s = sample(3, 3, 1, 4);
        let model = GnnModel::new(
            GnnShape {
                k: 3,
                hidden: 5,
                layers: 2,
                out: 4,
            },
            0,
        );
        let (l, _) = loss_and_grads(&model, &s.x, &s.edges, &s.target, &[3.0, 0.5]);
        let y = model.predict(&GraphBatch::new(&[(&s.x, &s.edges)]).unwrap());
        assert!((l - graph_loss(&y, &s.target, &[3.0, 0.5])).abs() < 1e-12);
    }

    #[test]
    fn validation_loss_independent_of_batch_size() {
        let samples: Vec<_> = (0..9).map(|s| sample(3 + s as usize % 3, 4, s, 6)).collect();
        let model = GnnModel::new(
            GnnShape {
                k: 3,
                hidden: 6,
                layers: 3,
                out: 6,
            },
            4,
        );
        let eta = [10.0, 1.0, 100.0];
        let a = evaluate_loss(&model, &samples, &eta, 1);
        let b = evaluate_loss(&model, &samples, &eta, 8);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn overfits_a_single_graph() {
        let s = sample(4, 3, 2, 2);
        let cfg = TrainConfig {
            hidden: 16,
            layers: 2,
            mode_weights: vec![1.0],
            learning_rate: 3e-3,
            weight_decay: 0.0,
            batch_size: 1,
            max_epochs: 3000,
            patience: 3000,
            noise_fraction: 0.0,
            seed: 1,
        };
        let out = train(std::slice::from_ref(&s), std::slice::from_ref(&s), &[true; 3], &cfg).unwrap();
        let last = out.history.last().unwrap();
        assert!(out.best_val_loss < 1e-4, "best {}", out.best_val_loss);
        assert!(last.train_loss < 1e-3);
    }

    #[test]
    fn loss_trends_down_early() {
        let train_set: Vec<_> = (0..6).map(|s| sample(4, 4, s, 6)).collect();
        let val: Vec<_> = (6..8).map(|s| sample(4, 4, s, 6)).collect();
        let cfg = TrainConfig {
            hidden: 8,
            layers: 2,
            max_epochs: 40,
            patience: 40,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&train_set, &val, &[true; 3], &cfg).unwrap();
        let h = &out.history;
        let head: f64 = h[..5].iter().map(|e| e.train_loss).sum::<f64>() / 5.0;
        let tail: f64 = h[h.len() - 5..].iter().map(|e| e.train_loss).sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let s = sample(3, 3, 0, 2);
        let cfg = TrainConfig {
            hidden: 4,
            layers: 1,
            mode_weights: vec![1.0],
            learning_rate: 1e300,
            weight_decay: 1e300,
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        let r = train(std::slice::from_ref(&s), std::slice::from_ref(&s), &[true; 3], &cfg);
        assert_eq!(r.err(), Some(TrainError::Diverged(1)));
    }

    #[test]
    fn training_is_deterministic() {
        let train_set: Vec<_> = (0..4).map(|s| sample(3, 3, s, 2)).collect();
        let cfg = TrainConfig {
            hidden: 4,
            layers: 2,
            mode_weights: vec![1.0],
            max_epochs: 5,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(&train_set, &train_set[..1], &[true; 3], &cfg).unwrap();
        let b = train(&train_set, &train_set[..1], &[true; 3], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn empty_splits_rejected() {
        let s = sample(3, 3, 0, 6);
        let cfg = TrainConfig::default();
        assert_eq!(
            train(&[], std::slice::from_ref(&s), &[true; 3], &cfg).err(),
            Some(TrainError::EmptySplit("training"))
        );
    }
}
