//! Autoregressive baseline: the same network predicts the displacement
//! increment of one time step from the current state and load.
//!
//! Per-step node features are the five static features followed by the
//! current displacement and the current nodal force (two components each).
//! The output is `u(t+1) − u(t)` per node.

use std::borrow::Cow;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use romgnn_core::field::SpaceTimeField;
use romgnn_core::mesh::{build_adjacency, Mesh, NodeTag, DIM};

use crate::checkpoint::{Checkpoint, CheckpointError, ModelKind};
use crate::data::{node_features, DataError, NormStats, PreparedSample, N_FEATURES};
use crate::graph::{EdgeIndex, GraphBatch};
use crate::tape::Mat;
use crate::train::{fit, Example, TrainConfig, TrainError, TrainOutcome};

/// Static features, displacement, force.
pub const AR_FEATURES: usize = N_FEATURES + 2 * DIM;

/// Validation pairs taken per validation trajectory.
const VAL_STEPS: usize = 4;

/// Time steps per trajectory pooled into the normalization statistics.
const STAT_STEPS: usize = 16;

/// A solved trajectory on one mesh.
#[derive(Debug, Clone)]
pub struct Trajectory {
    features: Mat,
    edges: EdgeIndex,
    clamped: Vec<bool>,
    u: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(mesh: &Mesh, forces: &DMatrix<f64>, field: &SpaceTimeField) -> Result<Self, DataError> {
        let nd = mesh.n_dofs();
        if field.n_dofs() != nd || forces.nrows() != nd || forces.ncols() != field.nt() {
            return Err(DataError::ShapeMismatch(format!(
                "{nd} dofs against a {}x{} field and {}x{} forces",
                field.n_dofs(),
                field.nt(),
                forces.nrows(),
                forces.ncols()
            )));
        }
        if field.nt() < 2 {
            return Err(DataError::ShapeMismatch("a trajectory needs two time steps".into()));
        }
        Ok(Trajectory {
            features: node_features(mesh, forces)?,
            edges: EdgeIndex::from_adjacency(&build_adjacency(mesh))?,
            clamped: mesh.tags().iter().map(|t| *t == NodeTag::Dirichlet).collect(),
            u: field.values().clone(),
            f: forces.clone(),
        })
    }

    pub fn nt(&self) -> usize {
        self.u.ncols()
    }

    fn n_nodes(&self) -> usize {
        self.features.rows
    }

    /// Raw features at step `t` with displacement `u`.
    fn step_input(&self, u: &[f64], t: usize) -> Mat {
        step_input(&self.features, u, &self.f, t)
    }

    fn increment(&self, u_from: &[f64], t: usize) -> Mat {
        Mat::from_fn(self.n_nodes(), DIM, |i, c| {
            let d = DIM * i + c;
            self.u[(d, t + 1)] - u_from[d]
        })
    }

    fn column(&self, t: usize) -> Vec<f64> {
        self.u.column(t).iter().copied().collect()
    }
}

fn step_input(features: &Mat, u: &[f64], f: &DMatrix<f64>, t: usize) -> Mat {
    Mat::from_fn(features.rows, AR_FEATURES, |i, c| match c {
        c if c < N_FEATURES => features.get(i, c),
        c if c < N_FEATURES + DIM => u[DIM * i + c - N_FEATURES],
        c => f[(DIM * i + c - N_FEATURES - DIM, t)],
    })
}

/// Evenly spaced steps `0 ≤ t < nt − 1`.
fn spread(nt: usize, count: usize) -> Vec<usize> {
    let last = nt - 2;
    let count = count.clamp(1, last + 1);
    (0..count).map(|j| j * last / (count - 1).max(1)).collect()
}

pub struct ArOutcome {
    pub outcome: TrainOutcome,
    pub stats: NormStats,
}

/// Teacher-forced training on `(trajectory, t)` pairs. Every epoch draws one
/// random step per training trajectory; the input displacement carries the
/// configured noise and the target increment is measured from the noisy
/// state, so the model learns to pull perturbed states back.
pub fn train_ar(train_set: &[Trajectory], val_set: &[Trajectory], cfg: &TrainConfig) -> Result<ArOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if cfg.n_modes() != 1 {
        return Err(TrainError::Invalid("the autoregressive model takes a single loss weight".into()));
    }
    let stats = {
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        for tr in train_set {
            for t in spread(tr.nt(), STAT_STEPS) {
                let u = tr.column(t);
                xs.push(tr.step_input(&u, t));
                ts.push(tr.increment(&u, t));
            }
        }
        NormStats::fit(&xs.iter().collect::<Vec<_>>(), &ts.iter().collect::<Vec<_>>())
            .map_err(|e| TrainError::Invalid(e.to_string()))?
    };
    let val: Vec<PreparedSample> = val_set
        .iter()
        .flat_map(|tr| {
            spread(tr.nt(), VAL_STEPS).into_iter().map(|t| {
                let u = tr.column(t);
                PreparedSample {
                    x: stats.normalize_inputs(&tr.step_input(&u, t)),
                    edges: tr.edges.clone(),
                    target: stats.normalize_targets(&tr.increment(&u, t)),
                }
            })
        })
        .collect();
    let shape = cfg.shape(AR_FEATURES);
    let outcome = fit(shape, cfg, &val, |rng| {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(rng);
        order
            .iter()
            .map(|&g| {
                let tr = &train_set[g];
                let t = rng.random_range(0..tr.nt() - 1);
                let mut u = tr.column(t);
                perturb(&mut u, &tr.clamped, cfg.noise_fraction, rng);
                Example {
                    x: stats.normalize_inputs(&tr.step_input(&u, t)),
                    edges: &tr.edges,
                    target: Cow::Owned(stats.normalize_targets(&tr.increment(&u, t))),
                }
            })
            .collect()
    })?;
    Ok(ArOutcome { outcome, stats })
}

/// Gaussian noise with `σ = fraction · mean|u|` on the free dofs.
fn perturb(u: &mut [f64], clamped: &[bool], fraction: f64, rng: &mut ChaCha8Rng) {
    let mean_abs = u.iter().map(|v| v.abs()).sum::<f64>() / u.len().max(1) as f64;
    let sigma = fraction * mean_abs;
    if !(sigma > 0.0) {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for (d, v) in u.iter_mut().enumerate() {
        if !clamped[d / DIM] {
            *v += normal.sample(rng);
        }
    }
}

/// Iterates the one-step model from rest for `nt − 1` steps under the nodal
/// force history `forces` (`n·d × Nₜ`).
pub fn rollout(ck: &Checkpoint, mesh: &Mesh, forces: &DMatrix<f64>, dt: f64) -> Result<SpaceTimeField, CheckpointError> {
    if ck.kind != ModelKind::Autoregressive {
        return Err(CheckpointError::WrongKind(ck.kind));
    }
    let features = node_features(mesh, forces)?;
    let edges = EdgeIndex::from_adjacency(&build_adjacency(mesh))?;
    let clamped: Vec<bool> = mesh.tags().iter().map(|t| *t == NodeTag::Dirichlet).collect();
    let (nd, nt) = (mesh.n_dofs(), forces.ncols());
    let mut values = DMatrix::zeros(nd, nt);
    let mut u = vec![0.0; nd];
    for t in 0..nt.saturating_sub(1) {
        let x = ck.stats.normalize_inputs(&step_input(&features, &u, forces, t));
        let y = ck.model.predict(&GraphBatch::new(&[(&x, &edges)])?);
        let inc = ck.stats.denormalize_outputs(&y);
        for (i, &c) in clamped.iter().enumerate() {
            for k in 0..DIM {
                let d = DIM * i + k;
                u[d] = if c { 0.0 } else { u[d] + inc.get(i, k) };
            }
        }
        values.column_mut(t + 1).copy_from_slice(&u);
    }
    Ok(SpaceTimeField::new(mesh.n_nodes(), DIM, dt, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_covers_both_ends() {
        assert_eq!(spread(200, 4), vec![0, 66, 132, 198]);
        assert_eq!(spread(3, 16), vec![0, 1]);
        assert_eq!(spread(2, 4), vec![0]);
    }
}
