//! Offline phase after the database: model training, the autoregressive
//! baseline and the hyperparameter search.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::DMatrix;
use rayon::prelude::*;
use romgnn_core::fem::{assemble, force_history, AssembledSystem};
use romgnn_core::mesh::Mesh;
use romgnn_nn::ar::{train_ar, Trajectory};
use romgnn_nn::checkpoint::{Checkpoint, ModelKind, TrainingMeta};
use romgnn_nn::data::{GraphSample, NormStats, PreparedSample};
use romgnn_nn::doe::{run_doe, DoeReport};
use romgnn_nn::train::{train, EpochLog, TrainConfig, TrainOutcome};

use crate::config::RunConfig;
use crate::database::{Database, Entry, Split};
use crate::error::CliError;

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_loss";

/// Stiffness, mass and nodal force history of `mesh` under the configured
/// material and pulse.
pub fn loaded_system(mesh: &Mesh, cfg: &RunConfig) -> Result<(AssembledSystem, DMatrix<f64>), CliError> {
    let sys = assemble(mesh, &cfg.material)?;
    let f = force_history(&sys, &cfg.pulse, cfg.solver.nt)?;
    Ok((sys, f))
}

fn graph_sample(db: &Database, e: &Entry, cfg: &RunConfig) -> Result<GraphSample, CliError> {
    let mesh = db.mesh(e)?;
    let (_, f) = loaded_system(&mesh, cfg)?;
    let basis = db.basis(e)?.basis;
    Ok(GraphSample::new(&mesh, &f, &basis, cfg.train.n_modes())?)
}

pub fn load_samples(db: &Database, cfg: &RunConfig, split: Split) -> Result<Vec<GraphSample>, CliError> {
    let entries: Vec<&Entry> = db.manifest.split(split).collect();
    entries.par_iter().map(|e| graph_sample(db, e, cfg)).collect()
}

/// Normalized training and validation sets with statistics fitted on the
/// training split only.
pub struct Prepared {
    pub stats: NormStats,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
}

pub fn prepare(db: &Database, cfg: &RunConfig) -> Result<Prepared, CliError> {
    let train = load_samples(db, cfg, Split::Train)?;
    let val = load_samples(db, cfg, Split::Val)?;
    let xs: Vec<_> = train.iter().map(|s| &s.features).collect();
    let ts: Vec<_> = train.iter().map(|s| &s.target).collect();
    let stats = NormStats::fit(&xs, &ts)?;
    Ok(Prepared {
        train: train.iter().map(|s| PreparedSample::new(s, &stats)).collect(),
        val: val.iter().map(|s| PreparedSample::new(s, &stats)).collect(),
        stats,
    })
}

fn meta(out: &TrainOutcome, train_cfg: &TrainConfig, cfg: &RunConfig) -> TrainingMeta {
    TrainingMeta {
        epochs_run: out.epochs_run,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        seed: train_cfg.seed,
        config_hash: cfg.hash(),
    }
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Trains the basis model with `train_cfg` (the run's `train` section unless
/// a search result replaces it).
pub fn train_basis(db: &Database, cfg: &RunConfig, train_cfg: &TrainConfig) -> Result<Trained, CliError> {
    if train_cfg.n_modes() != cfg.train.n_modes() {
        return Err(CliError::Validation(format!(
            "the database stores targets for {} modes, the model asks for {}",
            cfg.train.n_modes(),
            train_cfg.n_modes()
        )));
    }
    let p = prepare(db, cfg)?;
    info!("training on {} graphs, validating on {}", p.train.len(), p.val.len());
    let out = train(&p.train, &p.val, &p.stats.input_active, train_cfg)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            kind: ModelKind::Basis,
            config: train_cfg.clone(),
            stats: p.stats,
            model: out.model.clone(),
            meta: meta(&out, train_cfg, cfg),
        },
        history: out.history,
    })
}

fn trajectories(db: &Database, cfg: &RunConfig, split: Split) -> Result<Vec<Trajectory>, CliError> {
    let entries: Vec<&Entry> = db.manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let mesh = db.mesh(e)?;
            let (_, f) = loaded_system(&mesh, cfg)?;
            Ok(Trajectory::new(&mesh, &f, &db.field(e)?)?)
        })
        .collect()
}

/// Trains the one-step autoregressive baseline on the same splits.
pub fn train_ar_model(db: &Database, cfg: &RunConfig) -> Result<Trained, CliError> {
    let train_set = trajectories(db, cfg, Split::Train)?;
    let val_set = trajectories(db, cfg, Split::Val)?;
    let ar_cfg = cfg.ar_train();
    let out = train_ar(&train_set, &val_set, &ar_cfg)?;
    Ok(Trained {
        checkpoint: Checkpoint {
            kind: ModelKind::Autoregressive,
            config: ar_cfg.clone(),
            stats: out.stats,
            model: out.outcome.model.clone(),
            meta: meta(&out.outcome, &ar_cfg, cfg),
        },
        history: out.outcome.history,
    })
}

/// Latin hypercube search with `cfg.doe.epochs` epochs per trial.
pub fn search(db: &Database, cfg: &RunConfig) -> Result<DoeReport, CliError> {
    let p = prepare(db, cfg)?;
    let base = TrainConfig {
        max_epochs: cfg.doe.epochs,
        ..cfg.train.clone()
    };
    Ok(run_doe(&cfg.doe.space, cfg.doe.trials, &base, &p.train, &p.val, &p.stats.input_active)?)
}

pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = format!("{HISTORY_CSV_HEADER}\n");
    for h in history {
        s.push_str(&format!("{},{:e},{:e}\n", h.epoch, h.train_loss, h.val_loss));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
