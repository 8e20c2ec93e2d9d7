//! Run configuration: one TOML file that fixes every stage of a run.

use std::path::Path;

use romgnn_core::fem::{LoadPulse, Material};
use romgnn_core::mesh::SamplingRanges;
use romgnn_core::pgd::PgdOptions;
use romgnn_core::rom::Filter;
use romgnn_nn::doe::HyperSpace;
use romgnn_nn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub ranges: SamplingRanges,
    /// Interior holes of the training family.
    pub holes: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            ranges: SamplingRanges::default(),
            holes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Time samples per trajectory.
    pub nt: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { nt: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    /// Target relative squared compression error.
    pub eps: f64,
    pub max_rank: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        let d = PgdOptions::default();
        PgdConfig {
            eps: d.eps,
            max_rank: d.max_rank,
            fixed_point_tol: d.fixed_point_tol,
            fixed_point_max_iter: d.fixed_point_max_iter,
        }
    }
}

impl PgdConfig {
    /// Options that enrich to at least `min_rank` modes.
    pub fn options(&self, min_rank: usize) -> PgdOptions {
        PgdOptions {
            eps: self.eps,
            max_rank: self.max_rank.max(min_rank),
            min_rank,
            fixed_point_tol: self.fixed_point_tol,
            fixed_point_max_iter: self.fixed_point_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatabaseConfig {
    pub count: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Largest tolerated fraction of failed records.
    pub max_failure_fraction: f64,
}

impl Default for DatabaseConfig {
    fn default() -> Self {
        DatabaseConfig {
            count: 120,
            train_fraction: 0.8,
            val_fraction: 0.1,
            max_failure_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoeConfig {
    pub trials: usize,
    /// Short training budget per trial.
    pub epochs: usize,
    pub space: HyperSpace,
}

impl Default for DoeConfig {
    fn default() -> Self {
        DoeConfig {
            trials: 100,
            epochs: 700,
            space: HyperSpace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub filter: Filter,
    /// Topologies of the generalization study.
    pub generalization_holes: Vec<usize>,
    pub generalization_count: usize,
    /// Added to the run seed for generalization geometries so they never
    /// coincide with database seeds.
    pub generalization_seed_offset: u64,
    pub noise_levels: Vec<f64>,
    pub noise_seeds: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            filter: Filter::InverseStiffness,
            generalization_holes: vec![2, 3],
            generalization_count: 6,
            generalization_seed_offset: 1_000_000,
            noise_levels: vec![0.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            noise_seeds: 10,
        }
    }
}

/// Training of the autoregressive baseline: the basis model's settings
/// without mode weights (its loss has a single term).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub hidden: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub noise_fraction: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ArConfig {
            hidden: t.hidden,
            layers: t.layers,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            noise_fraction: t.noise_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// First geometry seed; also seeds the baseline and the noise study.
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub material: Material,
    pub pulse: LoadPulse,
    pub solver: SolverConfig,
    pub pgd: PgdConfig,
    pub database: DatabaseConfig,
    pub train: TrainConfig,
    pub ar: ArConfig,
    pub doe: DoeConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    /// Desk scale: 120 geometries of about 300 nodes, 200 time samples.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            geometry: GeometryConfig::default(),
            material: Material::default(),
            pulse: LoadPulse::default(),
            solver: SolverConfig::default(),
            pgd: PgdConfig::default(),
            database: DatabaseConfig::default(),
            train: TrainConfig::default(),
            ar: ArConfig::default(),
            doe: DoeConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl RunConfig {
    /// 500 geometries and 1000 time samples.
    pub fn paper_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.database.count = 500;
        cfg.solver.nt = 1000;
        cfg
    }

    /// Training settings of the autoregressive baseline.
    pub fn ar_train(&self) -> TrainConfig {
        let a = &self.ar;
        TrainConfig {
            hidden: a.hidden,
            layers: a.layers,
            mode_weights: vec![1.0],
            learning_rate: a.learning_rate,
            weight_decay: a.weight_decay,
            batch_size: a.batch_size,
            max_epochs: a.max_epochs,
            patience: a.patience,
            noise_fraction: a.noise_fraction,
            seed: self.seed,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Sets the run and training seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Validation(m));
        self.material.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.pulse.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Validation(format!("train: {e}")))?;
        self.ar_train().validate().map_err(|e| CliError::Validation(format!("ar: {e}")))?;
        self.doe.space.validate().map_err(|e| CliError::Validation(format!("doe: {e}")))?;
        if self.solver.nt < 2 {
            return invalid("solver.nt must be at least 2".into());
        }
        if !(self.pgd.eps > 0.0 && self.pgd.eps < 1.0) {
            return invalid("pgd.eps must lie in (0, 1)".into());
        }
        if self.geometry.holes == 0 {
            return invalid("geometry.holes must be at least 1".into());
        }
        let d = &self.database;
        let fractions_ok = d.train_fraction > 0.0
            && d.val_fraction > 0.0
            && d.train_fraction + d.val_fraction < 1.0
            && (0.0..=1.0).contains(&d.max_failure_fraction);
        if !fractions_ok {
            return invalid("database fractions must leave non-empty train, validation and test splits".into());
        }
        if d.count < 3 {
            return invalid("database.count must be at least 3".into());
        }
        if self.evaluation.noise_levels.iter().any(|l| !(*l >= 0.0)) {
            return invalid("noise levels must be non-negative".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash of the settings that determine database records.
    pub fn database_hash(&self) -> String {
        let key = (
            &self.geometry,
            &self.material,
            &self.pulse,
            &self.solver,
            &self.pgd,
            self.train.n_modes(),
        );
        let json = serde_json::to_string(&key).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[database]\ncount = 12\n[train]\nhidden = 16\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.database.count, 12);
        assert_eq!(cfg.train.hidden, 16);
        assert_eq!(cfg.train.layers, TrainConfig::default().layers);
        assert_eq!(cfg.solver.nt, 200);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(CliError::Validation(_))));
        assert!(matches!(
            RunConfig::from_toml("[database]\ntrain_fraction = 0.95\nval_fraction = 0.1"),
            Err(CliError::Validation(_))
        ));
        assert!(matches!(RunConfig::from_toml("[ar]\nmode_weights = [1.0]"), Err(CliError::Validation(_))));
        assert!(matches!(RunConfig::from_toml("[ar]\nlearning_rate = -1.0"), Err(CliError::Validation(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default().with_seed(1);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.database_hash(), b.database_hash());
        let mut c = RunConfig::default();
        c.solver.nt = 100;
        assert_ne!(a.database_hash(), c.database_hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn paper_scale_preset() {
        let p = RunConfig::paper_scale();
        assert_eq!((p.database.count, p.solver.nt, p.train.max_epochs), (500, 1000, 5000));
        assert_eq!(p.ar_train().mode_weights, vec![1.0]);
        p.validate().unwrap();
    }
}
