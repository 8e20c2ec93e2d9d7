//! Versioned binary checkpoints with a JSON sidecar.
//!
//! Layout (little endian): magic `GNNK`, `u32` version, `u8` kind, the shape as
//! four `u64`, the training configuration, normalization statistics, the flat
//! parameter vector and the run metadata.
//! Every float is stored as its raw bits, so a round trip is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use romgnn_core::mesh::{build_adjacency, Mesh, NodeTag};
use romgnn_core::pgd::ReducedBasis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{node_features, output_to_basis, DataError, NormStats};
use crate::graph::{EdgeIndex, GraphBatch, GraphError};
use crate::model::{GnnModel, GnnShape};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GNNK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {0:?} model")]
    WrongKind(ModelKind),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Predicts the reduced basis of a mesh.
    Basis,
    /// One-step displacement predictor.
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seed: u64,
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub stats: NormStats,
    pub model: GnnModel,
    pub meta: TrainingMeta,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    kind: ModelKind,
    shape: GnnShape,
    parameter_count: usize,
    config: &'a TrainConfig,
    stats: &'a NormStats,
    meta: &'a TrainingMeta,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn bools(&mut self, v: &[bool]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.u8(*x as u8));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("length overflow".into()))
    }
    fn len(&mut self, width: usize) -> Result<usize, CheckpointError> {
        let n = self.usize()?;
        if n.saturating_mul(width) > self.bytes.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bools(&mut self) -> Result<Vec<bool>, CheckpointError> {
        let n = self.len(1)?;
        (0..n)
            .map(|_| match self.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(CheckpointError::Corrupt(format!("flag byte {b}"))),
            })
            .collect()
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

/// Path of the JSON sidecar next to a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

impl Checkpoint {
    pub fn shape(&self) -> GnnShape {
        self.model.shape()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(match self.kind {
            ModelKind::Basis => 0,
            ModelKind::Autoregressive => 1,
        });
        let s = self.model.shape();
        for v in [s.k, s.hidden, s.layers, s.out] {
            w.usize(v);
        }
        let c = &self.config;
        w.usize(c.hidden);
        w.usize(c.layers);
        w.f64s(&c.mode_weights);
        w.f64(c.learning_rate);
        w.f64(c.weight_decay);
        w.usize(c.batch_size);
        w.usize(c.max_epochs);
        w.usize(c.patience);
        w.f64(c.noise_fraction);
        w.u64(c.seed);
        let st = &self.stats;
        w.f64s(&st.input_mean);
        w.f64s(&st.input_std);
        w.bools(&st.input_active);
        w.f64s(&st.output_min);
        w.f64s(&st.output_max);
        w.bools(&st.output_active);
        w.f64s(&self.model.params().flatten());
        let m = &self.meta;
        w.usize(m.epochs_run);
        w.usize(m.best_epoch);
        w.f64(m.best_val_loss);
        w.u64(m.seed);
        w.str(&m.config_hash);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let kind = match r.u8()? {
            0 => ModelKind::Basis,
            1 => ModelKind::Autoregressive,
            b => return Err(CheckpointError::Corrupt(format!("model kind {b}"))),
        };
        let shape = GnnShape {
            k: r.usize()?,
            hidden: r.usize()?,
            layers: r.usize()?,
            out: r.usize()?,
        };
        // guards the allocation in GnnModel::new against garbage shapes
        if shape.hidden.saturating_mul(shape.hidden).saturating_mul(shape.layers) > bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{shape:?} exceeds the file size")));
        }
        let config = TrainConfig {
            hidden: r.usize()?,
            layers: r.usize()?,
            mode_weights: r.f64s()?,
            learning_rate: r.f64()?,
            weight_decay: r.f64()?,
            batch_size: r.usize()?,
            max_epochs: r.usize()?,
            patience: r.usize()?,
            noise_fraction: r.f64()?,
            seed: r.u64()?,
        };
        let stats = NormStats {
            input_mean: r.f64s()?,
            input_std: r.f64s()?,
            input_active: r.bools()?,
            output_min: r.f64s()?,
            output_max: r.f64s()?,
            output_active: r.bools()?,
        };
        let k_ok = [stats.input_mean.len(), stats.input_std.len(), stats.input_active.len()] == [shape.k; 3];
        let g_ok = [stats.output_min.len(), stats.output_max.len(), stats.output_active.len()] == [shape.out; 3];
        if !(k_ok && g_ok) {
            return Err(CheckpointError::Corrupt("normalization statistics do not match the shape".into()));
        }
        let flat = r.f64s()?;
        let mut model = GnnModel::new(shape, 0);
        model.params_mut().load_flat(&flat).map_err(CheckpointError::Corrupt)?;
        let meta = TrainingMeta {
            epochs_run: r.usize()?,
            best_epoch: r.usize()?,
            best_val_loss: r.f64()?,
            seed: r.u64()?,
            config_hash: r.str()?,
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            kind,
            config,
            stats,
            model,
            meta,
        })
    }

    pub fn sidecar_json(&self) -> String {
        let side = Sidecar {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind,
            shape: self.model.shape(),
            parameter_count: self.model.param_count(),
            config: &self.config,
            stats: &self.stats,
            meta: &self.meta,
        };
        serde_json::to_string_pretty(&side).expect("plain data serializes")
    }

    /// Writes the binary file and its `.json` sidecar.
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        fs::write(sidecar_path(path), self.sidecar_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// Predicted reduced basis of `mesh` under the nodal force history
    /// `forces` (`n·d × Nₜ`).
    pub fn infer_rob(&self, mesh: &Mesh, forces: &DMatrix<f64>) -> Result<ReducedBasis, CheckpointError> {
        if self.kind != ModelKind::Basis {
            return Err(CheckpointError::WrongKind(self.kind));
        }
        let x = self.stats.normalize_inputs(&node_features(mesh, forces)?);
        let edges = EdgeIndex::from_adjacency(&build_adjacency(mesh))?;
        let y = self.model.predict(&GraphBatch::new(&[(&x, &edges)])?);
        let out = self.stats.denormalize_outputs(&y);
        let clamped: Vec<bool> = mesh.tags().iter().map(|t| *t == NodeTag::Dirichlet).collect();
        Ok(output_to_basis(&out, &clamped))
    }
}
