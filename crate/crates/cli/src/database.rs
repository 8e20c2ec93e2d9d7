//! On-disk database of solved and compressed geometries.
//!
//! Layout under the database root:
//! `manifest.json` and one directory per seed holding `mesh.msh`,
//! `field.stf`, `basis.rob` (separated field: modes, temporal factors, dt),
//! `geometry.json` and `record.json` (used to resume).

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use romgnn_core::fem::solve_geometry;
use romgnn_core::field::SpaceTimeField;
use romgnn_core::mesh::{generate_geometry, read_msh, triangulate, write_msh, GeometryParams, Mesh};
use romgnn_core::pgd::{pgd_compress, SeparatedField};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MESH_FILE: &str = "mesh.msh";
pub const FIELD_FILE: &str = "field.stf";
pub const BASIS_FILE: &str = "basis.rob";
const GEOMETRY_FILE: &str = "geometry.json";
const RECORD_FILE: &str = "record.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the database root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    pub params: GeometryParams,
    pub n_nodes: usize,
    /// Smallest rank meeting the compression tolerance, if any did.
    pub rank_at_eps: Option<usize>,
    /// Stored rank (at least the number of trained modes).
    pub rank: usize,
    /// Relative squared compression error of the stored basis.
    pub pgd_error: f64,
    pub max_displacement: f64,
    pub mesh: FileRef,
    pub field: FileRef,
    pub basis: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    #[serde(flatten)]
    pub record: Record,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub requested: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Hash of the settings that produced the records.
    pub config_hash: String,
    pub nt: usize,
    pub dt: f64,
    pub entries: Vec<Entry>,
    pub failures: Vec<Failure>,
    pub counts: Counts,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Number of records per value of `rank_at_eps` (`None` last).
    pub fn rank_histogram(&self) -> Vec<(Option<usize>, usize)> {
        let mut hist: Vec<(Option<usize>, usize)> = Vec::new();
        for e in &self.entries {
            match hist.iter_mut().find(|(r, _)| *r == e.record.rank_at_eps) {
                Some((_, c)) => *c += 1,
                None => hist.push((e.record.rank_at_eps, 1)),
            }
        }
        hist.sort_by_key(|(r, _)| r.unwrap_or(usize::MAX));
        hist
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn record_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(seed.to_string())
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    config_hash: String,
    record: Record,
}

/// The record of a previous run if its settings and files are unchanged.
fn resume(root: &Path, seed: u64, config_hash: &str) -> Option<Record> {
    let text = fs::read_to_string(record_dir(root, seed).join(RECORD_FILE)).ok()?;
    let saved: RecordFile = serde_json::from_str(&text).ok()?;
    if saved.config_hash != config_hash {
        return None;
    }
    let r = &saved.record;
    for f in [&r.mesh, &r.field, &r.basis] {
        if sha256_file(&root.join(&f.path)).ok()? != f.sha256 {
            return None;
        }
    }
    Some(saved.record)
}

fn file_ref(root: &Path, seed: u64, name: &str) -> Result<FileRef, CliError> {
    let path = format!("{seed}/{name}");
    Ok(FileRef {
        sha256: sha256_file(&root.join(&path))?,
        path,
    })
}

/// Generates, solves, compresses and stores one geometry.
pub fn build_record(cfg: &RunConfig, root: &Path, seed: u64) -> Result<Record, CliError> {
    let params = generate_geometry(seed, cfg.geometry.holes, &cfg.geometry.ranges)?;
    let mesh = triangulate(&params)?;
    let (_, _, u) = solve_geometry(&mesh, &cfg.material, &cfg.pulse, cfg.solver.nt)?;
    let pgd = pgd_compress(u.values(), u.dt(), &cfg.pgd.options(cfg.train.n_modes()))?;

    let dir = record_dir(root, seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let geometry = serde_json::to_string_pretty(&params).expect("geometry serializes");
    fs::write(dir.join(GEOMETRY_FILE), geometry).map_err(|e| CliError::io(&dir, e))?;
    write_msh(&mesh, &dir.join(MESH_FILE))?;
    u.write(&dir.join(FIELD_FILE))?;
    pgd.field.write(&dir.join(BASIS_FILE))?;

    let record = Record {
        seed,
        n_nodes: mesh.n_nodes(),
        rank_at_eps: pgd.rank_at_eps,
        rank: pgd.rank(),
        pgd_error: pgd.errors.last().copied().unwrap_or(1.0),
        max_displacement: u.max_displacement(),
        mesh: file_ref(root, seed, MESH_FILE)?,
        field: file_ref(root, seed, FIELD_FILE)?,
        basis: file_ref(root, seed, BASIS_FILE)?,
        params,
    };
    let saved = RecordFile {
        config_hash: cfg.database_hash(),
        record: record.clone(),
    };
    let json = serde_json::to_string_pretty(&saved).expect("record serializes");
    fs::write(dir.join(RECORD_FILE), json).map_err(|e| CliError::io(&dir, e))?;
    Ok(record)
}

/// Contiguous train/val/test split sizes of `n` records. With three or more
/// records every split keeps at least one.
pub fn split_sizes(n: usize, train_fraction: f64, val_fraction: f64) -> (usize, usize, usize) {
    let round = |f: f64| (n as f64 * f).round() as usize;
    if n < 3 {
        let train = round(train_fraction).min(n);
        return (train, n - train, 0);
    }
    let train = round(train_fraction).clamp(1, n - 2);
    let val = round(val_fraction).clamp(1, n - train - 1);
    (train, val, n - train - val)
}

/// Builds (or resumes) `cfg.database.count` records with seeds
/// `cfg.seed, cfg.seed + 1, …` and writes the manifest. Records are
/// independent and built in parallel; the manifest lists them in seed order.
pub fn build_database(cfg: &RunConfig, root: &Path) -> Result<DatasetManifest, CliError> {
    cfg.validate()?;
    fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let hash = cfg.database_hash();
    let count = cfg.database.count;
    let results: Vec<(u64, Result<Record, CliError>)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed + i;
            if let Some(r) = resume(root, seed, &hash) {
                return (seed, Ok(r));
            }
            (seed, build_record(cfg, root, seed))
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(e) => {
                warn!("seed {seed}: {e}");
                failures.push(Failure {
                    seed,
                    reason: e.to_string(),
                });
            }
        }
    }
    let (n_train, n_val, n_test) = split_sizes(records.len(), cfg.database.train_fraction, cfg.database.val_fraction);
    let entries: Vec<Entry> = records
        .into_iter()
        .enumerate()
        .map(|(i, record)| Entry {
            record,
            split: match i {
                i if i < n_train => Split::Train,
                i if i < n_train + n_val => Split::Val,
                _ => Split::Test,
            },
        })
        .collect();
    let manifest = DatasetManifest {
        config_hash: hash,
        nt: cfg.solver.nt,
        dt: cfg.pulse.dt(cfg.solver.nt),
        counts: Counts {
            requested: count,
            train: n_train,
            val: n_val,
            test: n_test,
            failed: failures.len(),
        },
        entries,
        failures,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| CliError::io(&path, e))?;
    info!(
        "database: {} records ({}/{}/{}), {} failed",
        manifest.entries.len(),
        n_train,
        n_val,
        n_test,
        manifest.failures.len()
    );

    let failed = manifest.failures.len() as f64 / count as f64;
    if failed > cfg.database.max_failure_fraction {
        return Err(CliError::PartialFailure(format!(
            "{} of {count} records failed (limit {:.0}%)",
            manifest.failures.len(),
            100.0 * cfg.database.max_failure_fraction
        )));
    }
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(CliError::PartialFailure(format!(
            "splits {n_train}/{n_val}/{n_test} leave an empty set"
        )));
    }
    Ok(manifest)
}

/// A database opened for reading.
#[derive(Debug, Clone)]
pub struct Database {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Database {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Ok(Database {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Opens a database and checks it was built with `cfg`'s settings.
    pub fn open_for(root: &Path, cfg: &RunConfig) -> Result<Self, CliError> {
        let db = Database::open(root)?;
        if db.manifest.config_hash != cfg.database_hash() {
            return Err(CliError::Validation(format!(
                "{} was built with different geometry, material, load, solver or compression settings",
                root.display()
            )));
        }
        Ok(db)
    }

    pub fn mesh(&self, e: &Entry) -> Result<Mesh, CliError> {
        Ok(read_msh(&self.root.join(&e.record.mesh.path))?)
    }

    pub fn field(&self, e: &Entry) -> Result<SpaceTimeField, CliError> {
        Ok(SpaceTimeField::read(&self.root.join(&e.record.field.path))?)
    }

    pub fn basis(&self, e: &Entry) -> Result<SeparatedField, CliError> {
        Ok(SeparatedField::read(&self.root.join(&e.record.basis.path))?)
    }

    /// Checks disjoint splits, file hashes and that every file parses with
    /// shapes consistent with its mesh.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.manifest;
        let mut seeds: Vec<u64> = m.entries.iter().map(|e| e.record.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Validation("duplicate seed in manifest".into()));
        }
        let counts = [Split::Train, Split::Val, Split::Test].map(|s| m.split(s).count());
        if counts != [m.counts.train, m.counts.val, m.counts.test] {
            return Err(CliError::Validation("split counts disagree with entries".into()));
        }
        m.entries.par_iter().try_for_each(|e| {
            let r = &e.record;
            for f in [&r.mesh, &r.field, &r.basis] {
                if sha256_file(&self.root.join(&f.path))? != f.sha256 {
                    return Err(CliError::Validation(format!("{} changed since it was recorded", f.path)));
                }
            }
            let mesh = self.mesh(e)?;
            let field = self.field(e)?;
            let basis = self.basis(e)?;
            let ok = mesh.n_nodes() == r.n_nodes
                && field.n_dofs() == mesh.n_dofs()
                && field.nt() == m.nt
                && basis.basis.n_dofs() == mesh.n_dofs()
                && basis.basis.rank() == r.rank;
            if ok {
                Ok(())
            } else {
                Err(CliError::Validation(format!("record {} has inconsistent shapes", r.seed)))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_follow_fractions() {
        assert_eq!(split_sizes(120, 0.8, 0.1), (96, 12, 12));
        assert_eq!(split_sizes(500, 0.8, 0.1), (400, 50, 50));
        assert_eq!(split_sizes(3, 0.8, 0.1), (1, 1, 1));
        assert_eq!(split_sizes(10, 0.8, 0.1), (8, 1, 1));
        assert_eq!(split_sizes(0, 0.8, 0.1), (0, 0, 0));
    }
}
