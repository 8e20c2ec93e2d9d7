//! Online phase: predicted basis, reduced solve and the evaluation studies.
//!
//! Prediction needs only a model, a mesh and the run's material, pulse and
//! time grid. Reference fields and bases enter solely through the scoring
//! functions.

use nalgebra::DMatrix;
use rayon::prelude::*;
use romgnn_core::fem::{solve_geometry, AssembledSystem};
use romgnn_core::field::SpaceTimeField;
use romgnn_core::mesh::{generate_geometry, triangulate, Mesh, MeshError};
use romgnn_core::pgd::{pgd_compress, ReducedBasis};
use romgnn_core::rom::{field_error, noise_study, normalized_rmse, per_timestep_error, rom_solve, Filter, NoiseRow};
use romgnn_nn::ar::rollout;
use romgnn_nn::checkpoint::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::database::{Database, Entry, Split};
use crate::error::CliError;
use crate::offline::loaded_system;

/// Predicts a reduced basis for a mesh under a nodal force history.
pub trait BasisModel: Sync {
    fn infer(&self, mesh: &Mesh, forces: &DMatrix<f64>) -> Result<ReducedBasis, CliError>;
}

impl BasisModel for Checkpoint {
    fn infer(&self, mesh: &Mesh, forces: &DMatrix<f64>) -> Result<ReducedBasis, CliError> {
        Ok(self.infer_rob(mesh, forces)?)
    }
}

/// Produces a full trajectory step by step.
pub trait RolloutModel: Sync {
    fn rollout(&self, mesh: &Mesh, forces: &DMatrix<f64>, dt: f64) -> Result<SpaceTimeField, CliError>;
}

impl RolloutModel for Checkpoint {
    fn rollout(&self, mesh: &Mesh, forces: &DMatrix<f64>, dt: f64) -> Result<SpaceTimeField, CliError> {
        Ok(rollout(self, mesh, forces, dt)?)
    }
}

/// Everything the online phase knows about one geometry.
pub struct OnlineCase {
    pub mesh: Mesh,
    pub sys: AssembledSystem,
    pub forces: DMatrix<f64>,
    pub dt: f64,
}

impl OnlineCase {
    pub fn new(mesh: Mesh, cfg: &RunConfig) -> Result<Self, CliError> {
        let (sys, forces) = loaded_system(&mesh, cfg)?;
        Ok(OnlineCase {
            mesh,
            sys,
            forces,
            dt: cfg.pulse.dt(cfg.solver.nt),
        })
    }

    pub fn predict(&self, model: &dyn BasisModel) -> Result<ReducedBasis, CliError> {
        model.infer(&self.mesh, &self.forces)
    }

    /// Galerkin solve on `basis`.
    pub fn reconstruct(&self, basis: &ReducedBasis, filter: Filter) -> Result<SpaceTimeField, CliError> {
        Ok(rom_solve(&self.sys, basis, &self.forces, self.dt, filter)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub seed: u64,
    pub holes: usize,
    pub n_nodes: usize,
    /// Normalized RMSE of each predicted mode against the reference, in %.
    pub mode_rmse: Vec<f64>,
    /// Space-time relative L² error of the reconstruction, in %.
    pub field_error: f64,
    pub max_displacement: f64,
    /// Spatial error at every time sample, in % of the peak reference norm.
    pub per_timestep: Vec<f64>,
}

/// Runs the online pipeline on `case` and compares with the reference
/// field and basis.
pub fn score(
    model: &dyn BasisModel,
    case: &OnlineCase,
    reference: &SpaceTimeField,
    reference_basis: &ReducedBasis,
    filter: Filter,
) -> Result<Score, CliError> {
    let predicted = case.predict(model)?;
    let u = case.reconstruct(&predicted, filter)?;
    let modes = predicted.rank().min(reference_basis.rank());
    Ok(Score {
        seed: 0,
        holes: 0,
        n_nodes: case.mesh.n_nodes(),
        mode_rmse: (0..modes)
            .map(|m| normalized_rmse(&predicted.mode(m), &reference_basis.mode(m)))
            .collect(),
        field_error: field_error(reference, &u)?,
        max_displacement: reference.max_displacement(),
        per_timestep: per_timestep_error(reference, &u)?,
    })
}

fn score_entry(model: &dyn BasisModel, db: &Database, e: &Entry, cfg: &RunConfig, filter: Filter) -> Result<Score, CliError> {
    let case = OnlineCase::new(db.mesh(e)?, cfg)?;
    let reference_basis = db.basis(e)?.basis.truncated(cfg.train.n_modes());
    let mut s = score(model, &case, &db.field(e)?, &reference_basis, filter)?;
    s.seed = e.record.seed;
    s.holes = e.record.params.n_interior_holes();
    Ok(s)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NAN, f64::max)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub geometries: usize,
    pub median_mode_rmse: Vec<f64>,
    pub max_mode_rmse: Vec<f64>,
    pub mean_mode_rmse: Vec<f64>,
    pub median_field_error: f64,
    pub mean_field_error: f64,
    pub max_field_error: f64,
}

pub const EVALUATION_CSV_HEADER: &str =
    "seed,holes,n_nodes,rmse_mode1,rmse_mode2,rmse_mode3,field_error_pct,max_displacement";
pub const HISTOGRAM_CSV_HEADER: &str = "quantity,bin_lo,bin_hi,count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scores: Vec<Score>,
}

impl EvaluationReport {
    fn mode_column(&self, m: usize) -> Vec<f64> {
        self.scores.iter().filter_map(|s| s.mode_rmse.get(m).copied()).collect()
    }

    fn n_modes(&self) -> usize {
        self.scores.iter().map(|s| s.mode_rmse.len()).max().unwrap_or(0)
    }

    pub fn field_errors(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.field_error).collect()
    }

    pub fn summary(&self) -> Summary {
        let modes: Vec<Vec<f64>> = (0..self.n_modes()).map(|m| self.mode_column(m)).collect();
        let field = self.field_errors();
        Summary {
            geometries: self.scores.len(),
            median_mode_rmse: modes.iter().map(|c| median(c)).collect(),
            max_mode_rmse: modes.iter().map(|c| max(c)).collect(),
            mean_mode_rmse: modes.iter().map(|c| mean(c)).collect(),
            median_field_error: median(&field),
            mean_field_error: mean(&field),
            max_field_error: max(&field),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVALUATION_CSV_HEADER}\n");
        for r in &self.scores {
            let mode = |m: usize| r.mode_rmse.get(m).map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.seed,
                r.holes,
                r.n_nodes,
                mode(0),
                mode(1),
                mode(2),
                r.field_error,
                r.max_displacement
            ));
        }
        s
    }

    /// Histograms of each mode's RMSE, the field error and the peak
    /// reference displacement.
    pub fn histograms_csv(&self, bins: usize) -> String {
        let mut s = format!("{HISTOGRAM_CSV_HEADER}\n");
        let mut columns: Vec<(String, Vec<f64>)> =
            (0..self.n_modes()).map(|m| (format!("rmse_mode{}", m + 1), self.mode_column(m))).collect();
        columns.push(("field_error_pct".into(), self.field_errors()));
        columns.push((
            "max_displacement".into(),
            self.scores.iter().map(|r| r.max_displacement).collect(),
        ));
        for (name, values) in columns {
            for (lo, hi, count) in histogram(&values, bins) {
                s.push_str(&format!("{name},{lo},{hi},{count}\n"));
            }
        }
        s
    }
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

/// Scores every record of `split`, in manifest order.
pub fn evaluate(model: &dyn BasisModel, db: &Database, cfg: &RunConfig, split: Split) -> Result<EvaluationReport, CliError> {
    let entries: Vec<&Entry> = db.manifest.split(split).collect();
    let filter = cfg.evaluation.filter;
    let scores = entries
        .par_iter()
        .map(|e| score_entry(model, db, e, cfg, filter))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvaluationReport { scores })
}

pub const ROLLOUT_CSV_HEADER: &str = "t,err_gnnpgd_pct,err_ar_pct";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub geometries: usize,
    pub gnnpgd_max: f64,
    pub gnnpgd_mean: f64,
    pub ar_max: f64,
    pub ar_mean: f64,
    /// Baseline error after its first step.
    pub ar_first: f64,
    pub ar_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    /// Per-timestep error averaged over geometries, both methods.
    pub gnnpgd: Vec<f64>,
    pub ar: Vec<f64>,
    pub geometries: usize,
}

impl RolloutReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROLLOUT_CSV_HEADER}\n");
        for (t, (a, b)) in self.gnnpgd.iter().zip(&self.ar).enumerate() {
            s.push_str(&format!("{t},{a},{b}\n"));
        }
        s
    }

    /// Time statistics over samples `1..nt`; both methods start from rest,
    /// so the first sample carries no information.
    pub fn summary(&self) -> RolloutSummary {
        let g = &self.gnnpgd[1..];
        let a = &self.ar[1..];
        RolloutSummary {
            geometries: self.geometries,
            gnnpgd_max: max(g),
            gnnpgd_mean: mean(g),
            ar_max: max(a),
            ar_mean: mean(a),
            ar_first: a[0],
            ar_final: a[a.len() - 1],
        }
    }
}

/// Per-timestep errors of the reduced reconstruction and of the
/// autoregressive rollout on every test record.
pub fn compare_ar(
    basis_model: &dyn BasisModel,
    ar_model: &dyn RolloutModel,
    db: &Database,
    cfg: &RunConfig,
) -> Result<RolloutReport, CliError> {
    let entries: Vec<&Entry> = db.manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(CliError::Validation("the test split is empty".into()));
    }
    let curves = entries
        .par_iter()
        .map(|e| {
            let case = OnlineCase::new(db.mesh(e)?, cfg)?;
            let reference = db.field(e)?;
            let u = case.reconstruct(&case.predict(basis_model)?, cfg.evaluation.filter)?;
            let rolled = ar_model.rollout(&case.mesh, &case.forces, case.dt)?;
            Ok((per_timestep_error(&reference, &u)?, per_timestep_error(&reference, &rolled)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let nt = cfg.solver.nt;
    let k = curves.len() as f64;
    let mut gnnpgd = vec![0.0; nt];
    let mut ar = vec![0.0; nt];
    for (g, a) in &curves {
        for t in 0..nt {
            gnnpgd[t] += g[t] / k;
            ar[t] += a[t] / k;
        }
    }
    Ok(RolloutReport {
        gnnpgd,
        ar,
        geometries: curves.len(),
    })
}

/// Solves and compresses a fresh geometry: the reference of the
/// generalization study.
pub fn reference_case(cfg: &RunConfig, mesh: Mesh) -> Result<(OnlineCase, SpaceTimeField, ReducedBasis), CliError> {
    let (sys, forces, u) = solve_geometry(&mesh, &cfg.material, &cfg.pulse, cfg.solver.nt)?;
    let case = OnlineCase {
        mesh,
        sys,
        forces,
        dt: u.dt(),
    };
    let n_modes = cfg.train.n_modes();
    let pgd = pgd_compress(u.values(), u.dt(), &cfg.pgd.options(n_modes))?;
    Ok((case, u, pgd.field.basis.truncated(n_modes)))
}

/// `count` geometries with `holes` interior holes. Draws that cannot place
/// the holes are skipped and the next seed is tried.
pub fn draw_meshes(cfg: &RunConfig, holes: usize, count: usize, first_seed: u64) -> Result<Vec<(u64, Mesh)>, CliError> {
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    let limit = first_seed + 50 * count.max(1) as u64;
    while out.len() < count {
        if seed >= limit {
            return Err(CliError::Numerical(format!(
                "only {} of {count} geometries with {holes} holes could be drawn",
                out.len()
            )));
        }
        match generate_geometry(seed, holes, &cfg.geometry.ranges) {
            Ok(params) => out.push((seed, triangulate(&params)?)),
            Err(MeshError::RejectionExhausted(_)) => log::debug!("seed {seed}: no room for {holes} holes"),
            Err(e) => return Err(e.into()),
        }
        seed += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub holes: usize,
    pub summary: Summary,
}

pub const GENERALIZATION_CSV_HEADER: &str =
    "holes,geometries,rmse_mode1,rmse_mode2,rmse_mode3,field_error_pct,max_field_error_pct";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub rows: Vec<GeneralizationRow>,
    pub scores: Vec<Score>,
}

impl GeneralizationReport {
    /// One row per topology with the mean error of every mode and of the
    /// reconstructed field.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{GENERALIZATION_CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.summary.mean_mode_rmse;
            let mode = |i: usize| m.get(i).map_or(String::new(), |v| v.to_string());
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.holes,
                r.summary.geometries,
                mode(0),
                mode(1),
                mode(2),
                r.summary.mean_field_error,
                r.summary.max_field_error
            ));
        }
        s
    }
}

/// Scores `model` on `count` fresh geometries with `holes` holes, drawn
/// from `first_seed` on. References are solved and compressed on the fly.
pub fn score_topology(
    model: &dyn BasisModel,
    cfg: &RunConfig,
    holes: usize,
    count: usize,
    first_seed: u64,
) -> Result<Vec<Score>, CliError> {
    draw_meshes(cfg, holes, count, first_seed)?
        .into_par_iter()
        .map(|(seed, mesh)| {
            let (case, u, basis) = reference_case(cfg, mesh)?;
            let mut s = score(model, &case, &u, &basis, cfg.evaluation.filter)?;
            s.seed = seed;
            s.holes = holes;
            Ok(s)
        })
        .collect()
}

/// Scores `model` on every topology in `holes`. Seeds of topology `h` start
/// at `first_seed + 10000 · h`.
pub fn generalization_study(
    model: &dyn BasisModel,
    cfg: &RunConfig,
    holes: &[usize],
    count: usize,
    first_seed: u64,
) -> Result<GeneralizationReport, CliError> {
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for &h in holes {
        let report = EvaluationReport {
            scores: score_topology(model, cfg, h, count, first_seed + 10_000 * h as u64)?,
        };
        rows.push(GeneralizationRow {
            holes: h,
            summary: report.summary(),
        });
        all.extend(report.scores);
    }
    Ok(GeneralizationReport { rows, scores: all })
}

/// Noise study on the stored basis of one record, truncated to the trained
/// number of modes.
pub fn noise_on_record(db: &Database, e: &Entry, cfg: &RunConfig) -> Result<Vec<NoiseRow>, CliError> {
    let case = OnlineCase::new(db.mesh(e)?, cfg)?;
    let basis = db.basis(e)?.basis.truncated(cfg.train.n_modes());
    let seeds: Vec<u64> = (0..cfg.evaluation.noise_seeds as u64).map(|s| cfg.seed + s).collect();
    Ok(noise_study(
        &case.sys,
        &basis,
        &case.forces,
        &db.field(e)?,
        &cfg.evaluation.noise_levels,
        &seeds,
    )?)
}
