//! Galerkin reduced-order models on a given basis, with the optional
//! `S = K⁻¹` filter, plus the basis and field error metrics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{newmark, AssembledSystem, DenseSystem, FemError};
use crate::field::SpaceTimeField;
use crate::mesh::DIM;
use crate::pgd::ReducedBasis;

#[derive(Debug, Error)]
pub enum RomError {
    #[error("singular reduced system: {0}")]
    SingularSystem(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("basis is rank deficient")]
    RankDeficient,
    #[error("reference field is zero")]
    ZeroReference,
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Filter {
    /// Plain Galerkin, `S = I`.
    Identity,
    /// Preconditioned Galerkin, `S = K⁻¹`.
    InverseStiffness,
}

impl std::str::FromStr for Filter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "identity" | "none" => Ok(Filter::Identity),
            "k-inverse" | "inverse-stiffness" => Ok(Filter::InverseStiffness),
            other => Err(format!("unknown filter '{other}' (expected identity or k-inverse)")),
        }
    }
}

/// `Mr = WᵀMP`, `Kr = WᵀKP`, `fr = Wᵀf` with `W = S P` on free dofs.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub mr: DMatrix<f64>,
    pub kr: DMatrix<f64>,
    /// `M × nt`.
    pub fr: DMatrix<f64>,
    pub filter: Filter,
}

pub fn project(
    sys: &AssembledSystem,
    basis: &ReducedBasis,
    f_full: &DMatrix<f64>,
    filter: Filter,
) -> Result<ReducedSystem, RomError> {
    if basis.n_dofs() != sys.n_dofs() || f_full.nrows() != sys.n_dofs() {
        return Err(RomError::ShapeMismatch(format!(
            "basis {} dofs, forces {} rows, system {} dofs",
            basis.n_dofs(),
            f_full.nrows(),
            sys.n_dofs()
        )));
    }
    let p = sys.restrict_matrix(basis.modes());
    let mp = sys.m.mul_dense(&p);
    let kp = sys.k.mul_dense(&p);
    let f = sys.restrict_matrix(f_full);
    let w = match filter {
        Filter::Identity => p,
        Filter::InverseStiffness => sys.k_factor().solve_matrix(&p),
    };
    let kr = w.transpose() * kp;
    let mr = w.transpose() * mp;
    let fr = w.transpose() * f;
    let s = kr.clone().singular_values();
    let (hi, lo) = s.iter().fold((0.0f64, f64::INFINITY), |(h, l), v| (h.max(*v), l.min(*v)));
    if basis.rank() > 0 && !(lo > 1e-12 * hi) {
        return Err(RomError::SingularSystem(format!(
            "projected stiffness condition {:e}",
            hi / lo
        )));
    }
    Ok(ReducedSystem { mr, kr, fr, filter })
}

/// Temporal coefficients `M × nt` from rest.
pub fn solve_reduced(rs: &ReducedSystem, dt: f64) -> Result<DMatrix<f64>, RomError> {
    let m = rs.mr.nrows();
    solve_reduced_from(rs, dt, &vec![0.0; m], &vec![0.0; m])
}

pub fn solve_reduced_from(rs: &ReducedSystem, dt: f64, q0: &[f64], v0: &[f64]) -> Result<DMatrix<f64>, RomError> {
    let ops = DenseSystem { m: &rs.mr, k: &rs.kr };
    let hist = newmark(&ops, &rs.fr, dt, q0, v0).map_err(|e| match e {
        FemError::SingularSystem(s) => RomError::SingularSystem(s),
        other => RomError::Fem(other),
    })?;
    Ok(hist.u)
}

/// Least-squares coordinates of `u` in the basis, `(PᵀP)⁻¹Pᵀu`.
pub fn basis_coordinates(basis: &ReducedBasis, u: &[f64]) -> Result<Vec<f64>, RomError> {
    let p = basis.modes();
    let gram = p.transpose() * p;
    let rhs = p.transpose() * DVector::from_column_slice(u);
    let x = gram.lu().solve(&rhs).ok_or(RomError::RankDeficient)?;
    Ok(x.as_slice().to_vec())
}

/// `P λ` as a full displacement field.
pub fn reconstruct(basis: &ReducedBasis, temporal: &DMatrix<f64>, dt: f64) -> Result<SpaceTimeField, RomError> {
    if temporal.nrows() != basis.rank() {
        return Err(RomError::ShapeMismatch(format!(
            "{} modes but {} coefficient rows",
            basis.rank(),
            temporal.nrows()
        )));
    }
    Ok(SpaceTimeField::new(
        basis.n_dofs() / DIM,
        DIM,
        dt,
        basis.modes() * temporal,
    ))
}

/// Project, integrate from rest and reconstruct.
pub fn rom_solve(
    sys: &AssembledSystem,
    basis: &ReducedBasis,
    f_full: &DMatrix<f64>,
    dt: f64,
    filter: Filter,
) -> Result<SpaceTimeField, RomError> {
    let rs = project(sys, basis, f_full, filter)?;
    let lambda = solve_reduced(&rs, dt)?;
    reconstruct(basis, &lambda, dt)
}

/// Adds `N(0, σ²)` to every free dof of every mode, with `σ` equal to
/// `level_pct / 100` times the largest `|Λ|` over the basis, then
/// renormalizes and sign-fixes each mode.
pub fn add_noise(basis: &ReducedBasis, level_pct: f64, seed: u64, free_dofs: &[usize]) -> ReducedBasis {
    assert!(level_pct >= 0.0, "noise level must be non-negative");
    if level_pct == 0.0 {
        return basis.clone();
    }
    let sigma = level_pct / 100.0 * basis.modes().amax();
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = basis.modes().clone();
    for m in 0..modes.ncols() {
        for &d in free_dofs {
            modes[(d, m)] += normal.sample(&mut rng);
        }
    }
    ReducedBasis::normalized(modes)
}

fn orthonormal_columns(p: &DMatrix<f64>) -> Result<DMatrix<f64>, RomError> {
    let qr = p.clone().qr();
    let r = qr.r();
    let scale = p.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if p.ncols() == 0 || r.diagonal().iter().any(|d| !(d.abs() > 1e-12 * scale)) {
        return Err(RomError::RankDeficient);
    }
    Ok(qr.q())
}

/// All principal angles between the column spans, ascending, in degrees.
pub fn principal_angles(p1: &ReducedBasis, p2: &ReducedBasis) -> Result<Vec<f64>, RomError> {
    if p1.n_dofs() != p2.n_dofs() || p1.rank() != p2.rank() {
        return Err(RomError::ShapeMismatch(format!(
            "{}x{} against {}x{}",
            p1.n_dofs(),
            p1.rank(),
            p2.n_dofs(),
            p2.rank()
        )));
    }
    let q1 = orthonormal_columns(p1.modes())?;
    let q2 = orthonormal_columns(p2.modes())?;
    let c = q1.transpose() * &q2;
    let mut cos: Vec<f64> = c.singular_values().iter().map(|v| v.min(1.0)).collect();
    // Sines from the part of q2 outside span(q1), accurate for small angles.
    let residual = &q2 - &q1 * &c;
    let mut sin: Vec<f64> = residual.singular_values().iter().map(|v| v.min(1.0)).collect();
    cos.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sin.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(cos
        .iter()
        .zip(&sin)
        .map(|(c, s)| s.atan2(*c).to_degrees())
        .collect())
}

/// Largest principal angle in degrees.
pub fn subspace_angle(p1: &ReducedBasis, p2: &ReducedBasis) -> Result<f64, RomError> {
    Ok(principal_angles(p1, p2)?.into_iter().fold(0.0, f64::max))
}

fn check_shapes(a: &SpaceTimeField, b: &SpaceTimeField) -> Result<(), RomError> {
    if a.values().shape() != b.values().shape() || a.dt() != b.dt() {
        return Err(RomError::ShapeMismatch(format!(
            "{:?} dt {} against {:?} dt {}",
            a.values().shape(),
            a.dt(),
            b.values().shape(),
            b.dt()
        )));
    }
    Ok(())
}

/// Space-time relative L² error in percent.
pub fn field_error(reference: &SpaceTimeField, test: &SpaceTimeField) -> Result<f64, RomError> {
    check_shapes(reference, test)?;
    let norm = reference.values().norm();
    if norm == 0.0 {
        return Err(RomError::ZeroReference);
    }
    Ok(100.0 * (reference.values() - test.values()).norm() / norm)
}

/// Spatial L² error at every time sample, in percent of the largest
/// reference norm over time.
pub fn per_timestep_error(reference: &SpaceTimeField, test: &SpaceTimeField) -> Result<Vec<f64>, RomError> {
    check_shapes(reference, test)?;
    let scale = reference
        .values()
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(RomError::ZeroReference);
    }
    let diff = reference.values() - test.values();
    Ok(diff.column_iter().map(|c| 100.0 * c.norm() / scale).collect())
}

/// Root-mean-square difference normalized by the range of the reference,
/// in percent. Modes are defined up to sign, so the better of `±pred` counts.
pub fn normalized_rmse(pred: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    assert_eq!(pred.len(), reference.len());
    let n = reference.len().max(1) as f64;
    let range = reference.max() - reference.min();
    let plus = ((pred - reference).norm_squared() / n).sqrt();
    let minus = ((pred + reference).norm_squared() / n).sqrt();
    100.0 * plus.min(minus) / range.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: f64,
    pub angle_deg: f64,
    pub err_canonical_pct: f64,
    pub err_filtered_pct: f64,
}

pub const NOISE_CSV_HEADER: &str = "level,angle_deg,err_canonical_pct,err_filtered_pct";

/// For each level, the seed-averaged subspace angle and field errors of the
/// canonical and filtered projections onto noisy copies of `basis`.
pub fn noise_study(
    sys: &AssembledSystem,
    basis: &ReducedBasis,
    f_full: &DMatrix<f64>,
    reference: &SpaceTimeField,
    levels: &[f64],
    seeds: &[u64],
) -> Result<Vec<NoiseRow>, RomError> {
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let (mut angle, mut canonical, mut filtered) = (0.0, 0.0, 0.0);
        for &seed in seeds {
            let noisy = add_noise(basis, level, seed, sys.free_dofs());
            angle += subspace_angle(basis, &noisy)?;
            let u = rom_solve(sys, &noisy, f_full, reference.dt(), Filter::Identity)?;
            canonical += field_error(reference, &u)?;
            let u = rom_solve(sys, &noisy, f_full, reference.dt(), Filter::InverseStiffness)?;
            filtered += field_error(reference, &u)?;
        }
        let k = seeds.len().max(1) as f64;
        rows.push(NoiseRow {
            level,
            angle_deg: angle / k,
            err_canonical_pct: canonical / k,
            err_filtered_pct: filtered / k,
        });
    }
    Ok(rows)
}

pub fn noise_rows_csv(rows: &[NoiseRow]) -> String {
    let mut s = format!("{NOISE_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.level, r.angle_deg, r.err_canonical_pct, r.err_filtered_pct
        ));
    }
    s
}
