//! Space-time separated representations `U ≈ Σ_m Λ_m λ_mᵀ` built by greedy
//! rank-one enrichment, each term found by an alternating fixed point.
//!
//! ROB container layout (little endian): magic `ROB1`, u32 version, u64 N
//! (= n·d), u64 M, u64 nt, f64 dt, M amplitudes, the M spatial modes (N
//! values each), then the M temporal modes (nt values each). `nt = 0`
//! stores a basis without temporal coefficients.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::field::{ByteReader, FieldError, SpaceTimeField};

pub const ROB_MAGIC: &[u8; 4] = b"ROB1";
pub const ROB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PgdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Container(#[from] FieldError),
}

/// Spatial modes `Λ_m` stored as the columns of an `N × M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    modes: DMatrix<f64>,
    amplitudes: Vec<f64>,
}

impl ReducedBasis {
    /// Takes the columns as given; amplitudes default to 1.
    pub fn new(modes: DMatrix<f64>) -> Self {
        let m = modes.ncols();
        ReducedBasis {
            modes,
            amplitudes: vec![1.0; m],
        }
    }

    pub fn with_amplitudes(modes: DMatrix<f64>, amplitudes: Vec<f64>) -> Self {
        assert_eq!(modes.ncols(), amplitudes.len());
        ReducedBasis { modes, amplitudes }
    }

    /// Unit-normalizes every column and flips it so that its entry of
    /// largest magnitude is positive. Zero columns are left as they are.
    pub fn normalized(mut modes: DMatrix<f64>) -> Self {
        for mut col in modes.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
                if col[col.iamax()] < 0.0 {
                    col.neg_mut();
                }
            }
        }
        Self::new(modes)
    }

    pub fn n_dofs(&self) -> usize {
        self.modes.nrows()
    }

    pub fn rank(&self) -> usize {
        self.modes.ncols()
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn mode(&self, m: usize) -> DVector<f64> {
        self.modes.column(m).into_owned()
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// First `m` modes.
    pub fn truncated(&self, m: usize) -> ReducedBasis {
        let m = m.min(self.rank());
        ReducedBasis {
            modes: self.modes.columns(0, m).into_owned(),
            amplitudes: self.amplitudes[..m].to_vec(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dof");
        for m in 0..self.rank() {
            s.push_str(&format!(",mode{}", m + 1));
        }
        s.push('\n');
        for i in 0..self.n_dofs() {
            s.push_str(&i.to_string());
            for m in 0..self.rank() {
                s.push_str(&format!(",{}", self.modes[(i, m)]));
            }
            s.push('\n');
        }
        s
    }
}

/// Spatial modes plus the temporal coefficients `λ_m` (rows of `temporal`).
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedField {
    pub basis: ReducedBasis,
    pub temporal: DMatrix<f64>,
    pub dt: f64,
}

impl SeparatedField {
    pub fn nt(&self) -> usize {
        self.temporal.ncols()
    }

    /// `Σ_m Λ_m λ_mᵀ` as an `N × nt` matrix.
    pub fn reconstruct_values(&self) -> Result<DMatrix<f64>, PgdError> {
        if self.temporal.nrows() != self.basis.rank() {
            return Err(PgdError::ShapeMismatch(format!(
                "{} spatial modes but {} temporal modes",
                self.basis.rank(),
                self.temporal.nrows()
            )));
        }
        Ok(self.basis.modes() * &self.temporal)
    }

    pub fn reconstruct(&self, dim: usize) -> Result<SpaceTimeField, PgdError> {
        let n = self.basis.n_dofs();
        if dim == 0 || n % dim != 0 {
            return Err(PgdError::ShapeMismatch(format!("{n} dofs not divisible by dimension {dim}")));
        }
        Ok(SpaceTimeField::new(n / dim, dim, self.dt, self.reconstruct_values()?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        rob_bytes(&self.basis, Some((&self.temporal, self.dt)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PgdError> {
        let (basis, temporal, dt) = parse_rob(bytes)?;
        Ok(SeparatedField { basis, temporal, dt })
    }

    pub fn write(&self, path: &Path) -> Result<(), PgdError> {
        std::fs::write(path, self.to_bytes()).map_err(FieldError::from)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PgdError> {
        Self::from_bytes(&std::fs::read(path).map_err(FieldError::from)?)
    }
}

impl ReducedBasis {
    /// Basis-only container (`nt = 0`).
    pub fn to_bytes(&self) -> Vec<u8> {
        rob_bytes(self, None)
    }

    /// Reads the spatial part of any ROB container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PgdError> {
        Ok(parse_rob(bytes)?.0)
    }

    pub fn write(&self, path: &Path) -> Result<(), PgdError> {
        std::fs::write(path, self.to_bytes()).map_err(FieldError::from)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PgdError> {
        Self::from_bytes(&std::fs::read(path).map_err(FieldError::from)?)
    }
}

fn rob_bytes(basis: &ReducedBasis, temporal: Option<(&DMatrix<f64>, f64)>) -> Vec<u8> {
    let (n, m) = (basis.n_dofs(), basis.rank());
    let (nt, dt) = temporal.map_or((0, 0.0), |(t, dt)| (t.ncols(), dt));
    let mut out = Vec::with_capacity(40 + 8 * (m + m * n + m * nt));
    out.extend_from_slice(ROB_MAGIC);
    out.extend_from_slice(&ROB_VERSION.to_le_bytes());
    for v in [n as u64, m as u64, nt as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dt.to_le_bytes());
    for a in basis.amplitudes() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for v in basis.modes().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some((t, _)) = temporal {
        for mi in 0..m {
            for j in 0..nt {
                out.extend_from_slice(&t[(mi, j)].to_le_bytes());
            }
        }
    }
    out
}

fn parse_rob(bytes: &[u8]) -> Result<(ReducedBasis, DMatrix<f64>, f64), PgdError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != ROB_MAGIC {
        return Err(FieldError::Format("not a reduced-basis file".into()).into());
    }
    let version = r.u32()?;
    if version != ROB_VERSION {
        return Err(FieldError::Format(format!("unsupported version {version}")).into());
    }
    let n = r.u64()? as usize;
    let m = r.u64()? as usize;
    let nt = r.u64()? as usize;
    let dt = r.f64()?;
    let expected = n
        .checked_add(nt)
        .and_then(|s| s.checked_add(1))
        .and_then(|s| s.checked_mul(m))
        .and_then(|s| s.checked_mul(8));
    if expected != Some(r.remaining()) {
        return Err(FieldError::Format("payload size does not match header".into()).into());
    }
    let amplitudes = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let modes = (0..n * m).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let temporal = (0..m * nt).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Ok((
        ReducedBasis::with_amplitudes(DMatrix::from_vec(n, m, modes), amplitudes),
        DMatrix::from_row_slice(m, nt, &temporal),
        dt,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedPointStatus {
    Converged,
    NoConvergence,
    /// The residual was zero (or numerically negligible); both modes are zero.
    ZeroResidual,
}

#[derive(Debug, Clone)]
pub struct RankOne {
    /// Unit norm, sign-fixed.
    pub spatial: DVector<f64>,
    pub temporal: DVector<f64>,
    pub iterations: usize,
    pub status: FixedPointStatus,
}

/// Alternating fixed point for the best rank-one term of `du`:
/// `λ = ΔUᵀΛ / ΛᵀΛ`, `Λ = ΔU λ / λᵀλ`, started from the row of `du` with the
/// largest norm and stopped when `λ` changes by less than `tol` (relative).
pub fn fixed_point_rank1(du: &DMatrix<f64>, tol: f64, max_iter: usize) -> RankOne {
    let (n, nt) = du.shape();
    let scale = du.amax();
    let zero = |iterations| RankOne {
        spatial: DVector::zeros(n),
        temporal: DVector::zeros(nt),
        iterations,
        status: FixedPointStatus::ZeroResidual,
    };
    if n == 0 || nt == 0 || !(scale > 0.0) || !scale.is_finite() {
        return zero(0);
    }
    // Work on a unit-max copy so tiny residuals cannot underflow.
    let a = du / scale;
    let start = (0..n)
        .map(|i| (i, a.row(i).norm_squared()))
        .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0;
    let mut lambda: DVector<f64> = a.row(start).transpose();
    let mut spatial = DVector::zeros(n);
    let mut status = FixedPointStatus::NoConvergence;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let ll = lambda.norm_squared();
        if ll == 0.0 {
            return zero(it);
        }
        spatial = &a * &lambda / ll;
        let ss = spatial.norm_squared();
        if ss == 0.0 {
            return zero(it);
        }
        let next = a.tr_mul(&spatial) / ss;
        let change = (&next - &lambda).norm() / next.norm().max(f64::MIN_POSITIVE);
        lambda = next;
        if change < tol {
            status = FixedPointStatus::Converged;
            break;
        }
    }
    let norm = spatial.norm();
    spatial /= norm;
    // Consistent with the normalized spatial mode.
    let mut temporal = a.tr_mul(&spatial) * scale;
    if spatial[spatial.iamax()] < 0.0 {
        spatial.neg_mut();
        temporal.neg_mut();
    }
    RankOne {
        spatial,
        temporal,
        iterations,
        status,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdOptions {
    /// Target relative squared error `‖U − U_M‖² / ‖U‖²`.
    pub eps: f64,
    pub max_rank: usize,
    /// Keep enriching until at least this many modes exist.
    pub min_rank: usize,
    pub fixed_point_tol: f64,
    pub fixed_point_max_iter: usize,
}

impl Default for PgdOptions {
    fn default() -> Self {
        PgdOptions {
            eps: 1e-3,
            max_rank: 20,
            min_rank: 1,
            fixed_point_tol: 1e-8,
            fixed_point_max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdStatus {
    Converged,
    MaxRankReached,
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    pub field: SeparatedField,
    pub status: PgdStatus,
    /// Smallest rank whose error is within `eps`, if reached.
    pub rank_at_eps: Option<usize>,
    /// Relative squared error after each enrichment (index m is rank m+1).
    pub errors: Vec<f64>,
    /// Fixed-point status of each enrichment.
    pub fixed_point: Vec<FixedPointStatus>,
}

impl PgdResult {
    pub fn rank(&self) -> usize {
        self.field.basis.rank()
    }
}

/// Greedy PGD compression of an `N × nt` field.
pub fn pgd_compress(u: &DMatrix<f64>, dt: f64, opts: &PgdOptions) -> Result<PgdResult, PgdError> {
    if !(opts.eps > 0.0) || opts.max_rank == 0 || opts.min_rank > opts.max_rank {
        return Err(PgdError::Invalid(format!("bad options {opts:?}")));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(PgdError::Invalid("field contains non-finite values".into()));
    }
    let (n, nt) = u.shape();
    let total = u.norm_squared();
    let mut residual = u.clone();
    let mut spatial: Vec<DVector<f64>> = Vec::new();
    let mut temporal: Vec<DVector<f64>> = Vec::new();
    let mut errors = Vec::new();
    let mut fixed_point = Vec::new();
    let mut rank_at_eps = if total == 0.0 { Some(0) } else { None };
    let mut status = PgdStatus::Converged;
    let mut prev = total;
    loop {
        let done_eps = rank_at_eps.is_some();
        if done_eps && spatial.len() >= opts.min_rank {
            break;
        }
        if spatial.len() == opts.max_rank {
            if !done_eps {
                status = PgdStatus::MaxRankReached;
            }
            break;
        }
        let term = fixed_point_rank1(&residual, opts.fixed_point_tol, opts.fixed_point_max_iter);
        if term.status == FixedPointStatus::ZeroResidual {
            break;
        }
        residual -= &term.spatial * term.temporal.transpose();
        let now = residual.norm_squared();
        // Each term is the optimal temporal fit to its spatial mode, so the
        // residual can only shrink.
        debug_assert!(now <= prev * (1.0 + 1e-12) + 1e-300);
        prev = now;
        let err = now / total;
        errors.push(err);
        fixed_point.push(term.status);
        spatial.push(term.spatial);
        temporal.push(term.temporal);
        if rank_at_eps.is_none() && err <= opts.eps {
            rank_at_eps = Some(spatial.len());
        }
    }
    let m = spatial.len();
    let modes = DMatrix::from_fn(n, m, |i, k| spatial[k][i]);
    let temporal_m = DMatrix::from_fn(m, nt, |k, j| temporal[k][j]);
    let amplitudes = temporal.iter().map(|t| t.norm()).collect();
    Ok(PgdResult {
        field: SeparatedField {
            basis: ReducedBasis::with_amplitudes(modes, amplitudes),
            temporal: temporal_m,
            dt,
        },
        status,
        rank_at_eps,
        errors,
        fixed_point,
    })
}

/// Relative squared Frobenius error `‖A − B‖² / ‖A‖²`.
pub fn relative_squared_error(reference: &DMatrix<f64>, approx: &DMatrix<f64>) -> f64 {
    (reference - approx).norm_squared() / reference.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn orthonormal(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        gaussian(rows, cols, seed).qr().q()
    }

    /// Matrix with prescribed singular values.
    fn with_spectrum(rows: usize, cols: usize, s: &[f64], seed: u64) -> DMatrix<f64> {
        let u = orthonormal(rows, s.len(), seed);
        let v = orthonormal(cols, s.len(), seed + 1000);
        &u * DMatrix::from_diagonal(&DVector::from_column_slice(s)) * v.transpose()
    }

    fn largest_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let s = (qa.transpose() * qb).singular_values();
        s.iter().fold(1.0f64, |m, v| m.min(*v)).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn rank_one_exact() {
        let a = DVector::from_vec(vec![3.0, -4.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let u = &a * b.transpose();
        let r = fixed_point_rank1(&u, 1e-8, 200);
        assert_eq!(r.status, FixedPointStatus::Converged);
        assert!(r.iterations <= 2);
        // Largest |entry| of a is -4, so the sign flips.
        let expected_spatial = -&a / 5.0;
        let expected_temporal = -&b * 5.0;
        assert!((&r.spatial - expected_spatial).amax() < 1e-14);
        assert!((&r.temporal - expected_temporal).amax() < 1e-13);

        let res = pgd_compress(&u, 1.0, &PgdOptions::default()).unwrap();
        assert_eq!(res.rank(), 1);
        assert!(res.errors[0] < 1e-12);
        let back = res.field.reconstruct_values().unwrap();
        assert!((back - &u).amax() < 1e-12 * u.amax());
    }

    #[test]
    fn dominant_pair_of_random_matrix() {
        let u = gaussian(50, 40, 7);
        let r = fixed_point_rank1(&u, 1e-12, 5000);
        let svd = u.clone().svd(true, true);
        let k = svd.singular_values.imax();
        let u1 = svd.u.as_ref().unwrap().column(k).into_owned();
        let cos = r.spatial.dot(&u1).abs();
        assert!(cos > 1.0 - 1e-8, "cos {cos}");
        assert!((r.temporal.norm() - svd.singular_values[k]).abs() < 1e-8 * svd.singular_values[k]);
    }

    #[test]
    fn negligible_residual_never_nan() {
        let u = DMatrix::from_element(4, 3, 1e-310);
        let r = fixed_point_rank1(&u, 1e-8, 200);
        assert!(r.spatial.iter().chain(r.temporal.iter()).all(|v| v.is_finite()));
        let z = fixed_point_rank1(&DMatrix::zeros(4, 3), 1e-8, 200);
        assert_eq!(z.status, FixedPointStatus::ZeroResidual);
    }

    #[test]
    fn rank_three_matches_svd_subspace() {
        let u = with_spectrum(80, 60, &[10.0, 5.0, 2.5, 0.01], 3);
        let res = pgd_compress(&u, 1.0, &PgdOptions { eps: 1e-3, ..Default::default() }).unwrap();
        assert_eq!(res.rank(), 3);
        assert_eq!(res.status, PgdStatus::Converged);
        let svd = u.clone().svd(true, false);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
        let top = DMatrix::from_fn(80, 3, |i, k| svd.u.as_ref().unwrap()[(i, order[k])]);
        assert!(largest_angle(res.field.basis.modes(), &top) < 1e-6);
    }

    #[test]
    fn max_rank_is_flagged() {
        let u = with_spectrum(30, 20, &[4.0, 3.0, 2.0, 1.0], 5);
        let res = pgd_compress(&u, 1.0, &PgdOptions { eps: 1e-6, max_rank: 2, ..Default::default() }).unwrap();
        assert_eq!(res.status, PgdStatus::MaxRankReached);
        assert_eq!(res.rank(), 2);
        assert_eq!(res.rank_at_eps, None);
    }

    #[test]
    fn min_rank_enriches_past_eps() {
        let u = with_spectrum(30, 20, &[4.0, 0.01, 0.005], 6);
        let res = pgd_compress(&u, 1.0, &PgdOptions { eps: 1e-3, min_rank: 3, ..Default::default() }).unwrap();
        assert_eq!(res.rank_at_eps, Some(1));
        assert_eq!(res.rank(), 3);
    }

    #[test]
    fn empty_basis_reconstructs_zero() {
        let sf = SeparatedField {
            basis: ReducedBasis::new(DMatrix::zeros(6, 0)),
            temporal: DMatrix::zeros(0, 5),
            dt: 0.1,
        };
        let f = sf.reconstruct(2).unwrap();
        assert_eq!(f.values(), &DMatrix::zeros(6, 5));
        let bad = SeparatedField { temporal: DMatrix::zeros(1, 5), ..sf };
        assert!(matches!(bad.reconstruct(2), Err(PgdError::ShapeMismatch(_))));
    }

    #[test]
    fn container_round_trip_and_size() {
        let u = with_spectrum(40, 25, &[3.0, 1.0], 9);
        let res = pgd_compress(&u, 0.01, &PgdOptions { eps: 1e-10, ..Default::default() }).unwrap();
        let bytes = res.field.to_bytes();
        let back = SeparatedField::from_bytes(&bytes).unwrap();
        assert_eq!(back, res.field);
        let m = res.rank();
        assert_eq!(m, 2);
        // Header plus amplitudes, then M·(N + nt) numbers: 2·65 against 40·25.
        let payload = bytes.len() - 40 - 8 * m;
        assert_eq!(payload as f64 / (8.0 * 40.0 * 25.0), 0.13);

        let basis_only = res.field.basis.to_bytes();
        assert_eq!(ReducedBasis::from_bytes(&basis_only).unwrap(), res.field.basis);
    }

    #[test]
    fn deterministic_bits() {
        let u = gaussian(30, 30, 11);
        let a = pgd_compress(&u, 1.0, &PgdOptions { eps: 0.2, ..Default::default() }).unwrap();
        let b = pgd_compress(&u, 1.0, &PgdOptions { eps: 0.2, ..Default::default() }).unwrap();
        assert_eq!(a.field.to_bytes(), b.field.to_bytes());
    }

    #[test]
    fn normalized_sign_convention() {
        let b = ReducedBasis::normalized(DMatrix::from_column_slice(3, 1, &[1.0, -3.0, 2.0]));
        let c = b.mode(0);
        assert!((c.norm() - 1.0).abs() < 1e-15);
        assert!(c[1] > 0.0);
    }

    proptest! {
        #[test]
        fn residual_monotone(rows in 3usize..30, cols in 2usize..30, seed in 0u64..500) {
            let u = gaussian(rows, cols, seed);
            let res = pgd_compress(&u, 1.0, &PgdOptions { eps: 1e-6, max_rank: 6, ..Default::default() }).unwrap();
            let mut prev = 1.0;
            for &e in &res.errors {
                prop_assert!(e <= prev + 1e-12);
                prev = e;
            }
            for m in 0..res.rank() {
                let c = res.field.basis.mode(m);
                prop_assert!((c.norm() - 1.0).abs() < 1e-12);
                prop_assert!(c[c.iamax()] > 0.0);
            }
        }
    }
}
