//! Plane-strain linear elasticity on T3 meshes: assembly of mass and
//! stiffness, the crash-pulse load, and Newmark average-acceleration time
//! integration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::SpaceTimeField;
use crate::mesh::{Mesh, NodeTag, DIM};
use crate::sparse::{CsrMatrix, EnvelopeCholesky};

/// Standard gravity, m/s².
pub const G: f64 = 9.80665;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Material {
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    pub density: f64,
    pub thickness: f64,
}

impl Default for Material {
    /// Aluminium 6082-T6 handbook values, 10 mm plate.
    fn default() -> Self {
        Material {
            young_modulus: 70e9,
            poisson_ratio: 0.33,
            density: 2700.0,
            thickness: 0.01,
        }
    }
}

impl Material {
    pub fn validate(&self) -> Result<(), FemError> {
        let ok = self.young_modulus > 0.0
            && (0.0..0.5).contains(&self.poisson_ratio)
            && self.density > 0.0
            && self.thickness > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FemError::Invalid(format!("material out of range: {self:?}")))
        }
    }

    /// Plane-strain Hooke matrix in Voigt order (xx, yy, xy).
    pub fn plane_strain(&self) -> [[f64; 3]; 3] {
        let (e, nu) = (self.young_modulus, self.poisson_ratio);
        let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
        [
            [c * (1.0 - nu), c * nu, 0.0],
            [c * nu, c * (1.0 - nu), 0.0],
            [0.0, 0.0, c * (1.0 - 2.0 * nu) / 2.0],
        ]
    }
}

/// 6×6 constant-strain triangle stiffness, dofs ordered (u1x, u1y, u2x, ...).
pub fn element_stiffness(x: [[f64; 2]; 3], mat: &Material) -> [[f64; 6]; 6] {
    let area2 = (x[1][0] - x[0][0]) * (x[2][1] - x[0][1]) - (x[2][0] - x[0][0]) * (x[1][1] - x[0][1]);
    let area = 0.5 * area2;
    let mut bmat = [[0.0; 6]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let b = (x[j][1] - x[k][1]) / area2;
        let c = (x[k][0] - x[j][0]) / area2;
        bmat[0][2 * i] = b;
        bmat[1][2 * i + 1] = c;
        bmat[2][2 * i] = c;
        bmat[2][2 * i + 1] = b;
    }
    let d = mat.plane_strain();
    let mut db = [[0.0; 6]; 3];
    for r in 0..3 {
        for c in 0..6 {
            db[r][c] = (0..3).map(|k| d[r][k] * bmat[k][c]).sum();
        }
    }
    let scale = mat.thickness * area;
    let mut ke = [[0.0; 6]; 6];
    for r in 0..6 {
        for c in 0..6 {
            ke[r][c] = scale * (0..3).map(|k| bmat[k][r] * db[k][c]).sum::<f64>();
        }
    }
    ke
}

/// 6×6 consistent mass: ρtA/12 · [[2,1,1],[1,2,1],[1,1,2]] ⊗ I₂.
pub fn element_mass(x: [[f64; 2]; 3], mat: &Material) -> [[f64; 6]; 6] {
    let area = 0.5 * ((x[1][0] - x[0][0]) * (x[2][1] - x[0][1]) - (x[2][0] - x[0][0]) * (x[1][1] - x[0][1]));
    let s = mat.density * mat.thickness * area / 12.0;
    let mut me = [[0.0; 6]; 6];
    for a in 0..3 {
        for b in 0..3 {
            let w = if a == b { 2.0 } else { 1.0 };
            for k in 0..DIM {
                me[2 * a + k][2 * b + k] = s * w;
            }
        }
    }
    me
}

/// Unreduced global stiffness and mass over all `n·d` dofs.
pub fn assemble_full(mesh: &Mesh, mat: &Material) -> (CsrMatrix, CsrMatrix) {
    let n = mesh.n_dofs();
    let mut kt = Vec::with_capacity(mesh.triangles().len() * 36);
    let mut mt = Vec::with_capacity(mesh.triangles().len() * 36);
    for tri in mesh.triangles() {
        let x = [mesh.coords()[tri[0]], mesh.coords()[tri[1]], mesh.coords()[tri[2]]];
        let ke = element_stiffness(x, mat);
        let me = element_mass(x, mat);
        let dofs: Vec<usize> = tri.iter().flat_map(|&v| [DIM * v, DIM * v + 1]).collect();
        for r in 0..6 {
            for c in 0..6 {
                kt.push((dofs[r], dofs[c], ke[r][c]));
                mt.push((dofs[r], dofs[c], me[r][c]));
            }
        }
    }
    (
        CsrMatrix::from_triplets(n, n, &kt),
        CsrMatrix::from_triplets(n, n, &mt),
    )
}

/// Operators of one geometry with clamped dofs eliminated.
#[derive(Debug, Clone)]
pub struct AssembledSystem {
    n_nodes: usize,
    free_dofs: Vec<usize>,
    full_to_free: Vec<Option<usize>>,
    pub k_full: CsrMatrix,
    pub m_full: CsrMatrix,
    /// Stiffness on free dofs.
    pub k: CsrMatrix,
    /// Mass on free dofs.
    pub m: CsrMatrix,
    k_factor: EnvelopeCholesky,
    inertial_pattern: Vec<f64>,
    surface_pattern: Vec<f64>,
}

pub fn assemble(mesh: &Mesh, mat: &Material) -> Result<AssembledSystem, FemError> {
    mat.validate()?;
    let (k_full, m_full) = assemble_full(mesh, mat);
    let n = mesh.n_dofs();
    let mut full_to_free = vec![None; n];
    let mut free_dofs = Vec::with_capacity(n);
    for (v, tag) in mesh.tags().iter().enumerate() {
        if *tag != NodeTag::Dirichlet {
            for k in 0..DIM {
                full_to_free[DIM * v + k] = Some(free_dofs.len());
                free_dofs.push(DIM * v + k);
            }
        }
    }
    let k = k_full.principal_submatrix(&free_dofs);
    let m = m_full.principal_submatrix(&free_dofs);
    let k_factor = EnvelopeCholesky::factor(&k)
        .map_err(|e| FemError::SingularSystem(format!("reduced stiffness: {e}")))?;

    // Uniform unit acceleration along x, weighted by the consistent mass.
    let ex: Vec<f64> = (0..n).map(|i| if i % DIM == 0 { 1.0 } else { 0.0 }).collect();
    let mut inertial_pattern = m_full.mul_vec(&ex);

    // Unit resultant spread over the seating surface by edge length.
    let mut surface_pattern = vec![0.0; n];
    let mut total_len = 0.0;
    for [a, b] in mesh.boundary_edges() {
        if mesh.tags()[a] == NodeTag::LoadSurface && mesh.tags()[b] == NodeTag::LoadSurface {
            let (pa, pb) = (mesh.coords()[a], mesh.coords()[b]);
            let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
            surface_pattern[DIM * a] += 0.5 * len;
            surface_pattern[DIM * b] += 0.5 * len;
            total_len += len;
        }
    }
    if total_len <= 0.0 {
        return Err(FemError::Invalid("no loaded boundary edge".into()));
    }
    surface_pattern.iter_mut().for_each(|w| *w /= total_len);
    for i in 0..n {
        if full_to_free[i].is_none() {
            inertial_pattern[i] = 0.0;
            surface_pattern[i] = 0.0;
        }
    }

    Ok(AssembledSystem {
        n_nodes: mesh.n_nodes(),
        free_dofs,
        full_to_free,
        k_full,
        m_full,
        k,
        m,
        k_factor,
        inertial_pattern,
        surface_pattern,
    })
}

impl AssembledSystem {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_dofs(&self) -> usize {
        self.n_nodes * DIM
    }

    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn is_free(&self, dof: usize) -> bool {
        self.full_to_free[dof].is_some()
    }

    /// Cholesky factor of the reduced stiffness.
    pub fn k_factor(&self) -> &EnvelopeCholesky {
        &self.k_factor
    }

    /// Nodal forces of a unit uniform acceleration of the structure (x only).
    pub fn inertial_pattern(&self) -> &[f64] {
        &self.inertial_pattern
    }

    /// Unit-resultant x-traction on the seating surface.
    pub fn surface_pattern(&self) -> &[f64] {
        &self.surface_pattern
    }

    /// Full-length load per unit acceleration for a given passenger mass.
    pub fn load_pattern(&self, passenger_mass: f64) -> Vec<f64> {
        self.inertial_pattern
            .iter()
            .zip(&self.surface_pattern)
            .map(|(i, s)| i + passenger_mass * s)
            .collect()
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| full[d]).collect()
    }

    pub fn expand(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_dofs()];
        for (&d, &v) in self.free_dofs.iter().zip(reduced) {
            full[d] = v;
        }
        full
    }

    pub fn restrict_matrix(&self, full: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_free(), full.ncols(), |i, j| full[(self.free_dofs[i], j)])
    }

    pub fn expand_matrix(&self, reduced: &DMatrix<f64>) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.n_dofs(), reduced.ncols());
        for (i, &d) in self.free_dofs.iter().enumerate() {
            full.row_mut(d).copy_from(&reduced.row(i));
        }
        full
    }
}

/// Piecewise-linear deceleration pulse (trapezoid, triangle when the plateau
/// is zero) followed by rest until `total_duration`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadPulse {
    pub peak_g: f64,
    pub rise_time: f64,
    pub plateau_time: f64,
    pub fall_time: f64,
    pub passenger_mass: f64,
    pub total_duration: f64,
}

impl Default for LoadPulse {
    fn default() -> Self {
        LoadPulse {
            peak_g: 16.0,
            rise_time: 0.09,
            plateau_time: 0.0,
            fall_time: 0.09,
            passenger_mass: 90.0,
            total_duration: 0.25,
        }
    }
}

impl LoadPulse {
    pub fn validate(&self) -> Result<(), FemError> {
        let parts = [self.rise_time, self.plateau_time, self.fall_time];
        let ok = self.peak_g >= 0.0
            && parts.iter().all(|p| *p >= 0.0)
            && self.rise_time > 0.0
            && self.passenger_mass >= 0.0
            && parts.iter().sum::<f64>() < self.total_duration;
        if ok {
            Ok(())
        } else {
            Err(FemError::Invalid(format!("pulse out of range: {self:?}")))
        }
    }

    pub fn peak_accel(&self) -> f64 {
        self.peak_g * G
    }

    /// Acceleration magnitude at time `t`, m/s².
    pub fn accel(&self, t: f64) -> f64 {
        let peak = self.peak_accel();
        let t1 = self.rise_time;
        let t2 = t1 + self.plateau_time;
        let t3 = t2 + self.fall_time;
        if t <= 0.0 || t >= t3 {
            0.0
        } else if t < t1 {
            peak * t / t1
        } else if t <= t2 {
            peak
        } else {
            peak * (t3 - t) / self.fall_time
        }
    }

    /// Timestep of an `nt`-sample grid spanning `[0, total_duration]`.
    pub fn dt(&self, nt: usize) -> f64 {
        self.total_duration / (nt - 1) as f64
    }

    pub fn samples(&self, nt: usize) -> Vec<f64> {
        let dt = self.dt(nt);
        (0..nt).map(|i| self.accel(i as f64 * dt)).collect()
    }
}

/// Full-length force history `(n·d) × nt`; clamped rows are zero.
pub fn force_history(sys: &AssembledSystem, pulse: &LoadPulse, nt: usize) -> Result<DMatrix<f64>, FemError> {
    if nt < 2 {
        return Err(FemError::Invalid("need at least two time samples".into()));
    }
    let pattern = sys.load_pattern(pulse.passenger_mass);
    let a = pulse.samples(nt);
    Ok(DMatrix::from_fn(pattern.len(), nt, |i, j| pattern[i] * a[j]))
}

/// Linear solver produced by factorizing an operator once.
pub trait Factorized {
    fn solve(&self, b: &[f64]) -> Vec<f64>;
}

impl Factorized for EnvelopeCholesky {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        EnvelopeCholesky::solve(self, b)
    }
}

impl Factorized for nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let x = nalgebra::LU::solve(self, &nalgebra::DVector::from_column_slice(b))
            .expect("LU factor was checked invertible");
        x.as_slice().to_vec()
    }
}

/// Mass and stiffness of an undamped second-order system `M ü + K u = f`.
pub trait SecondOrderSystem {
    type Solver: Factorized;
    fn dim(&self) -> usize;
    fn mul_m(&self, x: &[f64]) -> Vec<f64>;
    fn mul_k(&self, x: &[f64]) -> Vec<f64>;
    /// Factorizes `M + c·K`.
    fn factor_shifted(&self, c: f64) -> Result<Self::Solver, FemError>;
}

pub struct SparseSystem<'a> {
    pub m: &'a CsrMatrix,
    pub k: &'a CsrMatrix,
}

impl SecondOrderSystem for SparseSystem<'_> {
    type Solver = EnvelopeCholesky;

    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn mul_m(&self, x: &[f64]) -> Vec<f64> {
        self.m.mul_vec(x)
    }

    fn mul_k(&self, x: &[f64]) -> Vec<f64> {
        self.k.mul_vec(x)
    }

    fn factor_shifted(&self, c: f64) -> Result<EnvelopeCholesky, FemError> {
        let mut t = Vec::with_capacity(self.m.nnz() + self.k.nnz());
        for (mat, s) in [(self.m, 1.0), (self.k, c)] {
            for i in 0..mat.nrows() {
                let (cols, vals) = mat.row(i);
                t.extend(cols.iter().zip(vals).map(|(&j, &v)| (i, j, s * v)));
            }
        }
        let a = CsrMatrix::from_triplets(self.dim(), self.dim(), &t);
        EnvelopeCholesky::factor(&a).map_err(|e| FemError::SingularSystem(e.to_string()))
    }
}

/// Small dense systems, not necessarily symmetric (filtered projections).
pub struct DenseSystem<'a> {
    pub m: &'a DMatrix<f64>,
    pub k: &'a DMatrix<f64>,
}

impl SecondOrderSystem for DenseSystem<'_> {
    type Solver = nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>;

    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn mul_m(&self, x: &[f64]) -> Vec<f64> {
        (self.m * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn mul_k(&self, x: &[f64]) -> Vec<f64> {
        (self.k * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec()
    }

    fn factor_shifted(&self, c: f64) -> Result<Self::Solver, FemError> {
        let a = self.m + self.k * c;
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let lu = a.lu();
        let u = lu.u();
        let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(min_pivot > 1e-14 * scale) {
            return Err(FemError::SingularSystem(format!(
                "dense effective matrix, smallest pivot {min_pivot:e}"
            )));
        }
        Ok(lu)
    }
}

/// Displacement, velocity and acceleration histories, one column per step.
#[derive(Debug, Clone)]
pub struct NewmarkHistory {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

pub const NEWMARK_GAMMA: f64 = 0.5;
pub const NEWMARK_BETA: f64 = 0.25;

/// Average-acceleration Newmark integration of `M ü + K u = f(t)` with
/// `f` given column-wise at the `nt` sample times.
pub fn newmark<S: SecondOrderSystem>(
    sys: &S,
    f: &DMatrix<f64>,
    dt: f64,
    u0: &[f64],
    v0: &[f64],
) -> Result<NewmarkHistory, FemError> {
    let n = sys.dim();
    let nt = f.ncols();
    if !(dt > 0.0) || nt == 0 || f.nrows() != n || u0.len() != n || v0.len() != n {
        return Err(FemError::Invalid(format!(
            "newmark: dt {dt}, force {}x{}, system {n}, u0 {}, v0 {}",
            f.nrows(),
            nt,
            u0.len(),
            v0.len()
        )));
    }
    let (gamma, beta) = (NEWMARK_GAMMA, NEWMARK_BETA);
    let mass = sys.factor_shifted(0.0)?;
    let effective = sys.factor_shifted(beta * dt * dt)?;

    let mut out = NewmarkHistory {
        u: DMatrix::zeros(n, nt),
        v: DMatrix::zeros(n, nt),
        a: DMatrix::zeros(n, nt),
    };
    let mut u = u0.to_vec();
    let mut v = v0.to_vec();
    let ku = sys.mul_k(&u);
    let rhs: Vec<f64> = (0..n).map(|i| f[(i, 0)] - ku[i]).collect();
    let mut a = mass.solve(&rhs);
    out.u.column_mut(0).copy_from_slice(&u);
    out.v.column_mut(0).copy_from_slice(&v);
    out.a.column_mut(0).copy_from_slice(&a);

    let mut u_pred = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for step in 1..nt {
        for i in 0..n {
            u_pred[i] = u[i] + dt * v[i] + 0.5 * dt * dt * (1.0 - 2.0 * beta) * a[i];
            v[i] += dt * (1.0 - gamma) * a[i];
        }
        let ku = sys.mul_k(&u_pred);
        for i in 0..n {
            rhs[i] = f[(i, step)] - ku[i];
        }
        a = effective.solve(&rhs);
        for i in 0..n {
            u[i] = u_pred[i] + beta * dt * dt * a[i];
            v[i] += gamma * dt * a[i];
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(FemError::SingularSystem(format!("non-finite state at step {step}")));
        }
        out.u.column_mut(step).copy_from_slice(&u);
        out.v.column_mut(step).copy_from_slice(&v);
        out.a.column_mut(step).copy_from_slice(&a);
    }
    Ok(out)
}

/// Solves the reduced structural dynamics for a full-length force history
/// and returns the displacement field over all dofs (clamped rows zero).
/// `u0` and `v0` are full-length; their clamped entries are ignored.
pub fn newmark_solve(
    sys: &AssembledSystem,
    f_full: &DMatrix<f64>,
    dt: f64,
    u0: &[f64],
    v0: &[f64],
) -> Result<SpaceTimeField, FemError> {
    let f = sys.restrict_matrix(f_full);
    let ops = SparseSystem { m: &sys.m, k: &sys.k };
    let hist = newmark(&ops, &f, dt, &sys.restrict(u0), &sys.restrict(v0))?;
    Ok(SpaceTimeField::new(sys.n_nodes(), DIM, dt, sys.expand_matrix(&hist.u)))
}

/// Assemble, load with `pulse` and integrate from rest over `nt` samples.
pub fn solve_geometry(
    mesh: &Mesh,
    mat: &Material,
    pulse: &LoadPulse,
    nt: usize,
) -> Result<(AssembledSystem, DMatrix<f64>, SpaceTimeField), FemError> {
    pulse.validate()?;
    let sys = assemble(mesh, mat)?;
    let f = force_history(&sys, pulse, nt)?;
    let zero = vec![0.0; sys.n_dofs()];
    let field = newmark_solve(&sys, &f, pulse.dt(nt), &zero, &zero)?;
    Ok((sys, f, field))
}

/// Static equilibrium `K u = 0` on unprescribed dofs, with `prescribed`
/// (dof, value) pairs imposed. Returns the full displacement vector.
pub fn solve_static_prescribed(k_full: &CsrMatrix, prescribed: &[(usize, f64)]) -> Result<Vec<f64>, FemError> {
    let n = k_full.nrows();
    let mut fixed = vec![None; n];
    for &(d, v) in prescribed {
        fixed[d] = Some(v);
    }
    let unknown: Vec<usize> = (0..n).filter(|&d| fixed[d].is_none()).collect();
    let mut up = vec![0.0; n];
    for &(d, v) in prescribed {
        up[d] = v;
    }
    let kup = k_full.mul_vec(&up);
    let rhs: Vec<f64> = unknown.iter().map(|&d| -kup[d]).collect();
    let kff = k_full.principal_submatrix(&unknown);
    let chol = EnvelopeCholesky::factor(&kff).map_err(|e| FemError::SingularSystem(e.to_string()))?;
    let uf = chol.solve(&rhs);
    let mut u = up;
    for (&d, &v) in unknown.iter().zip(&uf) {
        u[d] = v;
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_geometry, triangulate, SamplingRanges};
    use proptest::prelude::*;

    fn unit_material() -> Material {
        Material {
            young_modulus: 1.0,
            poisson_ratio: 0.0,
            density: 1.0,
            thickness: 1.0,
        }
    }

    fn seat_mesh(seed: u64) -> Mesh {
        triangulate(&generate_geometry(seed, 1, &SamplingRanges::default()).unwrap()).unwrap()
    }

    #[test]
    fn unit_triangle_stiffness_by_hand() {
        // Hand computation: A = 1/2, B = [[-1,0,1,0,0,0],[0,-1,0,0,0,1],[-1,-1,0,1,1,0]],
        // D = diag(1, 1, 1/2); K = t·A·BᵀDB.
        let s = [
            [1.5, 0.5, -1.0, -0.5, -0.5, 0.0],
            [0.5, 1.5, 0.0, -0.5, -0.5, -1.0],
            [-1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [-0.5, -0.5, 0.0, 0.5, 0.5, 0.0],
            [-0.5, -0.5, 0.0, 0.5, 0.5, 0.0],
            [0.0, -1.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let ke = element_stiffness([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &unit_material());
        for r in 0..6 {
            for c in 0..6 {
                assert!((ke[r][c] - 0.5 * s[r][c]).abs() < 1e-15, "({r},{c})");
            }
        }
    }

    #[test]
    fn element_mass_total() {
        let x = [[0.0, 0.0], [2.0, 0.0], [0.0, 3.0]];
        let mat = Material::default();
        let me = element_mass(x, &mat);
        let total: f64 = me.iter().flatten().sum();
        let expected = mat.density * mat.thickness * 3.0 * DIM as f64;
        assert!((total - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn single_triangle_one_clamp_is_singular() {
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![NodeTag::Dirichlet, NodeTag::LoadSurface, NodeTag::Free],
        )
        .unwrap();
        assert!(matches!(
            assemble(&mesh, &Material::default()),
            Err(FemError::SingularSystem(_))
        ));
    }

    #[test]
    fn operators_symmetric_and_rigid_modes_in_kernel() {
        let mesh = seat_mesh(0);
        let (k, m) = assemble_full(&mesh, &Material::default());
        assert!(k.asymmetry_inf() <= 1e-12 * k.norm_inf());
        assert!(m.asymmetry_inf() <= 1e-12 * m.norm_inf());
        let n = mesh.n_nodes();
        let tx: Vec<f64> = (0..2 * n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let ty: Vec<f64> = (0..2 * n).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect();
        let rot: Vec<f64> = (0..2 * n)
            .map(|i| {
                let p = mesh.coords()[i / 2];
                if i % 2 == 0 { -p[1] } else { p[0] }
            })
            .collect();
        for u in [tx, ty, rot] {
            let ku = k.mul_vec(&u);
            let worst = ku.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-9 * k.norm_inf());
        }
    }

    #[test]
    fn load_patterns_sum_to_mass_and_unity() {
        let mesh = seat_mesh(3);
        let mat = Material::default();
        let sys = assemble(&mesh, &mat).unwrap();
        let surface: f64 = sys.surface_pattern().iter().sum();
        assert!((surface - 1.0).abs() < 1e-12);
        assert!(sys.surface_pattern().iter().skip(1).step_by(2).all(|w| *w == 0.0));
        // Inertial resultant over free dofs is at most the total mass.
        let area: f64 = (0..mesh.triangles().len()).map(|e| mesh.signed_area(e)).sum();
        let total_mass = mat.density * mat.thickness * area;
        let inertial: f64 = sys.inertial_pattern().iter().sum();
        assert!(inertial > 0.8 * total_mass && inertial <= total_mass * (1.0 + 1e-12));
        let pulse = LoadPulse::default();
        let f = force_history(&sys, &pulse, 101).unwrap();
        // Peak sample at t = 0.09 s (index 36 of a 0.0025 s grid).
        let peak = 36;
        assert!((pulse.accel(peak as f64 * pulse.dt(101)) - pulse.peak_accel()).abs() < 1e-9);
        let surface_force: f64 = (0..sys.n_dofs())
            .map(|i| sys.surface_pattern()[i] * pulse.passenger_mass * pulse.accel(peak as f64 * pulse.dt(101)))
            .sum();
        assert!((surface_force - pulse.passenger_mass * pulse.peak_accel()).abs() < 1e-9 * surface_force);
        for d in 0..sys.n_dofs() {
            if !sys.is_free(d) {
                assert!(f.row(d).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn zero_pulse_gives_zero_forces() {
        let mesh = seat_mesh(4);
        let sys = assemble(&mesh, &Material::default()).unwrap();
        let pulse = LoadPulse {
            peak_g: 0.0,
            ..LoadPulse::default()
        };
        let f = force_history(&sys, &pulse, 10).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn triangular_pulse_five_samples() {
        let pulse = LoadPulse {
            peak_g: 10.0,
            rise_time: 0.5,
            plateau_time: 0.0,
            fall_time: 0.5,
            passenger_mass: 1.0,
            total_duration: 1.0,
        };
        // t = 0, 0.25, 0.5, 0.75, 1.0 → 0, half peak, peak, half peak, 0.
        let g = 10.0 * G;
        let want = [0.0, 0.5 * g, g, 0.5 * g, 0.0];
        for (s, w) in pulse.samples(5).iter().zip(want) {
            assert!((s - w).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_test_uniform_strain() {
        let mesh = seat_mesh(6);
        let (k, _) = assemble_full(&mesh, &Material::default());
        let field = |p: [f64; 2]| [1e-3 * p[0] + 2e-4 * p[1] + 1e-5, -3e-4 * p[0] + 5e-4 * p[1] - 2e-5];
        let on_boundary = mesh.boundary_nodes();
        let mut prescribed = Vec::new();
        for (v, &b) in on_boundary.iter().enumerate() {
            if b {
                let u = field(mesh.coords()[v]);
                prescribed.push((2 * v, u[0]));
                prescribed.push((2 * v + 1, u[1]));
            }
        }
        let u = solve_static_prescribed(&k, &prescribed).unwrap();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for (v, &b) in on_boundary.iter().enumerate() {
            let want = field(mesh.coords()[v]);
            scale = scale.max(want[0].abs()).max(want[1].abs());
            if !b {
                worst = worst.max((u[2 * v] - want[0]).abs()).max((u[2 * v + 1] - want[1]).abs());
            }
        }
        assert!(worst < 1e-10 * scale, "patch error {worst:e}");
    }

    fn oscillator(dt: f64, nt: usize) -> Vec<f64> {
        let m = DMatrix::from_element(1, 1, 1.0);
        let k = DMatrix::from_element(1, 1, (2.0 * std::f64::consts::PI).powi(2));
        let f = DMatrix::zeros(1, nt);
        newmark(&DenseSystem { m: &m, k: &k }, &f, dt, &[1.0], &[0.0])
            .unwrap()
            .u
            .row(0)
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn oscillator_returns_after_one_period() {
        let u = oscillator(1e-3, 1001);
        assert!((u[1000] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn oscillator_second_order() {
        let err = |steps: usize| {
            let dt = 1.0 / steps as f64;
            let u = oscillator(dt, steps + 1);
            u.iter()
                .enumerate()
                .map(|(i, x)| (x - (2.0 * std::f64::consts::PI * i as f64 * dt).cos()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(200) / err(400);
        assert!((3.8..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn zero_load_stays_at_rest() {
        let mesh = seat_mesh(7);
        let sys = assemble(&mesh, &Material::default()).unwrap();
        let f = DMatrix::zeros(sys.n_dofs(), 20);
        let zero = vec![0.0; sys.n_dofs()];
        let field = newmark_solve(&sys, &f, 1e-3, &zero, &zero).unwrap();
        assert!(field.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn free_vibration_conserves_energy() {
        use rand::{Rng, SeedableRng};
        let mesh = seat_mesh(8);
        let sys = assemble(&mesh, &Material::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let u0: Vec<f64> = (0..sys.n_free()).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let v0 = vec![0.0; sys.n_free()];
        let f = DMatrix::zeros(sys.n_free(), 1001);
        let ops = SparseSystem { m: &sys.m, k: &sys.k };
        let h = newmark(&ops, &f, 1e-5, &u0, &v0).unwrap();
        let energy = |j: usize| {
            let u: Vec<f64> = h.u.column(j).iter().copied().collect();
            let v: Vec<f64> = h.v.column(j).iter().copied().collect();
            let ku = sys.k.mul_vec(&u);
            let mv = sys.m.mul_vec(&v);
            0.5 * u.iter().zip(&ku).map(|(a, b)| a * b).sum::<f64>()
                + 0.5 * v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>()
        };
        let e0 = energy(0);
        let drift = (0..1001).map(|j| (energy(j) - e0).abs()).fold(0.0, f64::max) / e0;
        assert!(drift < 1e-6, "drift {drift:e}");
    }

    proptest! {
        #[test]
        fn element_stiffness_symmetric_psd(
            pts in proptest::array::uniform6(-1.0f64..1.0),
            nu in 0.0f64..0.49,
        ) {
            let x = [[pts[0], pts[1]], [pts[2], pts[3]], [pts[4], pts[5]]];
            let area = 0.5 * ((x[1][0] - x[0][0]) * (x[2][1] - x[0][1]) - (x[2][0] - x[0][0]) * (x[1][1] - x[0][1]));
            prop_assume!(area > 1e-2);
            let mat = Material { poisson_ratio: nu, ..unit_material() };
            let ke = element_stiffness(x, &mat);
            let km = DMatrix::from_fn(6, 6, |r, c| ke[r][c]);
            prop_assert!((&km - km.transpose()).amax() < 1e-12 * km.amax());
            let eig = km.clone().symmetric_eigen().eigenvalues;
            let mut sorted: Vec<f64> = eig.iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // Three rigid modes, three deformation modes.
            prop_assert!(sorted[..3].iter().all(|e| e.abs() < 1e-9 * km.amax()));
            prop_assert!(sorted[3..].iter().all(|e| *e > 0.0));
        }
    }
}
