//! Node features, supervised targets and their normalization statistics.

use log::warn;
use nalgebra::DMatrix;
use romgnn_core::mesh::{build_adjacency, Mesh, NodeTag, DIM};
use romgnn_core::pgd::ReducedBasis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{EdgeIndex, GraphError};
use crate::tape::Mat;

/// x, y, clamped flag, f_x, f_y.
pub const N_FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    Empty,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Raw node features. The force columns hold, per dof, the sample of largest
/// magnitude over time (with its sign).
pub fn node_features(mesh: &Mesh, forces: &DMatrix<f64>) -> Result<Mat, DataError> {
    let n = mesh.n_nodes();
    if forces.nrows() != n * DIM {
        return Err(DataError::ShapeMismatch(format!(
            "{} force rows for {} nodes",
            forces.nrows(),
            n
        )));
    }
    let peak = |row: usize| {
        forces
            .row(row)
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best })
    };
    let x = Mat::from_fn(n, N_FEATURES, |i, c| match c {
        0 => mesh.coords()[i][0],
        1 => mesh.coords()[i][1],
        2 => f64::from(u8::from(mesh.tags()[i] == NodeTag::Dirichlet)),
        _ => peak(DIM * i + c - 3),
    });
    if !x.is_finite() {
        return Err(DataError::NonFinite("node features"));
    }
    Ok(x)
}

/// `n × (M·d)` target: channel `m·d + c` holds component `c` of mode `m`.
pub fn basis_to_target(basis: &ReducedBasis, n_modes: usize) -> Result<Mat, DataError> {
    if basis.rank() < n_modes {
        return Err(DataError::ShapeMismatch(format!(
            "basis has {} modes, {} requested",
            basis.rank(),
            n_modes
        )));
    }
    let n = basis.n_dofs() / DIM;
    let p = basis.modes();
    Ok(Mat::from_fn(n, n_modes * DIM, |i, ch| p[(DIM * i + ch % DIM, ch / DIM)]))
}

/// Inverse of [`basis_to_target`], returning the raw mode columns.
pub fn target_to_modes(target: &Mat) -> DMatrix<f64> {
    let n_modes = target.cols / DIM;
    DMatrix::from_fn(target.rows * DIM, n_modes, |dof, m| target.get(dof / DIM, m * DIM + dof % DIM))
}

/// Training-set statistics: inputs standardized by mean/std, outputs
/// min-max scaled to `[0, 1]` per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// False for features with zero spread; those are fed as zeros.
    pub input_active: Vec<bool>,
    pub output_min: Vec<f64>,
    pub output_max: Vec<f64>,
    /// False for channels that are constant over the training set; those are
    /// returned as the constant whatever the network outputs.
    pub output_active: Vec<bool>,
}

impl NormStats {
    /// Pooled over every node of every training graph.
    pub fn fit(inputs: &[&Mat], targets: &[&Mat]) -> Result<Self, DataError> {
        let first = inputs.first().ok_or(DataError::Empty)?;
        let (k, g) = (first.cols, targets.first().ok_or(DataError::Empty)?.cols);
        let mut count = 0usize;
        let mut sum = vec![0.0; k];
        for x in inputs {
            if x.cols != k {
                return Err(DataError::ShapeMismatch("feature widths differ".into()));
            }
            for i in 0..x.rows {
                for (s, v) in sum.iter_mut().zip(x.row(i)) {
                    *s += v;
                }
            }
            count += x.rows;
        }
        let input_mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; k];
        for x in inputs {
            for i in 0..x.rows {
                for ((s, v), m) in sq.iter_mut().zip(x.row(i)).zip(&input_mean) {
                    *s += (v - m).powi(2);
                }
            }
        }
        let input_std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let input_active: Vec<bool> = input_std
            .iter()
            .map(|&s| s > 1e-12 * input_mean.iter().map(|m| m.abs()).fold(1.0, f64::max))
            .collect();
        for (c, active) in input_active.iter().enumerate() {
            if !active {
                warn!("input feature {c} has zero spread over the training set; it is fed as zero");
            }
        }
        let mut output_min = vec![f64::INFINITY; g];
        let mut output_max = vec![f64::NEG_INFINITY; g];
        for t in targets {
            if t.cols != g {
                return Err(DataError::ShapeMismatch("target widths differ".into()));
            }
            for i in 0..t.rows {
                for (c, v) in t.row(i).iter().enumerate() {
                    output_min[c] = output_min[c].min(*v);
                    output_max[c] = output_max[c].max(*v);
                }
            }
        }
        let mut output_active = vec![true; g];
        for c in 0..g {
            if !(output_max[c] > output_min[c]) {
                warn!("output channel {c} is constant over the training set; it is predicted as that constant");
                output_max[c] = output_min[c] + 1.0;
                output_active[c] = false;
            }
        }
        let stats = NormStats {
            input_mean,
            input_std,
            input_active,
            output_min,
            output_max,
            output_active,
        };
        if stats.all_values().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite("normalization statistics"));
        }
        Ok(stats)
    }

    fn all_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.input_mean
            .iter()
            .chain(&self.input_std)
            .chain(&self.output_min)
            .chain(&self.output_max)
            .copied()
    }

    pub fn n_inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.output_min.len()
    }

    pub fn normalize_inputs(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols, self.n_inputs(), "feature width");
        Mat::from_fn(x.rows, x.cols, |i, c| {
            if self.input_active[c] {
                (x.get(i, c) - self.input_mean[c]) / self.input_std[c]
            } else {
                0.0
            }
        })
    }

    pub fn normalize_targets(&self, t: &Mat) -> Mat {
        assert_eq!(t.cols, self.n_outputs(), "target width");
        Mat::from_fn(t.rows, t.cols, |i, c| {
            (t.get(i, c) - self.output_min[c]) / (self.output_max[c] - self.output_min[c])
        })
    }

    pub fn denormalize_outputs(&self, y: &Mat) -> Mat {
        assert_eq!(y.cols, self.n_outputs(), "output width");
        Mat::from_fn(y.rows, y.cols, |i, c| {
            if self.output_active[c] {
                self.output_min[c] + y.get(i, c) * (self.output_max[c] - self.output_min[c])
            } else {
                self.output_min[c]
            }
        })
    }
}

/// One supervised example before normalization.
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub features: Mat,
    pub edges: EdgeIndex,
    pub target: Mat,
    pub clamped: Vec<bool>,
}

impl GraphSample {
    pub fn new(mesh: &Mesh, forces: &DMatrix<f64>, basis: &ReducedBasis, n_modes: usize) -> Result<Self, DataError> {
        let target = basis_to_target(basis, n_modes)?;
        if target.rows != mesh.n_nodes() {
            return Err(DataError::ShapeMismatch(format!(
                "basis over {} nodes, mesh has {}",
                target.rows,
                mesh.n_nodes()
            )));
        }
        Ok(GraphSample {
            features: node_features(mesh, forces)?,
            edges: EdgeIndex::from_adjacency(&build_adjacency(mesh))?,
            target,
            clamped: mesh.tags().iter().map(|t| *t == NodeTag::Dirichlet).collect(),
        })
    }
}

/// A sample in network units.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub x: Mat,
    pub edges: EdgeIndex,
    pub target: Mat,
}

impl PreparedSample {
    pub fn new(sample: &GraphSample, stats: &NormStats) -> Self {
        PreparedSample {
            x: stats.normalize_inputs(&sample.features),
            edges: sample.edges.clone(),
            target: stats.normalize_targets(&sample.target),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.x.rows
    }
}

/// Turns de-standardized network output into a basis: clamped dofs zeroed,
/// modes unit-normalized and sign-fixed.
pub fn output_to_basis(output: &Mat, clamped: &[bool]) -> ReducedBasis {
    let mut modes = target_to_modes(output);
    for (i, &c) in clamped.iter().enumerate() {
        if c {
            for d in 0..DIM {
                modes.row_mut(DIM * i + d).fill(0.0);
            }
        }
    }
    ReducedBasis::normalized(modes)
}
