//! Space-time displacement fields and their on-disk container.
//!
//! Binary layout (little endian): magic `STF1`, u32 version, u64 n, u64 d,
//! u64 nt, f64 dt, then the `(n·d) × nt` values row-major as f64.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

pub const STF_MAGIC: &[u8; 4] = b"STF1";
pub const STF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nodal displacement history, row `d·i + k` is component `k` of node `i`,
/// column `j` is time `j·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    n_nodes: usize,
    dim: usize,
    dt: f64,
    values: DMatrix<f64>,
}

impl SpaceTimeField {
    pub fn new(n_nodes: usize, dim: usize, dt: f64, values: DMatrix<f64>) -> Self {
        assert_eq!(values.nrows(), n_nodes * dim, "field rows must equal n·d");
        SpaceTimeField {
            n_nodes,
            dim,
            dt,
            values,
        }
    }

    pub fn zeros(n_nodes: usize, dim: usize, dt: f64, nt: usize) -> Self {
        Self::new(n_nodes, dim, dt, DMatrix::zeros(n_nodes * dim, nt))
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_dofs(&self) -> usize {
        self.n_nodes * self.dim
    }

    pub fn nt(&self) -> usize {
        self.values.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    /// Largest nodal displacement magnitude over all times.
    pub fn max_displacement(&self) -> f64 {
        let mut best = 0.0f64;
        for j in 0..self.nt() {
            for i in 0..self.n_nodes {
                let s: f64 = (0..self.dim).map(|k| self.values[(self.dim * i + k, j)].powi(2)).sum();
                best = best.max(s.sqrt());
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * self.values.len());
        out.extend_from_slice(STF_MAGIC);
        out.extend_from_slice(&STF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_nodes as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.nt() as u64).to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        for i in 0..self.values.nrows() {
            for j in 0..self.values.ncols() {
                out.extend_from_slice(&self.values[(i, j)].to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != STF_MAGIC {
            return Err(FieldError::Format("not a space-time field file".into()));
        }
        let version = r.u32()?;
        if version != STF_VERSION {
            return Err(FieldError::Format(format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let d = r.u64()? as usize;
        let nt = r.u64()? as usize;
        let dt = r.f64()?;
        let rows = n.checked_mul(d).ok_or_else(|| FieldError::Format("size overflow".into()))?;
        let expected = rows
            .checked_mul(nt)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| FieldError::Format("size overflow".into()))?;
        if r.remaining() != expected {
            return Err(FieldError::Format(format!(
                "expected {expected} payload bytes, found {}",
                r.remaining()
            )));
        }
        let mut values = DMatrix::zeros(rows, nt);
        for i in 0..rows {
            for j in 0..nt {
                values[(i, j)] = r.f64()?;
            }
        }
        Ok(SpaceTimeField::new(n, d, dt, values))
    }

    pub fn write(&self, path: &Path) -> Result<(), FieldError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FieldError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// One row per (time, node): `t,node,ux,uy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,node");
        for k in 0..self.dim {
            s.push_str(&format!(",u{}", ["x", "y", "z"].get(k).copied().unwrap_or("?")));
        }
        s.push('\n');
        for j in 0..self.nt() {
            let t = j as f64 * self.dt;
            for i in 0..self.n_nodes {
                s.push_str(&format!("{t},{i}"));
                for k in 0..self.dim {
                    s.push_str(&format!(",{}", self.values[(self.dim * i + k, j)]));
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Little-endian cursor shared by the binary containers.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FieldError> {
        if self.remaining() < n {
            return Err(FieldError::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FieldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FieldError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, FieldError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
