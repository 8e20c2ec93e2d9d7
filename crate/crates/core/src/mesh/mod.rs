//! Triangular meshes of the seat family and their graph views.
//!
//! A [`Mesh`] is the shared substrate of the finite-element solver and of the
//! graph network: node coordinates, counter-clockwise T3 connectivity and a
//! per-node boundary tag. [`Adjacency`] is the node graph induced by the
//! triangle edges (symmetric, no self-loops).

mod delaunay;
mod geometry;
mod msh;
mod triangulate;

pub use geometry::{
    generate_geometry, GeometryParams, Outline, SamplingRanges, OUTLINE_SEAT_V1, OUTLINE_SQUARE,
};
pub use msh::{parse_msh, read_msh, write_msh, write_msh_string};
pub use triangulate::triangulate;

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("rejection sampling exhausted after {0} attempts")]
    RejectionExhausted(usize),
    #[error("meshing failed: {0}")]
    MeshingFailed(String),
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported element type {elem_type} at line {line}")]
    UnsupportedElement { line: usize, elem_type: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Boundary label carried by every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeTag {
    Free,
    /// Clamped: both displacement components are prescribed to zero.
    Dirichlet,
    /// Lies on the seating surface that carries the passenger load.
    LoadSurface,
}

impl NodeTag {
    pub fn group_name(self) -> &'static str {
        match self {
            NodeTag::Free => "free",
            NodeTag::Dirichlet => "clamp",
            NodeTag::LoadSurface => "seat",
        }
    }
}

/// Spatial dimension of every mesh in this crate.
pub const DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    coords: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    tags: Vec<NodeTag>,
}

impl Mesh {
    /// Builds a mesh and checks its invariants: indices in range,
    /// counter-clockwise non-degenerate triangles, at least one clamped and one
    /// loaded node, and a connected triangle graph.
    pub fn new(
        coords: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        tags: Vec<NodeTag>,
    ) -> Result<Self, MeshError> {
        let mesh = Mesh {
            coords,
            triangles,
            tags,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<(), MeshError> {
        let n = self.coords.len();
        if self.tags.len() != n {
            return Err(MeshError::Invalid(format!(
                "{} tags for {} nodes",
                self.tags.len(),
                n
            )));
        }
        if self.triangles.is_empty() {
            return Err(MeshError::Invalid("no triangles".into()));
        }
        if self.coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MeshError::Invalid("non-finite coordinate".into()));
        }
        let scale = self.mean_edge_length().powi(2);
        for (e, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(MeshError::Invalid(format!("triangle {e} references a missing node")));
            }
            let area = self.signed_area(e);
            if area <= 1e-12 * scale {
                return Err(MeshError::Invalid(format!(
                    "triangle {e} is degenerate or clockwise (signed area {area:e})"
                )));
            }
        }
        if !self.tags.contains(&NodeTag::Dirichlet) {
            return Err(MeshError::Invalid("no clamped node".into()));
        }
        if !self.tags.contains(&NodeTag::LoadSurface) {
            return Err(MeshError::Invalid("no load-surface node".into()));
        }
        let adjacency = build_adjacency(self);
        if !adjacency.is_connected() {
            return Err(MeshError::Invalid("triangle graph is not connected".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_dofs(&self) -> usize {
        self.coords.len() * DIM
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn tags(&self) -> &[NodeTag] {
        &self.tags
    }

    pub fn signed_area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.triangles[tri];
        signed_area(self.coords[a], self.coords[b], self.coords[c])
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if a < self.coords.len() && b < self.coords.len() {
                    total += dist(self.coords[a], self.coords[b]);
                    count += 1;
                }
            }
        }
        if count == 0 {
            1.0
        } else {
            total / count as f64
        }
    }

    /// Indices of nodes carrying `tag`, ascending.
    pub fn nodes_with_tag(&self, tag: NodeTag) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// Undirected edges on the boundary (edges used by exactly one triangle),
    /// each oriented as it appears in its counter-clockwise triangle.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        use std::collections::HashMap;
        let mut count: HashMap<(usize, usize), (usize, [usize; 2])> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                count.entry(key).or_insert((0, [a, b])).0 += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = count
            .into_values()
            .filter(|(c, _)| *c == 1)
            .map(|(_, e)| e)
            .collect();
        edges.sort_unstable();
        edges
    }

    /// Whether node `i` lies on the mesh boundary.
    pub fn boundary_nodes(&self) -> Vec<bool> {
        let mut on = vec![false; self.n_nodes()];
        for [a, b] in self.boundary_edges() {
            on[a] = true;
            on[b] = true;
        }
        on
    }

    /// Relabels the nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Mesh {
        let n = self.n_nodes();
        let mut inverse = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Mesh {
            coords: perm.iter().map(|&o| self.coords[o]).collect(),
            tags: perm.iter().map(|&o| self.tags[o]).collect(),
            triangles: self
                .triangles
                .iter()
                .map(|t| [inverse[t[0]], inverse[t[1]], inverse[t[2]]])
                .collect(),
        }
    }
}

pub(crate) fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Symmetric 0/1 node adjacency in compressed-row form, zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl Adjacency {
    /// Builds the adjacency of an undirected edge list. Self-loops are dropped
    /// and duplicate edges merged.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            lists[a].push(b);
            lists[b].push(a);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            cols.extend(l);
            row_ptr.push(cols.len());
        }
        Adjacency { row_ptr, cols }
    }

    pub fn n_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let n = self.n_nodes();
        let mut out = vec![vec![0u8; n]; n];
        for (i, row) in out.iter_mut().enumerate() {
            for &j in self.neighbors(i) {
                row[j] = 1;
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(i) = queue.pop_front() {
            for &j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    visited += 1;
                    queue.push_back(j);
                }
            }
        }
        visited == n
    }
}

/// Node graph of a mesh: `i ~ j` iff they share a triangle edge.
pub fn build_adjacency(mesh: &Mesh) -> Adjacency {
    let edges: Vec<(usize, usize)> = mesh
        .triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .collect();
    Adjacency::from_edges(mesh.n_nodes(), &edges)
}
