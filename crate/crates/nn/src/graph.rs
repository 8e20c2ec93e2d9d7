//! Directed edge lists and batches of disjoint graphs.

use std::rc::Rc;

use romgnn_core::mesh::Adjacency;
use thiserror::Error;

use crate::tape::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} has no neighbours")]
    IsolatedNode(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Messages flow `src[e] → dst[e]`; both directions of every undirected edge
/// are present.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_adjacency(adj: &Adjacency) -> Result<Self, GraphError> {
        let n = adj.n_nodes();
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for i in 0..n {
            if adj.degree(i) == 0 {
                return Err(GraphError::IsolatedNode(i));
            }
            for &j in adj.neighbors(i) {
                src.push(j);
                dst.push(i);
            }
        }
        Ok(EdgeIndex { n_nodes: n, src, dst })
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Several graphs laid out as one block-diagonal graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    /// Stacked node features, `N × k`.
    pub x: Mat,
    /// `x[dst] − x[src]` per directed edge, `E × k`.
    pub dx: Mat,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub inv_degree: Rc<[f64]>,
    /// `(first row, node count)` of each graph.
    pub segments: Rc<[(usize, usize)]>,
}

impl GraphBatch {
    pub fn new(graphs: &[(&Mat, &EdgeIndex)]) -> Result<Self, GraphError> {
        let k = graphs.first().map_or(0, |(x, _)| x.cols);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut segments = Vec::with_capacity(graphs.len());
        let mut off = 0;
        for (x, e) in graphs {
            if x.rows != e.n_nodes || x.cols != k {
                return Err(GraphError::ShapeMismatch(format!(
                    "features {}x{} for a {}-node graph with {k} features",
                    x.rows, x.cols, e.n_nodes
                )));
            }
            src.extend(e.src.iter().map(|s| s + off));
            dst.extend(e.dst.iter().map(|d| d + off));
            segments.push((off, e.n_nodes));
            off += e.n_nodes;
        }
        let mut degree = vec![0usize; off];
        for &d in &dst {
            degree[d] += 1;
        }
        if let Some(i) = degree.iter().position(|&d| d == 0) {
            return Err(GraphError::IsolatedNode(i));
        }
        let parts: Vec<&Mat> = graphs.iter().map(|(x, _)| *x).collect();
        let x = Mat::vstack(&parts);
        let mut dx = Mat::zeros(src.len(), k);
        for (e, (&s, &d)) in src.iter().zip(&dst).enumerate() {
            for c in 0..k {
                dx.data[e * k + c] = x.get(d, c) - x.get(s, c);
            }
        }
        Ok(GraphBatch {
            x,
            dx,
            src: src.into(),
            dst: dst.into(),
            inv_degree: degree.iter().map(|&d| 1.0 / d as f64).collect(),
            segments: segments.into(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.x.rows
    }

    pub fn n_graphs(&self) -> usize {
        self.segments.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> EdgeIndex {
        EdgeIndex::from_adjacency(&Adjacency::from_edges(3, &[(0, 1), (1, 2), (0, 2)])).unwrap()
    }

    #[test]
    fn triangle_has_six_directed_edges() {
        let e = triangle();
        assert_eq!(e.n_edges(), 6);
        let mut pairs: Vec<_> = e.src.iter().zip(&e.dst).map(|(a, b)| (*a, *b)).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    #[test]
    fn isolated_node_rejected() {
        let adj = Adjacency::from_edges(3, &[(0, 1)]);
        assert_eq!(EdgeIndex::from_adjacency(&adj), Err(GraphError::IsolatedNode(2)));
    }

    #[test]
    fn batch_offsets_second_graph() {
        let e = triangle();
        let x1 = Mat::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let x2 = Mat::from_fn(3, 2, |i, _| 10.0 * i as f64);
        let b = GraphBatch::new(&[(&x1, &e), (&x2, &e)]).unwrap();
        assert_eq!(b.n_nodes(), 6);
        assert_eq!(&*b.segments, &[(0, 3), (3, 3)]);
        assert!(b.src[6..].iter().all(|&s| s >= 3));
        assert!(b.inv_degree.iter().all(|&w| w == 0.5));
        for e in 0..b.src.len() {
            assert_eq!(b.dx.get(e, 0), b.x.get(b.dst[e], 0) - b.x.get(b.src[e], 0));
        }
    }

    #[test]
    fn feature_shape_checked() {
        let e = triangle();
        let x = Mat::zeros(4, 2);
        assert!(matches!(GraphBatch::new(&[(&x, &e)]), Err(GraphError::ShapeMismatch(_))));
    }
}
