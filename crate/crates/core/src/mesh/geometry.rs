//! The seat family: a fixed outline template with curved cutouts on two of its
//! edges and one or more interior circular holes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dist, MeshError, NodeTag};

/// Polygonal outline template, counter-clockwise. Edge `i` runs from
/// `vertices[i]` to `vertices[(i + 1) % len]`.
#[derive(Debug, Clone, Copy)]
pub struct Outline {
    pub id: &'static str,
    pub vertices: &'static [[f64; 2]],
    pub edge_tags: &'static [NodeTag],
    /// Semicircular cutouts bitten into the outline: (edge index, relative
    /// position of the centre along that edge).
    pub cutouts: &'static [(usize, f64)],
}

/// Side view of a seat frame (metres): clamped base, a leg block with a
/// diagonal underside, an overhanging seat pan whose top carries the
/// passenger, and a slender backrest.
pub const OUTLINE_SEAT_V1: Outline = Outline {
    id: "seat-v1",
    vertices: &[
        [0.00, 0.00],
        [0.40, 0.00],
        [0.40, 0.20],
        [0.70, 0.40],
        [0.70, 0.48],
        [0.10, 0.48],
        [0.10, 1.00],
        [0.00, 1.00],
    ],
    edge_tags: &[
        NodeTag::Dirichlet,
        NodeTag::Free,
        NodeTag::Free,
        NodeTag::Free,
        NodeTag::LoadSurface,
        NodeTag::Free,
        NodeTag::Free,
        NodeTag::Free,
    ],
    cutouts: &[(2, 0.5), (7, 0.7)],
};

/// Unit square clamped along its base and loaded on its top edge.
pub const OUTLINE_SQUARE: Outline = Outline {
    id: "square",
    vertices: &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
    edge_tags: &[
        NodeTag::Dirichlet,
        NodeTag::Free,
        NodeTag::LoadSurface,
        NodeTag::Free,
    ],
    cutouts: &[],
};

const OUTLINES: &[Outline] = &[OUTLINE_SEAT_V1, OUTLINE_SQUARE];

impl Outline {
    pub fn by_id(id: &str) -> Option<&'static Outline> {
        OUTLINES.iter().find(|o| o.id == id)
    }

    pub fn n_edges(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge(&self, i: usize) -> ([f64; 2], [f64; 2]) {
        (
            self.vertices[i],
            self.vertices[(i + 1) % self.vertices.len()],
        )
    }

    pub fn cutout_center(&self, k: usize) -> [f64; 2] {
        let (edge, s) = self.cutouts[k];
        let (a, b) = self.edge(edge);
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        point_in_polygon(p, self.vertices)
    }
}

/// Geometric parameters of one seat. `hole_radii` lists the cutout radii
/// first (one per outline cutout) followed by the interior hole radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub outline_id: String,
    pub hole_radii: Vec<f64>,
    pub interior_hole_centers: Vec<[f64; 2]>,
    pub target_edge_length: f64,
}

impl GeometryParams {
    pub fn outline(&self) -> Result<&'static Outline, MeshError> {
        Outline::by_id(&self.outline_id)
            .ok_or_else(|| MeshError::Invalid(format!("unknown outline '{}'", self.outline_id)))
    }

    pub fn n_interior_holes(&self) -> usize {
        self.interior_hole_centers.len()
    }

    pub fn cutout_radii(&self) -> Result<&[f64], MeshError> {
        let n = self.outline()?.cutouts.len();
        Ok(&self.hole_radii[..n.min(self.hole_radii.len())])
    }

    /// (centre, radius) of each interior hole.
    pub fn interior_holes(&self) -> Result<Vec<([f64; 2], f64)>, MeshError> {
        let n_cut = self.outline()?.cutouts.len();
        Ok(self
            .interior_hole_centers
            .iter()
            .zip(&self.hole_radii[n_cut..])
            .map(|(&c, &r)| (c, r))
            .collect())
    }

    /// Checks the clearance invariants: every hole strictly inside the outline
    /// and pairwise disjoint, both with margin `2 * target_edge_length`.
    pub fn validate(&self) -> Result<(), MeshError> {
        let outline = self.outline()?;
        let h = self.target_edge_length;
        if !(h > 0.0 && h.is_finite()) {
            return Err(MeshError::Invalid("target edge length must be positive".into()));
        }
        let n_cut = outline.cutouts.len();
        if self.hole_radii.len() != n_cut + self.interior_hole_centers.len() {
            return Err(MeshError::Invalid(format!(
                "expected {} radii, got {}",
                n_cut + self.interior_hole_centers.len(),
                self.hole_radii.len()
            )));
        }
        if self.hole_radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(MeshError::Invalid("hole radii must be positive".into()));
        }
        let clearance = 2.0 * h;

        // (centre, radius) of every circle, cutouts first.
        let mut circles: Vec<([f64; 2], f64)> = Vec::new();
        for k in 0..n_cut {
            let (edge, s) = outline.cutouts[k];
            let (a, b) = outline.edge(edge);
            let len = dist(a, b);
            let r = self.hole_radii[k];
            if r + clearance > s.min(1.0 - s) * len {
                return Err(MeshError::Invalid(format!("cutout {k} does not fit its edge")));
            }
            let c = outline.cutout_center(k);
            for e in (0..outline.n_edges()).filter(|&e| e != edge) {
                let (p, q) = outline.edge(e);
                if point_segment_distance(c, p, q) < r + clearance {
                    return Err(MeshError::Invalid(format!("cutout {k} too close to edge {e}")));
                }
            }
            circles.push((c, r));
        }
        for (c, r) in self.interior_holes()? {
            if !outline.contains(c) {
                return Err(MeshError::Invalid("interior hole centre outside outline".into()));
            }
            for e in 0..outline.n_edges() {
                let (p, q) = outline.edge(e);
                if point_segment_distance(c, p, q) < r + clearance {
                    return Err(MeshError::Invalid(format!(
                        "interior hole too close to outline edge {e}"
                    )));
                }
            }
            circles.push((c, r));
        }
        for i in 0..circles.len() {
            for j in (i + 1)..circles.len() {
                let (ci, ri) = circles[i];
                let (cj, rj) = circles[j];
                if dist(ci, cj) < ri + rj + clearance {
                    return Err(MeshError::Invalid(format!("holes {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }
}

/// Min/max bounds for every sampled geometric parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingRanges {
    pub outline_id: String,
    /// One (min, max) radius range per outline cutout.
    pub cutout_radius: Vec<(f64, f64)>,
    pub interior_radius: (f64, f64),
    pub center_x: (f64, f64),
    pub center_y: (f64, f64),
    pub target_edge_length: f64,
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            outline_id: OUTLINE_SEAT_V1.id.to_string(),
            cutout_radius: vec![(0.03, 0.07), (0.04, 0.09)],
            interior_radius: (0.03, 0.07),
            center_x: (0.12, 0.32),
            center_y: (0.10, 0.34),
            target_edge_length: 0.033,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// Draws a valid parameter set by rejection sampling. Deterministic in `seed`.
pub fn generate_geometry(
    seed: u64,
    n_interior_holes: usize,
    ranges: &SamplingRanges,
) -> Result<GeometryParams, MeshError> {
    let outline = Outline::by_id(&ranges.outline_id)
        .ok_or_else(|| MeshError::Invalid(format!("unknown outline '{}'", ranges.outline_id)))?;
    if ranges.cutout_radius.len() != outline.cutouts.len() {
        return Err(MeshError::Invalid(format!(
            "outline has {} cutouts but {} radius ranges were given",
            outline.cutouts.len(),
            ranges.cutout_radius.len()
        )));
    }
    if n_interior_holes == 0 {
        return Err(MeshError::Invalid("at least one interior hole is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    for _ in 0..MAX_ATTEMPTS {
        let mut hole_radii: Vec<f64> = ranges
            .cutout_radius
            .iter()
            .map(|&r| draw(&mut rng, r))
            .collect();
        let mut centers = Vec::with_capacity(n_interior_holes);
        for _ in 0..n_interior_holes {
            hole_radii.push(draw(&mut rng, ranges.interior_radius));
            centers.push([draw(&mut rng, ranges.center_x), draw(&mut rng, ranges.center_y)]);
        }
        let params = GeometryParams {
            outline_id: outline.id.to_string(),
            hole_radii,
            interior_hole_centers: centers,
            target_edge_length: ranges.target_edge_length,
        };
        if params.validate().is_ok() {
            return Ok(params);
        }
    }
    Err(MeshError::RejectionExhausted(MAX_ATTEMPTS))
}

pub(crate) fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Even-odd ray casting.
pub(crate) fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}
