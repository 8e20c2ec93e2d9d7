//! Incremental Bowyer-Watson Delaunay triangulation of a point set.

#[derive(Clone, Copy)]
struct Tri {
    v: [usize; 3],
    center: [f64; 2],
    radius2: f64,
}

impl Tri {
    fn new(v: [usize; 3], pts: &[[f64; 2]]) -> Self {
        let (center, radius2) = circumcircle(pts[v[0]], pts[v[1]], pts[v[2]]);
        Tri { v, center, radius2 }
    }

    fn encloses(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        dx * dx + dy * dy < self.radius2
    }
}

fn circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> ([f64; 2], f64) {
    let (bx, by) = (b[0] - a[0], b[1] - a[1]);
    let (cx, cy) = (c[0] - a[0], c[1] - a[1]);
    let d = 2.0 * (bx * cy - by * cx);
    if d.abs() < f64::MIN_POSITIVE {
        return ([f64::INFINITY, f64::INFINITY], f64::INFINITY);
    }
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let ux = (cy * b2 - by * c2) / d;
    let uy = (bx * c2 - cx * b2) / d;
    ([a[0] + ux, a[1] + uy], ux * ux + uy * uy)
}

/// Counter-clockwise Delaunay triangles of `points` (indices into `points`).
pub(crate) fn delaunay(points: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let n = points.len();
    if n < 3 {
        return Vec::new();
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let mid = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5];
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.push([mid[0] - 40.0 * span, mid[1] - 30.0 * span]);
    pts.push([mid[0] + 40.0 * span, mid[1] - 30.0 * span]);
    pts.push([mid[0], mid[1] + 40.0 * span]);

    let mut tris = vec![Tri::new([n, n + 1, n + 2], &pts)];
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        edges.clear();
        let mut k = 0;
        while k < tris.len() {
            if tris[k].encloses(p) {
                let t = tris.swap_remove(k);
                for e in 0..3 {
                    edges.push((t.v[e], t.v[(e + 1) % 3]));
                }
            } else {
                k += 1;
            }
        }
        // Cavity boundary: edges not shared by two removed triangles.
        for e in 0..edges.len() {
            let (a, b) = edges[e];
            let shared = edges
                .iter()
                .enumerate()
                .any(|(f, &(c, d))| f != e && c == b && d == a);
            if !shared {
                tris.push(Tri::new([a, b, i], &pts));
            }
        }
    }
    let mut out: Vec<[usize; 3]> = tris
        .into_iter()
        .filter(|t| t.v.iter().all(|&v| v < n))
        .map(|t| t.v)
        .collect();
    out.sort_unstable();
    out
}
