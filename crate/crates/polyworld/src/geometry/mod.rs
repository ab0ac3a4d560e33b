//! Polygon data model, permutation-matrix encoding/decoding, and exact
//! geometric predicates.
//!
//! Coordinates live in image space: `x` grows rightwards, `y` grows
//! downwards, and positions are normalized to `[0, 1]` relative to the image
//! extent (pixel conversion happens only at rasterization / export time).
//! With y pointing down, a ring that appears clockwise on screen has a
//! *positive* shoelace sum; [`Orientation`] follows that convention.
//!
//! Polygon connectivity is carried by a [`PermutationMatrix`]: row `i` holds
//! a single 1 in the column of the next clockwise vertex of vertex `i`.
//! Three structural constraints apply: the matrix is a bijection, its
//! transpose is the counterclockwise matrix, and fixed points (`next[i] == i`)
//! mark vertices that carry no polygon and can be discarded.

mod geojson;

pub use geojson::{export_geojson, import_geojson};

use crate::error::{Error, Result};

/// A 2-D point in normalized image coordinates.
///
/// Positions usually lie in `[0, 1]`; refinement offsets may push them
/// slightly outside the frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    fn sub(&self, o: &Point) -> (f64, f64) {
        (self.x - o.x, self.y - o.y)
    }
}

/// Ring orientation in image coordinates (y down).
///
/// `Clockwise` means clockwise as drawn on screen, which corresponds to a
/// positive shoelace sum; in a y-up mathematical frame the same ring would
/// be labeled counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Orientation {
    Clockwise,
    Counterclockwise,
}

/// A simple closed ring of at least three vertices.
///
/// The ring is implicitly closed (the last vertex connects back to the
/// first). No two consecutive vertices may coincide exactly, and the stored
/// orientation always matches the sign of [`signed_area`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Polygon {
    vertices: Vec<Point>,
    orientation: Orientation,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::degenerate(format!(
                "polygon needs >= 3 vertices, got {}",
                vertices.len()
            )));
        }
        for v in &vertices {
            if !v.is_finite() {
                return Err(Error::degenerate("polygon vertex is not finite"));
            }
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            if a == b {
                return Err(Error::degenerate(format!(
                    "consecutive duplicate vertex at index {i}"
                )));
            }
        }
        let mut poly = Polygon {
            vertices,
            orientation: Orientation::Clockwise,
        };
        poly.orientation = if signed_area(&poly) >= 0.0 {
            Orientation::Clockwise
        } else {
            Orientation::Counterclockwise
        };
        Ok(poly)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Iterator over directed edges `(v_i, v_{i+1})`, including the closing
    /// edge back to the first vertex.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Same ring traversed in the opposite direction.
    pub fn reversed(&self) -> Polygon {
        let mut v = self.vertices.clone();
        v.reverse();
        Polygon::new(v).expect("reversed ring stays valid")
    }
}

/// N×N hard assignment: row `i` carries a single 1 in column `next[i]`,
/// the index of the next clockwise vertex. `next[i] == i` marks a discarded
/// vertex.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PermutationMatrix {
    next: Vec<usize>,
}

impl PermutationMatrix {
    /// Build from the row → column map; fails unless it is a bijection.
    pub fn new(next: Vec<usize>) -> Result<Self> {
        let n = next.len();
        let mut seen = vec![false; n];
        for &j in &next {
            if j >= n {
                return Err(Error::contract(format!(
                    "permutation target {j} out of range for size {n}"
                )));
            }
            if seen[j] {
                return Err(Error::contract(format!(
                    "permutation target {j} appears twice"
                )));
            }
            seen[j] = true;
        }
        Ok(PermutationMatrix { next })
    }

    pub fn identity(n: usize) -> Self {
        PermutationMatrix {
            next: (0..n).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.next.len()
    }

    pub fn next_of(&self, i: usize) -> usize {
        self.next[i]
    }

    pub fn targets(&self) -> &[usize] {
        &self.next
    }

    pub fn is_identity(&self) -> bool {
        self.next.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// The counterclockwise matrix: transposing the 0/1 matrix inverts the
    /// permutation.
    pub fn transpose(&self) -> PermutationMatrix {
        let mut inv = vec![0usize; self.next.len()];
        for (i, &j) in self.next.iter().enumerate() {
            inv[j] = i;
        }
        PermutationMatrix { next: inv }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &PermutationMatrix) -> PermutationMatrix {
        assert_eq!(self.size(), other.size(), "size mismatch in compose");
        PermutationMatrix {
            next: (0..self.size()).map(|i| self.next[other.next[i]]).collect(),
        }
    }

    /// Non-trivial cycles (length >= 2), each rotated to start at its
    /// smallest index, ordered by that index. Fixed points are omitted.
    pub fn cycles(&self) -> Vec<Vec<usize>> {
        let n = self.next.len();
        let mut visited = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if visited[start] || self.next[start] == start {
                visited[start] = true;
                continue;
            }
            let mut cycle = Vec::new();
            let mut cur = start;
            while !visited[cur] {
                visited[cur] = true;
                cycle.push(cur);
                cur = self.next[cur];
            }
            out.push(cycle);
        }
        out
    }

    /// Dense 0/1 row-major matrix, mostly for loss-mask construction.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.next.len();
        let mut m = vec![0.0; n * n];
        for (i, &j) in self.next.iter().enumerate() {
            m[i * n + j] = 1.0;
        }
        m
    }
}

/// A list of decoded polygons together with the vertex indices each ring
/// occupies in the originating vertex set (empty when not applicable).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PolygonSet {
    polygons: Vec<Polygon>,
    source_indices: Vec<Vec<usize>>,
}

impl PolygonSet {
    pub fn new(polygons: Vec<Polygon>) -> Self {
        let source_indices = vec![Vec::new(); polygons.len()];
        PolygonSet {
            polygons,
            source_indices,
        }
    }

    /// Build with per-polygon source indices; indices must be disjoint
    /// across polygons and match each ring's vertex count.
    pub fn with_sources(polygons: Vec<Polygon>, source_indices: Vec<Vec<usize>>) -> Result<Self> {
        if polygons.len() != source_indices.len() {
            return Err(Error::contract(
                "source_indices length must match polygon count",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for (poly, src) in polygons.iter().zip(&source_indices) {
            if !src.is_empty() && src.len() != poly.len() {
                return Err(Error::contract(
                    "source index count must match ring vertex count",
                ));
            }
            for &i in src {
                if !seen.insert(i) {
                    return Err(Error::contract(format!(
                        "source index {i} shared by two polygons"
                    )));
                }
            }
        }
        Ok(PolygonSet {
            polygons,
            source_indices,
        })
    }

    pub fn polygons(&self) -> &[Polygon] {
        &self.polygons
    }

    pub fn sources(&self) -> &[Vec<usize>] {
        &self.source_indices
    }

    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Polygon, &Vec<usize>)> {
        self.polygons.iter().zip(self.source_indices.iter())
    }

    /// Total vertex count across all rings.
    pub fn vertex_count(&self) -> usize {
        self.polygons.iter().map(|p| p.len()).sum()
    }
}

/// Convert a permutation matrix plus vertex positions into polygons.
///
/// Every cycle of length >= `min_ring` becomes one ring traversed in cycle
/// order; fixed points and shorter cycles are discarded. Exact consecutive
/// duplicate positions within a cycle are collapsed (and the ring dropped if
/// that leaves fewer than `min_ring` vertices), which keeps the ring a valid
/// [`Polygon`] on pathological inputs.
pub fn decode_permutation(
    positions: &[Point],
    perm: &PermutationMatrix,
    min_ring: usize,
) -> Result<PolygonSet> {
    if positions.len() != perm.size() {
        return Err(Error::contract(format!(
            "positions length {} != permutation size {}",
            positions.len(),
            perm.size()
        )));
    }
    if min_ring < 3 {
        return Err(Error::contract("min_ring must be >= 3"));
    }
    let mut polygons = Vec::new();
    let mut sources = Vec::new();
    for cycle in perm.cycles() {
        if cycle.len() < min_ring {
            continue;
        }
        let mut ring: Vec<(usize, Point)> =
            cycle.iter().map(|&i| (i, positions[i])).collect();
        // Collapse exact consecutive duplicates, including the wrap-around.
        let mut k = 0;
        while ring.len() >= 2 && k < ring.len() {
            let next = (k + 1) % ring.len();
            if ring[k].1 == ring[next].1 {
                ring.remove(next);
            } else {
                k += 1;
            }
        }
        if ring.len() < min_ring {
            continue;
        }
        let (idx, pts): (Vec<usize>, Vec<Point>) = ring.into_iter().unzip();
        polygons.push(Polygon::new(pts)?);
        sources.push(idx);
    }
    PolygonSet::with_sources(polygons, sources)
}

/// Inverse of [`decode_permutation`]: write each ring's cycle into a
/// permutation of size `n`, leaving unused indices as fixed points.
pub fn encode_polygons(polys: &PolygonSet, n: usize) -> Result<PermutationMatrix> {
    let mut next: Vec<usize> = (0..n).collect();
    let mut used = vec![false; n];
    for (poly, src) in polys.iter() {
        if src.len() != poly.len() {
            return Err(Error::contract(
                "polygon lacks source indices; cannot encode",
            ));
        }
        for &i in src {
            if i >= n {
                return Err(Error::contract(format!(
                    "source index {i} out of range for size {n}"
                )));
            }
            if used[i] {
                return Err(Error::contract(format!(
                    "source index {i} used by more than one polygon"
                )));
            }
            used[i] = true;
        }
        let k = src.len();
        for t in 0..k {
            next[src[t]] = src[(t + 1) % k];
        }
    }
    PermutationMatrix::new(next)
}

/// Unsigned angle at `v` between rays `v -> u` and `v -> w`, in `[0, π]`.
pub fn interior_angle(u: Point, v: Point, w: Point) -> Result<f64> {
    let a = u.sub(&v);
    let b = w.sub(&v);
    if (a.0 == 0.0 && a.1 == 0.0) || (b.0 == 0.0 && b.1 == 0.0) {
        return Err(Error::degenerate("zero-length ray in interior_angle"));
    }
    let cross = a.0 * b.1 - a.1 * b.0;
    let dot = a.0 * b.0 + a.1 * b.1;
    Ok(cross.abs().atan2(dot))
}

/// Shoelace signed area. Positive for rings that are clockwise on screen
/// (image coordinates, y down).
pub fn signed_area(poly: &Polygon) -> f64 {
    let v = poly.vertices();
    let n = v.len();
    let mut sum = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        sum += a.x * b.y - b.x * a.y;
    }
    0.5 * sum
}

/// Exact winding-number point-in-polygon test.
///
/// Sums the signed angles subtended by each edge at `x`; the point is inside
/// iff the total is ±2π (it is ~0 outside). Points lying exactly on an edge
/// are resolved by an even-odd cast of a horizontal ray towards +x, so the
/// boundary rule is deterministic.
pub fn exact_winding_inside(x: Point, poly: &Polygon) -> bool {
    const EPS: f64 = 1e-12;
    let mut total = 0.0;
    for (u, v) in poly.edges() {
        let a = u.sub(&x);
        let b = v.sub(&x);
        let cross = a.0 * b.1 - a.1 * b.0;
        let dot = a.0 * b.0 + a.1 * b.1;
        if cross.abs() <= EPS && dot <= EPS {
            // x lies on the segment (collinear and between the endpoints).
            return even_odd_inside(x, poly);
        }
        total += cross.atan2(dot);
    }
    total.abs() > std::f64::consts::PI
}

/// Even-odd ray cast with a horizontal ray towards +x; half-open edge rule
/// so vertices are counted once.
fn even_odd_inside(x: Point, poly: &Polygon) -> bool {
    let mut inside = false;
    for (a, b) in poly.edges() {
        if (a.y > x.y) != (b.y > x.y) {
            let t = (x.y - a.y) / (b.y - a.y);
            let xi = a.x + t * (b.x - a.x);
            if xi > x.x {
                inside = !inside;
            }
        }
    }
    inside
}
