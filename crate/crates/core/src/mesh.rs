//! Boundary-fitted triangulations of the fluid domain with tagged boundary
//! edges and second-order geometry nodes.
//!
//! Meshing runs in four stages. Boundary points are equidistributed against a
//! size field that shrinks toward the body and into the two wall gaps.
//! Interior points come from the centres of a quadtree graded by the same
//! field, relaxed by a few Laplacian sweeps. A constrained Delaunay
//! triangulation is then refined for angle quality. Finally, new body points
//! are projected onto the exact curve, and so are the midpoints of body
//! edges, which makes body-adjacent triangles isoparametric.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use nalgebra::{Matrix2, Point2, Vector2};
use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2 as SPoint, RefinementParameters,
    Triangulation,
};
use thiserror::Error;

use crate::geometry::{BodyShape, Channel, Layout, Placement};
use crate::quadrature::{triangle_degree4, triangle_degree6};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("{side} gap {gap} is below the resolvable limit {required}")]
    GapTooSmall {
        side: &'static str,
        gap: f64,
        required: f64,
    },
    #[error("body reaches the channel end (horizontal clearance {clearance})")]
    BodyTooWide { clearance: f64 },
    #[error("mesh would need about {estimate} vertices, above the cap {cap}")]
    TooManyVertices { estimate: usize, cap: usize },
    #[error("triangulation failed: {0}")]
    Triangulation(String),
    #[error("mesh quality {min_angle:.2} deg is below the required {required} deg")]
    PoorQuality { min_angle: f64, required: f64 },
    #[error("geometry is not mirror symmetric: {0}")]
    NotSymmetric(String),
    #[error("mesh carries no geometry to rebuild from")]
    NoGeometry,
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("mesh file error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<io::Error> for MeshError {
    fn from(e: io::Error) -> Self {
        MeshError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Bottom,
    Top,
    Left,
    Right,
    Body,
}

impl BoundaryTag {
    pub const ALL: [BoundaryTag; 5] = [
        BoundaryTag::Bottom,
        BoundaryTag::Top,
        BoundaryTag::Left,
        BoundaryTag::Right,
        BoundaryTag::Body,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundaryTag::Bottom => "Gamma_b",
            BoundaryTag::Top => "Gamma_t",
            BoundaryTag::Left => "Gamma_l",
            BoundaryTag::Right => "Gamma_r",
            BoundaryTag::Body => "Body",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshOptions {
    /// Target edge length away from the body.
    pub size: f64,
    /// Growth of the local size per unit distance from the refined zones.
    pub grading: f64,
    /// Target edge length on the body boundary.
    pub body_size: f64,
    /// Smallest local size the mesher accepts in a gap.
    pub min_size: f64,
    pub max_vertices: usize,
    pub smoothing_sweeps: usize,
    /// Body edges are capped at this multiple of the local radius of
    /// curvature.
    pub curvature_factor: f64,
    /// Element layers across each wall gap.
    pub gap_layers: f64,
}

impl MeshOptions {
    pub fn with_size(size: f64) -> Self {
        Self {
            size,
            body_size: size / 3.0,
            min_size: size / 200.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), MeshError> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(MeshError::InvalidOption(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.size, "size")?;
        pos(self.grading, "grading")?;
        pos(self.gap_layers, "gap_layers")?;
        pos(self.body_size, "body_size")?;
        pos(self.min_size, "min_size")?;
        pos(self.curvature_factor, "curvature_factor").or_else(|e| {
            if self.curvature_factor == f64::INFINITY {
                Ok(())
            } else {
                Err(e)
            }
        })
    }
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            size: 0.1,
            grading: 0.3,
            body_size: 0.1 / 3.0,
            min_size: 5e-4,
            max_vertices: 120_000,
            smoothing_sweeps: 4,
            curvature_factor: 0.35,
            gap_layers: 3.0,
        }
    }
}

/// The geometry a mesh was generated from.
#[derive(Debug, Clone)]
pub struct MeshDomain {
    pub channel: Channel,
    pub shape: BodyShape,
    pub placement: Placement,
    pub options: MeshOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub edge: usize,
    pub tag: BoundaryTag,
}

/// Conforming triangulation with quadratic geometry.
///
/// Global node numbering puts the vertices first and the edge nodes after
/// them: node `nv + e` sits on edge `e`. Element node order is the three
/// vertices, then the nodes on edges `(0,1)`, `(1,2)`, `(2,0)`.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point2<f64>>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    tri_edges: Vec<[usize; 3]>,
    edge_nodes: Vec<Point2<f64>>,
    edge_tags: Vec<Option<BoundaryTag>>,
    boundary: Vec<BoundaryEdge>,
    size: f64,
    domain: Option<MeshDomain>,
}

/// Minimum and maximum interior angles (degrees), worst aspect ratio
/// (circumradius over twice the inradius) and element counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub min_angle: f64,
    pub max_angle: f64,
    pub max_aspect: f64,
    pub vertices: usize,
    pub triangles: usize,
    pub edges: usize,
    pub boundary_edges: Vec<(BoundaryTag, usize)>,
    pub curved_triangles: usize,
}

impl Mesh {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Vertices plus edge nodes.
    pub fn num_nodes(&self) -> usize {
        self.vertices.len() + self.edges.len()
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn edge_tag(&self, e: usize) -> Option<BoundaryTag> {
        self.edge_tags[e]
    }

    pub fn size(&self) -> f64 {
        self.size
    }

    pub fn domain(&self) -> Option<&MeshDomain> {
        self.domain.as_ref()
    }

    pub fn node(&self, i: usize) -> Point2<f64> {
        let nv = self.vertices.len();
        if i < nv {
            self.vertices[i]
        } else {
            self.edge_nodes[i - nv]
        }
    }

    pub fn nodes(&self) -> Vec<Point2<f64>> {
        (0..self.num_nodes()).map(|i| self.node(i)).collect()
    }

    pub fn element_edges(&self, t: usize) -> [usize; 3] {
        self.tri_edges[t]
    }

    pub fn element_nodes(&self, t: usize) -> [usize; 6] {
        let [a, b, c] = self.triangles[t];
        let nv = self.vertices.len();
        let [e0, e1, e2] = self.tri_edges[t];
        [a, b, c, nv + e0, nv + e1, nv + e2]
    }

    pub fn element_coords(&self, t: usize) -> [Point2<f64>; 6] {
        self.element_nodes(t).map(|i| self.node(i))
    }

    /// True when one of the element's edges lies on the body.
    pub fn is_curved(&self, t: usize) -> bool {
        self.tri_edges[t]
            .iter()
            .any(|&e| self.edge_tags[e] == Some(BoundaryTag::Body))
    }

    /// Area with the quadratic geometry map.
    pub fn area(&self) -> f64 {
        let q4 = triangle_degree4();
        let q6 = triangle_degree6();
        (0..self.triangles.len())
            .map(|t| {
                let x = self.element_coords(t);
                let rule = if self.is_curved(t) { &q6 } else { &q4 };
                rule.iter()
                    .map(|q| p2_jacobian(&x, q.xi, q.eta).determinant() * q.weight)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Area of the straight-sided triangles.
    pub fn straight_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * ((b - a).perp(&(c - a)))
    }

    /// Largest distance between a straight body-edge midpoint and its curved
    /// edge node.
    pub fn max_chord_deviation(&self) -> f64 {
        self.boundary
            .iter()
            .filter(|b| b.tag == BoundaryTag::Body)
            .map(|b| {
                let [i, j] = self.edges[b.edge];
                let mid = nalgebra::center(&self.vertices[i], &self.vertices[j]);
                (mid - self.edge_nodes[b.edge]).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn quality_report(&self) -> QualityReport {
        let mut min_angle = 180.0_f64;
        let mut max_angle = 0.0_f64;
        let mut max_aspect = 0.0_f64;
        for t in &self.triangles {
            let p = t.map(|i| self.vertices[i]);
            let angles = triangle_angles(&p);
            for a in angles {
                min_angle = min_angle.min(a);
                max_angle = max_angle.max(a);
            }
            let l = [(p[1] - p[0]).norm(), (p[2] - p[1]).norm(), (p[0] - p[2]).norm()];
            let area = 0.5 * (p[1] - p[0]).perp(&(p[2] - p[0])).abs();
            let s = 0.5 * (l[0] + l[1] + l[2]);
            let circum = l[0] * l[1] * l[2] / (4.0 * area);
            let inr = area / s;
            max_aspect = max_aspect.max(circum / (2.0 * inr));
        }
        let boundary_edges = BoundaryTag::ALL
            .iter()
            .map(|&tag| (tag, self.boundary.iter().filter(|b| b.tag == tag).count()))
            .collect();
        QualityReport {
            min_angle,
            max_angle,
            max_aspect,
            vertices: self.vertices.len(),
            triangles: self.triangles.len(),
            edges: self.edges.len(),
            boundary_edges,
            curved_triangles: (0..self.triangles.len()).filter(|&t| self.is_curved(t)).count(),
        }
    }

    /// `V - E + T` for the triangulated domain; 0 for a region with exactly
    /// one hole.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.triangles.len() as i64
    }

    /// Every interior edge borders two triangles and every tagged edge one.
    pub fn is_conforming(&self) -> bool {
        let mut count = vec![0u8; self.edges.len()];
        for te in &self.tri_edges {
            for &e in te {
                count[e] += 1;
            }
        }
        count.iter().zip(&self.edge_tags).all(|(&c, tag)| match tag {
            Some(_) => c == 1,
            None => c == 2,
        })
    }

    /// Largest violation of the tag/location rule: wall tags must lie on their
    /// wall, body tags (vertices and edge nodes) on the body curve.
    pub fn tag_location_error(&self) -> f64 {
        let Some(dom) = &self.domain else {
            return 0.0;
        };
        let l = dom.channel.half_length();
        let h = dom.channel.half_height();
        let mut worst = 0.0_f64;
        for b in &self.boundary {
            let [i, j] = self.edges[b.edge];
            for p in [self.vertices[i], self.vertices[j], self.edge_nodes[b.edge]] {
                let err = match b.tag {
                    BoundaryTag::Bottom => (p.y + h).abs(),
                    BoundaryTag::Top => (p.y - h).abs(),
                    BoundaryTag::Left => (p.x + l).abs(),
                    BoundaryTag::Right => (p.x - l).abs(),
                    BoundaryTag::Body => {
                        crate::geometry::signed_distance(&dom.shape, &dom.placement, &p).abs()
                    }
                };
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Plain-text dump: a header line, then counted sections of vertices,
    /// triangles and tagged boundary edges (with their edge node).
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "channel-fsi-mesh 1 size {:e}", self.size)?;
        writeln!(w, "vertices {}", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{:e} {:e}", v.x, v.y)?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "boundary {}", self.boundary.len())?;
        for b in &self.boundary {
            let [i, j] = self.edges[b.edge];
            let m = self.edge_nodes[b.edge];
            writeln!(w, "{} {} {} {:e} {:e}", i, j, b.tag, m.x, m.y)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, MeshError> {
        let all: Vec<String> = r.lines().collect::<Result<_, _>>()?;
        let perr = |line: usize, m: &str| MeshError::Parse {
            line,
            message: m.to_string(),
        };
        let mut cursor = 0usize;
        let mut next = |what: &str| -> Result<(usize, &str), MeshError> {
            let line = all.get(cursor).ok_or_else(|| MeshError::Parse {
                line: cursor + 1,
                message: format!("unexpected end of file, expected {what}"),
            })?;
            cursor += 1;
            Ok((cursor, line.as_str()))
        };
        let (ln, header) = next("header")?;
        let hdr: Vec<&str> = header.split_whitespace().collect();
        if hdr.len() != 4 || hdr[0] != "channel-fsi-mesh" || hdr[1] != "1" || hdr[2] != "size" {
            return Err(perr(ln, "bad header"));
        }
        let size: f64 = hdr[3].parse().map_err(|_| perr(ln, "bad size"))?;
        let count = |(ln, s): (usize, &str), name: &str| -> Result<usize, MeshError> {
            let mut it = s.split_whitespace();
            if it.next() != Some(name) {
                return Err(perr(ln, &format!("expected section {name}")));
            }
            it.next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| perr(ln, "bad count"))
        };
        let nv = count(next("vertices")?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, s) = next("vertex")?;
            let v: Vec<f64> = s
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| perr(ln, "bad coordinate")))
                .collect::<Result<_, _>>()?;
            if v.len() != 2 {
                return Err(perr(ln, "vertex needs two coordinates"));
            }
            vertices.push(Point2::new(v[0], v[1]));
        }
        let nt = count(next("triangles")?, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, s) = next("triangle")?;
            let v: Vec<usize> = s
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| perr(ln, "bad index")))
                .collect::<Result<_, _>>()?;
            if v.len() != 3 || v.iter().any(|&i| i >= nv) {
                return Err(perr(ln, "triangle needs three valid indices"));
            }
            triangles.push([v[0], v[1], v[2]]);
        }
        let nb = count(next("boundary")?, "boundary")?;
        let mut tagged = Vec::with_capacity(nb);
        for _ in 0..nb {
            let (ln, s) = next("boundary edge")?;
            let f: Vec<&str> = s.split_whitespace().collect();
            if f.len() != 5 {
                return Err(perr(ln, "boundary edge needs five fields"));
            }
            let i: usize = f[0].parse().map_err(|_| perr(ln, "bad index"))?;
            let j: usize = f[1].parse().map_err(|_| perr(ln, "bad index"))?;
            let tag = BoundaryTag::from_name(f[2]).ok_or_else(|| perr(ln, "unknown tag"))?;
            let mx: f64 = f[3].parse().map_err(|_| perr(ln, "bad coordinate"))?;
            let my: f64 = f[4].parse().map_err(|_| perr(ln, "bad coordinate"))?;
            if i >= nv || j >= nv {
                return Err(perr(ln, "index out of range"));
            }
            tagged.push(([i, j], tag, Point2::new(mx, my)));
        }
        Mesh::from_parts(vertices, triangles, &tagged, size, None)
    }

    /// Build edge tables from triangles and a list of tagged boundary edges
    /// with their edge nodes. Untagged edges get straight midpoints.
    fn from_parts(
        vertices: Vec<Point2<f64>>,
        triangles: Vec<[usize; 3]>,
        tagged: &[([usize; 2], BoundaryTag, Point2<f64>)],
        size: f64,
        domain: Option<MeshDomain>,
    ) -> Result<Self, MeshError> {
        let mut index: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut tri_edges = Vec::with_capacity(triangles.len());
        for t in &triangles {
            let mut te = [0; 3];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                te[k] = *index.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
            }
            tri_edges.push(te);
        }
        let mut edge_nodes: Vec<Point2<f64>> = edges
            .iter()
            .map(|&[a, b]| nalgebra::center(&vertices[a], &vertices[b]))
            .collect();
        let mut edge_tags = vec![None; edges.len()];
        let mut boundary = Vec::with_capacity(tagged.len());
        for &([a, b], tag, node) in tagged {
            let key = [a.min(b), a.max(b)];
            let e = *index.get(&key).ok_or_else(|| {
                MeshError::Triangulation(format!("boundary edge {key:?} is not a mesh edge"))
            })?;
            edge_tags[e] = Some(tag);
            edge_nodes[e] = node;
            boundary.push(BoundaryEdge { edge: e, tag });
        }
        boundary.sort_by_key(|b| (b.tag, b.edge));
        Ok(Self {
            vertices,
            triangles,
            edges,
            tri_edges,
            edge_nodes,
            edge_tags,
            boundary,
            size,
            domain,
        })
    }
}

/// Jacobian of the quadratic map of a six-node triangle at `(xi, eta)`.
pub fn p2_jacobian(x: &[Point2<f64>; 6], xi: f64, eta: f64) -> Matrix2<f64> {
    let d = crate::fem::p2_shape_gradients(xi, eta);
    let mut j = Matrix2::zeros();
    for k in 0..6 {
        j[(0, 0)] += x[k].x * d[k].x;
        j[(0, 1)] += x[k].x * d[k].y;
        j[(1, 0)] += x[k].y * d[k].x;
        j[(1, 1)] += x[k].y * d[k].y;
    }
    j
}

fn triangle_angles(p: &[Point2<f64>; 3]) -> [f64; 3] {
    let ang = |a: Point2<f64>, b: Point2<f64>, c: Point2<f64>| {
        let (u, v) = (b - a, c - a);
        u.perp(&v).abs().atan2(u.dot(&v)).to_degrees()
    };
    [ang(p[0], p[1], p[2]), ang(p[1], p[2], p[0]), ang(p[2], p[0], p[1])]
}

/// Local target edge length.
#[derive(Debug, Clone)]
struct SizeField {
    size: f64,
    grading: f64,
    body_size: f64,
    gap_boxes: Vec<(f64, [f64; 4])>,
    shape: BodyShape,
    placement: Placement,
}

impl SizeField {
    fn eval(&self, p: &Point2<f64>) -> f64 {
        let d_body = crate::geometry::signed_distance(&self.shape, &self.placement, p).max(0.0);
        let mut h = self.size.min(self.body_size + self.grading * d_body);
        for (h0, [x0, x1, y0, y1]) in &self.gap_boxes {
            let dx = (x0 - p.x).max(p.x - x1).max(0.0);
            let dy = (y0 - p.y).max(p.y - y1).max(0.0);
            h = h.min(h0 + self.grading * dx.hypot(dy));
        }
        h
    }

    fn min_size(&self) -> f64 {
        self.gap_boxes
            .iter()
            .map(|g| g.0)
            .fold(self.size.min(self.body_size), f64::min)
    }
}

/// Boundary input for the triangulator: points, constraint segments with
/// tags (`None` for the mirror line of a half mesh) and which points are on
/// the body.
struct Pslg {
    points: Vec<Point2<f64>>,
    segments: Vec<([usize; 2], Option<BoundaryTag>)>,
}

impl Pslg {
    fn push_chain(&mut self, pts: &[Point2<f64>], tag: Option<BoundaryTag>, closed: bool) -> (usize, usize) {
        let start = self.points.len();
        self.points.extend_from_slice(pts);
        let n = pts.len();
        let last = if closed { n } else { n - 1 };
        for k in 0..last {
            self.segments
                .push(([start + k, start + (k + 1) % n], tag));
        }
        (start, start + n - 1)
    }
}

/// Points at equal steps of `integral ds / h` along a parametric path
/// `t in [t0, t1]`. Returns parameter values including both ends.
fn equidistribute(
    t0: f64,
    t1: f64,
    speed_and_size: &dyn Fn(f64) -> (f64, f64),
    h_min: f64,
    approx_len: f64,
    closed: bool,
) -> Vec<f64> {
    let samples = ((8.0 * approx_len / h_min).ceil() as usize).clamp(400, 400_000);
    let dt = (t1 - t0) / samples as f64;
    let mut cum = vec![0.0; samples + 1];
    let mut prev = {
        let (s, h) = speed_and_size(t0);
        s / h
    };
    for k in 1..=samples {
        let (s, h) = speed_and_size(t0 + dt * k as f64);
        let cur = s / h;
        cum[k] = cum[k - 1] + 0.5 * (prev + cur) * dt;
        prev = cur;
    }
    let total = cum[samples];
    let min_pieces = if closed { 12 } else { 1 };
    let n = (total.round() as usize).max(min_pieces);
    let mut out = Vec::with_capacity(n + 1);
    let mut k = 0;
    for i in 0..=n {
        let target = total * i as f64 / n as f64;
        while k + 1 < samples && cum[k + 1] < target {
            k += 1;
        }
        let span = cum[k + 1] - cum[k];
        let frac = if span > 0.0 {
            ((target - cum[k]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(t0 + dt * (k as f64 + frac));
    }
    out[0] = t0;
    out[n] = t1;
    out
}

fn wall_points(a: Point2<f64>, b: Point2<f64>, field: &SizeField, h_min: f64) -> Vec<Point2<f64>> {
    let len = (b - a).norm();
    let ts = equidistribute(
        0.0,
        1.0,
        &|t| (len, field.eval(&(a + (b - a) * t))),
        h_min,
        len,
        false,
    );
    ts.iter()
        .map(|&t| {
            let mut p = a + (b - a) * t;
            // Keep wall coordinates exact.
            if a.x == b.x {
                p.x = a.x;
            }
            if a.y == b.y {
                p.y = a.y;
            }
            p
        })
        .collect()
}

/// Body boundary points between parameters `t0 < t1`, sized by the field and
/// by the local curvature.
fn body_params(
    shape: &BodyShape,
    placement: &Placement,
    t0: f64,
    t1: f64,
    field: &SizeField,
    h_min: f64,
    closed: bool,
    curvature_factor: f64,
) -> Vec<f64> {
    let f = |t: f64| {
        let c = shape.eval(t);
        let p = placement.to_world(&c.point);
        let kappa = c.curvature().abs();
        let h = field
            .eval(&p)
            .min(if kappa > 0.0 { curvature_factor / kappa } else { f64::INFINITY });
        (c.velocity.norm(), h)
    };
    let len = shape.perimeter() * (t1 - t0) / shape.period();
    equidistribute(t0, t1, &f, h_min, len, closed)
}

struct Generator<'a> {
    channel: Channel,
    shape: &'a BodyShape,
    placement: Placement,
    field: SizeField,
    options: MeshOptions,
    half: bool,
}

impl Generator<'_> {
    fn inside(&self, p: &Point2<f64>) -> bool {
        let (l, h) = (self.channel.half_length(), self.channel.half_height());
        let y_lo = if self.half { 0.0 } else { -h };
        p.x > -l && p.x < l && p.y > y_lo && p.y < h
            && crate::geometry::signed_distance(self.shape, &self.placement, p) > 0.0
    }

    fn boundary_distance(&self, p: &Point2<f64>) -> f64 {
        let (l, h) = (self.channel.half_length(), self.channel.half_height());
        let y_lo = if self.half { 0.0 } else { -h };
        let walls = (l - p.x).min(p.x + l).min(h - p.y).min(p.y - y_lo);
        walls.min(crate::geometry::signed_distance(self.shape, &self.placement, p))
    }

    fn boundary(&self) -> Result<Pslg, MeshError> {
        let (l, h) = (self.channel.half_length(), self.channel.half_height());
        let hm = self.field.min_size();
        let f = &self.field;
        let mut g = Pslg {
            points: Vec::new(),
            segments: Vec::new(),
        };
        let corner = |x, y| Point2::new(x, y);
        let mut ring: Vec<(Vec<Point2<f64>>, Option<BoundaryTag>)> = Vec::new();
        if self.half {
            let cross = self.shape.axis_crossings();
            let x_of = |t: f64| self.shape.eval(t).point.x;
            let by_x = |a: &&f64, b: &&f64| x_of(**a).total_cmp(&x_of(**b));
            let t_right = *cross
                .iter()
                .max_by(by_x)
                .ok_or_else(|| MeshError::NotSymmetric("body does not cross its axis".into()))?;
            let t_left = *cross.iter().min_by(by_x).expect("non-empty");
            let period = self.shape.period();
            let forward = |a: f64, b: f64| if b > a { b } else { b + period };
            // Upper arc from the rightmost to the leftmost crossing; its
            // direction depends on the orientation of the parametrisation.
            let t_end = forward(t_right, t_left);
            let upper_ccw = self.shape.eval(0.5 * (t_right + t_end)).point.y > 0.0;
            let ts = if upper_ccw {
                body_params(self.shape, &self.placement, t_right, t_end, f, hm, false, self.options.curvature_factor)
            } else {
                let t_end = forward(t_left, t_right);
                let mut ts = body_params(self.shape, &self.placement, t_left, t_end, f, hm, false, self.options.curvature_factor);
                ts.reverse();
                ts
            };
            let mut arc: Vec<Point2<f64>> = ts
                .iter()
                .map(|&t| self.placement.to_world(&self.shape.eval(t).point))
                .collect();
            let last = arc.len() - 1;
            arc[0].y = 0.0;
            arc[last].y = 0.0;
            let (x_left, x_right) = (arc[last].x, arc[0].x);
            // Counter-clockwise: axis left part, body arc reversed (left to
            // right over the top is clockwise for the fluid), axis right part,
            // then the walls.
            ring.push((wall_points(corner(-l, 0.0), corner(x_left, 0.0), f, hm), None));
            arc.reverse();
            ring.push((arc, Some(BoundaryTag::Body)));
            ring.push((wall_points(corner(x_right, 0.0), corner(l, 0.0), f, hm), None));
            ring.push((wall_points(corner(l, 0.0), corner(l, h), f, hm), Some(BoundaryTag::Right)));
            ring.push((wall_points(corner(l, h), corner(-l, h), f, hm), Some(BoundaryTag::Top)));
            ring.push((wall_points(corner(-l, h), corner(-l, 0.0), f, hm), Some(BoundaryTag::Left)));
            let mut pts = Vec::new();
            let mut tags = Vec::new();
            for (chain, tag) in ring {
                let n = chain.len();
                pts.extend_from_slice(&chain[..n - 1]);
                tags.extend(std::iter::repeat_n(tag, n - 1));
            }
            let start = g.points.len();
            let n = pts.len();
            g.points.extend(pts);
            for k in 0..n {
                g.segments.push(([start + k, start + (k + 1) % n], tags[k]));
            }
        } else {
            let walls = [
                (corner(-l, -h), corner(l, -h), BoundaryTag::Bottom),
                (corner(l, -h), corner(l, h), BoundaryTag::Right),
                (corner(l, h), corner(-l, h), BoundaryTag::Top),
                (corner(-l, h), corner(-l, -h), BoundaryTag::Left),
            ];
            let mut pts = Vec::new();
            let mut tags = Vec::new();
            for (a, b, tag) in walls {
                let chain = wall_points(a, b, f, hm);
                let n = chain.len();
                pts.extend_from_slice(&chain[..n - 1]);
                tags.extend(std::iter::repeat_n(Some(tag), n - 1));
            }
            let start = g.points.len();
            let n = pts.len();
            g.points.extend(pts);
            for k in 0..n {
                g.segments.push(([start + k, start + (k + 1) % n], tags[k]));
            }
            let period = self.shape.period();
            let ts = body_params(self.shape, &self.placement, 0.0, period, f, hm, true, self.options.curvature_factor);
            let body: Vec<Point2<f64>> = ts[..ts.len() - 1]
                .iter()
                .map(|&t| self.placement.to_world(&self.shape.eval(t).point))
                .collect();
            g.push_chain(&body, Some(BoundaryTag::Body), true);
        }
        Ok(g)
    }

    /// Centres of the leaves of a quadtree refined until each cell is no
    /// larger than the local size.
    fn interior_points(&self) -> Vec<Point2<f64>> {
        let (l, h) = (self.channel.half_length(), self.channel.half_height());
        let y_lo = if self.half { 0.0 } else { -h };
        let size = self.options.size;
        let nx = ((2.0 * l) / size).ceil().max(1.0) as usize;
        let ny = ((h - y_lo) / size).ceil().max(1.0) as usize;
        let (sx, sy) = (2.0 * l / nx as f64, (h - y_lo) / ny as f64);
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for j in (0..ny).rev() {
            for i in (0..nx).rev() {
                stack.push((-l + sx * i as f64, y_lo + sy * j as f64, sx, sy));
            }
        }
        while let Some((x0, y0, wx, wy)) = stack.pop() {
            let c = Point2::new(x0 + 0.5 * wx, y0 + 0.5 * wy);
            let hc = self.field.eval(&c);
            if wx.max(wy) > hc * 1.05 {
                let (hx, hy) = (0.5 * wx, 0.5 * wy);
                stack.push((x0 + hx, y0 + hy, hx, hy));
                stack.push((x0, y0 + hy, hx, hy));
                stack.push((x0 + hx, y0, hx, hy));
                stack.push((x0, y0, hx, hy));
                continue;
            }
            if self.inside(&c) && self.boundary_distance(&c) > 0.6 * hc {
                out.push(c);
            }
        }
        out
    }

    fn build(&self) -> Result<RawMesh, MeshError> {
        let pslg = self.boundary()?;
        let n_fixed = pslg.points.len();
        let mut interior = self.interior_points();
        let estimate = n_fixed + interior.len();
        if estimate > self.options.max_vertices {
            return Err(MeshError::TooManyVertices {
                estimate,
                cap: self.options.max_vertices,
            });
        }
        let constraint_edges: Vec<[usize; 2]> = pslg.segments.iter().map(|s| s.0).collect();
        let to_s = |p: &Point2<f64>| SPoint::new(p.x, p.y);
        let load = |interior: &[Point2<f64>]| {
            let pts: Vec<SPoint<f64>> = pslg
                .points
                .iter()
                .chain(interior.iter())
                .map(to_s)
                .collect();
            ConstrainedDelaunayTriangulation::<SPoint<f64>>::bulk_load_cdt(
                pts,
                constraint_edges.clone(),
            )
            .map_err(|e| MeshError::Triangulation(format!("{e:?}")))
        };
        for _ in 0..self.options.smoothing_sweeps {
            let cdt = load(&interior)?;
            let mut moved = interior.clone();
            for v in cdt.vertices() {
                let idx = v.fix().index();
                if idx < n_fixed {
                    continue;
                }
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for e in v.out_edges() {
                    let q = e.to().position();
                    sx += q.x;
                    sy += q.y;
                    n += 1.0;
                }
                if n > 0.0 {
                    let cand = Point2::new(sx / n, sy / n);
                    let hc = self.field.eval(&cand);
                    if self.inside(&cand) && self.boundary_distance(&cand) > 0.3 * hc {
                        moved[idx - n_fixed] = cand;
                    }
                }
            }
            interior = moved;
        }
        let mut cdt = load(&interior)?;
        let params = RefinementParameters::<f64>::new()
            .with_angle_limit(AngleLimit::from_deg(25.0))
            .exclude_outer_faces(true)
            .with_max_additional_vertices(self.options.max_vertices);
        let result = cdt.refine(params);
        if !result.refinement_complete {
            return Err(MeshError::Triangulation("angle refinement did not complete".into()));
        }
        let excluded: std::collections::HashSet<usize> =
            result.excluded_faces.iter().map(|f| f.index()).collect();
        let mut vertices: Vec<Point2<f64>> = cdt
            .vertices()
            .map(|v| {
                let p = v.position();
                Point2::new(p.x, p.y)
            })
            .collect();
        let mut triangles = Vec::new();
        for f in cdt.inner_faces() {
            if excluded.contains(&f.fix().index()) {
                continue;
            }
            let [a, b, c] = f.vertices().map(|v| v.fix().index());
            let (pa, pb, pc) = (vertices[a], vertices[b], vertices[c]);
            let centroid = Point2::from((pa.coords + pb.coords + pc.coords) / 3.0);
            if self.half && centroid.y < 0.0 {
                continue;
            }
            if (pb - pa).perp(&(pc - pa)) > 0.0 {
                triangles.push([a, b, c]);
            } else {
                triangles.push([a, c, b]);
            }
        }
        // Constraint edges after refinement, classified by location.
        let (l, h) = (self.channel.half_length(), self.channel.half_height());
        let mut segments = Vec::new();
        let mut body_vertex = vec![false; vertices.len()];
        for e in cdt.undirected_edges() {
            if !e.is_constraint_edge() {
                continue;
            }
            let [a, b] = e.vertices().map(|v| v.fix().index());
            let (pa, pb) = (vertices[a], vertices[b]);
            let tag = if pa.y == -h && pb.y == -h {
                Some(BoundaryTag::Bottom)
            } else if pa.y == h && pb.y == h {
                Some(BoundaryTag::Top)
            } else if pa.x == -l && pb.x == -l {
                Some(BoundaryTag::Left)
            } else if pa.x == l && pb.x == l {
                Some(BoundaryTag::Right)
            } else if self.half && pa.y == 0.0 && pb.y == 0.0 {
                None
            } else {
                body_vertex[a] = true;
                body_vertex[b] = true;
                Some(BoundaryTag::Body)
            };
            segments.push(([a, b], tag));
        }
        for (i, v) in vertices.iter_mut().enumerate() {
            if body_vertex[i] && i >= n_fixed {
                let q = self.placement.to_body(v);
                let keep_axis = self.half && v.y == 0.0;
                *v = self.placement.to_world(&self.shape.nearest(&q).point);
                if keep_axis {
                    v.y = 0.0;
                }
            }
        }
        Ok(RawMesh {
            vertices,
            triangles,
            segments,
        })
    }
}

struct RawMesh {
    vertices: Vec<Point2<f64>>,
    triangles: Vec<[usize; 3]>,
    segments: Vec<([usize; 2], Option<BoundaryTag>)>,
}

impl RawMesh {
    /// Drop unused vertices (Steiner points that ended up outside).
    fn compact(mut self) -> Self {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut verts = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            if used[i] {
                map[i] = verts.len();
                verts.push(*v);
            }
        }
        for t in &mut self.triangles {
            *t = t.map(|i| map[i]);
        }
        self.segments = self
            .segments
            .into_iter()
            .filter(|(s, _)| used[s[0]] && used[s[1]])
            .map(|(s, tag)| (s.map(|i| map[i]), tag))
            .collect();
        self.vertices = verts;
        self
    }
}

fn layout_checks(
    channel: &Channel,
    shape: &BodyShape,
    placement: &Placement,
    options: &MeshOptions,
) -> Result<Layout, MeshError> {
    options.validate()?;
    let layout = Layout::new(channel, shape, placement);
    let required = 3.0 * options.min_size;
    for (side, gap) in [("bottom", layout.gaps.eps_b), ("top", layout.gaps.eps_t)] {
        if !(gap > required) {
            return Err(MeshError::GapTooSmall {
                side,
                gap,
                required,
            });
        }
    }
    let (lo, hi) = layout.x_range;
    let clearance = (channel.half_length() - hi).min(lo + channel.half_length());
    if !(clearance > 3.0 * options.min_size) {
        return Err(MeshError::BodyTooWide { clearance });
    }
    Ok(layout)
}

fn size_field(layout: &Layout, shape: &BodyShape, options: &MeshOptions) -> SizeField {
    // The gap boxes reach one body extent beyond the body on each side, which
    // covers the default support of the lift test field.
    let tau = layout.extents.tau;
    let l = layout.channel.half_length();
    let (x0, x1) = ((layout.x_range.0 - tau).max(-l), (layout.x_range.1 + tau).min(l));
    let big_h = layout.channel.half_height();
    SizeField {
        size: options.size,
        grading: options.grading,
        body_size: options.body_size.min(options.size),
        gap_boxes: vec![
            (layout.gaps.eps_b / options.gap_layers, [x0, x1, -big_h, layout.body_bottom()]),
            (layout.gaps.eps_t / options.gap_layers, [x0, x1, layout.body_top(), big_h]),
        ],
        shape: shape.clone(),
        placement: layout.placement,
    }
}

fn finish(raw: RawMesh, gen: &Generator<'_>) -> Result<Mesh, MeshError> {
    let raw = raw.compact();
    let tagged: Vec<([usize; 2], BoundaryTag, Point2<f64>)> = raw
        .segments
        .iter()
        .filter_map(|&(s, tag)| {
            let tag = tag?;
            let (a, b) = (raw.vertices[s[0]], raw.vertices[s[1]]);
            let mid = nalgebra::center(&a, &b);
            let node = if tag == BoundaryTag::Body {
                let q = gen.placement.to_body(&mid);
                gen.placement.to_world(&gen.shape.nearest(&q).point)
            } else {
                mid
            };
            Some((s, tag, node))
        })
        .collect();
    let domain = MeshDomain {
        channel: gen.channel,
        shape: gen.shape.clone(),
        placement: gen.placement,
        options: gen.options,
    };
    Mesh::from_parts(
        raw.vertices,
        raw.triangles,
        &tagged,
        gen.options.size,
        Some(domain),
    )
}

/// Mesh the channel minus the placed body.
pub fn triangulate(
    channel: &Channel,
    shape: &BodyShape,
    placement: &Placement,
    options: &MeshOptions,
) -> Result<Mesh, MeshError> {
    let layout = layout_checks(channel, shape, placement, options)?;
    let gen = Generator {
        channel: *channel,
        shape,
        placement: *placement,
        field: size_field(&layout, shape, options),
        options: *options,
        half: false,
    };
    let mesh = finish(gen.build()?, &gen)?;
    check_quality(&mesh)?;
    Ok(mesh)
}

/// Smallest interior angle a generated mesh must reach, in degrees.
pub const MIN_ANGLE_DEG: f64 = 20.0;

fn check_quality(mesh: &Mesh) -> Result<(), MeshError> {
    let q = mesh.quality_report();
    if q.min_angle < MIN_ANGLE_DEG {
        return Err(MeshError::PoorQuality {
            min_angle: q.min_angle,
            required: MIN_ANGLE_DEG,
        });
    }
    Ok(())
}

/// Rebuild a mesh of the same geometry whose vertex set is closed under
/// `x2 -> -x2`: the upper half is meshed with the axis as a constraint and
/// mirrored.
pub fn symmetrize(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let dom = mesh.domain.as_ref().ok_or(MeshError::NoGeometry)?;
    if dom.placement.h != 0.0 || dom.placement.theta != 0.0 {
        return Err(MeshError::NotSymmetric(format!(
            "placement must be h = 0, theta = 0 (got h = {}, theta = {})",
            dom.placement.h, dom.placement.theta
        )));
    }
    if !dom.shape.is_mirror_symmetric() {
        return Err(MeshError::NotSymmetric("body shape has no mirror axis".into()));
    }
    let layout = layout_checks(&dom.channel, &dom.shape, &dom.placement, &dom.options)?;
    let gen = Generator {
        channel: dom.channel,
        shape: &dom.shape,
        placement: dom.placement,
        field: size_field(&layout, &dom.shape, &dom.options),
        options: dom.options,
        half: true,
    };
    let half = finish(gen.build()?, &gen)?;
    let nv = half.vertices.len();
    let mut map = vec![0usize; nv];
    let mut vertices = half.vertices.clone();
    for (i, v) in half.vertices.iter().enumerate() {
        if v.y == 0.0 {
            map[i] = i;
        } else {
            map[i] = vertices.len();
            vertices.push(Point2::new(v.x, -v.y));
        }
    }
    let mut triangles = half.triangles.clone();
    for t in &half.triangles {
        triangles.push([map[t[0]], map[t[2]], map[t[1]]]);
    }
    let mirror_tag = |t: BoundaryTag| match t {
        BoundaryTag::Top => BoundaryTag::Bottom,
        other => other,
    };
    let mut tagged = Vec::new();
    for b in &half.boundary {
        let [i, j] = half.edges[b.edge];
        let m = half.edge_nodes[b.edge];
        tagged.push(([i, j], b.tag, m));
        tagged.push(([map[i], map[j]], mirror_tag(b.tag), Point2::new(m.x, -m.y)));
    }
    let mut out = Mesh::from_parts(vertices, triangles, &tagged, half.size, half.domain.clone())?;
    // Mirror the interior edge nodes too so the geometry is exactly symmetric.
    let mut index: HashMap<[usize; 2], usize> = HashMap::new();
    for (e, &[a, b]) in out.edges.iter().enumerate() {
        index.insert([a, b], e);
    }
    for (e, &[a, b]) in half.edges.iter().enumerate() {
        let (ma, mb) = (map[a], map[b]);
        let key = [ma.min(mb), ma.max(mb)];
        if let Some(&me) = index.get(&key) {
            let m = half.edge_nodes[e];
            out.edge_nodes[me] = Point2::new(m.x, -m.y);
        }
    }
    check_quality(&out)?;
    Ok(out)
}

/// Image of a node under `x2 -> -x2`, for every node of a symmetrized mesh.
pub fn mirror_node_map(mesh: &Mesh) -> Option<Vec<usize>> {
    let mut index: HashMap<(u64, u64), usize> = HashMap::new();
    let nodes = mesh.nodes();
    let key = |p: &Point2<f64>| ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits());
    for (i, p) in nodes.iter().enumerate() {
        index.insert(key(p), i);
    }
    nodes
        .iter()
        .map(|p| index.get(&key(&Point2::new(p.x, -p.y))).copied())
        .collect()
}

/// Gradient of the quadratic geometry map, exposed for tests.
pub fn element_jacobian(mesh: &Mesh, t: usize, xi: f64, eta: f64) -> Matrix2<f64> {
    p2_jacobian(&mesh.element_coords(t), xi, eta)
}

/// Unit outward normal of the fluid domain along a boundary edge, from the
/// quadratic edge map at local parameter `s in [0, 1]`, with the tangent
/// length `|dx/ds|`.
pub fn boundary_edge_frame(mesh: &Mesh, b: &BoundaryEdge, s: f64) -> (Point2<f64>, Vector2<f64>, f64) {
    let [i, j] = mesh.edges[b.edge];
    let (a, c, m) = (mesh.vertices[i], mesh.vertices[j], mesh.edge_nodes[b.edge]);
    let n0 = 2.0 * (s - 0.5) * (s - 1.0);
    let n1 = 2.0 * s * (s - 0.5);
    let n2 = 4.0 * s * (1.0 - s);
    let p = Point2::from(a.coords * n0 + c.coords * n1 + m.coords * n2);
    let d = a.coords * (4.0 * s - 3.0) + c.coords * (4.0 * s - 1.0) + m.coords * (4.0 - 8.0 * s);
    let len = d.norm();
    let mut normal = Vector2::new(d.y, -d.x) / len;
    // Orient away from the owning triangle.
    let owner = mesh
        .tri_edges
        .iter()
        .position(|te| te.contains(&b.edge))
        .expect("boundary edge has an owner");
    let tri = mesh.triangles[owner];
    let centroid = Point2::from(
        (mesh.vertices[tri[0]].coords + mesh.vertices[tri[1]].coords + mesh.vertices[tri[2]].coords)
            / 3.0,
    );
    if normal.dot(&(p - centroid)) < 0.0 {
        normal = -normal;
    }
    (p, normal, len)
}
