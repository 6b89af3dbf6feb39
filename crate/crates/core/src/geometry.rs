//! Channel rectangle, immersed body shapes and the quantities derived from a
//! placement of the body: vertical extents, half-width and wall gaps.
//!
//! A [`BodyShape`] lives in its own frame with the area barycenter at the
//! origin. A [`Placement`] rotates it by `theta` about the barycenter and then
//! translates it vertically by `h`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Point2, Rotation2, Vector2};
use thiserror::Error;

use crate::quadrature::gauss_legendre_unit;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("channel needs half_length > half_height > 0 (got {half_length}, {half_height})")]
    InvalidChannel { half_length: f64, half_height: f64 },
    #[error("degenerate body shape: {0}")]
    DegenerateShape(String),
    #[error("rounding radius {radius} does not fit edge {edge} of length {length}")]
    RoundingTooLarge { radius: f64, edge: usize, length: f64 },
    #[error("polygon edges {0} and {1} intersect")]
    SelfIntersecting(usize, usize),
}

/// The rectangle `(-L, L) x (-H, H)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Channel {
    half_length: f64,
    half_height: f64,
}

impl Channel {
    pub fn new(half_length: f64, half_height: f64) -> Result<Self, GeometryError> {
        if !(half_height > 0.0 && half_length > half_height && half_length.is_finite()) {
            return Err(GeometryError::InvalidChannel {
                half_length,
                half_height,
            });
        }
        Ok(Self {
            half_length,
            half_height,
        })
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    pub fn half_height(&self) -> f64 {
        self.half_height
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_length * self.half_height
    }

    /// Distance from an interior point to the nearest wall.
    pub fn wall_distance(&self, p: &Point2<f64>) -> f64 {
        let dx = self.half_length - p.x.abs();
        let dy = self.half_height - p.y.abs();
        dx.min(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    SmoothedPolygon,
}

/// Position, first and second parameter derivative of the boundary curve.
#[derive(Debug, Clone, Copy)]
pub struct CurveSample {
    pub point: Point2<f64>,
    pub velocity: Vector2<f64>,
    pub acceleration: Vector2<f64>,
}

impl CurveSample {
    pub fn tangent(&self) -> Vector2<f64> {
        self.velocity.normalize()
    }

    /// Unit normal pointing out of the body (the curve runs counter-clockwise).
    pub fn outward_normal(&self) -> Vector2<f64> {
        let t = self.tangent();
        Vector2::new(t.y, -t.x)
    }

    pub fn curvature(&self) -> f64 {
        let v = self.velocity;
        let a = self.acceleration;
        (v.x * a.y - v.y * a.x) / v.norm().powi(3)
    }
}

/// Closest boundary point to a query point, in the body frame.
#[derive(Debug, Clone, Copy)]
pub struct Nearest {
    pub point: Point2<f64>,
    pub param: f64,
    pub distance: f64,
    pub outward_normal: Vector2<f64>,
}

#[derive(Debug, Clone)]
enum Piece {
    Segment {
        a: Point2<f64>,
        b: Point2<f64>,
        len: f64,
    },
    Arc {
        center: Point2<f64>,
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Segment { len, .. } => len,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn eval(&self, s: f64) -> CurveSample {
        match *self {
            Piece::Segment { a, b, len } => {
                let d = (b - a) / len;
                CurveSample {
                    point: a + d * s,
                    velocity: d,
                    acceleration: Vector2::zeros(),
                }
            }
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let sgn = sweep.signum();
                let ang = start + sgn * s / radius;
                let (sn, cs) = ang.sin_cos();
                CurveSample {
                    point: center + Vector2::new(cs, sn) * radius,
                    velocity: Vector2::new(-sn, cs) * sgn,
                    acceleration: Vector2::new(-cs, -sn) / radius,
                }
            }
        }
    }

    fn translate(&mut self, shift: Vector2<f64>) {
        match self {
            Piece::Segment { a, b, .. } => {
                *a += shift;
                *b += shift;
            }
            Piece::Arc { center, .. } => *center += shift,
        }
    }

    /// Arc-local parameter of the point at angle `ang`, if it lies on the arc.
    fn arc_param(start: f64, sweep: f64, radius: f64, ang: f64) -> Option<f64> {
        let delta = ((ang - start) * sweep.signum()).rem_euclid(TAU);
        (delta <= sweep.abs()).then_some(delta * radius)
    }

    fn nearest(&self, p: &Point2<f64>) -> (Point2<f64>, f64) {
        match *self {
            Piece::Segment { a, b, len } => {
                let d = b - a;
                let t = ((p - a).dot(&d) / (len * len)).clamp(0.0, 1.0);
                (a + d * t, t * len)
            }
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let r = p - center;
                if r.norm() > 1e-300 {
                    let ang = r.y.atan2(r.x);
                    if let Some(s) = Self::arc_param(start, sweep, radius, ang) {
                        return (center + r * (radius / r.norm()), s);
                    }
                }
                let end = self.len();
                let p0 = self.eval(0.0).point;
                let p1 = self.eval(end).point;
                if (p - p0).norm() <= (p - p1).norm() {
                    (p0, 0.0)
                } else {
                    (p1, end)
                }
            }
        }
    }

    fn support(&self, d: &Vector2<f64>) -> f64 {
        match *self {
            Piece::Segment { a, b, .. } => a.coords.dot(d).max(b.coords.dot(d)),
            Piece::Arc {
                center,
                radius,
                start,
                sweep,
            } => {
                let ends = self
                    .eval(0.0)
                    .point
                    .coords
                    .dot(d)
                    .max(self.eval(self.len()).point.coords.dot(d));
                let ang = d.y.atan2(d.x);
                match Self::arc_param(start, sweep, radius, ang) {
                    Some(_) => ends.max(center.coords.dot(d) + radius * d.norm()),
                    None => ends,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct RoundedPolygon {
    vertices: Vec<Point2<f64>>,
    radius: f64,
    pieces: Vec<Piece>,
    starts: Vec<f64>,
    length: f64,
}

impl RoundedPolygon {
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.rem_euclid(self.length);
        let idx = match self
            .starts
            .binary_search_by(|x| x.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let idx = idx.min(self.pieces.len() - 1);
        (idx, (s - self.starts[idx]).min(self.pieces[idx].len()))
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Ellipse { a: f64, b: f64 },
    Rounded(RoundedPolygon),
}

/// A simple closed body boundary with bounded curvature, positively oriented,
/// barycenter at the origin.
#[derive(Debug, Clone)]
pub struct BodyShape {
    repr: Repr,
    area: f64,
    perimeter: f64,
}

impl BodyShape {
    pub fn ellipse(a: f64, b: f64) -> Result<Self, GeometryError> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(GeometryError::DegenerateShape(format!(
                "ellipse semi-axes must be positive, got ({a}, {b})"
            )));
        }
        Ok(Self {
            repr: Repr::Ellipse { a, b },
            area: PI * a * b,
            perimeter: ellipse_perimeter(a, b),
        })
    }

    pub fn disk(radius: f64) -> Result<Self, GeometryError> {
        Self::ellipse(radius, radius)
    }

    /// Polygon with every corner replaced by a tangent circular arc. The
    /// default rounding radius is a tenth of the shortest edge. Vertices may be
    /// given in either orientation; the shape is re-centered on its barycenter.
    pub fn smoothed_polygon(
        vertices: &[[f64; 2]],
        rounding: Option<f64>,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeometryError::DegenerateShape(format!(
                "polygon needs at least 3 vertices, got {n}"
            )));
        }
        let mut verts: Vec<Point2<f64>> =
            vertices.iter().map(|v| Point2::new(v[0], v[1])).collect();
        if verts.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(GeometryError::DegenerateShape("non-finite vertex".into()));
        }
        let signed_area = polygon_signed_area(&verts);
        let scale = verts
            .iter()
            .map(|v| v.coords.norm())
            .fold(0.0_f64, f64::max)
            .max(1e-300);
        if signed_area.abs() <= 1e-12 * scale * scale {
            return Err(GeometryError::DegenerateShape("polygon has zero area".into()));
        }
        if signed_area < 0.0 {
            verts.reverse();
        }
        let edge_len = |i: usize| (verts[(i + 1) % n] - verts[i]).norm();
        let shortest = (0..n).map(edge_len).fold(f64::INFINITY, f64::min);
        if shortest <= 1e-12 * scale {
            return Err(GeometryError::DegenerateShape("repeated vertex".into()));
        }
        check_simple(&verts)?;
        let radius = rounding.unwrap_or(0.1 * shortest);
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(GeometryError::DegenerateShape(format!(
                "rounding radius must be positive, got {radius}"
            )));
        }

        // Corner arcs: tangent length r tan(|turn|/2) measured back along the
        // incoming edge and forward along the outgoing one.
        struct Corner {
            p_in: Point2<f64>,
            p_out: Point2<f64>,
            arc: Option<Piece>,
            cut: f64,
        }
        let mut corners = Vec::with_capacity(n);
        for i in 0..n {
            let prev = verts[(i + n - 1) % n];
            let cur = verts[i];
            let next = verts[(i + 1) % n];
            let e_in = (cur - prev).normalize();
            let e_out = (next - cur).normalize();
            let turn = (e_in.x * e_out.y - e_in.y * e_out.x).atan2(e_in.dot(&e_out));
            if turn.abs() < 1e-12 {
                corners.push(Corner {
                    p_in: cur,
                    p_out: cur,
                    arc: None,
                    cut: 0.0,
                });
                continue;
            }
            let cut = radius * (0.5 * turn.abs()).tan();
            let p_in = cur - e_in * cut;
            let p_out = cur + e_out * cut;
            let left = Vector2::new(-e_in.y, e_in.x);
            let center = if turn > 0.0 {
                p_in + left * radius
            } else {
                p_in - left * radius
            };
            let r0 = p_in - center;
            corners.push(Corner {
                p_in,
                p_out,
                arc: Some(Piece::Arc {
                    center,
                    radius,
                    start: r0.y.atan2(r0.x),
                    sweep: turn,
                }),
                cut,
            });
        }
        for i in 0..n {
            let length = edge_len(i);
            if corners[i].cut + corners[(i + 1) % n].cut > length * (1.0 + 1e-12) {
                return Err(GeometryError::RoundingTooLarge {
                    radius,
                    edge: i,
                    length,
                });
            }
        }
        let mut pieces = Vec::with_capacity(2 * n);
        for i in 0..n {
            if let Some(arc) = &corners[i].arc {
                pieces.push(arc.clone());
            }
            let a = corners[i].p_out;
            let b = corners[(i + 1) % n].p_in;
            let len = (b - a).norm();
            if len > 1e-14 * scale {
                pieces.push(Piece::Segment { a, b, len });
            }
        }

        let (area, centroid) = pieces_area_centroid(&pieces);
        if area <= 0.0 {
            return Err(GeometryError::DegenerateShape(
                "rounded polygon has non-positive area".into(),
            ));
        }
        let shift = -centroid.coords;
        for p in &mut pieces {
            p.translate(shift);
        }
        for v in &mut verts {
            *v += shift;
        }
        let mut starts = Vec::with_capacity(pieces.len());
        let mut acc = 0.0;
        for p in &pieces {
            starts.push(acc);
            acc += p.len();
        }
        Ok(Self {
            repr: Repr::Rounded(RoundedPolygon {
                vertices: verts,
                radius,
                pieces,
                starts,
                length: acc,
            }),
            area,
            perimeter: acc,
        })
    }

    pub fn kind(&self) -> ShapeKind {
        match self.repr {
            Repr::Ellipse { .. } => ShapeKind::Ellipse,
            Repr::Rounded(_) => ShapeKind::SmoothedPolygon,
        }
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn perimeter(&self) -> f64 {
        self.perimeter
    }

    /// Semi-axes `(a, b)` for ellipses.
    pub fn semi_axes(&self) -> Option<(f64, f64)> {
        match self.repr {
            Repr::Ellipse { a, b } => Some((a, b)),
            Repr::Rounded(_) => None,
        }
    }

    /// Centered polygon vertices and the rounding radius.
    pub fn polygon(&self) -> Option<(&[Point2<f64>], f64)> {
        match &self.repr {
            Repr::Rounded(rp) => Some((&rp.vertices, rp.radius)),
            Repr::Ellipse { .. } => None,
        }
    }

    /// Length of the parameter interval: `2 pi` for ellipses (angle
    /// parameter), the perimeter for smoothed polygons (arclength).
    pub fn period(&self) -> f64 {
        match &self.repr {
            Repr::Ellipse { .. } => TAU,
            Repr::Rounded(rp) => rp.length,
        }
    }

    pub fn eval(&self, t: f64) -> CurveSample {
        match &self.repr {
            Repr::Ellipse { a, b } => {
                let (sn, cs) = t.sin_cos();
                CurveSample {
                    point: Point2::new(a * cs, b * sn),
                    velocity: Vector2::new(-a * sn, b * cs),
                    acceleration: Vector2::new(-a * cs, -b * sn),
                }
            }
            Repr::Rounded(rp) => {
                let (i, s) = rp.locate(t);
                rp.pieces[i].eval(s)
            }
        }
    }

    /// Parameter values where the curvature may jump (arc/segment joins).
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Ellipse { .. } => Vec::new(),
            Repr::Rounded(rp) => rp.starts.clone(),
        }
    }

    /// `max` of `d . x` over the boundary, body frame.
    pub fn support(&self, d: &Vector2<f64>) -> f64 {
        match &self.repr {
            Repr::Ellipse { a, b } => (a * a * d.x * d.x + b * b * d.y * d.y).sqrt(),
            Repr::Rounded(rp) => rp
                .pieces
                .iter()
                .map(|p| p.support(d))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn contains_local(&self, p: &Point2<f64>) -> bool {
        self.signed_distance_local(p) < 0.0
    }

    /// Closest boundary point, body frame.
    pub fn nearest(&self, p: &Point2<f64>) -> Nearest {
        match &self.repr {
            Repr::Ellipse { a, b } => {
                let q = ellipse_closest_point(*a, *b, p);
                let param = (q.y / b).atan2(q.x / a).rem_euclid(TAU);
                let normal = self.eval(param).outward_normal();
                Nearest {
                    point: q,
                    param,
                    distance: (p - q).norm(),
                    outward_normal: normal,
                }
            }
            Repr::Rounded(rp) => {
                let mut best = (f64::INFINITY, Point2::origin(), 0.0, 0usize);
                for (i, piece) in rp.pieces.iter().enumerate() {
                    let (q, s) = piece.nearest(p);
                    let d = (p - q).norm();
                    if d < best.0 {
                        best = (d, q, s, i);
                    }
                }
                let (d, q, s, i) = best;
                let normal = rp.pieces[i].eval(s).outward_normal();
                Nearest {
                    point: q,
                    param: rp.starts[i] + s,
                    distance: d,
                    outward_normal: normal,
                }
            }
        }
    }

    /// Signed distance in the body frame, negative inside.
    pub fn signed_distance_local(&self, p: &Point2<f64>) -> f64 {
        let near = self.nearest(p);
        let inside = match &self.repr {
            Repr::Ellipse { a, b } => (p.x / a).powi(2) + (p.y / b).powi(2) < 1.0,
            Repr::Rounded(_) => (p - near.point).dot(&near.outward_normal) < 0.0,
        };
        if inside {
            -near.distance
        } else {
            near.distance
        }
    }

    /// True when the shape is mirror symmetric about the line `x2 = 0` of its
    /// own frame.
    pub fn is_mirror_symmetric(&self) -> bool {
        match &self.repr {
            Repr::Ellipse { .. } => true,
            Repr::Rounded(rp) => {
                let scale = rp
                    .vertices
                    .iter()
                    .map(|v| v.coords.norm())
                    .fold(0.0_f64, f64::max);
                rp.vertices.iter().all(|v| {
                    rp.vertices
                        .iter()
                        .any(|w| (w.x - v.x).abs() + (w.y + v.y).abs() <= 1e-9 * scale)
                })
            }
        }
    }

    /// Parameters where the boundary crosses the body-frame line `x2 = 0`,
    /// sorted.
    pub fn axis_crossings(&self) -> Vec<f64> {
        match &self.repr {
            Repr::Ellipse { .. } => vec![0.0, PI],
            Repr::Rounded(_) => {
                let period = self.period();
                let n = 4096;
                let y = |t: f64| self.eval(t).point.y;
                let mut out = Vec::new();
                for k in 0..n {
                    let t0 = period * k as f64 / n as f64;
                    let t1 = period * (k + 1) as f64 / n as f64;
                    let (y0, y1) = (y(t0), y(t1));
                    if y0 == 0.0 {
                        out.push(t0);
                    } else if y0 * y1 < 0.0 {
                        let (mut lo, mut hi) = (t0, t1);
                        for _ in 0..200 {
                            let mid = 0.5 * (lo + hi);
                            if y(lo) * y(mid) <= 0.0 {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                        }
                        out.push(0.5 * (lo + hi));
                    }
                }
                out
            }
        }
    }
}

/// Shoelace signed area of a closed polygon.
fn polygon_signed_area(v: &[Point2<f64>]) -> f64 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let (p, q) = (v[i], v[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        })
        .sum::<f64>()
        * 0.5
}

fn check_simple(v: &[Point2<f64>]) -> Result<(), GeometryError> {
    let n = v.len();
    let orient = |a: Point2<f64>, b: Point2<f64>, c: Point2<f64>| {
        (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
    };
    for i in 0..n {
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = (v[i], v[(i + 1) % n]);
            let (c, d) = (v[j], v[(j + 1) % n]);
            let d1 = orient(a, b, c);
            let d2 = orient(a, b, d);
            let d3 = orient(c, d, a);
            let d4 = orient(c, d, b);
            if d1 * d2 <= 0.0 && d3 * d4 <= 0.0 {
                return Err(GeometryError::SelfIntersecting(i, j));
            }
        }
    }
    Ok(())
}

/// Area and centroid of the region bounded by the pieces, by Green's theorem.
fn pieces_area_centroid(pieces: &[Piece]) -> (f64, Point2<f64>) {
    let rule = gauss_legendre_unit(12);
    let (mut area, mut mx, mut my) = (0.0, 0.0, 0.0);
    for p in pieces {
        let len = p.len();
        for &(s, w) in &rule {
            let c = p.eval(s * len);
            let (x, y) = (c.point.x, c.point.y);
            let (dx, dy) = (c.velocity.x, c.velocity.y);
            let ws = w * len;
            area += 0.5 * (x * dy - y * dx) * ws;
            mx += 0.5 * x * x * dy * ws;
            my -= 0.5 * y * y * dx * ws;
        }
    }
    (area, Point2::new(mx / area, my / area))
}

/// Ellipse perimeter from the arithmetic-geometric mean.
fn ellipse_perimeter(a: f64, b: f64) -> f64 {
    let (mut an, mut bn) = (a.max(b), a.min(b));
    let mut sum = 0.5 * (an * an - bn * bn);
    let mut pow = 0.5;
    for _ in 0..64 {
        let c = 0.5 * (an - bn);
        let next_a = 0.5 * (an + bn);
        let next_b = (an * bn).sqrt();
        pow *= 2.0;
        sum += pow * c * c;
        an = next_a;
        bn = next_b;
        if c.abs() <= 1e-17 * an {
            break;
        }
    }
    TAU / an * (a.max(b).powi(2) - sum)
}

/// Closest point on the ellipse `(x/a)^2 + (y/b)^2 = 1` by bisection on the
/// Lagrange-multiplier equation, after reduction to the first quadrant.
fn ellipse_closest_point(a: f64, b: f64, p: &Point2<f64>) -> Point2<f64> {
    let swap = b > a;
    let (e0, e1) = if swap { (b, a) } else { (a, b) };
    let (px, py) = if swap { (p.y, p.x) } else { (p.x, p.y) };
    let (y0, y1) = (px.abs(), py.abs());
    let (x0, x1) = if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let sbar = ellipse_root(r0, z0, z1, g);
                (r0 * y0 / (sbar + r0), y1 / (sbar + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer = e0 * y0;
        let denom = e0 * e0 - e1 * e1;
        if numer < denom {
            let xde = numer / denom;
            (e0 * xde, e1 * (1.0 - xde * xde).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    };
    let (qx, qy) = (x0.copysign(px), x1.copysign(py));
    if swap {
        Point2::new(qy, qx)
    } else {
        Point2::new(qx, qy)
    }
}

fn ellipse_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let g = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Vertical offset `h` and rotation `theta` (radians) of the body.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Placement {
    pub h: f64,
    pub theta: f64,
}

impl Placement {
    pub fn new(h: f64, theta: f64) -> Self {
        Self { h, theta }
    }

    pub fn offset(h: f64) -> Self {
        Self { h, theta: 0.0 }
    }

    pub fn to_world(&self, q: &Point2<f64>) -> Point2<f64> {
        let r = Rotation2::new(self.theta) * q;
        Point2::new(r.x, r.y + self.h)
    }

    pub fn to_body(&self, p: &Point2<f64>) -> Point2<f64> {
        Rotation2::new(-self.theta) * Point2::new(p.x, p.y - self.h)
    }

    pub fn vector_to_world(&self, v: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(self.theta) * v
    }

    pub fn vector_to_body(&self, v: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(-self.theta) * v
    }
}

/// `delta_b = -min x2`, `delta_t = max x2`, `tau = max |x1|` over the rotated
/// (not yet translated) boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extents {
    pub delta_b: f64,
    pub delta_t: f64,
    pub tau: f64,
}

/// Vertical gaps between the placed body and the bottom and top walls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaps {
    pub eps_b: f64,
    pub eps_t: f64,
}

impl Gaps {
    pub fn min(&self) -> f64 {
        self.eps_b.min(self.eps_t)
    }
}

pub fn body_extents(shape: &BodyShape, theta: f64) -> Extents {
    let rot = Placement::new(0.0, theta);
    let up = rot.vector_to_body(&Vector2::y());
    let right = rot.vector_to_body(&Vector2::x());
    Extents {
        delta_b: shape.support(&-up),
        delta_t: shape.support(&up),
        tau: shape.support(&right).max(shape.support(&-right)),
    }
}

pub fn gaps(channel: &Channel, extents: &Extents, h: f64) -> Gaps {
    let big_h = channel.half_height();
    Gaps {
        eps_b: big_h - extents.delta_b + h,
        eps_t: big_h - extents.delta_t - h,
    }
}

/// Horizontal extremes `(min x1, max x1)` of the placed body.
pub fn horizontal_range(shape: &BodyShape, theta: f64) -> (f64, f64) {
    let rot = Placement::new(0.0, theta);
    let right = rot.vector_to_body(&Vector2::x());
    (-shape.support(&-right), shape.support(&right))
}

/// True iff every boundary point of the placed body is farther than `margin`
/// from the channel walls.
pub fn is_admissible(
    channel: &Channel,
    shape: &BodyShape,
    placement: &Placement,
    margin: f64,
) -> bool {
    let ext = body_extents(shape, placement.theta);
    let g = gaps(channel, &ext, placement.h);
    let (x_lo, x_hi) = horizontal_range(shape, placement.theta);
    let l = channel.half_length();
    g.eps_b > margin && g.eps_t > margin && l - x_hi > margin && x_lo + l > margin
}

/// `max(0.02 H, 2 * mesh size)`.
pub fn default_margin(channel: &Channel, mesh_size: f64) -> f64 {
    (0.02 * channel.half_height()).max(2.0 * mesh_size)
}

pub fn signed_distance(shape: &BodyShape, placement: &Placement, point: &Point2<f64>) -> f64 {
    shape.signed_distance_local(&placement.to_body(point))
}

/// A boundary quadrature node: position, outward (body) normal and the
/// arclength weight of the node.
#[derive(Debug, Clone, Copy)]
pub struct BoundarySample {
    pub point: Point2<f64>,
    pub normal: Vector2<f64>,
    pub weight: f64,
}

/// `n` nodes equally spaced in the curve parameter with trapezoidal
/// arclength weights; the weights sum to the perimeter (exactly for
/// arclength-parameterized shapes, spectrally fast for ellipses).
pub fn boundary_sample(shape: &BodyShape, placement: &Placement, n: usize) -> Vec<BoundarySample> {
    assert!(n >= 3, "boundary_sample needs at least 3 nodes");
    let period = shape.period();
    let dt = period / n as f64;
    (0..n)
        .map(|k| {
            let c = shape.eval(dt * k as f64);
            BoundarySample {
                point: placement.to_world(&c.point),
                normal: placement.vector_to_world(&c.outward_normal()),
                weight: c.velocity.norm() * dt,
            }
        })
        .collect()
}

/// Channel, body and placement together with everything derived from them.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub channel: Channel,
    pub placement: Placement,
    pub extents: Extents,
    pub gaps: Gaps,
    /// Horizontal range of the placed body.
    pub x_range: (f64, f64),
}

impl Layout {
    pub fn new(channel: &Channel, shape: &BodyShape, placement: &Placement) -> Self {
        let extents = body_extents(shape, placement.theta);
        Self {
            channel: *channel,
            placement: *placement,
            extents,
            gaps: gaps(channel, &extents, placement.h),
            x_range: horizontal_range(shape, placement.theta),
        }
    }

    /// Bottom and top of the placed body.
    pub fn body_bottom(&self) -> f64 {
        self.placement.h - self.extents.delta_b
    }

    pub fn body_top(&self) -> f64 {
        self.placement.h + self.extents.delta_t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hexagon() -> BodyShape {
        BodyShape::smoothed_polygon(
            &[
                [-1.0, 0.0],
                [-0.6, -0.15],
                [0.7, -0.12],
                [1.0, 0.02],
                [0.6, 0.16],
                [-0.5, 0.14],
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn channel_rejects_bad_sizes() {
        assert!(Channel::new(1.0, 1.0).is_err());
        assert!(Channel::new(0.5, 1.0).is_err());
        assert!(Channel::new(1.0, 0.0).is_err());
        assert!(Channel::new(3.0, 1.0).is_ok());
    }

    #[test]
    fn disk_extents_are_its_radius() {
        let disk = BodyShape::disk(0.25).unwrap();
        for theta in [0.0, 0.3, -1.2] {
            let e = body_extents(&disk, theta);
            assert_relative_eq!(e.delta_b, 0.25, epsilon = 1e-15);
            assert_relative_eq!(e.delta_t, 0.25, epsilon = 1e-15);
            assert_relative_eq!(e.tau, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn axis_aligned_ellipse_extents() {
        let e = body_extents(&BodyShape::ellipse(0.4, 0.2).unwrap(), 0.0);
        assert_eq!((e.delta_b, e.delta_t, e.tau), (0.2, 0.2, 0.4));
    }

    fn sampled_extents(shape: &BodyShape, theta: f64, n: usize) -> Extents {
        let rot = Placement::new(0.0, theta);
        let (mut lo, mut hi, mut tau) = (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64);
        for k in 0..n {
            let p = rot.to_world(&shape.eval(shape.period() * k as f64 / n as f64).point);
            lo = lo.min(p.y);
            hi = hi.max(p.y);
            tau = tau.max(p.x.abs());
        }
        Extents {
            delta_b: -lo,
            delta_t: hi,
            tau,
        }
    }

    #[test]
    fn rotated_ellipse_extents_match_dense_sampling() {
        let shape = BodyShape::ellipse(0.4, 0.2).unwrap();
        let exact = body_extents(&shape, PI / 6.0);
        let sampled = sampled_extents(&shape, PI / 6.0, 100_000);
        assert!((exact.delta_b - sampled.delta_b).abs() < 1e-8);
        assert!((exact.delta_t - sampled.delta_t).abs() < 1e-8);
        assert!((exact.tau - sampled.tau).abs() < 1e-8);
    }

    #[test]
    fn hexagon_extents_match_dense_sampling() {
        let shape = hexagon();
        for theta in [0.0, 0.2, -0.5, 0.7] {
            let exact = body_extents(&shape, theta);
            let sampled = sampled_extents(&shape, theta, 200_000);
            assert!((exact.delta_b - sampled.delta_b).abs() < 1e-8, "theta {theta}");
            assert!((exact.delta_t - sampled.delta_t).abs() < 1e-8, "theta {theta}");
            assert!((exact.tau - sampled.tau).abs() < 1e-8, "theta {theta}");
        }
    }

    #[test]
    fn gap_formula() {
        let ch = Channel::new(3.0, 1.0).unwrap();
        let ext = Extents {
            delta_b: 0.3,
            delta_t: 0.3,
            tau: 0.3,
        };
        let g = gaps(&ch, &ext, 0.0);
        assert_relative_eq!(g.eps_b, 0.7, epsilon = 1e-15);
        assert_relative_eq!(g.eps_t, 0.7, epsilon = 1e-15);
        let ext = Extents {
            delta_b: 0.2,
            delta_t: 0.4,
            tau: 0.3,
        };
        let g = gaps(&ch, &ext, 0.1);
        assert_relative_eq!(g.eps_b, 0.9, epsilon = 1e-15);
        assert_relative_eq!(g.eps_t, 0.5, epsilon = 1e-15);
        assert_eq!(gaps(&ch, &ext, -1.0 + 0.2).eps_b, 0.0);
    }

    #[test]
    fn admissibility() {
        let ch = Channel::new(3.0, 1.0).unwrap();
        let disk = BodyShape::disk(0.25).unwrap();
        assert!(is_admissible(&ch, &disk, &Placement::default(), 0.0));
        assert!(!is_admissible(&ch, &disk, &Placement::offset(0.75), 0.0));
        assert!(!is_admissible(&ch, &disk, &Placement::offset(0.74), 0.02));
        assert!(is_admissible(&ch, &disk, &Placement::offset(0.74), 0.005));
    }

    #[test]
    fn wide_deck_near_quarter_turn_matches_sampling() {
        let ch = Channel::new(3.0, 1.0).unwrap();
        let deck = hexagon();
        for theta in [0.70, 0.75, 0.78] {
            let sampled = sampled_extents(&deck, theta, 200_000);
            let sampled_ok = sampled.delta_t < 1.0 - 0.05 && sampled.delta_b < 1.0 - 0.05;
            let placement = Placement::new(0.0, theta);
            assert_eq!(is_admissible(&ch, &deck, &placement, 0.05), sampled_ok);
        }
    }

    #[test]
    fn signed_distance_basics() {
        let disk = BodyShape::disk(0.25).unwrap();
        let pl = Placement::default();
        assert_relative_eq!(signed_distance(&disk, &pl, &Point2::origin()), -0.25);
        let on = Point2::new(0.25 * 0.6, 0.25 * 0.8);
        assert!(signed_distance(&disk, &pl, &on).abs() < 1e-12);
        let ell = BodyShape::ellipse(0.4, 0.2).unwrap();
        for k in 0..100 {
            let t = TAU * k as f64 / 100.0;
            let p = ell.eval(t).point;
            let pl = Placement::new(0.1, 0.3);
            assert!(signed_distance(&ell, &pl, &pl.to_world(&p)).abs() < 1e-12);
        }
    }

    #[test]
    fn hexagon_distance_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let shape = hexagon();
        let pl = Placement::new(0.05, 0.1);
        let n = 400_000;
        let pts: Vec<Point2<f64>> = (0..n)
            .map(|k| pl.to_world(&shape.eval(shape.period() * k as f64 / n as f64).point))
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = Point2::new(rng.random_range(-1.5..1.5), rng.random_range(-0.6..0.6));
            let brute = pts
                .iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min);
            let d = signed_distance(&shape, &pl, &p);
            assert!((d.abs() - brute).abs() < 1e-6, "{d} vs {brute}");
        }
    }

    #[test]
    fn boundary_sample_weights_and_normals() {
        let disk = BodyShape::disk(0.25).unwrap();
        let s = boundary_sample(&disk, &Placement::default(), 4);
        let total: f64 = s.iter().map(|b| b.weight).sum();
        assert_relative_eq!(total, TAU * 0.25, epsilon = 1e-14);

        let ell = BodyShape::ellipse(0.4, 0.2).unwrap();
        let s = boundary_sample(&ell, &Placement::new(0.0, 0.4), 256);
        let total: f64 = s.iter().map(|b| b.weight).sum();
        assert!((total - ell.perimeter()).abs() < 1e-8);
        for k in 0..256 {
            let c = ell.eval(TAU * k as f64 / 256.0);
            assert!(c.outward_normal().dot(&c.tangent()).abs() < 1e-10);
        }
    }

    #[test]
    fn ellipse_perimeter_agrees_with_trapezoid() {
        let ell = BodyShape::ellipse(0.4, 0.2).unwrap();
        let n = 20_000;
        let trap: f64 = (0..n)
            .map(|k| ell.eval(TAU * k as f64 / n as f64).velocity.norm())
            .sum::<f64>()
            * TAU
            / n as f64;
        assert!((trap - ell.perimeter()).abs() < 1e-12);
    }

    #[test]
    fn hexagon_perimeter_matches_refined_polyline() {
        let shape = hexagon();
        let n = 200_000;
        let pts: Vec<Point2<f64>> = (0..n)
            .map(|k| shape.eval(shape.period() * k as f64 / n as f64).point)
            .collect();
        let poly: f64 = (0..n).map(|k| (pts[(k + 1) % n] - pts[k]).norm()).sum();
        assert!((poly - shape.perimeter()).abs() < 1e-6);
    }

    #[test]
    fn smoothed_polygon_is_centered_and_curvature_bounded() {
        let shape = hexagon();
        let n = 100_000;
        let pts: Vec<Point2<f64>> = (0..n)
            .map(|k| shape.eval(shape.period() * k as f64 / n as f64).point)
            .collect();
        let mut a = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for k in 0..n {
            let (p, q) = (pts[k], pts[(k + 1) % n]);
            let cr = p.x * q.y - q.x * p.y;
            a += cr;
            cx += (p.x + q.x) * cr;
            cy += (p.y + q.y) * cr;
        }
        a *= 0.5;
        assert!((a - shape.area()).abs() < 1e-6);
        assert!((cx / (6.0 * a)).abs() < 1e-8 && (cy / (6.0 * a)).abs() < 1e-8);
        let (_, r) = shape.polygon().unwrap();
        for k in 0..1000 {
            let c = shape.eval(shape.period() * (k as f64 + 0.5) / 1000.0);
            assert!(c.curvature().abs() <= 1.0 / r + 1e-9);
        }
    }

    #[test]
    fn polygon_errors() {
        assert!(BodyShape::smoothed_polygon(&[[0.0, 0.0], [1.0, 0.0]], None).is_err());
        assert!(matches!(
            BodyShape::smoothed_polygon(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], None),
            Err(GeometryError::DegenerateShape(_))
        ));
        assert!(matches!(
            BodyShape::smoothed_polygon(&[[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, -0.5], [0.0, 1.0]], None),
            Err(GeometryError::SelfIntersecting(..))
        ));
        assert!(matches!(
            BodyShape::smoothed_polygon(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], Some(0.6)),
            Err(GeometryError::RoundingTooLarge { .. })
        ));
        assert!(BodyShape::ellipse(0.0, 1.0).is_err());
    }

    #[test]
    fn symmetric_shapes_have_equal_vertical_extents() {
        let sym = BodyShape::smoothed_polygon(
            &[[-1.0, 0.0], [-0.5, -0.2], [0.5, -0.2], [1.0, 0.0], [0.5, 0.2], [-0.5, 0.2]],
            None,
        )
        .unwrap();
        assert!(sym.is_mirror_symmetric());
        let e = body_extents(&sym, 0.0);
        assert!((e.delta_b - e.delta_t).abs() < 1e-14);
        assert!(!hexagon().is_mirror_symmetric());
        assert_eq!(sym.axis_crossings().len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn gaps_are_affine_in_h(h in -0.6f64..0.6) {
            let ch = Channel::new(2.0, 1.0).unwrap();
            let ext = body_extents(&BodyShape::ellipse(0.3, 0.15).unwrap(), 0.2);
            let g0 = gaps(&ch, &ext, 0.0);
            let g = gaps(&ch, &ext, h);
            proptest::prop_assert!(((g.eps_b - g0.eps_b) - h).abs() < 1e-14);
            proptest::prop_assert!(((g.eps_t - g0.eps_t) + h).abs() < 1e-14);
        }

        #[test]
        fn admissibility_is_monotone_in_margin(h in -0.9f64..0.9, m in 0.0f64..0.3, dm in 0.0f64..0.3) {
            let ch = Channel::new(2.0, 1.0).unwrap();
            let shape = BodyShape::ellipse(0.3, 0.15).unwrap();
            let pl = Placement::new(h, 0.1);
            if is_admissible(&ch, &shape, &pl, m + dm) {
                proptest::prop_assert!(is_admissible(&ch, &shape, &pl, m));
            }
        }
    }
}
