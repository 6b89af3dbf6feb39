//! Quadratic (P2) and linear (P1) Lagrange elements on six-node triangles.
//!
//! Elements touching the body use the quadratic geometry map and the
//! degree 6 rule; straight elements use the degree 4 rule.

use nalgebra::{Point2, Vector2};

use crate::mesh::{p2_jacobian, Mesh};
use crate::quadrature::{triangle_degree4, triangle_degree6, TriPoint};

/// P2 basis on the reference triangle, ordered as vertices then the nodes on
/// edges (0,1), (1,2), (2,0).
pub fn p2_shape(xi: f64, eta: f64) -> [f64; 6] {
    let l0 = 1.0 - xi - eta;
    let (l1, l2) = (xi, eta);
    [
        l0 * (2.0 * l0 - 1.0),
        l1 * (2.0 * l1 - 1.0),
        l2 * (2.0 * l2 - 1.0),
        4.0 * l0 * l1,
        4.0 * l1 * l2,
        4.0 * l2 * l0,
    ]
}

/// Reference gradients `(d/dxi, d/deta)` of the P2 basis.
pub fn p2_shape_gradients(xi: f64, eta: f64) -> [Vector2<f64>; 6] {
    let l0 = 1.0 - xi - eta;
    [
        Vector2::new(1.0 - 4.0 * l0, 1.0 - 4.0 * l0),
        Vector2::new(4.0 * xi - 1.0, 0.0),
        Vector2::new(0.0, 4.0 * eta - 1.0),
        Vector2::new(4.0 * (l0 - xi), -4.0 * xi),
        Vector2::new(4.0 * eta, 4.0 * xi),
        Vector2::new(-4.0 * eta, 4.0 * (l0 - eta)),
    ]
}

pub fn p1_shape(xi: f64, eta: f64) -> [f64; 3] {
    [1.0 - xi - eta, xi, eta]
}

/// Basis data at one quadrature point of a physical element.
#[derive(Debug, Clone, Copy)]
pub struct ElementPoint {
    pub x: Point2<f64>,
    /// Quadrature weight times the Jacobian determinant.
    pub dx: f64,
    pub phi: [f64; 6],
    pub grad: [Vector2<f64>; 6],
    pub psi: [f64; 3],
}

/// Quadrature rule for element `t`: degree 6 on curved elements, 4 otherwise.
pub fn element_rule(mesh: &Mesh, t: usize) -> Vec<TriPoint> {
    if mesh.is_curved(t) {
        triangle_degree6()
    } else {
        triangle_degree4()
    }
}

/// Map a reference point of element `t` to physical coordinates.
pub fn map_point(coords: &[Point2<f64>; 6], xi: f64, eta: f64) -> Point2<f64> {
    let n = p2_shape(xi, eta);
    let mut p = Vector2::zeros();
    for k in 0..6 {
        p += coords[k].coords * n[k];
    }
    Point2::from(p)
}

/// Basis values and physical gradients at `(xi, eta)` of an element with
/// the given node coordinates. Returns `None` on a degenerate map.
pub fn element_point(coords: &[Point2<f64>; 6], q: &TriPoint) -> Option<ElementPoint> {
    let jac = p2_jacobian(coords, q.xi, q.eta);
    let det = jac.determinant();
    if !(det > 0.0) {
        return None;
    }
    let jinv_t = jac.try_inverse()?.transpose();
    let dref = p2_shape_gradients(q.xi, q.eta);
    Some(ElementPoint {
        x: map_point(coords, q.xi, q.eta),
        dx: q.weight * det,
        phi: p2_shape(q.xi, q.eta),
        grad: dref.map(|g| jinv_t * g),
        psi: p1_shape(q.xi, q.eta),
    })
}

/// All quadrature points of element `t`.
pub fn element_points(mesh: &Mesh, t: usize) -> Vec<ElementPoint> {
    let coords = mesh.element_coords(t);
    element_rule(mesh, t)
        .iter()
        .map(|q| element_point(&coords, q).expect("element map is invertible"))
        .collect()
}

/// Quadrature points of every element, computed once.
#[derive(Debug, Clone)]
pub struct ElementCache {
    points: Vec<Vec<ElementPoint>>,
}

impl ElementCache {
    pub fn new(mesh: &Mesh) -> Self {
        use rayon::prelude::*;
        Self {
            points: (0..mesh.num_triangles())
                .into_par_iter()
                .map(|t| element_points(mesh, t))
                .collect(),
        }
    }

    pub fn element(&self, t: usize) -> &[ElementPoint] {
        &self.points[t]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p2_basis_is_nodal_and_sums_to_one() {
        let nodes = [
            (0.0, 0.0),
            (1.0, 0.0),
            (0.0, 1.0),
            (0.5, 0.0),
            (0.5, 0.5),
            (0.0, 0.5),
        ];
        for (i, &(x, y)) in nodes.iter().enumerate() {
            let n = p2_shape(x, y);
            for (j, v) in n.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
        let g = p2_shape_gradients(0.2, 0.3);
        let sum: Vector2<f64> = g.iter().sum();
        assert!(sum.norm() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (x, y, h) = (0.21, 0.33, 1e-6);
        let g = p2_shape_gradients(x, y);
        let (px, mx) = (p2_shape(x + h, y), p2_shape(x - h, y));
        let (py, my) = (p2_shape(x, y + h), p2_shape(x, y - h));
        for k in 0..6 {
            assert!(((px[k] - mx[k]) / (2.0 * h) - g[k].x).abs() < 1e-8);
            assert!(((py[k] - my[k]) / (2.0 * h) - g[k].y).abs() < 1e-8);
        }
    }

    #[test]
    fn curved_element_integrates_quadratics_exactly() {
        // Element with a curved edge (1,2): the map is quadratic, and the
        // degree 6 rule integrates x^2 over it exactly. Compare with a fine
        // subdivision of the same map.
        let c = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.0),
            Point2::new(0.6, 0.6),
            Point2::new(0.0, 0.5),
        ];
        let q = triangle_degree6();
        let exact: f64 = q
            .iter()
            .map(|q| {
                let p = element_point(&c, q).unwrap();
                p.x.x * p.x.x * p.dx
            })
            .sum();
        let n = 200;
        let mut fine = 0.0;
        let (nodes, weights): (Vec<f64>, Vec<f64>) =
            crate::quadrature::gauss_legendre_unit(8).into_iter().unzip();
        // Collapsed-square (Duffy) rule as an independent reference.
        for i in 0..n {
            for (a, wa) in nodes.iter().zip(&weights) {
                let u = (i as f64 + a) / n as f64;
                for (b, wb) in nodes.iter().zip(&weights) {
                    let (xi, eta) = (u * (1.0 - b), u * b);
                    let jac = p2_jacobian(&c, xi, eta).determinant();
                    let p = map_point(&c, xi, eta);
                    fine += wa / n as f64 * wb * u * jac * p.x * p.x;
                }
            }
        }
        assert!((exact - fine).abs() < 1e-12, "{exact} vs {fine}");
    }
}
