//! Vertical force on the body, from the boundary stress integral and from
//! the equivalent volume integral against a divergence-free test field that
//! equals `e2` on the body and vanishes near the walls.
//!
//! The normal in the boundary integral points into the body, so the lift is
//! `-e2 . int T n` with `T = mu (grad u + grad u^T) - p I`.

use std::io::{self, Write};

use nalgebra::{Matrix2, Point2, Vector2};
use rayon::prelude::*;

use crate::extension::{lift_field_w, lift_field_w_with, AnalyticField, ChiCollars};
use crate::fem::element_point;
use crate::geometry::{Layout, Placement};
use crate::mesh::{p2_jacobian, BoundaryTag, MeshOptions};
use crate::ns_solver::{
    mesh_for_problem, solve_navier_stokes, FlowField, FlowProblem, SolverError, SolverOptions,
};
use crate::quadrature::{gauss_legendre_unit, subdivided, triangle_degree6};

/// Stress `mu (G + G^T) - p I` from a velocity gradient and a pressure.
pub fn stress(mu: f64, grad: &Matrix2<f64>, p: f64) -> Matrix2<f64> {
    mu * (grad + grad.transpose()) - Matrix2::identity() * p
}

/// Fluid stress at a point of the mesh.
pub fn stress_tensor(field: &FlowField, point: &Point2<f64>) -> Result<Matrix2<f64>, SolverError> {
    let (_, g, p) = field.eval(point)?;
    Ok(stress(field.mu, &g, p))
}

/// Reference coordinates of the point at parameter `s` along local edge `k`
/// (from vertex `k` to vertex `k+1`), and the derivative with respect to `s`.
fn edge_reference(k: usize, s: f64) -> ((f64, f64), Vector2<f64>) {
    match k {
        0 => ((s, 0.0), Vector2::new(1.0, 0.0)),
        1 => ((1.0 - s, s), Vector2::new(-1.0, 1.0)),
        _ => ((0.0, 1.0 - s), Vector2::new(0.0, -1.0)),
    }
}

/// `-e2 . int T n` over the body, `n` pointing into the body, with the
/// one-sided element trace of the stress and a 4-point Gauss rule on each
/// curved edge.
pub fn lift_boundary(field: &FlowField) -> f64 {
    boundary_force(field).y
}

/// The full force `-int T n` on the body.
pub fn boundary_force(field: &FlowField) -> Vector2<f64> {
    let mesh = field.mesh();
    let rule = gauss_legendre_unit(4);
    let mut owner = vec![None; mesh.num_edges()];
    for t in 0..mesh.num_triangles() {
        for (k, &e) in mesh.element_edges(t).iter().enumerate() {
            if mesh.edge_tag(e) == Some(BoundaryTag::Body) {
                owner[e] = Some((t, k));
            }
        }
    }
    let mut force = Vector2::zeros();
    for b in mesh.boundary_edges() {
        if b.tag != BoundaryTag::Body {
            continue;
        }
        let (t, k) = owner[b.edge].expect("body edge has an element");
        let coords = mesh.element_coords(t);
        for &(s, w) in &rule {
            let ((xi, eta), dref) = edge_reference(k, s);
            let tangent = p2_jacobian(&coords, xi, eta) * dref;
            // The element lies to the left of its counter-clockwise edges, so
            // the right-hand normal leaves the fluid and enters the body.
            let n_ds = Vector2::new(tangent.y, -tangent.x);
            let (_, g, p) = field.eval_local(t, xi, eta);
            force -= stress(field.mu, &g, p) * n_ds * w;
        }
    }
    force
}

/// `-int (u . grad u) . w - mu int grad u : grad w` over the elements that
/// meet the support of `w`, with a degree 6 rule. Elements crossed by a
/// feature of `w` narrower than the element are integrated on a uniform
/// subdivision fine enough to resolve it. The convective term is left out
/// for Stokes solutions.
pub fn lift_volume(field: &FlowField, w: &dyn AnalyticField) -> f64 {
    const MAX_SUBDIVISION: usize = 64;
    let mesh = field.mesh();
    let rects = w.support();
    let base = triangle_degree6();
    let mu = field.mu;
    let element = |t: usize| -> f64 {
        let coords = mesh.element_coords(t);
        let (mut lo, mut hi) = (coords[0], coords[0]);
        for q in &coords[1..] {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
        if let Some(rects) = &rects {
            if !rects.iter().any(|r| r.intersects_box(&lo, &hi)) {
                return 0.0;
            }
        }
        let diam = (hi - lo).norm();
        let n = w
            .length_scale(&lo, &hi)
            .map_or(1, |l| ((3.0 * diam / l).ceil() as usize).clamp(1, MAX_SUBDIVISION));
        let fine;
        let rule = if n > 1 {
            fine = subdivided(&base, n);
            &fine
        } else {
            &base
        };
        let nodes = mesh.element_nodes(t);
        let mut sum = 0.0;
        for q in rule {
            let ep = element_point(&coords, q).expect("valid element map");
            let mut u = Vector2::zeros();
            let mut g = Matrix2::zeros();
            for k in 0..6 {
                let v = field.velocity[nodes[k]];
                u += v * ep.phi[k];
                g += v * ep.grad[k].transpose();
            }
            let (wv, wg) = w.eval(&ep.x);
            let conv = if field.convective { (g * u).dot(&wv) } else { 0.0 };
            sum -= (conv + mu * g.component_mul(&wg).sum()) * ep.dx;
        }
        sum
    };
    (0..mesh.num_triangles()).map(element).sum()
}

/// Both lift values of one solution.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftResult {
    pub value_boundary: f64,
    pub value_volume: f64,
    pub discrepancy: f64,
    pub mesh_size: f64,
    pub placement: Placement,
    pub lambda: f64,
}

impl LiftResult {
    /// `|boundary - volume| / max(|volume|, 1e-12 lambda)`; zero when both
    /// values are below the noise floor.
    pub fn relative_discrepancy(&self) -> f64 {
        let floor = noise_floor(self.lambda);
        if self.value_volume.abs() < floor && self.value_boundary.abs() < floor {
            return 0.0;
        }
        self.discrepancy / self.value_volume.abs().max(1e-12 * self.lambda)
    }
}

/// Lifts below `1e-12 max(1, lambda)` are reported as zero.
pub fn noise_floor(lambda: f64) -> f64 {
    1e-12 * lambda.max(1.0)
}

pub fn clip_noise(value: f64, lambda: f64) -> f64 {
    if value.abs() < noise_floor(lambda) {
        0.0
    } else {
        value
    }
}

/// Both lifts of `field` for the layout it was computed on, with the default
/// collars of the volume test field.
pub fn lift(field: &FlowField, layout: &Layout) -> Result<LiftResult, SolverError> {
    lift_with(field, layout, ChiCollars::default())
}

pub fn lift_with(
    field: &FlowField,
    layout: &Layout,
    collars: ChiCollars,
) -> Result<LiftResult, SolverError> {
    let w = if collars == ChiCollars::default() {
        lift_field_w(layout)
    } else {
        lift_field_w_with(layout, collars)
    }
    .map_err(|e| SolverError::InvalidProblem(e.to_string()))?;
    let value_boundary = lift_boundary(field);
    let value_volume = lift_volume(field, &w);
    Ok(LiftResult {
        value_boundary,
        value_volume,
        discrepancy: (value_boundary - value_volume).abs(),
        mesh_size: field.mesh().size(),
        placement: layout.placement,
        lambda: field.lambda,
    })
}

/// One row of a lift curve; `error` is set when the solve failed.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftCurveRow {
    pub h: f64,
    pub eps_b: f64,
    pub eps_t: f64,
    pub lift_boundary: f64,
    pub lift_volume: f64,
    pub discrepancy: f64,
    pub newton_iters: usize,
    pub error: Option<String>,
}

/// One converged solve per offset, run concurrently and returned in grid
/// order.
pub fn lift_curve(
    problem: &FlowProblem,
    h_grid: &[f64],
    mesh_options: &MeshOptions,
    solver_options: &SolverOptions,
) -> Vec<LiftCurveRow> {
    h_grid
        .par_iter()
        .map(|&h| lift_row(problem, h, mesh_options, solver_options))
        .collect()
}

fn lift_row(
    problem: &FlowProblem,
    h: f64,
    mesh_options: &MeshOptions,
    solver_options: &SolverOptions,
) -> LiftCurveRow {
    let pb = problem.with_placement(Placement::new(h, problem.placement.theta));
    let layout = pb.layout();
    let mut row = LiftCurveRow {
        h,
        eps_b: layout.gaps.eps_b,
        eps_t: layout.gaps.eps_t,
        lift_boundary: f64::NAN,
        lift_volume: f64::NAN,
        discrepancy: f64::NAN,
        newton_iters: 0,
        error: None,
    };
    let result = mesh_for_problem(&pb, mesh_options)
        .map_err(|e| e.to_string())
        .and_then(|mesh| solve_navier_stokes(&pb, &mesh, solver_options).map_err(|e| e.to_string()))
        .and_then(|field| {
            let l = lift(&field, &layout).map_err(|e| e.to_string())?;
            Ok((field.report.newton_iters, l))
        });
    match result {
        Ok((iters, l)) => {
            row.lift_boundary = l.value_boundary;
            row.lift_volume = l.value_volume;
            row.discrepancy = l.discrepancy;
            row.newton_iters = iters;
        }
        Err(e) => row.error = Some(e),
    }
    row
}

/// CSV with columns `h,eps_b,eps_t,lift_boundary,lift_volume,discrepancy,newton_iters`.
pub fn write_lift_curve_csv<W: Write>(rows: &[LiftCurveRow], mut w: W) -> io::Result<()> {
    writeln!(w, "h,eps_b,eps_t,lift_boundary,lift_volume,discrepancy,newton_iters")?;
    for r in rows {
        writeln!(
            w,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            r.h, r.eps_b, r.eps_t, r.lift_boundary, r.lift_volume, r.discrepancy, r.newton_iters
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::InflowProfile;
    use crate::geometry::{BodyShape, Channel};
    use crate::ns_solver::solve_stokes;
    use std::sync::Arc;

    fn setup(lambda: f64, h: f64, size: f64) -> (FlowProblem, FlowField) {
        let ch = Channel::new(2.0, 1.0).unwrap();
        let shape = BodyShape::ellipse(0.35, 0.2).unwrap();
        let pl = Placement::new(h, 0.0);
        let prof = InflowProfile::couette(1.0, 1.0).unwrap();
        let pb = FlowProblem::new(1.0, lambda, prof, ch, shape, pl).unwrap();
        let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(size)).unwrap();
        let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).unwrap();
        (pb, f)
    }

    #[test]
    fn zero_field_has_zero_lift() {
        let (pb, f) = setup(0.0, 0.1, 0.25);
        let l = lift(&f, &pb.layout()).unwrap();
        assert_eq!(l.value_boundary, 0.0);
        assert_eq!(l.value_volume, 0.0);
        assert_eq!(l.relative_discrepancy(), 0.0);
    }

    #[test]
    fn pure_pressure_stress() {
        let (_, mut f) = setup(0.0, 0.1, 0.3);
        for v in f.velocity.iter_mut() {
            *v = Vector2::zeros();
        }
        for p in f.pressure.iter_mut() {
            *p = 2.5;
        }
        let t = stress_tensor(&f, &Point2::new(1.0, 0.5)).unwrap();
        assert!((t - Matrix2::identity() * -2.5).norm() < 1e-13);
        // A constant pressure exerts no net force on a closed body.
        assert!(boundary_force(&f).norm() < 1e-10);
        assert!(stress_tensor(&f, &Point2::new(9.0, 0.0)).is_err());
    }

    #[test]
    fn boundary_and_volume_lifts_agree() {
        let ch = Channel::new(3.0, 1.0).unwrap();
        let shape = BodyShape::ellipse(0.4, 0.2).unwrap();
        let pl = Placement::new(0.3, 0.0);
        let prof = InflowProfile::couette(1.0, 1.0).unwrap();
        let pb = FlowProblem::new(1.0, 10.0, prof, ch, shape, pl).unwrap();
        let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(0.1)).unwrap();
        let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).unwrap();
        let l = lift(&f, &pb.layout()).unwrap();
        assert!(l.value_volume.abs() > 1.0);
        assert!(l.relative_discrepancy() < 0.02, "{l:?}");
        let other = lift_with(
            &f,
            &pb.layout(),
            ChiCollars {
                horizontal: 2.0,
                bottom: 0.3,
                top: 0.7,
            },
        )
        .unwrap();
        let rel = (other.value_volume - l.value_volume).abs() / l.value_volume.abs();
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn stokes_lift_is_linear() {
        let (pb, _) = setup(0.0, 0.1, 0.3);
        let mesh = Arc::new(
            crate::mesh::triangulate(&pb.channel, &pb.shape, &pb.placement, &MeshOptions::with_size(0.3))
                .unwrap(),
        );
        let a = solve_stokes(&pb.with_lambda(0.01), &mesh).unwrap();
        let b = solve_stokes(&pb.with_lambda(0.03), &mesh).unwrap();
        let la = lift(&a, &pb.layout()).unwrap();
        let lb = lift(&b, &pb.layout()).unwrap();
        assert!((3.0 * la.value_volume - lb.value_volume).abs() <= 1e-10 * lb.value_volume.abs());
        assert!((3.0 * la.value_boundary - lb.value_boundary).abs() <= 1e-10 * lb.value_boundary.abs());
    }

    #[test]
    fn curve_rows_follow_the_grid() {
        let (pb, _) = setup(0.0, 0.0, 0.3);
        let pb = pb.with_lambda(0.5);
        let rows = lift_curve(&pb, &[-0.2, 0.0, 0.2], &MeshOptions::with_size(0.3), &SolverOptions::default());
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert!(rows[0].eps_b < rows[1].eps_b && rows[1].eps_b < rows[2].eps_b);
        let mut buf = Vec::new();
        write_lift_curve_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
