//! Taylor-Hood (P2 velocity, P1 pressure) discretisation of the stationary
//! Navier-Stokes equations with strongly imposed Dirichlet data.
//!
//! The unknown vector interleaves the two velocity components at every node
//! (vertices, then edge nodes), followed by the vertex pressures and one
//! Lagrange multiplier that pins the pressure mean to zero. Dirichlet rows
//! are replaced by identity rows.
//!
//! Nonlinear solves start from the Stokes solution, take a few Picard steps
//! and finish with Newton. Both use the update form `J du = -R(u)`, so the
//! reported residual is the one the iteration drives to zero.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{Matrix2, Point2, Vector2};
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::extension::{AnalyticField, InflowProfile, SmoothScalar, StreamVelocity, TrigScalar};
use crate::fem::{element_point, map_point, ElementCache};
use crate::geometry::{is_admissible, BodyShape, Channel, Layout, Placement};
use crate::linsys::{norm2, DirectSolver, LinearSolveReport, LinsysError, SparseMatrix};
use crate::mesh::{mirror_node_map, p2_jacobian, BoundaryTag, Mesh};
use crate::quadrature::{triangle_degree6, TriPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("placement is not admissible for the mesh")]
    Inadmissible,
    #[error("linear system is singular")]
    SingularMatrix,
    #[error("Newton Jacobian is singular")]
    SingularJacobian,
    #[error("nonlinear iteration did not converge; residual history {history:?}")]
    NonConvergence { history: Vec<f64> },
    #[error("linear solver failure: {0}")]
    Linear(String),
    #[error("point ({0}, {1}) is outside the mesh")]
    OutsideMesh(f64, f64),
}

/// The stationary flow problem on one geometry.
#[derive(Clone)]
pub struct FlowProblem {
    pub mu: f64,
    pub lambda: f64,
    pub profile: InflowProfile,
    pub channel: Channel,
    pub shape: BodyShape,
    pub placement: Placement,
    /// Body force on the right-hand side.
    pub forcing: Option<Arc<dyn AnalyticField>>,
    /// Replaces the standard wall, inlet, outlet and body data everywhere on
    /// the boundary (used with manufactured solutions).
    pub boundary_data: Option<Arc<dyn AnalyticField>>,
    /// Bottom wall moves with the top wall speed.
    pub symmetric_mode: bool,
}

impl fmt::Debug for FlowProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlowProblem")
            .field("mu", &self.mu)
            .field("lambda", &self.lambda)
            .field("profile", &self.profile)
            .field("channel", &self.channel)
            .field("shape", &self.shape.kind())
            .field("placement", &self.placement)
            .field("forcing", &self.forcing.is_some())
            .field("boundary_data", &self.boundary_data.is_some())
            .field("symmetric_mode", &self.symmetric_mode)
            .finish()
    }
}

impl FlowProblem {
    pub fn new(
        mu: f64,
        lambda: f64,
        profile: InflowProfile,
        channel: Channel,
        shape: BodyShape,
        placement: Placement,
    ) -> Result<Self, SolverError> {
        let p = Self {
            mu,
            lambda,
            symmetric_mode: profile.is_symmetric(),
            profile,
            channel,
            shape,
            placement,
            forcing: None,
            boundary_data: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_forcing(mut self, f: Arc<dyn AnalyticField>) -> Self {
        self.forcing = Some(f);
        self
    }

    pub fn with_boundary_data(mut self, g: Arc<dyn AnalyticField>) -> Self {
        self.boundary_data = Some(g);
        self
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn with_placement(&self, placement: Placement) -> Self {
        Self {
            placement,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::InvalidProblem(m));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("viscosity must be positive, got {}", self.mu));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        let (a, b) = (self.profile.half_height(), self.channel.half_height());
        if (a - b).abs() > 1e-14 * b {
            return bad(format!("profile half height {a} differs from channel {b}"));
        }
        if self.symmetric_mode && !self.profile.is_symmetric() {
            return bad("symmetric mode needs a symmetric profile".into());
        }
        if !self.symmetric_mode && self.profile.is_symmetric() {
            return bad("a symmetric profile needs symmetric mode".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.channel, &self.shape, &self.placement)
    }

    /// Prescribed velocity at a boundary point with the given tag.
    pub fn boundary_value(&self, tag: BoundaryTag, p: &Point2<f64>) -> Vector2<f64> {
        if let Some(g) = &self.boundary_data {
            return g.value(p);
        }
        let lam = self.lambda;
        let e1 = |v: f64| Vector2::new(lam * v, 0.0);
        match tag {
            BoundaryTag::Body => Vector2::zeros(),
            BoundaryTag::Bottom => e1(self.profile.bottom_speed()),
            BoundaryTag::Top => e1(self.profile.u_top()),
            BoundaryTag::Left => e1(self.profile.v_in(p.y)),
            BoundaryTag::Right => e1(self.profile.v_out(p.y)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub picard_iters: usize,
    /// Absolute tolerance on the Euclidean norm of the assembled residual.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Halve the Newton step while the residual grows.
    pub damping: bool,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            picard_iters: 3,
            newton_tol: 1e-10,
            max_newton: 25,
            damping: true,
            max_halvings: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Stokes,
    Picard,
    Newton,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub kind: StepKind,
    /// Residual after the step.
    pub residual: f64,
    pub step_fraction: f64,
    pub linear: LinearSolveReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceReport {
    pub history: Vec<IterationRecord>,
    pub picard_iters: usize,
    pub newton_iters: usize,
    pub residual: f64,
    /// Norm of the continuity rows of the residual.
    pub divergence_residual: f64,
    pub converged: bool,
}

/// Prescribed nodal velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletData {
    pub nodes: Vec<usize>,
    pub values: Vec<Vector2<f64>>,
}

/// Nodal boundary values: every node of a tagged edge gets the value of the
/// first tag (in `Bottom, Top, Left, Right, Body` order) it appears under.
pub fn apply_dirichlet(problem: &FlowProblem, mesh: &Mesh) -> DirichletData {
    let nn = mesh.num_nodes();
    let nv = mesh.num_vertices();
    let mut value: Vec<Option<Vector2<f64>>> = vec![None; nn];
    for b in mesh.boundary_edges() {
        let [i, j] = mesh.edges()[b.edge];
        for node in [i, j, nv + b.edge] {
            if value[node].is_none() {
                value[node] = Some(problem.boundary_value(b.tag, &mesh.node(node)));
            }
        }
    }
    let (nodes, values) = value
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .unzip();
    DirichletData { nodes, values }
}

/// A discrete solution.
#[derive(Debug, Clone)]
pub struct FlowField {
    mesh: Arc<Mesh>,
    /// Nodal velocities, vertices first then edge nodes.
    pub velocity: Vec<Vector2<f64>>,
    /// Vertex pressures with zero mean.
    pub pressure: Vec<f64>,
    /// Multiplier of the mean constraint; equals the mean of the discrete
    /// divergence of the boundary data.
    pub multiplier: f64,
    pub lambda: f64,
    pub mu: f64,
    /// False for solutions of the Stokes equations.
    pub convective: bool,
    pub report: ConvergenceReport,
}

/// Which element contains a point, with its reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub element: usize,
    pub xi: f64,
    pub eta: f64,
}

/// Find the element containing `p`, inverting the quadratic map by Newton
/// iteration.
pub fn locate(mesh: &Mesh, p: &Point2<f64>) -> Option<Location> {
    let tol = 1e-10;
    let mut best: Option<(f64, Location)> = None;
    for t in 0..mesh.num_triangles() {
        let x = mesh.element_coords(t);
        let (mut lo, mut hi) = (x[0], x[0]);
        for q in &x[1..] {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
        let pad = 1e-9 * (1.0 + (hi - lo).norm());
        if p.x < lo.x - pad || p.x > hi.x + pad || p.y < lo.y - pad || p.y > hi.y + pad {
            continue;
        }
        let (mut xi, mut eta) = (1.0 / 3.0, 1.0 / 3.0);
        for _ in 0..30 {
            let r = map_point(&x, xi, eta) - p;
            let j = p2_jacobian(&x, xi, eta);
            let Some(inv) = j.try_inverse() else { break };
            let d = inv * r;
            xi -= d.x;
            eta -= d.y;
            if d.norm() < 1e-15 {
                break;
            }
        }
        let outside = (-xi).max(-eta).max(xi + eta - 1.0);
        if (map_point(&x, xi, eta) - p).norm() > 1e-9 * (1.0 + p.coords.norm()) {
            continue;
        }
        let loc = Location { element: t, xi, eta };
        if outside <= tol {
            return Some(loc);
        }
        if outside < 1e-7 && best.is_none_or(|(b, _)| outside < b) {
            best = Some((outside, loc));
        }
    }
    best.map(|(_, l)| l)
}

impl FlowField {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Velocity, velocity gradient (`g[(i, j)] = d_j u_i`) and pressure inside
    /// element `t` at reference point `(xi, eta)`.
    pub fn eval_local(&self, t: usize, xi: f64, eta: f64) -> (Vector2<f64>, Matrix2<f64>, f64) {
        let coords = self.mesh.element_coords(t);
        let q = TriPoint {
            xi,
            eta,
            weight: 0.0,
        };
        let ep = element_point(&coords, &q).expect("valid element map");
        let nodes = self.mesh.element_nodes(t);
        let mut u = Vector2::zeros();
        let mut g = Matrix2::zeros();
        for k in 0..6 {
            let v = self.velocity[nodes[k]];
            u += v * ep.phi[k];
            g += v * ep.grad[k].transpose();
        }
        let p = (0..3).map(|k| self.pressure[nodes[k]] * ep.psi[k]).sum();
        (u, g, p)
    }

    pub fn eval(&self, p: &Point2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>, f64), SolverError> {
        let loc = locate(&self.mesh, p).ok_or(SolverError::OutsideMesh(p.x, p.y))?;
        Ok(self.eval_local(loc.element, loc.xi, loc.eta))
    }

    /// `(||u||_L2, |u|_H1, ||p||_L2)`.
    pub fn norms(&self) -> (f64, f64, f64) {
        let zero = ZeroField;
        let (a, b, c) = self.errors(&zero, &ZeroScalar, false);
        (a, b, c)
    }

    /// Full H1 norm of the velocity.
    pub fn h1_norm(&self) -> f64 {
        let (l2, semi, _) = self.norms();
        l2.hypot(semi)
    }

    /// Discrete H1 distance between the velocities of two fields on the same
    /// mesh.
    pub fn h1_distance(&self, other: &FlowField) -> f64 {
        let diff = FlowField {
            mesh: self.mesh.clone(),
            velocity: self
                .velocity
                .iter()
                .zip(&other.velocity)
                .map(|(a, b)| a - b)
                .collect(),
            pressure: vec![0.0; self.pressure.len()],
            multiplier: 0.0,
            lambda: self.lambda,
            mu: self.mu,
            convective: self.convective,
            report: ConvergenceReport::default(),
        };
        diff.h1_norm()
    }

    /// `(||u - u*||_L2, |u - u*|_H1, ||p - p*||_L2)` with a degree 6 rule on
    /// every element. With `remove_mean`, the exact pressure is shifted to
    /// zero mean first.
    pub fn errors(
        &self,
        exact_u: &dyn AnalyticField,
        exact_p: &dyn SmoothScalar,
        remove_mean: bool,
    ) -> (f64, f64, f64) {
        let rule = triangle_degree6();
        let mesh = &self.mesh;
        let mut mean = 0.0;
        if remove_mean {
            let mut area = 0.0;
            for t in 0..mesh.num_triangles() {
                let c = mesh.element_coords(t);
                for q in &rule {
                    let ep = element_point(&c, q).expect("valid element map");
                    mean += exact_p.partial(&ep.x, 0, 0) * ep.dx;
                    area += ep.dx;
                }
            }
            mean /= area;
        }
        let (mut eu, mut eg, mut ep_sum) = (0.0, 0.0, 0.0);
        for t in 0..mesh.num_triangles() {
            let c = mesh.element_coords(t);
            let nodes = mesh.element_nodes(t);
            for q in &rule {
                let ep = element_point(&c, q).expect("valid element map");
                let mut u = Vector2::zeros();
                let mut g = Matrix2::zeros();
                for k in 0..6 {
                    let v = self.velocity[nodes[k]];
                    u += v * ep.phi[k];
                    g += v * ep.grad[k].transpose();
                }
                let p: f64 = (0..3).map(|k| self.pressure[nodes[k]] * ep.psi[k]).sum();
                let (ue, ge) = exact_u.eval(&ep.x);
                let pe = exact_p.partial(&ep.x, 0, 0) - mean;
                eu += (u - ue).norm_squared() * ep.dx;
                eg += (g - ge).norm_squared() * ep.dx;
                ep_sum += (p - pe).powi(2) * ep.dx;
            }
        }
        (eu.sqrt(), eg.sqrt(), ep_sum.sqrt())
    }

    /// Mean of the piecewise linear pressure.
    pub fn pressure_mean(&self) -> f64 {
        let (mut s, mut a) = (0.0, 0.0);
        let cache = ElementCache::new(&self.mesh);
        for t in 0..self.mesh.num_triangles() {
            let nodes = self.mesh.element_nodes(t);
            for ep in cache.element(t) {
                s += (0..3).map(|k| self.pressure[nodes[k]] * ep.psi[k]).sum::<f64>() * ep.dx;
                a += ep.dx;
            }
        }
        s / a
    }

    /// Largest violation of `u1(x1,-x2) = u1`, `u2(x1,-x2) = -u2`,
    /// `p(x1,-x2) = p` over the nodes, or `None` when the mesh is not mirror
    /// closed.
    pub fn mirror_symmetry_error(&self) -> Option<f64> {
        let map = mirror_node_map(&self.mesh)?;
        let nv = self.mesh.num_vertices();
        let mut err = 0.0_f64;
        for (i, &m) in map.iter().enumerate() {
            let (a, b) = (self.velocity[i], self.velocity[m]);
            err = err.max((a.x - b.x).abs()).max((a.y + b.y).abs());
            if i < nv {
                err = err.max((self.pressure[i] - self.pressure[m]).abs());
            }
        }
        Some(err)
    }

    /// CSV with columns `x1,x2,u1,u2,p` at the mesh vertices.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x1,x2,u1,u2,p")?;
        for (i, v) in self.mesh.vertices().iter().enumerate() {
            let u = self.velocity[i];
            writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                v.x, v.y, u.x, u.y, self.pressure[i]
            )?;
        }
        Ok(())
    }

    fn to_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.velocity.len() + self.pressure.len() + 1);
        for v in &self.velocity {
            x.push(v.x);
            x.push(v.y);
        }
        x.extend_from_slice(&self.pressure);
        x.push(self.multiplier);
        x
    }
}

struct ZeroField;

impl AnalyticField for ZeroField {
    fn eval(&self, _: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        (Vector2::zeros(), Matrix2::zeros())
    }
}

struct ZeroScalar;

impl SmoothScalar for ZeroScalar {
    fn partial(&self, _: &Point2<f64>, _: u32, _: u32) -> f64 {
        0.0
    }
}

/// Which linearisation of the convective term to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Linearization {
    None,
    Picard,
    Newton,
}

/// Assembly context for one problem on one mesh.
struct System<'a> {
    problem: &'a FlowProblem,
    mesh: &'a Mesh,
    cache: ElementCache,
    n_nodes: usize,
    n_vertices: usize,
    dirichlet: DirichletData,
    load: Vec<f64>,
    matrix: SparseMatrix,
    solver: Option<DirectSolver>,
}

impl<'a> System<'a> {
    fn new(problem: &'a FlowProblem, mesh: &'a Mesh) -> Result<Self, SolverError> {
        problem.validate()?;
        let cache = ElementCache::new(mesh);
        let n_nodes = mesh.num_nodes();
        let n_vertices = mesh.num_vertices();
        let n = 2 * n_nodes + n_vertices + 1;
        let dirichlet = apply_dirichlet(problem, mesh);
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        let sigma = n - 1;
        for t in 0..mesh.num_triangles() {
            let dofs = element_dofs(mesh, t, n_nodes);
            for &r in &dofs[..12] {
                rows[r].extend_from_slice(&dofs);
            }
            for &r in &dofs[12..] {
                rows[r].extend_from_slice(&dofs[..12]);
                rows[r].push(sigma);
            }
        }
        rows[sigma].extend(2 * n_nodes..2 * n_nodes + n_vertices);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
        }
        let matrix =
            SparseMatrix::from_pattern(rows).map_err(|e| SolverError::Linear(e.to_string()))?;
        let mut load = vec![0.0; n];
        if let Some(f) = &problem.forcing {
            for t in 0..mesh.num_triangles() {
                let dofs = element_dofs(mesh, t, n_nodes);
                for ep in cache.element(t) {
                    let fv = f.value(&ep.x);
                    for k in 0..6 {
                        load[dofs[2 * k]] += fv.x * ep.phi[k] * ep.dx;
                        load[dofs[2 * k + 1]] += fv.y * ep.phi[k] * ep.dx;
                    }
                }
            }
        }
        Ok(Self {
            problem,
            mesh,
            cache,
            n_nodes,
            n_vertices,
            dirichlet,
            load,
            matrix,
            solver: None,
        })
    }

    fn dim(&self) -> usize {
        2 * self.n_nodes + self.n_vertices + 1
    }

    /// Vector with the Dirichlet values in place and `interior` elsewhere.
    fn lift(&self, interior: &[f64]) -> Vec<f64> {
        let mut x = interior.to_vec();
        for (&node, v) in self.dirichlet.nodes.iter().zip(&self.dirichlet.values) {
            x[2 * node] = v.x;
            x[2 * node + 1] = v.y;
        }
        x
    }

    /// Residual of the discrete equations at `x` (of the Stokes equations
    /// unless `convective`), and optionally the Jacobian of the chosen
    /// linearisation written into `self.matrix`.
    fn assemble(&mut self, x: &[f64], convective: bool, lin: Option<Linearization>) -> Vec<f64> {
        let n = self.dim();
        let sigma_idx = n - 1;
        let sigma = x[sigma_idx];
        let mu = self.problem.mu;
        let mut r: Vec<f64> = self.load.iter().map(|f| -f).collect();
        if lin.is_some() {
            self.matrix.values_mut().fill(0.0);
        }
        let mut p_mass = vec![0.0; self.n_vertices];
        for t in 0..self.mesh.num_triangles() {
            let dofs = element_dofs(self.mesh, t, self.n_nodes);
            let mut re = [0.0; 15];
            let mut ke = [[0.0; 15]; 15];
            let mut pm = [0.0; 3];
            let xu: [Vector2<f64>; 6] = std::array::from_fn(|k| {
                Vector2::new(x[dofs[2 * k]], x[dofs[2 * k + 1]])
            });
            let xp: [f64; 3] = std::array::from_fn(|k| x[dofs[12 + k]]);
            for ep in self.cache.element(t) {
                let mut u = Vector2::zeros();
                let mut g = Matrix2::zeros();
                for k in 0..6 {
                    u += xu[k] * ep.phi[k];
                    g += xu[k] * ep.grad[k].transpose();
                }
                let p: f64 = (0..3).map(|k| xp[k] * ep.psi[k]).sum();
                let div = g.trace();
                let conv = if convective { g * u } else { Vector2::zeros() };
                let w = ep.dx;
                for a in 0..6 {
                    let ga = ep.grad[a];
                    for c in 0..2 {
                        let grad_uc = Vector2::new(g[(c, 0)], g[(c, 1)]);
                        re[2 * a + c] +=
                            w * (mu * grad_uc.dot(&ga) + conv[c] * ep.phi[a] - p * ga[c]);
                    }
                }
                for b in 0..3 {
                    re[12 + b] += w * (-ep.psi[b] * div);
                    pm[b] += w * ep.psi[b];
                }
                let Some(lin) = lin else { continue };
                for a in 0..6 {
                    let ga = ep.grad[a];
                    for b in 0..6 {
                        let gb = ep.grad[b];
                        let diff = w * mu * ga.dot(&gb);
                        let adv = match lin {
                            Linearization::None => 0.0,
                            _ => w * u.dot(&gb) * ep.phi[a],
                        };
                        for c in 0..2 {
                            ke[2 * a + c][2 * b + c] += diff + adv;
                            if lin == Linearization::Newton {
                                for d in 0..2 {
                                    ke[2 * a + c][2 * b + d] += w * ep.phi[b] * g[(c, d)] * ep.phi[a];
                                }
                            }
                        }
                    }
                    for b in 0..3 {
                        for c in 0..2 {
                            let v = -w * ep.psi[b] * ga[c];
                            ke[2 * a + c][12 + b] += v;
                            ke[12 + b][2 * a + c] += v;
                        }
                    }
                }
            }
            for b in 0..3 {
                re[12 + b] += sigma * pm[b];
                p_mass[dofs[12 + b] - 2 * self.n_nodes] += pm[b];
            }
            for (i, &gi) in dofs.iter().enumerate() {
                r[gi] += re[i];
            }
            if lin.is_some() {
                for (i, &gi) in dofs.iter().enumerate() {
                    for (j, &gj) in dofs.iter().enumerate() {
                        if i >= 12 && j >= 12 {
                            continue;
                        }
                        let k = self.matrix.find(gi, gj).expect("entry in pattern");
                        self.matrix.values_mut()[k] += ke[i][j];
                    }
                }
            }
        }
        let mut constraint = 0.0;
        for (j, m) in p_mass.iter().enumerate() {
            let pj = 2 * self.n_nodes + j;
            constraint += m * x[pj];
            if lin.is_some() {
                let k = self.matrix.find(pj, sigma_idx).expect("entry in pattern");
                self.matrix.values_mut()[k] = *m;
                let k = self.matrix.find(sigma_idx, pj).expect("entry in pattern");
                self.matrix.values_mut()[k] = *m;
            }
        }
        r[sigma_idx] = constraint;
        for (&node, v) in self.dirichlet.nodes.iter().zip(&self.dirichlet.values) {
            for (c, val) in [v.x, v.y].into_iter().enumerate() {
                let i = 2 * node + c;
                r[i] = x[i] - val;
                if lin.is_some() {
                    self.matrix.replace_row_with_identity(i, 1.0);
                }
            }
        }
        r
    }

    fn divergence_residual(&self, r: &[f64]) -> f64 {
        let start = 2 * self.n_nodes;
        norm2(&r[start..start + self.n_vertices])
    }

    fn solve_linear(&mut self, rhs: &[f64]) -> Result<(Vec<f64>, LinearSolveReport), LinsysError> {
        if self.solver.is_none() {
            self.solver = Some(DirectSolver::analyze(&self.matrix)?);
        }
        let solver = self.solver.as_ref().expect("analysed");
        solver.factor(&self.matrix)?.solve(rhs)
    }

    fn to_field(
        &self,
        x: &[f64],
        convective: bool,
        report: ConvergenceReport,
        mesh: Arc<Mesh>,
    ) -> FlowField {
        let velocity = (0..self.n_nodes)
            .map(|i| Vector2::new(x[2 * i], x[2 * i + 1]))
            .collect();
        let start = 2 * self.n_nodes;
        FlowField {
            mesh,
            velocity,
            pressure: x[start..start + self.n_vertices].to_vec(),
            multiplier: x[self.dim() - 1],
            lambda: self.problem.lambda,
            mu: self.problem.mu,
            convective,
            report,
        }
    }
}

fn element_dofs(mesh: &Mesh, t: usize, n_nodes: usize) -> [usize; 15] {
    let nodes = mesh.element_nodes(t);
    let mut d = [0; 15];
    for k in 0..6 {
        d[2 * k] = 2 * nodes[k];
        d[2 * k + 1] = 2 * nodes[k] + 1;
    }
    for k in 0..3 {
        d[12 + k] = 2 * n_nodes + nodes[k];
    }
    d
}

fn check_admissible(problem: &FlowProblem, mesh: &Mesh) -> Result<(), SolverError> {
    if !is_admissible(&problem.channel, &problem.shape, &problem.placement, 0.0) {
        return Err(SolverError::Inadmissible);
    }
    if let Some(dom) = mesh.domain() {
        if dom.placement != problem.placement || dom.channel != problem.channel {
            return Err(SolverError::InvalidProblem(
                "mesh was generated for a different placement or channel".into(),
            ));
        }
    }
    Ok(())
}

fn map_linear(e: LinsysError, newton: bool) -> SolverError {
    match e {
        LinsysError::SingularMatrix { .. } if newton => SolverError::SingularJacobian,
        LinsysError::SingularMatrix { .. } => SolverError::SingularMatrix,
        other => SolverError::Linear(other.to_string()),
    }
}

/// Newton-type step `x <- x + t dx` with `J dx = -R(x)`.
fn step(
    sys: &mut System<'_>,
    x: &mut Vec<f64>,
    lin: Linearization,
    opts: &SolverOptions,
) -> Result<(f64, f64, f64, LinearSolveReport), SolverError> {
    let convective = lin != Linearization::None;
    let r = sys.assemble(x, convective, Some(lin));
    let r0 = norm2(&r);
    let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
    let (dx, report) = sys
        .solve_linear(&rhs)
        .map_err(|e| map_linear(e, lin == Linearization::Newton))?;
    let mut frac = 1.0;
    let mut trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
    let mut r_new = sys.assemble(&trial, convective, None);
    let mut res = norm2(&r_new);
    if lin == Linearization::Newton && opts.damping {
        let mut halvings = 0;
        while !(res <= r0) && halvings < opts.max_halvings {
            frac *= 0.5;
            halvings += 1;
            trial = x.iter().zip(&dx).map(|(a, b)| a + frac * b).collect();
            r_new = sys.assemble(&trial, convective, None);
            res = norm2(&r_new);
        }
    }
    if trial.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonConvergence {
            history: vec![r0, f64::NAN],
        });
    }
    *x = trial;
    let div = sys.divergence_residual(&r_new);
    Ok((res, div, frac, report))
}

/// The Stokes problem (no convective term).
pub fn solve_stokes(problem: &FlowProblem, mesh: &Arc<Mesh>) -> Result<FlowField, SolverError> {
    check_admissible(problem, mesh)?;
    let mut sys = System::new(problem, mesh)?;
    let mut x = sys.lift(&vec![0.0; sys.dim()]);
    let (res, div, frac, lin) = step(&mut sys, &mut x, Linearization::None, &SolverOptions::default())?;
    let report = ConvergenceReport {
        history: vec![IterationRecord {
            kind: StepKind::Stokes,
            residual: res,
            step_fraction: frac,
            linear: lin,
        }],
        picard_iters: 0,
        newton_iters: 0,
        residual: res,
        divergence_residual: div,
        converged: true,
    };
    Ok(sys.to_field(&x, false, report, mesh.clone()))
}

/// Picard warm-up from the Stokes solution (or from `initial`), then Newton
/// until the residual norm is below `newton_tol`.
pub fn solve_navier_stokes(
    problem: &FlowProblem,
    mesh: &Arc<Mesh>,
    opts: &SolverOptions,
) -> Result<FlowField, SolverError> {
    solve_navier_stokes_from(problem, mesh, opts, None)
}

pub fn solve_navier_stokes_from(
    problem: &FlowProblem,
    mesh: &Arc<Mesh>,
    opts: &SolverOptions,
    initial: Option<&FlowField>,
) -> Result<FlowField, SolverError> {
    check_admissible(problem, mesh)?;
    let mut sys = System::new(problem, mesh)?;
    let mut history = Vec::new();
    let mut x = match initial {
        Some(f) => {
            if f.velocity.len() != sys.n_nodes || f.pressure.len() != sys.n_vertices {
                return Err(SolverError::InvalidProblem(
                    "initial guess lives on a different mesh".into(),
                ));
            }
            sys.lift(&f.to_vector())
        }
        None => {
            let mut x = sys.lift(&vec![0.0; sys.dim()]);
            let (res, _, frac, lin) = step(&mut sys, &mut x, Linearization::None, opts)?;
            history.push(IterationRecord {
                kind: StepKind::Stokes,
                residual: res,
                step_fraction: frac,
                linear: lin,
            });
            x
        }
    };
    let mut res = norm2(&sys.assemble(&x, true, None));
    let mut picard = 0;
    while picard < opts.picard_iters && !(res <= opts.newton_tol) {
        let (r, _, frac, lin) = step(&mut sys, &mut x, Linearization::Picard, opts)?;
        res = r;
        picard += 1;
        history.push(IterationRecord {
            kind: StepKind::Picard,
            residual: r,
            step_fraction: frac,
            linear: lin,
        });
    }
    let mut newton = 0;
    while !(res <= opts.newton_tol) {
        if newton >= opts.max_newton {
            return Err(SolverError::NonConvergence {
                history: history.iter().map(|h| h.residual).collect(),
            });
        }
        let (r, _, frac, lin) = step(&mut sys, &mut x, Linearization::Newton, opts)?;
        res = r;
        newton += 1;
        history.push(IterationRecord {
            kind: StepKind::Newton,
            residual: r,
            step_fraction: frac,
            linear: lin,
        });
        if !res.is_finite() {
            return Err(SolverError::NonConvergence {
                history: history.iter().map(|h| h.residual).collect(),
            });
        }
    }
    let r = sys.assemble(&x, true, None);
    let report = ConvergenceReport {
        history,
        picard_iters: picard,
        newton_iters: newton,
        residual: norm2(&r),
        divergence_residual: sys.divergence_residual(&r),
        converged: true,
    };
    Ok(sys.to_field(&x, true, report, mesh.clone()))
}

/// Euclidean norm of the weak residual of `field`, reassembled element by
/// element against every test function that does not carry Dirichlet data:
/// momentum against interior velocity basis functions, continuity against
/// every pressure basis function, and the mean constraint.
pub fn residual_norm(field: &FlowField, problem: &FlowProblem) -> f64 {
    let mesh = field.mesh.as_ref();
    let nv = mesh.num_vertices();
    let dirichlet = apply_dirichlet(problem, mesh);
    let mut fixed = vec![false; mesh.num_nodes()];
    for &n in &dirichlet.nodes {
        fixed[n] = true;
    }
    let mut mom = vec![Vector2::<f64>::zeros(); mesh.num_nodes()];
    let mut cont = vec![0.0; nv];
    let mut mean = 0.0;
    let mut bc = 0.0_f64;
    for (&n, v) in dirichlet.nodes.iter().zip(&dirichlet.values) {
        bc = bc.hypot((field.velocity[n] - v).norm());
    }
    for t in 0..mesh.num_triangles() {
        let nodes = mesh.element_nodes(t);
        let coords = mesh.element_coords(t);
        let rule = crate::fem::element_rule(mesh, t);
        for q in &rule {
            let ep = element_point(&coords, q).expect("valid element map");
            let (u, g, p) = field.eval_local(t, q.xi, q.eta);
            let f = problem
                .forcing
                .as_ref()
                .map_or(Vector2::zeros(), |f| f.value(&ep.x));
            let conv = g * u;
            for k in 0..6 {
                let node = nodes[k];
                if fixed[node] {
                    continue;
                }
                let gk = ep.grad[k];
                let visc = problem.mu * (g * gk);
                mom[node] += (visc + (conv - f) * ep.phi[k] - gk * p) * ep.dx;
            }
            for k in 0..3 {
                cont[nodes[k]] += (field.multiplier - g.trace()) * ep.psi[k] * ep.dx;
            }
            mean += p * ep.dx;
        }
    }
    let sq: f64 = mom.iter().map(|m| m.norm_squared()).sum::<f64>()
        + cont.iter().map(|c| c * c).sum::<f64>()
        + mean * mean
        + bc * bc;
    sq.sqrt()
}

/// Solve from `n_starts` initial guesses (the Stokes solution, then random
/// perturbations of it) and return the largest pairwise H1 distance between
/// the converged velocities.
pub fn uniqueness_probe(
    problem: &FlowProblem,
    mesh: &Arc<Mesh>,
    opts: &SolverOptions,
    n_starts: usize,
    seed: u64,
) -> Result<f64, SolverError> {
    if n_starts < 2 {
        return Err(SolverError::InvalidProblem("uniqueness probe needs at least two starts".into()));
    }
    let stokes = solve_stokes(problem, mesh)?;
    let scale = stokes
        .velocity
        .iter()
        .map(|v| v.norm())
        .fold(0.0_f64, f64::max)
        .max(problem.lambda);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut fields = Vec::with_capacity(n_starts);
    fields.push(solve_navier_stokes(problem, mesh, opts)?);
    for _ in 1..n_starts {
        let mut guess = stokes.clone();
        for v in guess.velocity.iter_mut() {
            *v += Vector2::new(
                rng.random_range(-1.0..1.0) * scale,
                rng.random_range(-1.0..1.0) * scale,
            );
        }
        fields.push(solve_navier_stokes_from(problem, mesh, opts, Some(&guess))?);
    }
    let mut worst = 0.0_f64;
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            worst = worst.max(fields[i].h1_distance(&fields[j]));
        }
    }
    Ok(worst)
}

/// Forcing `f = -mu lap u + (u . grad) u + grad p` of a manufactured
/// velocity given by a stream function and a pressure, with its gradient.
#[derive(Debug, Clone)]
pub struct MmsForcing<S, P> {
    pub velocity: StreamVelocity<S>,
    pub pressure: P,
    pub mu: f64,
}

pub fn mms_forcing<S: SmoothScalar, P: SmoothScalar>(
    stream: S,
    pressure: P,
    mu: f64,
) -> MmsForcing<S, P> {
    MmsForcing {
        velocity: StreamVelocity::new(stream),
        pressure,
        mu,
    }
}

impl<S: SmoothScalar, P: SmoothScalar> AnalyticField for MmsForcing<S, P> {
    fn eval(&self, p: &Point2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        let v = &self.velocity;
        let d = |i: usize, dx: u32, dy: u32| v.partial(p, i, dx, dy);
        let u = [d(0, 0, 0), d(1, 0, 0)];
        // Partial derivative orders for d/dx1 and d/dx2.
        let e = [(1u32, 0u32), (0, 1)];
        let mut f = Vector2::zeros();
        let mut g = Matrix2::zeros();
        for i in 0..2 {
            let lap = d(i, 2, 0) + d(i, 0, 2);
            let conv: f64 = (0..2).map(|k| u[k] * d(i, e[k].0, e[k].1)).sum();
            let (pi, pj) = e[i];
            f[i] = -self.mu * lap + conv + self.pressure.partial(p, pi, pj);
            for j in 0..2 {
                let (jx, jy) = e[j];
                let lap_j = d(i, 2 + jx, jy) + d(i, jx, 2 + jy);
                let conv_j: f64 = (0..2)
                    .map(|k| {
                        let (kx, ky) = e[k];
                        d(k, jx, jy) * d(i, kx, ky) + u[k] * d(i, kx + jx, ky + jy)
                    })
                    .sum();
                g[(i, j)] = -self.mu * lap_j + conv_j + self.pressure.partial(p, pi + jx, pj + jy);
            }
        }
        (f, g)
    }
}

/// Mesh for a problem: symmetrized when the problem runs in symmetric mode
/// with a mirror-symmetric body at `h = 0`, `theta = 0`.
pub fn mesh_for_problem(
    problem: &FlowProblem,
    options: &crate::mesh::MeshOptions,
) -> Result<Arc<Mesh>, crate::mesh::MeshError> {
    let mesh = crate::mesh::triangulate(&problem.channel, &problem.shape, &problem.placement, options)?;
    let mirror = problem.symmetric_mode
        && problem.placement.h == 0.0
        && problem.placement.theta == 0.0
        && problem.shape.is_mirror_symmetric();
    if mirror {
        Ok(Arc::new(crate::mesh::symmetrize(&mesh)?))
    } else {
        Ok(Arc::new(mesh))
    }
}

/// A manufactured-solution refinement study: the exact velocity is the
/// perpendicular gradient of `stream`, the forcing and all boundary data come
/// from it, and meshes are generated at each size with a uniform size field.
#[derive(Debug, Clone)]
pub struct MmsCase {
    pub mu: f64,
    pub channel: Channel,
    pub shape: BodyShape,
    pub placement: Placement,
    pub stream: TrigScalar,
    pub pressure: TrigScalar,
    pub sizes: Vec<f64>,
}

impl MmsCase {
    /// The rectangle `[-3/4, 3/4] x [-1/2, 1/2]` around a disk of radius 0.1 with sizes
    /// 0.12 down to 0.015.
    pub fn standard() -> Self {
        Self {
            mu: 1.0,
            channel: Channel::new(0.75, 0.5).expect("valid channel"),
            shape: BodyShape::disk(0.1).expect("valid disk"),
            placement: Placement::default(),
            stream: TrigScalar {
                terms: vec![[0.5, 1.7, 0.3, 2.1, 0.4]],
            },
            pressure: TrigScalar {
                terms: vec![[1.0, 1.5, 0.2, 1.2, 1.0]],
            },
            sizes: vec![0.12, 0.06, 0.03, 0.015],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsLevel {
    pub size: f64,
    /// `sqrt(area / triangles)`.
    pub h: f64,
    pub velocity_dofs: usize,
    pub velocity_l2: f64,
    pub velocity_h1: f64,
    pub pressure_l2: f64,
    pub newton_iters: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsStudy {
    pub levels: Vec<MmsLevel>,
    /// Least-squares slopes of log error against log h.
    pub order_velocity_l2: f64,
    pub order_velocity_h1: f64,
    pub order_pressure_l2: f64,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

pub fn mms_study(case: &MmsCase, opts: &SolverOptions) -> Result<MmsStudy, SolverError> {
    use crate::mesh::{triangulate, MeshOptions};
    let exact = Arc::new(StreamVelocity::new(case.stream.clone()));
    let forcing = Arc::new(mms_forcing(case.stream.clone(), case.pressure.clone(), case.mu));
    let profile = InflowProfile::couette(case.channel.half_height(), 0.0)
        .map_err(|e| SolverError::InvalidProblem(e.to_string()))?;
    let problem = FlowProblem::new(
        case.mu,
        1.0,
        profile,
        case.channel,
        case.shape.clone(),
        case.placement,
    )?
    .with_forcing(forcing)
    .with_boundary_data(exact.clone());
    let mut levels = Vec::with_capacity(case.sizes.len());
    for &size in &case.sizes {
        let mopts = MeshOptions {
            body_size: size,
            curvature_factor: f64::INFINITY,
            ..MeshOptions::with_size(size)
        };
        let mesh = triangulate(&case.channel, &case.shape, &case.placement, &mopts)
            .map_err(|e| SolverError::InvalidProblem(e.to_string()))?;
        let mesh = Arc::new(mesh);
        let field = solve_navier_stokes(&problem, &mesh, opts)?;
        let (l2, semi, p) = field.errors(exact.as_ref(), &case.pressure, true);
        levels.push(MmsLevel {
            size,
            h: (mesh.area() / mesh.num_triangles() as f64).sqrt(),
            velocity_dofs: 2 * mesh.num_nodes(),
            velocity_l2: l2,
            velocity_h1: l2.hypot(semi),
            pressure_l2: p,
            newton_iters: field.report.newton_iters,
            residual: field.report.residual,
        });
    }
    let lh: Vec<f64> = levels.iter().map(|l| l.h.ln()).collect();
    let slope = |f: fn(&MmsLevel) -> f64| {
        let y: Vec<f64> = levels.iter().map(|l| f(l).ln()).collect();
        fit_slope(&lh, &y)
    };
    Ok(MmsStudy {
        order_velocity_l2: slope(|l| l.velocity_l2),
        order_velocity_h1: slope(|l| l.velocity_h1),
        order_pressure_l2: slope(|l| l.pressure_l2),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{triangulate, MeshOptions};

    fn couette_problem(lambda: f64, h: f64) -> (FlowProblem, Arc<Mesh>) {
        let ch = Channel::new(2.0, 1.0).unwrap();
        let shape = BodyShape::ellipse(0.3, 0.15).unwrap();
        let pl = Placement::new(h, 0.0);
        let prof = InflowProfile::couette(1.0, 1.0).unwrap();
        let pb = FlowProblem::new(1.0, lambda, prof, ch, shape.clone(), pl).unwrap();
        let mesh = triangulate(&ch, &shape, &pl, &MeshOptions::with_size(0.25)).unwrap();
        (pb, Arc::new(mesh))
    }

    #[test]
    fn dirichlet_corner_values() {
        let (pb, mesh) = couette_problem(0.5, 0.1);
        let d = apply_dirichlet(&pb, &mesh);
        for (&n, v) in d.nodes.iter().zip(&d.values) {
            let p = mesh.node(n);
            if (p.x + 2.0).abs() < 1e-12 && (p.y - 1.0).abs() < 1e-12 {
                assert_eq!(*v, Vector2::new(0.5, 0.0));
            }
            if (p.x + 2.0).abs() < 1e-12 && (p.y + 1.0).abs() < 1e-12 {
                assert_eq!(*v, Vector2::zeros());
            }
        }
        let zero = apply_dirichlet(&pb.with_lambda(0.0), &mesh);
        assert!(zero.values.iter().all(|v| *v == Vector2::zeros()));
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let (pb, mesh) = couette_problem(0.0, 0.1);
        let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).unwrap();
        assert!(f.h1_norm() == 0.0);
        assert!(f.pressure.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn stokes_is_linear_and_divergence_free() {
        let (pb, mesh) = couette_problem(0.01, -0.1);
        let a = solve_stokes(&pb, &mesh).unwrap();
        let b = solve_stokes(&pb.with_lambda(0.02), &mesh).unwrap();
        let scale = b.velocity.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (x, y) in a.velocity.iter().zip(&b.velocity) {
            assert!((2.0 * x - y).norm() <= 1e-10 * scale);
        }
        assert!(a.report.divergence_residual < 1e-12);
        assert!(a.pressure_mean().abs() < 1e-12);
    }

    #[test]
    fn newton_converges_and_residual_is_reproduced() {
        let (pb, mesh) = couette_problem(5.0, 0.1);
        let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).unwrap();
        assert!(f.report.residual <= 1e-10);
        assert!(f.report.newton_iters >= 1);
        let r = residual_norm(&f, &pb);
        assert!(r <= 1e-10, "{r}");
        let mut bumped = f.clone();
        let k = bumped.velocity.len() / 2;
        bumped.velocity[k] += Vector2::new(1e-3, 0.0);
        assert!(residual_norm(&bumped, &pb) > 1e-6);
    }

    #[test]
    fn manufactured_forcing_matches_finite_differences() {
        let stream = TrigScalar {
            terms: vec![[0.7, 1.3, 0.2, 0.9, -0.4]],
        };
        let pres = TrigScalar {
            terms: vec![[0.5, 0.8, 0.1, 1.1, 0.3]],
        };
        let f = mms_forcing(stream.clone(), pres.clone(), 0.3);
        let p = Point2::new(0.31, -0.17);
        let (fv, fg) = f.eval(&p);
        // Independent evaluation from second differences of the velocity.
        let vel = StreamVelocity::new(stream);
        let h = 1e-4;
        let u = |q: Point2<f64>| vel.value(&q);
        let ex = Vector2::new(h, 0.0);
        let ey = Vector2::new(0.0, h);
        let lap = (u(p + ex) + u(p - ex) + u(p + ey) + u(p - ey) - 4.0 * u(p)) / (h * h);
        let du_dx = (u(p + ex) - u(p - ex)) / (2.0 * h);
        let du_dy = (u(p + ey) - u(p - ey)) / (2.0 * h);
        let uu = u(p);
        let gp = Vector2::new(
            (pres.partial(&(p + ex), 0, 0) - pres.partial(&(p - ex), 0, 0)) / (2.0 * h),
            (pres.partial(&(p + ey), 0, 0) - pres.partial(&(p - ey), 0, 0)) / (2.0 * h),
        );
        let expect = -0.3 * lap + du_dx * uu.x + du_dy * uu.y + gp;
        assert!((fv - expect).norm() < 1e-6, "{fv} vs {expect}");
        let fd = |q: Point2<f64>| f.eval(&q).0;
        let gx = (fd(p + ex) - fd(p - ex)) / (2.0 * h);
        let gy = (fd(p + ey) - fd(p - ey)) / (2.0 * h);
        for i in 0..2 {
            assert!((fg[(i, 0)] - gx[i]).abs() < 1e-6);
            assert!((fg[(i, 1)] - gy[i]).abs() < 1e-6);
        }
        let zero = mms_forcing(TrigScalar::default(), TrigScalar::default(), 1.0);
        assert_eq!(zero.eval(&p).0, Vector2::zeros());
    }

    #[test]
    fn locate_finds_quadrature_points() {
        let (_, mesh) = couette_problem(0.0, 0.2);
        for t in (0..mesh.num_triangles()).step_by(17) {
            let x = mesh.element_coords(t);
            let p = map_point(&x, 0.2, 0.3);
            let loc = locate(&mesh, &p).unwrap();
            let q = map_point(&mesh.element_coords(loc.element), loc.xi, loc.eta);
            assert!((p - q).norm() < 1e-12);
        }
        assert!(locate(&mesh, &Point2::new(5.0, 0.0)).is_none());
    }
}
