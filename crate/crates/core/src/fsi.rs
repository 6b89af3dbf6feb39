//! Restoring forces, the global force `phi(lambda, h) = f(h) - lift`, and
//! the equilibrium offsets, sweeps and certificates built on it.

use std::fmt;
use std::io::{self, Write};

use log::{debug, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::extension::lift_field_w;
use crate::geometry::{body_extents, default_margin, is_admissible, BodyShape, Extents, Placement};
use crate::lift::{clip_noise, lift_boundary, lift_volume};
use crate::mesh::{MeshError, MeshOptions};
use crate::ns_solver::{
    fit_slope, mesh_for_problem, solve_navier_stokes, FlowField, FlowProblem, SolverError, SolverOptions,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FsiError {
    #[error("offset {h} is outside the admissible range ({lo}, {hi})")]
    OutOfRange { h: f64, lo: f64, hi: f64 },
    #[error("no sign change of phi on [{a}, {b}]: phi(a) = {phi_a}, phi(b) = {phi_b}")]
    NoSignChange { a: f64, b: f64, phi_a: f64, phi_b: f64 },
    #[error("flow solve failed at h = {h}: {source}")]
    Solver { h: f64, source: SolverError },
    #[error("meshing failed at h = {h}: {source}")]
    Mesh { h: f64, source: MeshError },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("only {found} of the required {required} points were resolved")]
    InsufficientPoints { found: usize, required: usize },
}

/// The restoring force family
///
/// `f(h) = gamma h + K_b [eps_b(0)^-3/2 - eps_b(h)^-3/2] + K_t [g(eps_t(h)) - g(eps_t(0))]`
///
/// with `g(e) = e^-3/2 + U e^-3` and `U` the top wall speed (0 or 1). The
/// rotating variant measures the gaps with the extents at `theta`, keeps the
/// reference gaps at `theta = 0` and adds `c_theta theta (1 + h^2)`.
#[derive(Debug, Clone)]
pub struct RestoringForce {
    pub gamma: f64,
    pub k_b: f64,
    pub k_t: f64,
    pub u_top: f64,
    pub half_height: f64,
    pub delta_b: f64,
    pub delta_t: f64,
    pub c_theta: f64,
    body: Option<BodyShape>,
}

impl RestoringForce {
    pub fn new(
        gamma: f64,
        k_b: f64,
        k_t: f64,
        u_top: f64,
        half_height: f64,
        delta_b: f64,
        delta_t: f64,
    ) -> Result<Self, FsiError> {
        let f = Self {
            gamma,
            k_b,
            k_t,
            u_top,
            half_height,
            delta_b,
            delta_t,
            c_theta: 0.0,
            body: None,
        };
        f.validate()?;
        Ok(f)
    }

    /// The family for the channel, body and top wall speed of `problem`.
    pub fn for_problem(problem: &FlowProblem, gamma: f64, k_b: f64, k_t: f64) -> Result<Self, FsiError> {
        let ext = body_extents(&problem.shape, 0.0);
        let mut f = Self::new(
            gamma,
            k_b,
            k_t,
            problem.profile.u_top(),
            problem.channel.half_height(),
            ext.delta_b,
            ext.delta_t,
        )?;
        f.body = Some(problem.shape.clone());
        Ok(f)
    }

    pub fn with_theta_coupling(mut self, c_theta: f64) -> Result<Self, FsiError> {
        if !(c_theta >= 0.0 && c_theta.is_finite()) {
            return Err(FsiError::InvalidModel(format!("c_theta must be non-negative, got {c_theta}")));
        }
        self.c_theta = c_theta;
        Ok(self)
    }

    fn validate(&self) -> Result<(), FsiError> {
        let positive = [
            ("gamma", self.gamma),
            ("K_b", self.k_b),
            ("K_t", self.k_t),
            ("H", self.half_height),
            ("delta_b", self.delta_b),
            ("delta_t", self.delta_t),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FsiError::InvalidModel(format!("{name} must be positive, got {v}")));
            }
        }
        if self.u_top != 0.0 && self.u_top != 1.0 {
            return Err(FsiError::InvalidModel(format!("U must be 0 or 1, got {}", self.u_top)));
        }
        if self.delta_b + self.delta_t >= 2.0 * self.half_height {
            return Err(FsiError::InvalidModel("body does not fit between the walls".into()));
        }
        Ok(())
    }

    fn g(&self, e: f64) -> f64 {
        e.powf(-1.5) + self.u_top * e.powi(-3)
    }

    /// Gaps `(eps_b, eps_t)` at offset `h` for `theta = 0`.
    pub fn gaps(&self, h: f64) -> (f64, f64) {
        (
            self.half_height - self.delta_b + h,
            self.half_height - self.delta_t - h,
        )
    }

    /// Open interval of offsets without contact at `theta = 0`.
    pub fn range(&self) -> (f64, f64) {
        (self.delta_b - self.half_height, self.half_height - self.delta_t)
    }

    fn extents_at(&self, theta: f64) -> Result<(f64, f64), FsiError> {
        if theta == 0.0 {
            return Ok((self.delta_b, self.delta_t));
        }
        match &self.body {
            Some(shape) => {
                let e = body_extents(shape, theta);
                Ok((e.delta_b, e.delta_t))
            }
            None => Err(FsiError::InvalidModel(
                "the rotating variant needs the body shape".into(),
            )),
        }
    }

    fn eval(&self, h: f64, delta_b: f64, delta_t: f64) -> Result<f64, FsiError> {
        let big_h = self.half_height;
        let (eb, et) = (big_h - delta_b + h, big_h - delta_t - h);
        if !(eb > 0.0 && et > 0.0) {
            return Err(FsiError::OutOfRange {
                h,
                lo: delta_b - big_h,
                hi: big_h - delta_t,
            });
        }
        let (eb0, et0) = self.gaps(0.0);
        Ok(self.gamma * h + self.k_b * (eb0.powf(-1.5) - eb.powf(-1.5)) + self.k_t * (self.g(et) - self.g(et0)))
    }

    pub fn value(&self, h: f64) -> Result<f64, FsiError> {
        self.eval(h, self.delta_b, self.delta_t)
    }

    pub fn value_theta(&self, h: f64, theta: f64) -> Result<f64, FsiError> {
        let (db, dt) = self.extents_at(theta)?;
        Ok(self.eval(h, db, dt)? + self.c_theta * theta * (1.0 + h * h))
    }
}

/// Settings shared by every equilibrium computation.
#[derive(Debug, Clone, PartialEq)]
pub struct FsiOptions {
    pub mesh: MeshOptions,
    pub solver: SolverOptions,
    /// Defaults to `1e-4 H`.
    pub tol_h: Option<f64>,
    /// Defaults to `1e-8 max(1, gamma H)`.
    pub tol_phi: Option<f64>,
    /// Clearance to the walls required of every offset; defaults to
    /// `max(0.02 H, 2 * body mesh size)`.
    pub margin: Option<f64>,
    pub max_iters: usize,
    pub max_expansions: usize,
    /// Mesh size factor of the single retry after a failed nonlinear solve.
    pub retry_refinement: f64,
    /// Skip the flow solve at `lambda = 0`, where the solution vanishes.
    pub zero_lambda_shortcut: bool,
}

impl Default for FsiOptions {
    fn default() -> Self {
        Self {
            mesh: MeshOptions::with_size(0.15),
            solver: SolverOptions::default(),
            tol_h: None,
            tol_phi: None,
            margin: None,
            max_iters: 60,
            max_expansions: 8,
            retry_refinement: 0.7,
            zero_lambda_shortcut: true,
        }
    }
}

impl FsiOptions {
    pub fn with_mesh_size(size: f64) -> Self {
        Self {
            mesh: MeshOptions::with_size(size),
            ..Self::default()
        }
    }

    pub fn tol_h(&self, problem: &FlowProblem) -> f64 {
        self.tol_h.unwrap_or(1e-4 * problem.channel.half_height())
    }

    pub fn tol_phi(&self, force: &RestoringForce) -> f64 {
        self.tol_phi
            .unwrap_or(1e-8 * (force.gamma * force.half_height).max(1.0))
    }

    pub fn margin(&self, problem: &FlowProblem) -> f64 {
        self.margin
            .unwrap_or_else(|| default_margin(&problem.channel, self.mesh.body_size))
    }
}

/// Offsets `[lo, hi]` keeping the margin to both walls at the problem's
/// rotation.
pub fn admissible_range(problem: &FlowProblem, opts: &FsiOptions) -> (f64, f64) {
    let ext = body_extents(&problem.shape, problem.placement.theta);
    let big_h = problem.channel.half_height();
    // Nudged inward so that the ends pass the strict admissibility test.
    let m = opts.margin(problem) + 1e-12 * big_h;
    (ext.delta_b - big_h + m, big_h - ext.delta_t - m)
}

/// `0.5 min(eps_b(0), eps_t(0))` at the problem's rotation.
pub fn initial_half_width(problem: &FlowProblem) -> f64 {
    let ext = body_extents(&problem.shape, problem.placement.theta);
    let big_h = problem.channel.half_height();
    0.5 * (big_h - ext.delta_b).min(big_h - ext.delta_t)
}

/// One evaluation of the global force.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceSample {
    pub h: f64,
    pub phi: f64,
    pub restoring: f64,
    pub lift_volume: f64,
    pub lift_boundary: f64,
    pub newton_iters: usize,
    pub velocity_dofs: usize,
    /// The solve was repeated on a refined mesh after a failure.
    pub retried: bool,
    /// The flow solve was skipped because `lambda = 0`.
    pub shortcut: bool,
}

fn solve_at(problem: &FlowProblem, h: f64, mesh: &MeshOptions, solver: &SolverOptions) -> Result<FlowField, FsiError> {
    let m = mesh_for_problem(problem, mesh).map_err(|source| FsiError::Mesh { h, source })?;
    solve_navier_stokes(problem, &m, solver).map_err(|source| FsiError::Solver { h, source })
}

/// `phi(lambda, h) = f(h, theta) - lift` with the volume lift of the
/// converged flow, `lambda`, `theta` and the body taken from `problem`.
pub fn global_force(
    problem: &FlowProblem,
    force: &RestoringForce,
    h: f64,
    opts: &FsiOptions,
) -> Result<ForceSample, FsiError> {
    let theta = problem.placement.theta;
    let restoring = force.value_theta(h, theta)?;
    let placement = Placement::new(h, theta);
    let margin = opts.margin(problem);
    if !is_admissible(&problem.channel, &problem.shape, &placement, margin) {
        let (lo, hi) = admissible_range(problem, opts);
        return Err(FsiError::OutOfRange { h, lo, hi });
    }
    let mut sample = ForceSample {
        h,
        phi: restoring,
        restoring,
        lift_volume: 0.0,
        lift_boundary: 0.0,
        newton_iters: 0,
        velocity_dofs: 0,
        retried: false,
        shortcut: false,
    };
    if problem.lambda == 0.0 && opts.zero_lambda_shortcut {
        sample.shortcut = true;
        return Ok(sample);
    }
    let pb = problem.with_placement(placement);
    let field = match solve_at(&pb, h, &opts.mesh, &opts.solver) {
        Err(FsiError::Solver {
            source: SolverError::NonConvergence { .. },
            ..
        }) => {
            warn!("nonlinear solve failed at h = {h}, retrying on a refined mesh");
            sample.retried = true;
            let mut fine = opts.mesh;
            fine.size *= opts.retry_refinement;
            fine.body_size *= opts.retry_refinement;
            solve_at(&pb, h, &fine, &opts.solver)?
        }
        other => other?,
    };
    let w = lift_field_w(&pb.layout()).map_err(|e| FsiError::InvalidModel(e.to_string()))?;
    sample.lift_volume = clip_noise(lift_volume(&field, &w), pb.lambda);
    sample.lift_boundary = clip_noise(lift_boundary(&field), pb.lambda);
    sample.phi = restoring - sample.lift_volume;
    sample.newton_iters = field.report.newton_iters;
    sample.velocity_dofs = 2 * field.mesh().num_nodes();
    Ok(sample)
}

/// A root of `phi(lambda, .)` with its bracketing history.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub lambda: f64,
    pub theta: f64,
    pub h_star: f64,
    pub phi_star: f64,
    pub lift_star: f64,
    /// Bracket after each step, starting with the initial one.
    pub brackets: Vec<(f64, f64)>,
    /// `phi` at the ends of the final bracket.
    pub phi_a: f64,
    pub phi_b: f64,
    pub iterations: usize,
    /// Every evaluation, in order.
    pub samples: Vec<ForceSample>,
    pub monotonicity_warnings: usize,
}

impl EquilibriumResult {
    pub fn final_bracket(&self) -> (f64, f64) {
        *self.brackets.last().expect("bracket history is never empty")
    }
}

fn count_monotonicity_violations(samples: &[ForceSample]) -> usize {
    let mut sorted: Vec<&ForceSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.h.total_cmp(&b.h));
    sorted
        .windows(2)
        .filter(|p| p[1].h > p[0].h && p[1].phi <= p[0].phi)
        .count()
}

/// Bracketed root of `phi(lambda, .)` on `[a, b]`, which needs
/// `phi(a) < 0 < phi(b)`.
///
/// The first step is the midpoint; later steps are Illinois regula falsi
/// with a bisection step whenever the bracket fails to halve over two
/// steps. Iteration stops once `|phi| <= tol_phi` or the bracket is shorter
/// than `tol_h / 2`.
pub fn find_equilibrium(
    problem: &FlowProblem,
    force: &RestoringForce,
    bracket: (f64, f64),
    opts: &FsiOptions,
) -> Result<EquilibriumResult, FsiError> {
    let (a, b) = bracket;
    if !(a < b) {
        return Err(FsiError::InvalidModel(format!("empty bracket [{a}, {b}]")));
    }
    let fa = global_force(problem, force, a, opts)?;
    let fb = global_force(problem, force, b, opts)?;
    solve_bracketed(problem, force, fa, fb, Vec::new(), opts)
}

fn solve_bracketed(
    problem: &FlowProblem,
    force: &RestoringForce,
    fa: ForceSample,
    fb: ForceSample,
    mut samples: Vec<ForceSample>,
    opts: &FsiOptions,
) -> Result<EquilibriumResult, FsiError> {
    let tol_h = opts.tol_h(problem);
    let tol_phi = opts.tol_phi(force);
    let finish = |best: &ForceSample, lo: &ForceSample, hi: &ForceSample, brackets, samples: Vec<ForceSample>, iterations| {
        let warnings = count_monotonicity_violations(&samples);
        if warnings > 0 {
            warn!(
                "phi is not increasing along {warnings} evaluated pairs at lambda = {}",
                problem.lambda
            );
        }
        EquilibriumResult {
            lambda: problem.lambda,
            theta: problem.placement.theta,
            h_star: best.h,
            phi_star: best.phi,
            lift_star: best.lift_volume,
            brackets,
            phi_a: lo.phi,
            phi_b: hi.phi,
            iterations,
            samples,
            monotonicity_warnings: warnings,
        }
    };
    samples.push(fa.clone());
    samples.push(fb.clone());
    let (mut lo, mut hi) = (fa, fb);
    let mut brackets = vec![(lo.h, hi.h)];
    for end in [&lo, &hi] {
        if end.phi == 0.0 {
            let e = end.clone();
            return Ok(finish(&e, &lo, &hi, brackets, samples, 0));
        }
    }
    if !(lo.phi < 0.0 && hi.phi > 0.0) {
        return Err(FsiError::NoSignChange {
            a: lo.h,
            b: hi.h,
            phi_a: lo.phi,
            phi_b: hi.phi,
        });
    }
    // Illinois weights on the retained end.
    let (mut wa, mut wb) = (1.0, 1.0);
    let mut last_side = 0i8;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let width = hi.h - lo.h;
        let bisect = iterations == 0
            || brackets.len() >= 3 && width > 0.5 * (brackets[brackets.len() - 3].1 - brackets[brackets.len() - 3].0);
        let mut x = if bisect {
            0.5 * (lo.h + hi.h)
        } else {
            let (pa, pb) = (wa * lo.phi, wb * hi.phi);
            (lo.h * pb - hi.h * pa) / (pb - pa)
        };
        if !(x > lo.h && x < hi.h) {
            x = 0.5 * (lo.h + hi.h);
        }
        let s = global_force(problem, force, x, opts)?;
        iterations += 1;
        debug!("equilibrium step {iterations}: h = {x:.10}, phi = {:.6e}", s.phi);
        samples.push(s.clone());
        if s.phi.abs() <= tol_phi {
            brackets.push((lo.h, hi.h));
            return Ok(finish(&s, &lo, &hi, brackets, samples, iterations));
        }
        if s.phi < 0.0 {
            lo = s;
            wa = 1.0;
            wb = if last_side == -1 { 0.5 * wb } else { 1.0 };
            last_side = -1;
        } else {
            hi = s;
            wb = 1.0;
            wa = if last_side == 1 { 0.5 * wa } else { 1.0 };
            last_side = 1;
        }
        brackets.push((lo.h, hi.h));
        if hi.h - lo.h <= 0.5 * tol_h {
            let best = if lo.phi.abs() <= hi.phi.abs() { &lo } else { &hi };
            return Ok(finish(best, &lo, &hi, brackets, samples, iterations));
        }
    }
    let best = if lo.phi.abs() <= hi.phi.abs() { lo.clone() } else { hi.clone() };
    warn!("equilibrium search stopped after {iterations} steps with bracket width {}", hi.h - lo.h);
    Ok(finish(&best, &lo, &hi, brackets, samples, iterations))
}

/// Search outward from `[center - left, center + right]`, growing the side
/// with the wrong sign by a factor 1.5 (capped at the admissible range) until
/// `phi` changes sign, then solve for the root.
pub fn find_equilibrium_around(
    problem: &FlowProblem,
    force: &RestoringForce,
    center: f64,
    half_width: f64,
    opts: &FsiOptions,
) -> Result<EquilibriumResult, FsiError> {
    let (min_h, max_h) = admissible_range(problem, opts);
    if !(min_h < max_h) {
        return Err(FsiError::OutOfRange {
            h: center,
            lo: min_h,
            hi: max_h,
        });
    }
    let (mut dl, mut dr) = (half_width, half_width);
    let mut a = (center - dl).max(min_h);
    let mut b = (center + dr).min(max_h);
    let mut fa = global_force(problem, force, a, opts)?;
    let mut fb = global_force(problem, force, b, opts)?;
    let mut samples = Vec::new();
    for _ in 0..opts.max_expansions {
        if fa.phi <= 0.0 && fb.phi >= 0.0 {
            break;
        }
        let mut moved = false;
        if fa.phi > 0.0 && a > min_h {
            dl *= 1.5;
            a = (center - dl).max(min_h);
            samples.push(std::mem::replace(&mut fa, global_force(problem, force, a, opts)?));
            moved = true;
        }
        if fb.phi < 0.0 && b < max_h {
            dr *= 1.5;
            b = (center + dr).min(max_h);
            samples.push(std::mem::replace(&mut fb, global_force(problem, force, b, opts)?));
            moved = true;
        }
        if !moved {
            break;
        }
    }
    solve_bracketed(problem, force, fa, fb, samples, opts)
}

/// Equilibrium with the default bracket `[-h0, h0]`, `h0 = 0.5 min(eps_b(0),
/// eps_t(0))`, expanded on demand.
pub fn find_equilibrium_default(
    problem: &FlowProblem,
    force: &RestoringForce,
    opts: &FsiOptions,
) -> Result<EquilibriumResult, FsiError> {
    let h0 = initial_half_width(problem);
    find_equilibrium_around(problem, force, 0.0, h0, opts)
}

/// A path of equilibria along an ascending `lambda` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Continuation {
    pub points: Vec<EquilibriumResult>,
    /// Grid points whose solve failed for reasons other than a lost sign
    /// change, with the error.
    pub failures: Vec<(f64, String)>,
    /// First `lambda` at which no sign change was found; the path stops there.
    pub lambda1_proxy: Option<f64>,
    /// Largest jump of `h*` between consecutive points.
    pub max_jump: f64,
}

/// Follow `h*(lambda)` along `lambdas`, starting each search in a window
/// around the previous root.
pub fn continuation(
    problem: &FlowProblem,
    force: &RestoringForce,
    lambdas: &[f64],
    opts: &FsiOptions,
) -> Result<Continuation, FsiError> {
    if lambdas.first() != Some(&0.0) {
        return Err(FsiError::InvalidModel("the lambda grid must start at 0".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FsiError::InvalidModel("the lambda grid must be increasing".into()));
    }
    let h0 = initial_half_width(problem);
    let mut out = Continuation {
        points: Vec::new(),
        failures: Vec::new(),
        lambda1_proxy: None,
        max_jump: 0.0,
    };
    let mut previous: Option<f64> = None;
    let mut step = 0.0_f64;
    for &lambda in lambdas {
        let pb = problem.with_lambda(lambda);
        let result = match previous {
            None => find_equilibrium_around(&pb, force, 0.0, h0, opts),
            Some(h) => {
                let window = (2.0 * step).max(0.05 * h0);
                find_equilibrium_around(&pb, force, h, window, opts)
            }
        };
        match result {
            Ok(r) => {
                if let Some(h) = previous {
                    step = (r.h_star - h).abs();
                    out.max_jump = out.max_jump.max(step);
                }
                previous = Some(r.h_star);
                out.points.push(r);
            }
            Err(FsiError::NoSignChange { .. }) => {
                warn!("continuation lost the sign change at lambda = {lambda}");
                out.lambda1_proxy = Some(lambda);
                break;
            }
            Err(e) => out.failures.push((lambda, e.to_string())),
        }
    }
    Ok(out)
}

/// `phi` along a grid of offsets and whether it is strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityScan {
    pub lambda: f64,
    pub rows: Vec<Result<ForceSample, FsiError>>,
    /// All rows solved and `phi` strictly increasing across them.
    pub increasing: bool,
    /// `phi < 0` at the first offset (the body is pushed up near the bottom).
    pub pushes_up_at_bottom: bool,
    /// `phi > 0` at the last offset (the body is pushed down near the top).
    pub pushes_down_at_top: bool,
}

impl MonotonicityScan {
    pub fn passed(&self) -> bool {
        self.increasing && self.pushes_up_at_bottom && self.pushes_down_at_top
    }
}

/// Evaluate `phi(lambda, .)` on `h_grid` concurrently.
pub fn monotonicity_scan(
    problem: &FlowProblem,
    force: &RestoringForce,
    lambda: f64,
    h_grid: &[f64],
    opts: &FsiOptions,
) -> MonotonicityScan {
    let pb = problem.with_lambda(lambda);
    let rows: Vec<Result<ForceSample, FsiError>> = h_grid
        .par_iter()
        .map(|&h| global_force(&pb, force, h, opts))
        .collect();
    let phis: Option<Vec<f64>> = rows.iter().map(|r| r.as_ref().ok().map(|s| s.phi)).collect();
    let (increasing, up, down) = match phis {
        Some(p) if !p.is_empty() => (
            p.windows(2).all(|w| w[1] > w[0]),
            p[0] < 0.0,
            p[p.len() - 1] > 0.0,
        ),
        _ => (false, false, false),
    };
    MonotonicityScan {
        lambda,
        rows,
        increasing,
        pushes_up_at_bottom: up,
        pushes_down_at_top: down,
    }
}

/// `n` equally spaced offsets spanning `[lo, hi]`.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Per-`lambda` outcome of the symmetry certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryRow {
    pub lambda: f64,
    pub lift: f64,
    pub lift_tol: f64,
    pub h_star: f64,
    pub tol_h: f64,
    pub mirror_error: f64,
    /// Above the certified range: recorded but not judged.
    pub report_only: bool,
    pub error: Option<String>,
}

impl SymmetryRow {
    pub fn lift_ok(&self) -> bool {
        self.lift.abs() <= self.lift_tol
    }

    pub fn h_ok(&self) -> bool {
        self.h_star.abs() <= self.tol_h
    }

    pub fn mirror_ok(&self) -> bool {
        self.mirror_error <= MIRROR_TOL
    }

    pub fn passed(&self) -> bool {
        self.report_only || (self.error.is_none() && self.lift_ok() && self.h_ok() && self.mirror_ok())
    }
}

pub const MIRROR_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryReport {
    pub rows: Vec<SymmetryRow>,
}

impl SymmetryReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(SymmetryRow::passed)
    }
}

/// For each `lambda`: the lift at `h = 0` on a mirror-symmetric mesh, the
/// mirror defect of the discrete solution and the equilibrium offset. Rows
/// with `lambda > report_above` are recorded without being judged.
pub fn symmetry_certificate(
    problem: &FlowProblem,
    force: &RestoringForce,
    lambdas: &[f64],
    report_above: f64,
    opts: &FsiOptions,
) -> Result<SymmetryReport, FsiError> {
    let p0 = problem.with_placement(Placement::default());
    let symmetric = p0.symmetric_mode && p0.shape.is_mirror_symmetric() && p0.profile.is_symmetric();
    if !symmetric {
        return Err(FsiError::InvalidModel(
            "the certificate needs a mirror-symmetric body, even profiles and symmetric mode".into(),
        ));
    }
    let tol_h = opts.tol_h(problem);
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let pb = p0.with_lambda(lambda);
            let mut row = SymmetryRow {
                lambda,
                lift: f64::NAN,
                lift_tol: 1e-8 * (1.0 + lambda),
                h_star: f64::NAN,
                tol_h,
                mirror_error: f64::NAN,
                report_only: lambda > report_above,
                error: None,
            };
            let run = || -> Result<(f64, f64, f64), FsiError> {
                let field = solve_at(&pb, 0.0, &opts.mesh, &opts.solver)?;
                let w = lift_field_w(&pb.layout()).map_err(|e| FsiError::InvalidModel(e.to_string()))?;
                let lift = lift_volume(&field, &w);
                let mirror = field
                    .mirror_symmetry_error()
                    .ok_or_else(|| FsiError::InvalidModel("mesh is not mirror symmetric".into()))?;
                let eq = find_equilibrium_default(&pb, force, opts)?;
                Ok((lift, mirror, eq.h_star))
            };
            match run() {
                Ok((lift, mirror, h)) => {
                    row.lift = lift;
                    row.mirror_error = mirror;
                    row.h_star = h;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok(SymmetryReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Bottom,
    Top,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Bottom => "bottom",
            Side::Top => "top",
        })
    }
}

/// Log-log fit of `|lift|` against the gap on one side.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentFit {
    pub side: Side,
    pub gaps: Vec<f64>,
    /// Volume lifts, the values fitted.
    pub lifts: Vec<f64>,
    /// Boundary lifts of the same solves, for comparison.
    pub lifts_boundary: Vec<f64>,
    /// `None` when every lift vanishes.
    pub slope: Option<f64>,
    /// Slope of the boundary lifts.
    pub slope_boundary: Option<f64>,
    /// Root mean square residual of the fit in log space.
    pub residual: f64,
    /// Exponent of the proven bound: -3/2, or -3 on the top with `U = 1`.
    pub bound: f64,
    /// Gaps that could not be solved, with the error.
    pub skipped: Vec<(f64, String)>,
}

impl ExponentFit {
    pub const SLACK: f64 = 0.25;

    /// The measured blow-up is no faster than the bound allows.
    pub fn consistent(&self) -> bool {
        self.slope.is_none_or(|s| s >= self.bound - Self::SLACK)
    }
}

/// `0.2 H 2^-k` for `k = 0..n`.
pub fn default_gap_sequence(half_height: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.2 * half_height * 0.5_f64.powi(k as i32)).collect()
}

/// Offset at which the gap on `side` equals `gap` (at the problem's
/// rotation).
pub fn offset_for_gap(problem: &FlowProblem, side: Side, gap: f64) -> f64 {
    let ext: Extents = body_extents(&problem.shape, problem.placement.theta);
    let big_h = problem.channel.half_height();
    match side {
        Side::Bottom => gap - big_h + ext.delta_b,
        Side::Top => big_h - ext.delta_t - gap,
    }
}

/// Volume lift as the body approaches one wall through `gaps`, with a
/// least-squares slope of `log |lift|` against `log gap`.
pub fn exponent_experiment(
    problem: &FlowProblem,
    side: Side,
    gaps: &[f64],
    opts: &FsiOptions,
) -> Result<ExponentFit, FsiError> {
    const REQUIRED: usize = 4;
    let bound = match side {
        Side::Top if problem.profile.u_top() == 1.0 => -3.0,
        _ => -1.5,
    };
    let results: Vec<(f64, Result<(f64, f64), FsiError>)> = gaps
        .par_iter()
        .map(|&gap| {
            let h = offset_for_gap(problem, side, gap);
            let pb = problem.with_placement(Placement::new(h, problem.placement.theta));
            if pb.lambda == 0.0 && opts.zero_lambda_shortcut {
                return (gap, Ok((0.0, 0.0)));
            }
            let lift = solve_at(&pb, h, &opts.mesh, &opts.solver).and_then(|field| {
                let w = lift_field_w(&pb.layout()).map_err(|e| FsiError::InvalidModel(e.to_string()))?;
                Ok((
                    clip_noise(lift_volume(&field, &w), pb.lambda),
                    clip_noise(lift_boundary(&field), pb.lambda),
                ))
            });
            (gap, lift)
        })
        .collect();
    let mut fit = ExponentFit {
        side,
        gaps: Vec::new(),
        lifts: Vec::new(),
        lifts_boundary: Vec::new(),
        slope: None,
        slope_boundary: None,
        residual: 0.0,
        bound,
        skipped: Vec::new(),
    };
    for (gap, r) in results {
        match r {
            Ok((l, lb)) => {
                fit.gaps.push(gap);
                fit.lifts.push(l);
                fit.lifts_boundary.push(lb);
            }
            Err(e) => fit.skipped.push((gap, e.to_string())),
        }
    }
    if fit.gaps.len() < REQUIRED {
        return Err(FsiError::InsufficientPoints {
            found: fit.gaps.len(),
            required: REQUIRED,
        });
    }
    if fit.lifts.iter().all(|&l| l == 0.0) {
        return Ok(fit);
    }
    let x: Vec<f64> = fit.gaps.iter().map(|g| g.ln()).collect();
    let log_abs = |v: &[f64]| -> Vec<f64> { v.iter().map(|l| l.abs().max(f64::MIN_POSITIVE).ln()).collect() };
    let y = log_abs(&fit.lifts);
    let slope = fit_slope(&x, &y);
    fit.slope_boundary = Some(fit_slope(&x, &log_abs(&fit.lifts_boundary)));
    let (mx, my) = (mean(&x), mean(&y));
    let ss: f64 = x
        .iter()
        .zip(&y)
        .map(|(xi, yi)| (yi - my - slope * (xi - mx)).powi(2))
        .sum();
    fit.residual = (ss / x.len() as f64).sqrt();
    fit.slope = Some(slope);
    Ok(fit)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One rotation angle of the bridge sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeRow {
    pub theta: f64,
    pub delta_b: f64,
    pub delta_t: f64,
    /// The default bracket fits inside the channel at this angle.
    pub admissible: bool,
    pub result: Option<EquilibriumResult>,
    pub error: Option<String>,
}

/// Equilibrium offsets for each rotation in `thetas`, solved concurrently.
/// Angles outside `(-pi/4, pi/4)` or without an admissible bracket are
/// flagged and skipped.
pub fn bridge_sweep(
    problem: &FlowProblem,
    force: &RestoringForce,
    thetas: &[f64],
    lambda: f64,
    opts: &FsiOptions,
) -> Vec<BridgeRow> {
    let limit = std::f64::consts::FRAC_PI_4;
    thetas
        .par_iter()
        .map(|&theta| {
            let pb = problem
                .with_lambda(lambda)
                .with_placement(Placement::new(0.0, theta));
            let ext = body_extents(&pb.shape, theta);
            let (lo, hi) = admissible_range(&pb, opts);
            let mut row = BridgeRow {
                theta,
                delta_b: ext.delta_b,
                delta_t: ext.delta_t,
                admissible: theta.abs() < limit && lo < 0.0 && 0.0 < hi,
                result: None,
                error: None,
            };
            if !row.admissible {
                row.error = Some(format!("theta = {theta} is not admissible"));
                return row;
            }
            match find_equilibrium_default(&pb, force, opts) {
                Ok(r) => row.result = Some(r),
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

/// Finite-difference estimate of `max |phi(l1, h) - phi(l0, h)| / |l1 - l0|`
/// over consecutive pairs of `lambdas`. A diagnostic only.
pub fn lambda_lipschitz_estimate(
    problem: &FlowProblem,
    force: &RestoringForce,
    h: f64,
    lambdas: &[f64],
    opts: &FsiOptions,
) -> Result<f64, FsiError> {
    let phis: Vec<f64> = lambdas
        .par_iter()
        .map(|&l| global_force(&problem.with_lambda(l), force, h, opts).map(|s| s.phi))
        .collect::<Result<_, _>>()?;
    Ok(lambdas
        .windows(2)
        .zip(phis.windows(2))
        .map(|(l, p)| (p[1] - p[0]).abs() / (l[1] - l[0]).abs())
        .fold(0.0, f64::max))
}

/// CSV with columns `lambda,h_star,phi_star,lift,iterations,bracket_lo,bracket_hi`.
pub fn write_equilibria_csv<W: Write>(rows: &[EquilibriumResult], mut w: W) -> io::Result<()> {
    writeln!(w, "lambda,h_star,phi_star,lift,iterations,bracket_lo,bracket_hi")?;
    for r in rows {
        let (a, b) = r.final_bracket();
        writeln!(
            w,
            "{:.12e},{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e}",
            r.lambda, r.h_star, r.phi_star, r.lift_star, r.iterations, a, b
        )?;
    }
    Ok(())
}

/// CSV with columns `h,phi,restoring,lift_volume,lift_boundary,newton_iters`;
/// failed rows hold `nan`.
pub fn write_scan_csv<W: Write>(h_grid: &[f64], scan: &MonotonicityScan, mut w: W) -> io::Result<()> {
    writeln!(w, "h,phi,restoring,lift_volume,lift_boundary,newton_iters")?;
    for (h, r) in h_grid.iter().zip(&scan.rows) {
        match r {
            Ok(s) => writeln!(
                w,
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
                s.h, s.phi, s.restoring, s.lift_volume, s.lift_boundary, s.newton_iters
            )?,
            Err(_) => writeln!(w, "{h:.12e},nan,nan,nan,nan,0")?,
        }
    }
    Ok(())
}

/// CSV with columns `gap,lift_volume,lift_boundary`.
pub fn write_exponent_csv<W: Write>(fit: &ExponentFit, mut w: W) -> io::Result<()> {
    writeln!(w, "gap,lift_volume,lift_boundary")?;
    for ((g, l), lb) in fit.gaps.iter().zip(&fit.lifts).zip(&fit.lifts_boundary) {
        writeln!(w, "{g:.12e},{l:.12e},{lb:.12e}")?;
    }
    Ok(())
}

/// CSV with columns `theta,delta_b,delta_t,admissible,h_star,phi_star,lift`.
pub fn write_bridge_csv<W: Write>(rows: &[BridgeRow], mut w: W) -> io::Result<()> {
    writeln!(w, "theta,delta_b,delta_t,admissible,h_star,phi_star,lift")?;
    for r in rows {
        let (h, p, l) = r
            .result
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |e| (e.h_star, e.phi_star, e.lift_star));
        writeln!(
            w,
            "{:.12e},{:.12e},{:.12e},{},{:.12e},{:.12e},{:.12e}",
            r.theta, r.delta_b, r.delta_t, r.admissible, h, p, l
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extension::InflowProfile;
    use crate::geometry::Channel;
    use crate::ns_solver::solve_stokes;
    use rand::{Rng, SeedableRng};

    fn couette(lambda: f64, size: f64) -> (FlowProblem, FsiOptions) {
        let ch = Channel::new(3.0, 1.0).unwrap();
        let shape = BodyShape::ellipse(0.4, 0.2).unwrap();
        let prof = InflowProfile::couette(1.0, 1.0).unwrap();
        let pb = FlowProblem::new(1.0, lambda, prof, ch, shape, Placement::default()).unwrap();
        (pb, FsiOptions::with_mesh_size(size))
    }

    #[test]
    fn closed_form_value() {
        let f = RestoringForce::new(5.0, 0.1, 0.1, 0.0, 1.0, 0.3, 0.3).unwrap();
        assert_eq!(f.value(0.0).unwrap(), 0.0);
        let (eb, et, e0) = (0.9_f64, 0.5_f64, 0.7_f64);
        let expect = 1.0 + 0.1 * (e0.powf(-1.5) - eb.powf(-1.5)) + 0.1 * (et.powf(-1.5) - e0.powf(-1.5));
        assert!((f.value(0.2).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(f.value(0.7), Err(FsiError::OutOfRange { .. })));
        assert!(matches!(f.value(-0.75), Err(FsiError::OutOfRange { .. })));
    }

    #[test]
    fn difference_quotients_exceed_gamma() {
        let f = RestoringForce::new(2.0, 0.3, 0.2, 1.0, 1.0, 0.25, 0.4).unwrap();
        let (lo, hi) = f.range();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = rng.random_range(lo + 1e-6..hi - 1e-6);
            let b = rng.random_range(lo + 1e-6..hi - 1e-6);
            if a == b {
                continue;
            }
            let q = (f.value(a).unwrap() - f.value(b).unwrap()) / (a - b);
            assert!(q >= f.gamma - 1e-9);
        }
    }

    #[test]
    fn blow_up_constants() {
        let f = RestoringForce::new(1.0, 1.0, 1.0, 1.0, 1.0, 0.3, 0.3).unwrap();
        let (lo, hi) = f.range();
        for e in [1e-2, 1e-3] {
            let bottom = f.value(lo + e).unwrap() * e.powf(1.5);
            assert!((bottom + f.k_b).abs() <= 0.01 * f.k_b, "{bottom}");
            let top = f.value(hi - e).unwrap() / (e.powf(-1.5).max(e.powi(-3)));
            assert!((top - f.k_t).abs() <= 0.01 * f.k_t, "{top}");
        }
    }

    #[test]
    fn theta_variant() {
        let (pb, _) = couette(0.0, 0.2);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1)
            .unwrap()
            .with_theta_coupling(0.5)
            .unwrap();
        assert_eq!(f.value_theta(0.1, 0.0).unwrap(), f.value(0.1).unwrap());
        assert!(f.value_theta(0.0, 0.3).unwrap() > 0.0);
        assert!(f.value_theta(0.0, -0.3).unwrap() < 0.0);
        let plain = RestoringForce::new(1.0, 0.1, 0.1, 1.0, 1.0, 0.2, 0.2).unwrap();
        assert!(plain.value_theta(0.0, 0.1).is_err());
    }

    #[test]
    fn zero_lambda_shortcut_matches_a_solve() {
        let (pb, mut opts) = couette(0.0, 0.3);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1).unwrap();
        let quick = global_force(&pb, &f, 0.2, &opts).unwrap();
        assert!(quick.shortcut);
        assert_eq!(quick.phi, f.value(0.2).unwrap());
        opts.zero_lambda_shortcut = false;
        let solved = global_force(&pb, &f, 0.2, &opts).unwrap();
        assert!(!solved.shortcut);
        assert_eq!(solved.lift_volume, 0.0);
        assert_eq!(solved.phi, quick.phi);
        let r = find_equilibrium_default(&pb, &f, &opts).unwrap();
        assert_eq!(r.h_star, 0.0);
    }

    #[test]
    fn bracket_without_sign_change() {
        let (pb, opts) = couette(0.0, 0.3);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1).unwrap();
        match find_equilibrium(&pb, &f, (0.1, 0.3), &opts) {
            Err(FsiError::NoSignChange { phi_a, phi_b, .. }) => assert!(phi_a > 0.0 && phi_b > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equilibrium_brackets_a_root() {
        let (pb, opts) = couette(2.0, 0.3);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1).unwrap();
        let r = find_equilibrium_default(&pb, &f, &opts).unwrap();
        let (a, b) = r.final_bracket();
        assert!(a <= r.h_star && r.h_star <= b);
        assert!(r.phi_a <= 0.0 && r.phi_b >= 0.0);
        assert!(r.phi_star.abs() <= opts.tol_phi(&f) || b - a <= opts.tol_h(&pb));
        let again = global_force(&pb, &f, r.h_star, &opts).unwrap();
        assert_eq!(again.phi, r.phi_star);
    }

    #[test]
    fn exponent_fit_is_skipped_without_flow() {
        let (pb, opts) = couette(0.0, 0.3);
        let gaps = default_gap_sequence(1.0, 5);
        let fit = exponent_experiment(&pb, Side::Bottom, &gaps, &opts).unwrap();
        assert!(fit.slope.is_none() && fit.consistent());
        assert!((offset_for_gap(&pb, Side::Top, 0.1) - 0.7).abs() < 1e-12);
        assert!((offset_for_gap(&pb, Side::Bottom, 0.1) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn stokes_solution_vanishes_at_zero_lambda() {
        let (pb, opts) = couette(0.0, 0.3);
        let mesh = mesh_for_problem(&pb, &opts.mesh).unwrap();
        let f = solve_stokes(&pb, &mesh).unwrap();
        assert_eq!(f.h1_norm(), 0.0);
    }

    #[test]
    fn continuation_rejects_bad_grids() {
        let (pb, opts) = couette(0.0, 0.3);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1).unwrap();
        assert!(continuation(&pb, &f, &[0.1, 0.2], &opts).is_err());
        assert!(continuation(&pb, &f, &[0.0, 0.2, 0.1], &opts).is_err());
        let c = continuation(&pb, &f, &[0.0], &opts).unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(c.points[0].h_star, 0.0);
    }

    #[test]
    fn csv_writers() {
        let (pb, opts) = couette(0.0, 0.3);
        let f = RestoringForce::for_problem(&pb, 1.0, 0.1, 0.1).unwrap();
        let grid = uniform_grid(-0.3, 0.3, 5);
        let scan = monotonicity_scan(&pb, &f, 0.0, &grid, &opts);
        assert!(scan.passed());
        let mut buf = Vec::new();
        write_scan_csv(&grid, &scan, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
    }
}
