//! Experiment dispatch, certificates and the artifact manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use channel_fsi::extension::{lift_field_w, solenoidal_s, symmetric_variant, AnalyticField};
use channel_fsi::fsi::{
    bridge_sweep, continuation, default_gap_sequence, exponent_experiment, find_equilibrium,
    find_equilibrium_default, initial_half_width, monotonicity_scan, symmetry_certificate, uniform_grid,
    write_bridge_csv, write_equilibria_csv, write_exponent_csv, write_scan_csv, FsiError, Side,
};
use channel_fsi::geometry::signed_distance;
use channel_fsi::lift::{lift, lift_curve, noise_floor, write_lift_curve_csv};
use channel_fsi::mesh::MeshError;
use channel_fsi::ns_solver::{
    mesh_for_problem, mms_study, solve_navier_stokes, uniqueness_probe, MmsCase, SolverError,
};

use crate::config::{ExperimentKind, Scenario};
use crate::plot::{emit_plot, Plot, PlotError, PlotKind, Series};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Fsi(#[from] FsiError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{0}")]
    Other(String),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

/// Relative discrepancy allowed between the boundary and volume lifts.
pub const LIFT_AGREEMENT: f64 = 0.02;
/// H1 distance under which two solutions count as the same.
pub const UNIQUENESS_TOL: f64 = 1e-8;
/// Divergence of the closed-form fields.
pub const DIVERGENCE_TOL: f64 = 1e-10;

/// Key/value results and PASS/FAIL checks of one experiment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Certificate {
    pub experiment: String,
    pub values: Vec<(String, String)>,
    pub checks: Vec<(String, bool)>,
}

impl Certificate {
    fn new(kind: ExperimentKind) -> Self {
        Self {
            experiment: kind.name().into(),
            ..Self::default()
        }
    }

    fn value(&mut self, key: &str, v: impl ToString) {
        self.values.push((key.into(), v.to_string()));
    }

    fn num(&mut self, key: &str, v: f64) {
        self.value(key, num(v));
    }

    fn check(&mut self, name: &str, pass: bool) {
        self.checks.push((name.into(), pass));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    pub fn render(&self) -> String {
        let mut s = format!("experiment: {}\n", self.experiment);
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}: {v}");
        }
        for (k, pass) in &self.checks {
            let _ = writeln!(s, "check {k}: {}", if *pass { "PASS" } else { "FAIL" });
        }
        let _ = writeln!(s, "status: {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

pub fn num(v: f64) -> String {
    format!("{v:.12e}")
}

/// Files of one run, by name, plus its certificate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub files: BTreeMap<String, Vec<u8>>,
    pub certificate: Certificate,
}

impl RunOutput {
    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    fn plot(&mut self, enabled: bool, name: &str, plot: &Plot) -> Result<(), RunError> {
        if enabled {
            self.add(name, emit_plot(plot)?.into_bytes());
        }
        Ok(())
    }
}

fn csv(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, RunError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

/// Run one experiment of `scenario` in memory.
pub fn execute(scenario: &Scenario, kind: ExperimentKind) -> Result<RunOutput, RunError> {
    let mut out = RunOutput {
        certificate: Certificate::new(kind),
        ..RunOutput::default()
    };
    match kind {
        ExperimentKind::Solve => solve(scenario, &mut out)?,
        ExperimentKind::Lift => lift_exp(scenario, &mut out)?,
        ExperimentKind::Equilibrium => equilibrium(scenario, &mut out)?,
        ExperimentKind::Continuation => continuation_exp(scenario, &mut out)?,
        ExperimentKind::Scan => scan(scenario, &mut out)?,
        ExperimentKind::SweepTheta => sweep_theta(scenario, &mut out)?,
        ExperimentKind::Asymptotics => asymptotics(scenario, &mut out)?,
        ExperimentKind::Symmetry => symmetry(scenario, &mut out)?,
        ExperimentKind::Mms => mms(scenario, &mut out)?,
        ExperimentKind::MeshDump => mesh_dump(scenario, &mut out)?,
        ExperimentKind::FieldDump => field_dump(scenario, &mut out)?,
    }
    Ok(out)
}

fn solve(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let pb = &sc.problem;
    let mesh = mesh_for_problem(pb, &sc.options.mesh)?;
    let field = solve_navier_stokes(pb, &mesh, &sc.options.solver)?;
    out.add("field.csv", csv(|b| field.write_csv(b))?);
    let c = &mut out.certificate;
    c.num("lambda", pb.lambda);
    c.num("h", pb.placement.h);
    c.num("theta", pb.placement.theta);
    c.value("velocity_dofs", 2 * mesh.num_nodes());
    c.value("newton_iters", field.report.newton_iters);
    c.num("residual", field.report.residual);
    c.num("h1_norm", field.h1_norm());
    let l = lift(&field, &pb.layout())?;
    c.num("lift_boundary", l.value_boundary);
    c.num("lift_volume", l.value_volume);
    c.num("lift_relative_discrepancy", l.relative_discrepancy());
    c.check("converged", field.report.converged);
    let starts = sc.config.experiment.n_starts;
    if starts >= 2 && pb.lambda > 0.0 {
        let d = uniqueness_probe(pb, &mesh, &sc.options.solver, starts, sc.config.seed)?;
        c.num("uniqueness_max_h1_distance", d);
        c.check("uniqueness", d <= UNIQUENESS_TOL);
    }
    Ok(())
}

fn h_grid(sc: &Scenario) -> Vec<f64> {
    sc.config
        .body
        .h_grid
        .clone()
        .unwrap_or_else(|| vec![sc.problem.placement.h])
}

fn lift_exp(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let grid = h_grid(sc);
    let rows = lift_curve(&sc.problem, &grid, &sc.options.mesh, &sc.options.solver);
    out.add("lift_curve.csv", csv(|b| write_lift_curve_csv(&rows, b))?);
    let ok: Vec<_> = rows.iter().filter(|r| r.error.is_none()).collect();
    let x: Vec<f64> = ok.iter().map(|r| r.h).collect();
    out.plot(
        sc.config.output.plots,
        "lift_curve.svg",
        &Plot {
            title: format!("lift at lambda = {}", sc.problem.lambda),
            x_label: "h".into(),
            y_label: "lift".into(),
            kind: PlotKind::Curve,
            series: vec![
                Series::new("volume", x.clone(), ok.iter().map(|r| r.lift_volume).collect()),
                Series::new("boundary", x, ok.iter().map(|r| r.lift_boundary).collect()),
            ],
        },
    )?;
    let floor = noise_floor(sc.problem.lambda);
    let worst = ok
        .iter()
        .filter(|r| r.lift_volume.abs() > floor)
        .map(|r| r.discrepancy / r.lift_volume.abs().max(1e-12 * sc.problem.lambda))
        .fold(0.0, f64::max);
    let c = &mut out.certificate;
    c.num("lambda", sc.problem.lambda);
    c.value("points", rows.len());
    c.value("failed", rows.len() - ok.len());
    c.num("max_relative_discrepancy", worst);
    c.check("all_solved", ok.len() == rows.len());
    c.check("lift_agreement", worst <= LIFT_AGREEMENT);
    Ok(())
}

fn equilibrium(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let pb = &sc.problem;
    let r = match sc.config.experiment.bracket {
        Some([a, b]) => find_equilibrium(pb, &sc.force, (a, b), &sc.options)?,
        None => find_equilibrium_default(pb, &sc.force, &sc.options)?,
    };
    out.add("equilibrium.csv", csv(|b| write_equilibria_csv(std::slice::from_ref(&r), b))?);
    let mut samples = String::from("h,phi,restoring,lift_volume,lift_boundary,newton_iters\n");
    for s in &r.samples {
        let _ = writeln!(
            samples,
            "{},{},{},{},{},{}",
            num(s.h),
            num(s.phi),
            num(s.restoring),
            num(s.lift_volume),
            num(s.lift_boundary),
            s.newton_iters
        );
    }
    out.add("samples.csv", samples.into_bytes());
    let (a, b) = r.final_bracket();
    let tol_h = sc.options.tol_h(pb);
    let tol_phi = sc.options.tol_phi(&sc.force);
    let c = &mut out.certificate;
    c.num("lambda", r.lambda);
    c.num("h_star", r.h_star);
    c.num("phi_star", r.phi_star);
    c.num("lift_star", r.lift_star);
    c.num("bracket_lo", a);
    c.num("bracket_hi", b);
    c.value("iterations", r.iterations);
    c.value("monotonicity_warnings", r.monotonicity_warnings);
    c.check("bracket_sign_change", r.phi_a <= 0.0 && r.phi_b >= 0.0);
    c.check("converged", r.phi_star.abs() <= tol_phi || b - a <= tol_h);
    Ok(())
}

fn lambda_grid(sc: &Scenario, default: &[f64]) -> Vec<f64> {
    sc.config
        .experiment
        .lambda_grid
        .clone()
        .unwrap_or_else(|| default.to_vec())
}

fn continuation_exp(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let grid = lambda_grid(sc, &[0.0, sc.problem.lambda]);
    let curve = continuation(&sc.problem, &sc.force, &grid, &sc.options)?;
    out.add("continuation.csv", csv(|b| write_equilibria_csv(&curve.points, b))?);
    out.plot(
        sc.config.output.plots,
        "continuation.svg",
        &Plot {
            title: "equilibrium offset".into(),
            x_label: "lambda".into(),
            y_label: "h*".into(),
            kind: PlotKind::Curve,
            series: vec![Series::new(
                "h*",
                curve.points.iter().map(|p| p.lambda).collect(),
                curve.points.iter().map(|p| p.h_star).collect(),
            )],
        },
    )?;
    let c = &mut out.certificate;
    c.value("points", curve.points.len());
    c.num("max_jump", curve.max_jump);
    c.value(
        "lambda1_proxy",
        curve.lambda1_proxy.map_or_else(|| "none".to_string(), num),
    );
    for (l, e) in &curve.failures {
        c.value(&format!("failure_at_{}", num(*l)), e);
    }
    c.check("no_failures", curve.failures.is_empty());
    c.check("full_grid", curve.points.len() == grid.len());
    Ok(())
}

fn scan(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let h0 = initial_half_width(&sc.problem);
    let grid = sc
        .config
        .body
        .h_grid
        .clone()
        .unwrap_or_else(|| uniform_grid(-h0, h0, 11));
    let lambda = sc.problem.lambda;
    let s = monotonicity_scan(&sc.problem, &sc.force, lambda, &grid, &sc.options);
    out.add("scan.csv", csv(|b| write_scan_csv(&grid, &s, b))?);
    let ok: Vec<_> = s.rows.iter().filter_map(|r| r.as_ref().ok()).collect();
    out.plot(
        sc.config.output.plots,
        "scan.svg",
        &Plot {
            title: format!("global force at lambda = {lambda}"),
            x_label: "h".into(),
            y_label: "phi".into(),
            kind: PlotKind::Curve,
            series: vec![Series::new(
                "phi",
                ok.iter().map(|r| r.h).collect(),
                ok.iter().map(|r| r.phi).collect(),
            )],
        },
    )?;
    let c = &mut out.certificate;
    c.num("lambda", lambda);
    c.value("points", grid.len());
    c.check("strictly_increasing", s.increasing);
    c.check("pushes_up_at_bottom", s.pushes_up_at_bottom);
    c.check("pushes_down_at_top", s.pushes_down_at_top);
    Ok(())
}

fn sweep_theta(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let thetas = sc
        .config
        .body
        .theta_grid
        .clone()
        .unwrap_or_else(|| vec![sc.problem.placement.theta]);
    let rows = bridge_sweep(&sc.problem, &sc.force, &thetas, sc.problem.lambda, &sc.options);
    out.add("bridge.csv", csv(|b| write_bridge_csv(&rows, b))?);
    let solved: Vec<_> = rows
        .iter()
        .filter_map(|r| r.result.as_ref().map(|e| (r.theta, e.h_star)))
        .collect();
    if !solved.is_empty() {
        out.plot(
            sc.config.output.plots,
            "bridge.svg",
            &Plot {
                title: format!("equilibrium offset at lambda = {}", sc.problem.lambda),
                x_label: "theta".into(),
                y_label: "h*".into(),
                kind: PlotKind::Curve,
                series: vec![Series::new(
                    "h*",
                    solved.iter().map(|p| p.0).collect(),
                    solved.iter().map(|p| p.1).collect(),
                )],
            },
        )?;
    }
    let flagged = rows.iter().filter(|r| !r.admissible).count();
    let failed = rows.iter().filter(|r| r.admissible && r.result.is_none()).count();
    let c = &mut out.certificate;
    c.num("lambda", sc.problem.lambda);
    c.value("angles", rows.len());
    c.value("inadmissible", flagged);
    c.value("failed", failed);
    c.check("admissible_rows_solved", failed == 0);
    Ok(())
}

fn asymptotics(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let e = &sc.config.experiment;
    let side: Side = e.side.map(Into::into).unwrap_or(Side::Bottom);
    let gaps = e
        .gaps
        .clone()
        .unwrap_or_else(|| default_gap_sequence(sc.problem.channel.half_height(), 5));
    let fit = exponent_experiment(&sc.problem, side, &gaps, &sc.options)?;
    let name = format!("exponent_{side}");
    out.add(&format!("{name}.csv"), csv(|b| write_exponent_csv(&fit, b))?);
    if fit.slope.is_some() {
        out.plot(
            sc.config.output.plots,
            &format!("{name}.svg"),
            &Plot {
                title: format!("{side} approach"),
                x_label: "gap".into(),
                y_label: "|lift|".into(),
                kind: PlotKind::LogLog,
                series: vec![
                    Series::new("volume", fit.gaps.clone(), fit.lifts.clone()),
                    Series::new("boundary", fit.gaps.clone(), fit.lifts_boundary.clone()),
                ],
            },
        )?;
    }
    let c = &mut out.certificate;
    c.value("side", side);
    c.num("lambda", sc.problem.lambda);
    c.value("points", fit.gaps.len());
    match fit.slope {
        Some(s) => {
            c.num("slope", s);
            c.num("slope_boundary", fit.slope_boundary.unwrap_or(f64::NAN));
            c.num("fit_residual", fit.residual);
        }
        None => c.value("slope", "skipped"),
    }
    c.num("bound", fit.bound);
    c.check("within_bound", fit.consistent());
    Ok(())
}

fn symmetry(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let grid = lambda_grid(sc, &[0.0, 0.01, 0.05]);
    let report_above = sc
        .config
        .experiment
        .report_above
        .unwrap_or_else(|| grid.iter().cloned().fold(0.0, f64::max));
    let rep = symmetry_certificate(&sc.problem, &sc.force, &grid, report_above, &sc.options)?;
    let mut table = String::from("lambda,lift,lift_tol,h_star,mirror_error,report_only\n");
    for r in &rep.rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{}",
            num(r.lambda),
            num(r.lift),
            num(r.lift_tol),
            num(r.h_star),
            num(r.mirror_error),
            r.report_only
        );
    }
    out.add("symmetry.csv", table.into_bytes());
    let c = &mut out.certificate;
    for r in &rep.rows {
        let tag = num(r.lambda);
        if let Some(e) = &r.error {
            c.value(&format!("error_{tag}"), e);
        }
        if r.report_only {
            c.value(&format!("report_only_{tag}"), format!("lift {} h* {}", num(r.lift), num(r.h_star)));
            continue;
        }
        c.check(&format!("lift_vanishes_{tag}"), r.error.is_none() && r.lift_ok());
        c.check(&format!("offset_vanishes_{tag}"), r.error.is_none() && r.h_ok());
        c.check(&format!("mirror_symmetric_{tag}"), r.error.is_none() && r.mirror_ok());
    }
    Ok(())
}

fn mms(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let mut case = MmsCase::standard();
    case.mu = sc.problem.mu;
    if let Some(s) = &sc.config.experiment.sizes {
        case.sizes = s.clone();
    }
    let study = mms_study(&case, &sc.options.solver)?;
    let mut table = String::from("size,h,velocity_dofs,velocity_l2,velocity_h1,pressure_l2,newton_iters\n");
    for l in &study.levels {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{}",
            num(l.size),
            num(l.h),
            l.velocity_dofs,
            num(l.velocity_l2),
            num(l.velocity_h1),
            num(l.pressure_l2),
            l.newton_iters
        );
    }
    out.add("mms.csv", table.into_bytes());
    let hs: Vec<f64> = study.levels.iter().map(|l| l.h).collect();
    let col = |f: fn(&channel_fsi::ns_solver::MmsLevel) -> f64| study.levels.iter().map(f).collect::<Vec<_>>();
    out.plot(
        sc.config.output.plots,
        "mms.svg",
        &Plot {
            title: "manufactured solution errors".into(),
            x_label: "h".into(),
            y_label: "error".into(),
            kind: PlotKind::LogLog,
            series: vec![
                Series::new("velocity H1", hs.clone(), col(|l| l.velocity_h1)),
                Series::new("velocity L2", hs.clone(), col(|l| l.velocity_l2)),
                Series::new("pressure L2", hs, col(|l| l.pressure_l2)),
            ],
        },
    )?;
    let c = &mut out.certificate;
    c.num("order_velocity_l2", study.order_velocity_l2);
    c.num("order_velocity_h1", study.order_velocity_h1);
    c.num("order_pressure_l2", study.order_pressure_l2);
    c.check("velocity_h1_order", (study.order_velocity_h1 - 2.0).abs() <= 0.2);
    c.check("pressure_l2_order", (study.order_pressure_l2 - 2.0).abs() <= 0.3);
    Ok(())
}

fn mesh_dump(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let mesh = mesh_for_problem(&sc.problem, &sc.options.mesh)?;
    out.add("mesh.txt", csv(|b| mesh.write_text(b))?);
    let q = mesh.quality_report();
    let c = &mut out.certificate;
    c.value("vertices", q.vertices);
    c.value("triangles", q.triangles);
    c.value("curved_triangles", q.curved_triangles);
    c.num("min_angle_deg", q.min_angle);
    c.num("max_aspect", q.max_aspect);
    c.check("conforming", mesh.is_conforming());
    c.check("euler_characteristic", mesh.euler_characteristic() == 0);
    Ok(())
}

fn field_dump(sc: &Scenario, out: &mut RunOutput) -> Result<(), RunError> {
    let pb = &sc.problem;
    let layout = pb.layout();
    let lambda = pb.lambda;
    let s: Box<dyn AnalyticField> = if pb.profile.is_symmetric() {
        Box::new(symmetric_variant(&pb.profile, &layout, lambda).map_err(|e| RunError::Other(e.to_string()))?)
    } else {
        Box::new(solenoidal_s(&pb.profile, &layout, lambda).map_err(|e| RunError::Other(e.to_string()))?)
    };
    let w = lift_field_w(&layout).map_err(|e| RunError::Other(e.to_string()))?;
    let [nx, ny] = sc.config.experiment.grid.unwrap_or([61, 21]);
    let (l, big_h) = (pb.channel.half_length(), pb.channel.half_height());
    let mut table = String::from("x1,x2,s1,s2,div_s,w1,w2,div_w\n");
    let (mut div_s, mut div_w) = (0.0_f64, 0.0_f64);
    for j in 0..ny {
        for i in 0..nx {
            let p = nalgebra::Point2::new(
                -l + 2.0 * l * i as f64 / (nx - 1) as f64,
                -big_h + 2.0 * big_h * j as f64 / (ny - 1) as f64,
            );
            if signed_distance(&pb.shape, &pb.placement, &p) < 0.0 {
                continue;
            }
            let (sv, sg) = s.eval(&p);
            let (wv, wg) = w.eval(&p);
            div_s = div_s.max(sg.trace().abs());
            div_w = div_w.max(wg.trace().abs());
            let _ = writeln!(
                table,
                "{},{},{},{},{},{},{},{}",
                num(p.x),
                num(p.y),
                num(sv.x),
                num(sv.y),
                num(sg.trace()),
                num(wv.x),
                num(wv.y),
                num(wg.trace())
            );
        }
    }
    out.add("fields.csv", table.into_bytes());
    let c = &mut out.certificate;
    c.num("lambda", lambda);
    c.num("max_div_s", div_s);
    c.num("max_div_w", div_w);
    c.check("s_divergence_free", div_s <= DIVERGENCE_TOL * lambda.max(1.0));
    c.check("w_divergence_free", div_w <= DIVERGENCE_TOL);
    Ok(())
}

/// Written files with their SHA-256 digests, in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
    pub status: String,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, hash) in &self.entries {
            let _ = writeln!(s, "{hash}  {name}");
        }
        let _ = writeln!(s, "status: {}", self.status);
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Write the files of a run (or the error that stopped it), the effective
/// config, the certificate and `manifest.txt` into `dir`. Writing happens on
/// the calling thread, one file at a time.
pub fn write_outputs(
    dir: &Path,
    config_json: &str,
    result: &Result<RunOutput, RunError>,
) -> Result<Manifest, RunError> {
    std::fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    files.insert("config.json".into(), config_json.as_bytes().to_vec());
    let status = match result {
        Ok(run) => {
            files.extend(run.files.clone());
            files.insert("certificate.txt".into(), run.certificate.render().into_bytes());
            if run.certificate.passed() { "PASS" } else { "FAIL" }.to_string()
        }
        Err(e) => {
            files.insert("error.txt".into(), format!("{e}\n").into_bytes());
            "ERROR".to_string()
        }
    };
    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        std::fs::write(dir.join(name), bytes)?;
        entries.push((name.clone(), sha256_hex(bytes)));
    }
    let manifest = Manifest { entries, status };
    std::fs::write(dir.join("manifest.txt"), manifest.render())?;
    Ok(manifest)
}

/// Output directory of a scenario: the config value, relative to `base`
/// unless absolute.
pub fn output_dir(base: &Path, directory: &str) -> PathBuf {
    let d = Path::new(directory);
    if d.is_absolute() {
        d.to_path_buf()
    } else {
        base.join(d)
    }
}
