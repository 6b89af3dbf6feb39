//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines are always shown.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use channel_fsi::extension::{
    lift_field_w, solenoidal_s, symmetric_variant, AnalyticField, ChiCollars, InflowProfile,
};
use channel_fsi::fsi::{
    admissible_range, continuation, exponent_experiment, find_equilibrium, find_equilibrium_default,
    global_force, initial_half_width, monotonicity_scan, symmetry_certificate,
    uniform_grid, write_equilibria_csv, FsiOptions, RestoringForce, Side,
};
use channel_fsi::geometry::{boundary_sample, BodyShape, Channel, Placement};
use channel_fsi::lift::{lift, lift_with};
use channel_fsi::mesh::MeshOptions;
use channel_fsi::ns_solver::{
    mesh_for_problem, mms_study, solve_navier_stokes, solve_stokes, uniqueness_probe, FlowProblem,
    MmsCase, SolverOptions,
};
use channel_fsi_cli::ScenarioConfig;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn channel() -> Channel {
    Channel::new(3.0, 1.0).unwrap()
}

fn ellipse() -> BodyShape {
    BodyShape::ellipse(0.4, 0.2).unwrap()
}

fn couette(lambda: f64, h: f64) -> FlowProblem {
    let prof = InflowProfile::couette(1.0, 1.0).unwrap();
    FlowProblem::new(1.0, lambda, prof, channel(), ellipse(), Placement::offset(h)).unwrap()
}

fn parabolic(lambda: f64) -> FlowProblem {
    let v = vec![0.75, 0.0, -0.75];
    let prof = InflowProfile::polynomial(1.0, 0.0, v.clone(), v).unwrap();
    FlowProblem::new(1.0, lambda, prof, channel(), ellipse(), Placement::default()).unwrap()
}

fn even(lambda: f64) -> FlowProblem {
    let v = vec![1.5, 0.0, -0.5];
    let prof = InflowProfile::symmetric_polynomial(1.0, 1.0, v.clone(), v).unwrap();
    FlowProblem::new(1.0, lambda, prof, channel(), ellipse(), Placement::default()).unwrap()
}

fn force(pb: &FlowProblem) -> RestoringForce {
    RestoringForce::for_problem(pb, 1.0, 0.1, 0.1).unwrap()
}

fn sample_points(n: usize, seed: u64) -> Vec<Point2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Point2::new(rng.random_range(-3.0..=3.0), rng.random_range(-1.0..=1.0)))
        .collect()
}

/// Largest gap between the analytic Jacobian and central differences,
/// relative to the Jacobian's size.
fn jacobian_defect(field: &dyn AnalyticField, p: &Point2<f64>) -> f64 {
    let step = 1e-5;
    let (_, g) = field.eval(p);
    let scale = g.abs().max().max(1.0);
    let mut err = 0.0_f64;
    for j in 0..2 {
        let mut e = Vector2::zeros();
        e[j] = step;
        let d = (field.value(&(p + e)) - field.value(&(p - e))) / (2.0 * step);
        for i in 0..2 {
            err = err.max((d[i] - g[(i, j)]).abs() / scale);
        }
    }
    err
}

fn extension_exactness() -> Outcome {
    let lambda = 1.0;
    let pts = sample_points(10_000, 11);
    let (mut div, mut trace, mut fd) = (0.0_f64, 0.0_f64, 0.0_f64);
    let cases = [(couette(lambda, 0.25), false), (parabolic(lambda).with_placement(Placement::offset(-0.2)), false), (even(lambda), true)];
    for (pb, sym) in &cases {
        let lay = pb.layout();
        let s: Box<dyn AnalyticField> = if *sym {
            Box::new(symmetric_variant(&pb.profile, &lay, lambda).map_err(|e| e.to_string())?)
        } else {
            Box::new(solenoidal_s(&pb.profile, &lay, lambda).map_err(|e| e.to_string())?)
        };
        let w = lift_field_w(&lay).map_err(|e| e.to_string())?;
        for p in &pts {
            div = div.max(s.divergence(p).abs()).max(w.divergence(p).abs());
        }
        for p in pts.iter().take(1000) {
            fd = fd.max(jacobian_defect(s.as_ref(), p)).max(jacobian_defect(&w, p));
        }
        let (l, big_h) = (lay.channel.half_length(), lay.channel.half_height());
        let prof = &pb.profile;
        // 1000 samples on the body, 1000 spread over the four walls.
        for b in boundary_sample(&pb.shape, &pb.placement, 1000) {
            trace = trace.max(s.value(&b.point).norm());
            trace = trace.max((w.value(&b.point) - Vector2::new(0.0, 1.0)).norm());
        }
        for k in 0..250 {
            let t = -1.0 + 2.0 * (k as f64 + 0.5) / 250.0;
            let (x, y) = (l * t, big_h * t);
            let checks = [
                (Point2::new(-l, y), Vector2::new(prof.v_in(y), 0.0)),
                (Point2::new(l, y), Vector2::new(prof.v_out(y), 0.0)),
                (Point2::new(x, big_h), Vector2::new(prof.u_top(), 0.0)),
                (Point2::new(x, -big_h), Vector2::new(prof.bottom_speed(), 0.0)),
            ];
            for (p, target) in checks {
                trace = trace.max((s.value(&p) - lambda * target).norm());
                trace = trace.max(w.value(&p).norm());
            }
        }
    }
    ensure(
        div <= 1e-10 && trace <= 1e-10 && fd <= 1e-5,
        format!("max |div| {div:.2e}, max trace error {trace:.2e}, finite-difference Jacobian defect {fd:.2e}"),
    )
}

fn mms_convergence() -> Outcome {
    let study = mms_study(&MmsCase::standard(), &SolverOptions::default()).map_err(|e| e.to_string())?;
    let dofs = study.levels.iter().map(|l| l.velocity_dofs).max().unwrap_or(0);
    ensure(
        study.levels.len() >= 4
            && (study.order_velocity_h1 - 2.0).abs() <= 0.2
            && (study.order_pressure_l2 - 2.0).abs() <= 0.3
            && dofs <= 60_000,
        format!(
            "H1 order {:.3}, pressure order {:.3}, {} levels, max velocity dofs {dofs}",
            study.order_velocity_h1,
            study.order_pressure_l2,
            study.levels.len()
        ),
    )
}

fn zero_lambda() -> Outcome {
    let pb = couette(0.0, 0.2);
    let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(0.15)).map_err(|e| e.to_string())?;
    let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let l = lift(&f, &pb.layout()).map_err(|e| e.to_string())?;
    let opts = FsiOptions::default();
    let eq = find_equilibrium_default(&pb, &force(&pb), &opts).map_err(|e| e.to_string())?;
    let tol_h = opts.tol_h(&pb);
    ensure(
        f.h1_norm() <= 1e-11 && l.value_volume == 0.0 && l.value_boundary == 0.0 && eq.h_star.abs() <= tol_h,
        format!("|u|_H1 {:.2e}, lift {:.2e}, h* {:.2e}", f.h1_norm(), l.value_volume, eq.h_star),
    )
}

fn lift_equivalence() -> Outcome {
    let pb = couette(10.0, 0.3);
    let mut rel = Vec::new();
    for size in [0.15, 0.075] {
        let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(size)).map_err(|e| e.to_string())?;
        let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).map_err(|e| e.to_string())?;
        let l = lift(&f, &pb.layout()).map_err(|e| e.to_string())?;
        let denom = l.value_volume.abs().max(1e-12 * pb.lambda);
        rel.push((l.value_boundary - l.value_volume).abs() / denom);
    }
    ensure(
        rel[0] <= 0.02 && rel[1] < rel[0],
        format!("relative discrepancy {:.2e} at size 0.15, {:.2e} at 0.075", rel[0], rel[1]),
    )
}

fn w_independence() -> Outcome {
    let pb = couette(10.0, 0.3);
    let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(0.15)).map_err(|e| e.to_string())?;
    let f = solve_navier_stokes(&pb, &mesh, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let lay = pb.layout();
    let a = lift_with(&f, &lay, ChiCollars::default()).map_err(|e| e.to_string())?;
    let other = ChiCollars {
        horizontal: 2.0,
        bottom: 0.3,
        top: 0.7,
    };
    let b = lift_with(&f, &lay, other).map_err(|e| e.to_string())?;
    let rel = (a.value_volume - b.value_volume).abs() / a.value_volume.abs().max(1e-12 * pb.lambda);
    ensure(
        rel <= 0.02,
        format!("volume lifts {:.6} and {:.6}, relative difference {rel:.2e}", a.value_volume, b.value_volume),
    )
}

fn symmetry() -> Outcome {
    let pb = even(0.0);
    let rep = symmetry_certificate(&pb, &force(&pb), &[0.0, 0.01, 0.05], 0.05, &FsiOptions::default())
        .map_err(|e| e.to_string())?;
    let worst_lift = rep.rows.iter().map(|r| r.lift.abs()).fold(0.0, f64::max);
    let worst_h = rep.rows.iter().map(|r| r.h_star.abs()).fold(0.0, f64::max);
    let worst_mirror = rep.rows.iter().map(|r| r.mirror_error).fold(0.0, f64::max);
    let judged = rep.rows.iter().filter(|r| !r.report_only).count();
    ensure(
        rep.passed() && judged == 3,
        format!("max |lift| {worst_lift:.2e}, max |h*| {worst_h:.2e}, max mirror defect {worst_mirror:.2e}"),
    )
}

fn monotonicity() -> Outcome {
    let lambda = 1.0;
    let pb = couette(lambda, 0.0);
    let f = force(&pb);
    let opts = FsiOptions::default();
    let h0 = initial_half_width(&pb);
    let scan = monotonicity_scan(&pb, &f, lambda, &uniform_grid(-h0, h0, 11), &opts);
    let (lo, hi) = admissible_range(&pb, &opts);
    let bottom = global_force(&pb, &f, lo, &opts).map_err(|e| e.to_string())?.phi;
    let top = global_force(&pb, &f, hi, &opts).map_err(|e| e.to_string())?.phi;
    ensure(
        scan.increasing && bottom < 0.0 && top > 0.0,
        format!(
            "increasing on 11 points: {}, phi({lo:.3}) = {bottom:.3e}, phi({hi:.3}) = {top:.3e}",
            scan.increasing
        ),
    )
}

fn equilibrium_oracle() -> Outcome {
    let pb = couette(0.0, 0.0);
    let f = force(&pb);
    let opts = FsiOptions::default();
    let lambda = 1.0;
    let pl = pb.with_lambda(lambda);
    let h0 = initial_half_width(&pb);
    let root = find_equilibrium(&pl, &f, (-h0, h0), &opts).map_err(|e| e.to_string())?;
    // Coarse scan for the sign change, then 20 points across that cell.
    let coarse = uniform_grid(-h0, h0, 20);
    let phis = |grid: &[f64]| -> Result<Vec<f64>, String> {
        monotonicity_scan(&pb, &f, lambda, grid, &opts)
            .rows
            .into_iter()
            .map(|r| r.map(|s| s.phi).map_err(|e| e.to_string()))
            .collect()
    };
    let cp = phis(&coarse)?;
    let k = cp
        .windows(2)
        .position(|w| w[0] <= 0.0 && w[1] >= 0.0)
        .ok_or("no sign change on the coarse scan")?;
    let grid = uniform_grid(coarse[k], coarse[k + 1], 20);
    let cell = grid[1] - grid[0];
    let best = grid
        .iter()
        .zip(phis(&grid)?)
        .map(|(h, p)| (p.abs(), *h))
        .fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
    let scan_ok = (root.h_star - best.1).abs() <= cell;

    let lambdas = [0.0, 0.25, 0.5, 1.0];
    let curve = continuation(&pb, &f, &lambdas, &opts).map_err(|e| e.to_string())?;
    let tol_h = opts.tol_h(&pb);
    let mut worst = 0.0_f64;
    for (p, &l) in curve.points.iter().zip(&lambdas) {
        let cold = find_equilibrium_default(&pb.with_lambda(l), &f, &opts).map_err(|e| e.to_string())?;
        worst = worst.max((p.h_star - cold.h_star).abs());
    }
    ensure(
        scan_ok && curve.points.len() == lambdas.len() && worst <= tol_h,
        format!(
            "h* {:.5}, scan argmin {:.5} (cell {cell:.4}); continuation vs cold start max {worst:.2e} (tol {tol_h:.0e})",
            root.h_star, best.1
        ),
    )
}

fn collision_bound() -> Outcome {
    let opts = FsiOptions::default();
    let gaps = channel_fsi::fsi::default_gap_sequence(1.0, 5);
    let mut parts = Vec::new();
    let mut ok = true;
    for (pb, side, tag) in [
        (parabolic(1.0), Side::Bottom, "U=0 bottom"),
        (parabolic(1.0), Side::Top, "U=0 top"),
        (couette(1.0, 0.0), Side::Top, "U=1 top"),
    ] {
        let fit = exponent_experiment(&pb, side, &gaps, &opts).map_err(|e| e.to_string())?;
        let resolved = fit.gaps.len();
        ok &= fit.consistent() && resolved >= 4;
        parts.push(format!(
            "{tag}: slope {:.3} >= {:.2} over {resolved} gaps",
            fit.slope.unwrap_or(f64::NAN),
            fit.bound - 0.25
        ));
    }
    ensure(ok, parts.join("; "))
}

fn near_linearity() -> Outcome {
    let base = couette(0.0, 0.1);
    let mesh = mesh_for_problem(&base, &MeshOptions::with_size(0.15)).map_err(|e| e.to_string())?;
    let lambdas = [1e-3, 2e-3, 4e-3];
    let mut norms = Vec::new();
    for &l in &lambdas {
        let f = solve_navier_stokes(&base.with_lambda(l), &mesh, &SolverOptions::default()).map_err(|e| e.to_string())?;
        norms.push(f.h1_norm());
    }
    let c = lambdas.iter().zip(&norms).map(|(l, n)| l * n).sum::<f64>() / lambdas.iter().map(|l| l * l).sum::<f64>();
    let dev = lambdas
        .iter()
        .zip(&norms)
        .map(|(l, n)| (n - c * l).abs() / n)
        .fold(0.0, f64::max);

    let mesh = Arc::clone(&mesh);
    let a = solve_stokes(&base.with_lambda(1e-3), &mesh).map_err(|e| e.to_string())?;
    let b = solve_stokes(&base.with_lambda(4e-3), &mesh).map_err(|e| e.to_string())?;
    let scale = b.velocity.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let stokes = a
        .velocity
        .iter()
        .zip(&b.velocity)
        .map(|(x, y)| (4.0 * x - y).norm())
        .fold(0.0, f64::max)
        / scale;
    ensure(
        dev <= 0.05 && stokes <= 1e-10,
        format!("deviation from linear fit {dev:.2e}, Stokes linearity defect {stokes:.2e}"),
    )
}

fn uniqueness() -> Outcome {
    let mut worst = 0.0_f64;
    for pb in [couette(1e-3, 0.1), parabolic(1.0), even(0.01)] {
        let mesh = mesh_for_problem(&pb, &MeshOptions::with_size(0.15)).map_err(|e| e.to_string())?;
        let d = uniqueness_probe(&pb, &mesh, &SolverOptions::default(), 3, 2024).map_err(|e| e.to_string())?;
        worst = worst.max(d);
    }
    ensure(worst <= 1e-8, format!("max H1 distance between starts {worst:.2e}"))
}

fn run_cli(config: &Path, out: &Path) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_channel-fsi"))
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())
}

fn determinism_and_parity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = r#"{
  "channel": { "H": 1.0, "Lrect": 3.0 },
  "inflow": { "profile": "couette", "U": 1.0 },
  "body": { "shape": { "kind": "ellipse", "params": [0.4, 0.2] } },
  "experiment": { "kind": "continuation", "lambda_grid": [0.0, 0.5, 1.0] }
}"#;
    let config = dir.path().join("continuation.json");
    std::fs::write(&config, text).map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_cli(&config, out)?;
        if !o.status.success() {
            return Err(format!("cli exited with {}", o.status));
        }
    }
    let read = |p: std::path::PathBuf| std::fs::read(p).map_err(|e| e.to_string());
    let same_manifest = read(a.join("manifest.txt"))? == read(b.join("manifest.txt"))?;

    let sc = ScenarioConfig::from_json(text).map_err(|e| e.to_string())?.build().map_err(|e| e.to_string())?;
    let curve = continuation(&sc.problem, &sc.force, &[0.0, 0.5, 1.0], &sc.options).map_err(|e| e.to_string())?;
    let mut lib = Vec::new();
    write_equilibria_csv(&curve.points, &mut lib).map_err(|e| e.to_string())?;
    let parity = read(a.join("continuation.csv"))? == lib;
    ensure(
        same_manifest && parity,
        format!("manifests identical: {same_manifest}, CLI table equals library table: {parity}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("extension exactness", extension_exactness),
        ("manufactured-solution convergence", mms_convergence),
        ("zero-lambda degeneracy", zero_lambda),
        ("lift formula equivalence", lift_equivalence),
        ("independence of the lift test field", w_independence),
        ("symmetry certificate", symmetry),
        ("monotonicity and push direction", monotonicity),
        ("equilibrium oracle and continuation", equilibrium_oracle),
        ("near-collision bound consistency", collision_bound),
        ("near-linearity in lambda", near_linearity),
        ("uniqueness probe", uniqueness),
        ("determinism and CLI parity", determinism_and_parity),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {n:>2} {status}: {name} ({detail}) [{:.1} s]",
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
