use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use channel_fsi_cli::{execute, write_outputs, ExperimentKind, ScenarioConfig};

#[derive(Parser)]
#[command(name = "channel-fsi", version, about = "Navier-Stokes flow past a body in a channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the flow at one placement.
    Solve(Common),
    /// Volume and boundary lift along the `h` grid.
    Lift(Common),
    /// Equilibrium offset at one `lambda`.
    Equilibrium(Common),
    /// Equilibrium offsets along the `lambda` grid.
    Continuation(Common),
    /// Global force along the `h` grid.
    Scan(Common),
    /// Equilibria along the `theta` grid.
    SweepTheta(Common),
    /// Near-wall lift exponent.
    Asymptotics(Common),
    /// Symmetry certificate of an even inflow.
    Symmetry(Common),
    /// Manufactured-solution convergence study.
    Mms(Common),
    /// Mesh and quality report.
    MeshDump(Common),
    /// Closed-form extension fields on a grid.
    FieldDump(Common),
    /// Run the experiment named in the config.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    lambda: Option<f64>,
    /// Bulk mesh size.
    #[arg(long)]
    size: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (Option<ExperimentKind>, Common) {
        use ExperimentKind as K;
        match self {
            Self::Solve(c) => (Some(K::Solve), c),
            Self::Lift(c) => (Some(K::Lift), c),
            Self::Equilibrium(c) => (Some(K::Equilibrium), c),
            Self::Continuation(c) => (Some(K::Continuation), c),
            Self::Scan(c) => (Some(K::Scan), c),
            Self::SweepTheta(c) => (Some(K::SweepTheta), c),
            Self::Asymptotics(c) => (Some(K::Asymptotics), c),
            Self::Symmetry(c) => (Some(K::Symmetry), c),
            Self::Mms(c) => (Some(K::Mms), c),
            Self::MeshDump(c) => (Some(K::MeshDump), c),
            Self::FieldDump(c) => (Some(K::FieldDump), c),
            Self::Run(c) => (None, c),
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let (kind, args) = cli.command.split();
    let mut config = ScenarioConfig::from_path(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(k) = kind {
        config.experiment.kind = k;
    }
    if let Some(v) = args.lambda {
        config.experiment.lambda = v;
    }
    if let Some(v) = args.size {
        config.solver.size = v;
    }
    if let Some(v) = args.h {
        config.body.h = v;
    }
    if let Some(v) = args.theta {
        config.body.theta = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
            channel_fsi_cli::run::output_dir(&base, &config.output.directory)
        }
    };
    let scenario = config.build()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let kind = config.experiment.kind;
    log::info!("running {} into {}", kind.name(), out.display());
    let result = pool.install(|| execute(&scenario, kind));
    let manifest = write_outputs(&out, &config.to_json(), &result)?;
    match result {
        Ok(r) => {
            print!("{}", r.certificate.render());
            Ok(manifest.status == "PASS")
        }
        Err(e) => bail!("{} failed: {e}", kind.name()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
