//! Scenario configuration: a single JSON document with a strict schema.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use channel_fsi::extension::InflowProfile;
use channel_fsi::fsi::{FsiOptions, RestoringForce, Side};
use channel_fsi::geometry::{BodyShape, Channel, Placement};
use channel_fsi::mesh::MeshOptions;
use channel_fsi::ns_solver::{FlowProblem, SolverOptions};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub channel: ChannelConfig,
    #[serde(default)]
    pub fluid: FluidConfig,
    pub inflow: InflowConfig,
    pub body: BodyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub force: ForceConfig,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Seed of the randomized probes.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "H")]
    pub half_height: f64,
    #[serde(rename = "Lrect")]
    pub half_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidConfig {
    pub mu: f64,
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self { mu: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Couette,
    CustomPolynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowConfig {
    pub profile: ProfileKind,
    #[serde(rename = "U")]
    pub u_top: f64,
    /// Monomial coefficients in `x2` of the inflow profile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_in: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_out: Option<Vec<f64>>,
    /// Even profiles with both walls moving at `U`.
    #[serde(default)]
    pub symmetric: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKindConfig {
    Ellipse,
    Disk,
    SmoothedPolygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub kind: ShapeKindConfig,
    /// Semi-axes `[a, b]` of an ellipse or `[radius]` of a disk.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<[f64; 2]>>,
    /// Corner rounding radius of a polygon; defaults to 10% of the shortest
    /// edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub shape: ShapeConfig,
    #[serde(default)]
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub size: f64,
    pub grading: f64,
    pub newton_tol: f64,
    pub picard_iters: usize,
    pub max_newton: usize,
    /// Target edge length on the body; defaults to a third of `size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_size: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            size: 0.15,
            grading: 0.3,
            newton_tol: 1e-10,
            picard_iters: 3,
            max_newton: 25,
            body_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceConfig {
    pub gamma: f64,
    #[serde(rename = "K_b")]
    pub k_b: f64,
    #[serde(rename = "K_t")]
    pub k_t: f64,
    #[serde(default)]
    pub c_theta: f64,
}

impl Default for ForceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            k_b: 0.1,
            k_t: 0.1,
            c_theta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    Lift,
    Equilibrium,
    Continuation,
    Scan,
    SweepTheta,
    Asymptotics,
    Symmetry,
    Mms,
    MeshDump,
    FieldDump,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        Self::Solve,
        Self::Lift,
        Self::Equilibrium,
        Self::Continuation,
        Self::Scan,
        Self::SweepTheta,
        Self::Asymptotics,
        Self::Symmetry,
        Self::Mms,
        Self::MeshDump,
        Self::FieldDump,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::Lift => "lift",
            Self::Equilibrium => "equilibrium",
            Self::Continuation => "continuation",
            Self::Scan => "scan",
            Self::SweepTheta => "sweep-theta",
            Self::Asymptotics => "asymptotics",
            Self::Symmetry => "symmetry",
            Self::Mms => "mms",
            Self::MeshDump => "mesh-dump",
            Self::FieldDump => "field-dump",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideConfig {
    Bottom,
    Top,
}

impl From<SideConfig> for Side {
    fn from(s: SideConfig) -> Self {
        match s {
            SideConfig::Bottom => Side::Bottom,
            SideConfig::Top => Side::Top,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    /// Equilibrium bracket; defaults to `[-h0, h0]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bracket: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<SideConfig>,
    /// Gap sequence of the asymptotics experiment; defaults to `0.2 H 2^-k`,
    /// `k = 0..5`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_phi: Option<f64>,
    /// Starts of the uniqueness probe run with `solve`.
    #[serde(default = "default_starts")]
    pub n_starts: usize,
    /// Symmetry rows above this `lambda` are report-only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_above: Option<f64>,
    /// Mesh sizes of the manufactured-solution study.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<f64>>,
    /// Sampling grid `[nx, ny]` of `field-dump`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

fn default_starts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: String,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            plots: true,
        }
    }
}

/// Everything the library needs, built from a validated config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub problem: FlowProblem,
    pub force: RestoringForce,
    pub options: FsiOptions,
}

fn finite(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be finite, got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn ascending(key: &str, grid: &[f64]) -> Result<(), ConfigError> {
    if grid.is_empty() {
        return Err(invalid(key, "must not be empty"));
    }
    for &v in grid {
        finite(key, v)?;
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid(key, "must be strictly increasing"));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    fn shape(&self) -> Result<BodyShape, ConfigError> {
        let s = &self.body.shape;
        let key = "body.shape";
        let err = |e: channel_fsi::geometry::GeometryError| invalid(key, e.to_string());
        match s.kind {
            ShapeKindConfig::Ellipse => match s.params.as_slice() {
                [a, b] => BodyShape::ellipse(*a, *b).map_err(err),
                _ => Err(invalid("body.shape.params", "an ellipse takes [a, b]")),
            },
            ShapeKindConfig::Disk => match s.params.as_slice() {
                [r] => BodyShape::disk(*r).map_err(err),
                _ => Err(invalid("body.shape.params", "a disk takes [radius]")),
            },
            ShapeKindConfig::SmoothedPolygon => {
                let v = s
                    .vertices
                    .as_ref()
                    .ok_or_else(|| invalid("body.shape.vertices", "required for a smoothed polygon"))?;
                BodyShape::smoothed_polygon(v, s.rounding).map_err(err)
            }
        }
    }

    fn profile(&self) -> Result<InflowProfile, ConfigError> {
        let i = &self.inflow;
        let big_h = self.channel.half_height;
        let err = |e: channel_fsi::extension::ExtensionError| invalid("inflow", e.to_string());
        match (i.profile, i.symmetric) {
            (ProfileKind::Couette, false) => {
                if i.v_in.is_some() || i.v_out.is_some() {
                    return Err(invalid("inflow.v_in", "not used by the couette profile"));
                }
                InflowProfile::couette(big_h, i.u_top).map_err(err)
            }
            (ProfileKind::Couette, true) => Err(invalid("inflow.symmetric", "the couette profile is not even")),
            (ProfileKind::CustomPolynomial, sym) => {
                let v_in = i.v_in.clone().ok_or_else(|| invalid("inflow.v_in", "required"))?;
                let v_out = i.v_out.clone().unwrap_or_else(|| v_in.clone());
                if sym {
                    InflowProfile::symmetric_polynomial(big_h, i.u_top, v_in, v_out).map_err(err)
                } else {
                    InflowProfile::polynomial(big_h, i.u_top, v_in, v_out).map_err(err)
                }
            }
        }
    }

    /// Check every key against the library's preconditions and build the
    /// problem, force model and options.
    pub fn build(&self) -> Result<Scenario, ConfigError> {
        let big_h = positive("channel.H", self.channel.half_height)?;
        let l = positive("channel.Lrect", self.channel.half_length)?;
        let channel = Channel::new(l, big_h).map_err(|e| invalid("channel.Lrect", e.to_string()))?;
        positive("fluid.mu", self.fluid.mu)?;
        let shape = self.shape()?;
        let profile = self.profile()?;
        finite("body.h", self.body.h)?;
        finite("body.theta", self.body.theta)?;
        if let Some(g) = &self.body.h_grid {
            ascending("body.h_grid", g)?;
        }
        if let Some(g) = &self.body.theta_grid {
            ascending("body.theta_grid", g)?;
        }
        let e = &self.experiment;
        if !(e.lambda >= 0.0 && e.lambda.is_finite()) {
            return Err(invalid("experiment.lambda", format!("must be non-negative, got {}", e.lambda)));
        }
        if let Some(g) = &e.lambda_grid {
            ascending("experiment.lambda_grid", g)?;
            if g[0] < 0.0 {
                return Err(invalid("experiment.lambda_grid", "must be non-negative"));
            }
        }
        if let Some(g) = &e.gaps {
            if g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("experiment.gaps", "gaps must be positive"));
            }
        }
        if let Some(s) = &e.sizes {
            if s.len() < 2 || s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(invalid("experiment.sizes", "needs at least two positive sizes"));
            }
        }
        if let Some([a, b]) = e.bracket {
            if !(a < b) {
                return Err(invalid("experiment.bracket", "needs lo < hi"));
            }
        }
        for (key, v) in [("experiment.tol_h", e.tol_h), ("experiment.tol_phi", e.tol_phi)] {
            if let Some(v) = v {
                positive(key, v)?;
            }
        }
        if let Some([nx, ny]) = e.grid {
            if nx < 2 || ny < 2 {
                return Err(invalid("experiment.grid", "needs at least 2 x 2 points"));
            }
        }
        let s = &self.solver;
        positive("solver.size", s.size)?;
        positive("solver.grading", s.grading)?;
        positive("solver.newton_tol", s.newton_tol)?;
        if let Some(b) = s.body_size {
            positive("solver.body_size", b)?;
        }
        if s.max_newton == 0 {
            return Err(invalid("solver.max_newton", "must be at least 1"));
        }
        let f = &self.force;
        positive("force.gamma", f.gamma)?;
        positive("force.K_b", f.k_b)?;
        positive("force.K_t", f.k_t)?;
        if !(f.c_theta >= 0.0 && f.c_theta.is_finite()) {
            return Err(invalid("force.c_theta", "must be non-negative"));
        }
        if self.output.directory.is_empty() {
            return Err(invalid("output.directory", "must not be empty"));
        }

        let placement = Placement::new(self.body.h, self.body.theta);
        let problem = FlowProblem::new(self.fluid.mu, e.lambda, profile, channel, shape, placement)
            .map_err(|e| invalid("inflow", e.to_string()))?;
        let force = RestoringForce::for_problem(&problem, f.gamma, f.k_b, f.k_t)
            .and_then(|r| r.with_theta_coupling(f.c_theta))
            .map_err(|e| invalid("force", e.to_string()))?;
        let mesh = MeshOptions {
            grading: s.grading,
            body_size: s.body_size.unwrap_or(s.size / 3.0),
            ..MeshOptions::with_size(s.size)
        };
        let options = FsiOptions {
            mesh,
            solver: SolverOptions {
                picard_iters: s.picard_iters,
                newton_tol: s.newton_tol,
                max_newton: s.max_newton,
                ..SolverOptions::default()
            },
            tol_h: e.tol_h,
            tol_phi: e.tol_phi,
            ..FsiOptions::default()
        };
        Ok(Scenario {
            config: self.clone(),
            problem,
            force,
            options,
        })
    }
}
