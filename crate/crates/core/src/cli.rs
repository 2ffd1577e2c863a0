//! Command-line front end: TOML run configuration, the `match`, `forward`,
//! `deform-grid` and `check` commands, and the plain-data output files.
//!
//! Every command validates its whole configuration before computing anything.
//! Outputs are written atomically and contain no timestamps, so identical
//! inputs give byte-identical files.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::current_matching::{KernelError, KernelOperator};
use crate::geodesic_flow::{transport_points, Flow, FlowError, FlowSettings, TimeGrid, Trajectory};
use crate::mesh_ops::{MeshConfig, MeshError, MeshField, NormOperator, Vec2};
use crate::shape::{
    format_g17, make_shape, read_curve, read_vectors, write_atomic, write_curve, write_vectors, ParticleCurve,
    ShapeError, ShapeKind,
};
use crate::shooting::{
    advected_edges, conservation_diagnostics, minimize_with, ControlVector, Method, OptimResult, OptimizerSettings,
    Shooter, ShootingError, ShootingProblem, Termination,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

const VELOCITY_MAGIC: &str = "curvematch-velocity";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigIo { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Shooting(#[from] ShootingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("velocity file {path}: {message}")]
    Velocity { path: PathBuf, message: String },
    #[error("cannot create {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Flow(_) => EXIT_NUMERICAL,
            CliError::Shooting(ShootingError::Shape(_) | ShootingError::ControlLength { .. }) => EXIT_CONFIG,
            CliError::Shooting(ShootingError::BadPenalty(_)) => EXIT_CONFIG,
            CliError::Shooting(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// Configuration

/// Full run configuration as read from TOML. Every key is optional.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshSection,
    pub norm: NormSection,
    pub kernel: KernelSection,
    pub time: TimeSection,
    pub source: CurveSpec,
    pub target: CurveSpec,
    pub optimizer: OptimizerSection,
    pub output: OutputSection,
    pub forward: ForwardSection,
    pub grid: GridSection,
    /// Directory that relative paths in the file are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mesh: MeshSection::default(),
            norm: NormSection::default(),
            kernel: KernelSection::default(),
            time: TimeSection::default(),
            source: CurveSpec::Circle {
                radius: 0.8,
                particles: default_particles(),
                center: None,
            },
            target: CurveSpec::Ellipse {
                semi_x: 1.2,
                semi_y: 0.6,
                particles: default_particles(),
                center: None,
            },
            optimizer: OptimizerSection::default(),
            output: OutputSection::default(),
            forward: ForwardSection::default(),
            grid: GridSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    /// Mesh points per axis.
    pub m: usize,
    /// Side of the square periodic domain.
    pub length: f64,
    /// Minimum distance of generated or loaded curves from the domain edge.
    /// Defaults to four velocity length scales.
    pub margin: Option<f64>,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            m: 128,
            length: 2.0 * std::f64::consts::PI,
            margin: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct NormSection {
    pub alpha: f64,
    pub power: u32,
}

impl Default for NormSection {
    fn default() -> Self {
        Self { alpha: 0.4, power: 2 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSection {
    pub alpha: f64,
    pub power: u32,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self { alpha: 0.4, power: 2 }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSection {
    pub steps: usize,
}

impl Default for TimeSection {
    fn default() -> Self {
        Self { steps: 20 }
    }
}

fn default_particles() -> usize {
    420
}

/// A curve, either generated from an analytic shape or read from a CSV file.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    Circle {
        radius: f64,
        #[serde(default = "default_particles")]
        particles: usize,
        center: Option<Vec2>,
    },
    Ellipse {
        semi_x: f64,
        semi_y: f64,
        #[serde(default = "default_particles")]
        particles: usize,
        center: Option<Vec2>,
    },
    RoundedRectangle {
        half_width: f64,
        half_height: f64,
        corner_radius: f64,
        #[serde(default = "default_particles")]
        particles: usize,
        center: Option<Vec2>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// `"ncg"` or `"newton-cg"`.
    pub method: String,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo: f64,
    pub tol_fp: f64,
    pub max_fp_iters: usize,
    /// Enables the penalized objective `sum 2 H dt + f / sigma^2`.
    pub penalty_sigma: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerSettings::default();
        let f = FlowSettings::default();
        Self {
            method: "ncg".into(),
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            armijo: o.armijo,
            tol_fp: f.tol_fp,
            max_fp_iters: f.max_iter,
            penalty_sigma: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Times in `[0, 1]`; each is rounded to the nearest time level.
    pub snapshots: Vec<f64>,
    /// Store per-step velocity fields for `deform-grid`.
    pub velocities: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("curvematch-out"),
            snapshots: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            velocities: true,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardSection {
    /// CSV of initial momenta `px,py`, one row per source particle.
    pub momentum: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Distance between neighbouring grid lines.
    pub spacing: f64,
    /// Sample points per `spacing` along each line.
    pub resolution: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            spacing: 0.25,
            resolution: 8,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigIo {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn mesh_config(&self) -> Result<MeshConfig, CliError> {
        Ok(MeshConfig::square(self.mesh.m, self.mesh.length)?)
    }

    pub fn norm_operator(&self) -> Result<NormOperator, CliError> {
        Ok(NormOperator::new(self.norm.alpha, self.norm.power)?)
    }

    pub fn kernel_operator(&self) -> Result<KernelOperator, CliError> {
        Ok(KernelOperator::new(self.kernel.alpha, self.kernel.power)?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.time.steps).map_err(|_| invalid("time.steps must be at least 1"))
    }

    pub fn margin(&self) -> Result<f64, CliError> {
        let m = self.mesh.margin.unwrap_or(4.0 * self.norm.alpha);
        if !(m.is_finite() && m >= 0.0) {
            return Err(invalid(format!("mesh.margin must be non-negative, got {m}")));
        }
        Ok(m)
    }

    pub fn flow_settings(&self) -> Result<FlowSettings, CliError> {
        let o = &self.optimizer;
        if !(o.tol_fp.is_finite() && o.tol_fp > 0.0) {
            return Err(invalid(format!("optimizer.tol_fp must be positive, got {}", o.tol_fp)));
        }
        if o.max_fp_iters == 0 {
            return Err(invalid("optimizer.max_fp_iters must be at least 1"));
        }
        Ok(FlowSettings {
            tol_fp: o.tol_fp,
            max_iter: o.max_fp_iters,
        })
    }

    pub fn optimizer_settings(&self) -> Result<OptimizerSettings, CliError> {
        let o = &self.optimizer;
        let method = match o.method.as_str() {
            "ncg" => Method::NonlinearCg,
            "newton-cg" => Method::NewtonCg,
            other => {
                return Err(invalid(format!(
                    "optimizer.method must be \"ncg\" or \"newton-cg\", got \"{other}\""
                )))
            }
        };
        if !(o.grad_tol.is_finite() && o.grad_tol >= 0.0) {
            return Err(invalid(format!("optimizer.grad_tol must be non-negative, got {}", o.grad_tol)));
        }
        if !(o.armijo > 0.0 && o.armijo < 1.0) {
            return Err(invalid(format!("optimizer.armijo must lie in (0, 1), got {}", o.armijo)));
        }
        if let Some(s) = o.penalty_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid(format!("optimizer.penalty_sigma must be positive, got {s}")));
            }
        }
        Ok(OptimizerSettings {
            method,
            max_iters: o.max_iters,
            grad_tol: o.grad_tol,
            armijo: o.armijo,
        })
    }

    /// Distinct `(label, level)` pairs for the configured snapshot times.
    pub fn snapshot_levels(&self, steps: usize) -> Result<Vec<(String, usize)>, CliError> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for &t in &self.output.snapshots {
            if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
                return Err(invalid(format!("output.snapshots entries must lie in [0, 1], got {t}")));
            }
            let level = (t * steps as f64).round() as usize;
            let label = format!("{:.2}", level as f64 / steps as f64);
            if !out.iter().any(|(l, _)| *l == label) {
                out.push((label, level));
            }
        }
        Ok(out)
    }

    pub fn curve(&self, spec: &CurveSpec, mesh: &MeshConfig) -> Result<ParticleCurve, CliError> {
        let margin = self.margin()?;
        let mid = [0.5 * mesh.lx(), 0.5 * mesh.ly()];
        let (kind, n_p, center) = match spec {
            CurveSpec::File { path } => {
                let curve = read_curve(&self.resolve(path))?;
                curve.check_margin(mesh, margin)?;
                return Ok(curve);
            }
            &CurveSpec::Circle {
                radius,
                particles,
                center,
            } => (ShapeKind::Circle { radius }, particles, center),
            &CurveSpec::Ellipse {
                semi_x,
                semi_y,
                particles,
                center,
            } => (ShapeKind::Ellipse { semi_x, semi_y }, particles, center),
            &CurveSpec::RoundedRectangle {
                half_width,
                half_height,
                corner_radius,
                particles,
                center,
            } => (
                ShapeKind::RoundedRectangle {
                    half_width,
                    half_height,
                    corner_radius,
                },
                particles,
                center,
            ),
        };
        Ok(make_shape(kind, n_p, center.unwrap_or(mid), mesh, margin)?)
    }

    pub fn momentum_path(&self) -> Option<PathBuf> {
        self.forward.momentum.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }
}

/// Validated inputs shared by `match` and `forward`.
struct Setup {
    mesh: MeshConfig,
    norm: NormOperator,
    grid: TimeGrid,
    flow: FlowSettings,
    source: ParticleCurve,
    snapshots: Vec<(String, usize)>,
}

fn common_setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let mesh = cfg.mesh_config()?;
    let norm = cfg.norm_operator()?;
    let grid = cfg.time_grid()?;
    let flow = cfg.flow_settings()?;
    let snapshots = cfg.snapshot_levels(grid.steps())?;
    let source = cfg.curve(&cfg.source, &mesh)?;
    Ok(Setup {
        mesh,
        norm,
        grid,
        flow,
        source,
        snapshots,
    })
}

// ---------------------------------------------------------------------------
// Output files

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

/// JSON number, or `null` when not finite.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Serialize)]
struct MatchSummary {
    command: &'static str,
    converged: bool,
    termination: &'static str,
    iterations: usize,
    evaluations: usize,
    initial_objective: Option<f64>,
    final_objective: Option<f64>,
    reduction_factor: Option<f64>,
    relabel_drift: Option<f64>,
    tangential_max: Option<f64>,
    hamiltonian_drift: Option<f64>,
    particles: usize,
    target_particles: usize,
    steps: usize,
    mesh_points: usize,
}

#[derive(Debug, Serialize)]
struct ForwardSummary {
    command: &'static str,
    particles: usize,
    steps: usize,
    mesh_points: usize,
    hamiltonian_initial: Option<f64>,
    relabel_drift: Option<f64>,
    tangential_max: Option<f64>,
    hamiltonian_drift: Option<f64>,
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::ZeroGradient => "zero_gradient",
        Termination::GradientTolerance => "gradient_tolerance",
        Termination::MaxIterations => "max_iterations",
        Termination::LineSearchFailed => "line_search_failed",
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_history(path: &Path, result: &OptimResult) -> Result<(), CliError> {
    let mut out = String::from("iter,objective,grad_norm\n");
    for (i, (f, g)) in result
        .objective_history
        .iter()
        .zip(&result.grad_norm_history)
        .enumerate()
    {
        let _ = writeln!(out, "{i},{},{}", format_g17(*f), format_g17(*g));
    }
    Ok(write_atomic(path, out.as_bytes())?)
}

fn write_conservation(path: &Path, traj: &Trajectory, dq0: &[Vec2]) -> Result<(), CliError> {
    let mut out = String::from("step,hamiltonian,relabel_drift,tangential_max\n");
    for n in 0..traj.states.len() {
        let _ = writeln!(
            out,
            "{n},{},{},{}",
            format_g17(traj.hamiltonians[n]),
            format_g17(traj.relabel_drift_at(n)),
            format_g17(traj.tangential_max_at(n, dq0)),
        );
    }
    Ok(write_atomic(path, out.as_bytes())?)
}

/// Curve, momentum and advected tangent snapshots.
fn write_snapshots(dir: &Path, traj: &Trajectory, dq0: &[Vec2], snapshots: &[(String, usize)]) -> Result<(), CliError> {
    for (label, level) in snapshots {
        let state = &traj.states[*level];
        write_vectors(&dir.join(format!("curve_t{label}.csv")), "x,y", &state.q)?;
        write_vectors(&dir.join(format!("momentum_t{label}.csv")), "px,py", &state.p)?;
        write_vectors(
            &dir.join(format!("dQ_t{label}.csv")),
            "dx,dy",
            &advected_edges(traj, *level, dq0),
        )?;
    }
    Ok(())
}

fn velocity_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("velocity").join(format!("u_{step:04}.bin"))
}

/// Serializes one velocity field: a text header line
/// `curvematch-velocity nx ny lx ly dt step steps` followed by little-endian
/// `f64` pairs in node order.
pub fn encode_velocity(field: &MeshField, dt: f64, step: usize, steps: usize) -> Vec<u8> {
    let mesh = field.mesh();
    let header = format!(
        "{VELOCITY_MAGIC} {} {} {} {} {} {step} {steps}\n",
        mesh.nx(),
        mesh.ny(),
        format_g17(mesh.lx()),
        format_g17(mesh.ly()),
        format_g17(dt),
    );
    let mut bytes = Vec::with_capacity(header.len() + 16 * mesh.num_nodes());
    bytes.extend_from_slice(header.as_bytes());
    for v in field.values() {
        bytes.extend_from_slice(&v[0].to_le_bytes());
        bytes.extend_from_slice(&v[1].to_le_bytes());
    }
    bytes
}

/// Header fields of one stored velocity step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityHeader {
    pub mesh: MeshConfig,
    pub dt: f64,
    pub step: usize,
    pub steps: usize,
}

pub fn decode_velocity(bytes: &[u8], path: &Path) -> Result<(VelocityHeader, MeshField), CliError> {
    let bad = |message: String| CliError::Velocity {
        path: path.to_path_buf(),
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != VELOCITY_MAGIC {
        return Err(bad(format!("unrecognized header `{header}`")));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer `{s}` in header")));
    let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}` in header")));
    let mesh = MeshConfig::new(int(fields[1])?, int(fields[2])?, float(fields[3])?, float(fields[4])?)
        .map_err(|e| bad(e.to_string()))?;
    let head = VelocityHeader {
        mesh,
        dt: float(fields[5])?,
        step: int(fields[6])?,
        steps: int(fields[7])?,
    };
    let body = &bytes[nl + 1..];
    if body.len() != 16 * mesh.num_nodes() {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            16 * mesh.num_nodes(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(16)
        .map(|c| {
            let x = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
            let y = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
            [x, y]
        })
        .collect();
    let field = MeshField::from_values(&mesh, data).expect("length checked");
    Ok((head, field))
}

fn write_velocities(dir: &Path, traj: &Trajectory) -> Result<(), CliError> {
    create_dir(&dir.join("velocity"))?;
    let steps = traj.steps();
    for (n, u) in traj.velocities.iter().enumerate() {
        write_atomic(&velocity_path(dir, n), &encode_velocity(u, traj.dt, n, steps))?;
    }
    Ok(())
}

/// Reads the velocity fields stored under `dir` by `match` or `forward`.
pub fn read_velocities(dir: &Path) -> Result<(Vec<MeshField>, f64), CliError> {
    let read = |n: usize| -> Result<(VelocityHeader, MeshField), CliError> {
        let path = velocity_path(dir, n);
        let bytes = std::fs::read(&path).map_err(|e| CliError::Velocity {
            path: path.clone(),
            message: e.to_string(),
        })?;
        decode_velocity(&bytes, &path)
    };
    let (first, u0) = read(0)?;
    let mut fields = vec![u0];
    for n in 1..first.steps {
        let (head, u) = read(n)?;
        if head.mesh != first.mesh || head.dt != first.dt || head.step != n || head.steps != first.steps {
            return Err(CliError::Velocity {
                path: velocity_path(dir, n),
                message: "header does not match the first step".into(),
            });
        }
        fields.push(u);
    }
    Ok((fields, first.dt))
}

fn write_trajectory_outputs(
    dir: &Path,
    cfg: &RunConfig,
    traj: &Trajectory,
    dq0: &[Vec2],
    snapshots: &[(String, usize)],
) -> Result<(), CliError> {
    write_snapshots(dir, traj, dq0, snapshots)?;
    write_conservation(&dir.join("conservation.csv"), traj, dq0)?;
    if cfg.output.velocities {
        write_velocities(dir, traj)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

/// Optimizes the initial normal momenta and writes all outputs. Returns
/// [`EXIT_NOT_CONVERGED`] (with outputs written) when the optimizer stops
/// before reaching its gradient tolerance.
pub fn cmd_match(cfg: &RunConfig, verbose: bool) -> Result<i32, CliError> {
    let setup = common_setup(cfg)?;
    let kernel = cfg.kernel_operator()?;
    let settings = cfg.optimizer_settings()?;
    let target = cfg.curve(&cfg.target, &setup.mesh)?;
    let dir = cfg.output_dir();
    let dq0 = setup.source.tangent_vectors();

    let problem = ShootingProblem {
        source: setup.source.clone(),
        target: target.clone(),
        mesh: setup.mesh,
        norm: setup.norm,
        kernel,
        grid: setup.grid,
        flow: setup.flow,
        penalty_sigma: cfg.optimizer.penalty_sigma,
    };
    let shooter = Shooter::new(problem)?;
    let n = shooter.num_controls();
    let result = minimize_with(&shooter, &settings, ControlVector::zeros(n), |info| {
        if verbose {
            eprintln!(
                "iter {:4}  objective {:.6e}  |g| {:.3e}  step {:.3e}",
                info.iteration, info.objective, info.grad_norm, info.step
            );
        }
    })?;

    create_dir(&dir)?;
    write_history(&dir.join("history.csv"), &result)?;
    write_curve(&target, &dir.join("target.csv"))?;
    write_trajectory_outputs(&dir, cfg, &result.trajectory, &dq0, &setup.snapshots)?;
    let summary = MatchSummary {
        command: "match",
        converged: result.converged(),
        termination: termination_name(result.termination),
        iterations: result.iterations,
        evaluations: result.evaluations,
        initial_objective: finite(result.initial_objective()),
        final_objective: finite(result.final_objective()),
        reduction_factor: finite(result.reduction_factor()),
        relabel_drift: finite(result.relabel_drift),
        tangential_max: finite(result.tangential_max),
        hamiltonian_drift: finite(result.hamiltonian_drift),
        particles: setup.source.len(),
        target_particles: target.len(),
        steps: setup.grid.steps(),
        mesh_points: setup.mesh.nx(),
    };
    write_json(&dir.join("summary.json"), &summary)?;

    println!(
        "objective {:.6e} -> {:.6e} (reduction {:.1}x) after {} iterations: {}",
        result.initial_objective(),
        result.final_objective(),
        result.reduction_factor(),
        result.iterations,
        termination_name(result.termination),
    );
    println!("outputs written to {}", dir.display());
    Ok(if result.converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

/// Integrates the geodesic from the configured source curve and a momentum
/// file.
pub fn cmd_forward(cfg: &RunConfig, momentum: Option<&Path>) -> Result<i32, CliError> {
    let setup = common_setup(cfg)?;
    let path = momentum
        .map(Path::to_path_buf)
        .or_else(|| cfg.momentum_path())
        .ok_or_else(|| invalid("forward needs a momentum file (--momentum or forward.momentum)"))?;
    let p0 = read_vectors(&path)?;
    if p0.len() != setup.source.len() {
        return Err(invalid(format!(
            "{} has {} momenta but the source curve has {} particles",
            path.display(),
            p0.len(),
            setup.source.len()
        )));
    }
    let dir = cfg.output_dir();
    let dq0 = setup.source.tangent_vectors();
    let flow = Flow::new(&setup.mesh, setup.norm, setup.flow);
    let traj = flow.integrate(setup.source.points(), &p0, setup.grid)?;

    create_dir(&dir)?;
    write_trajectory_outputs(&dir, cfg, &traj, &dq0, &setup.snapshots)?;
    let (relabel, tangential, h_drift) = conservation_diagnostics(&traj, &dq0);
    let summary = ForwardSummary {
        command: "forward",
        particles: setup.source.len(),
        steps: setup.grid.steps(),
        mesh_points: setup.mesh.nx(),
        hamiltonian_initial: finite(traj.hamiltonians[0]),
        relabel_drift: finite(relabel),
        tangential_max: finite(tangential),
        hamiltonian_drift: finite(h_drift),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "integrated {} steps: relative J^T P drift {:.3e}, Hamiltonian drift {:.3e}",
        traj.steps(),
        relabel,
        h_drift
    );
    println!("outputs written to {}", dir.display());
    Ok(EXIT_OK)
}

/// Equispaced grid lines: vertical lines first, then horizontal ones. Each
/// point carries the index of its line.
pub fn grid_lines(mesh: &MeshConfig, spacing: f64, resolution: usize) -> Result<Vec<(usize, Vec2)>, CliError> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(invalid(format!("grid spacing must be positive, got {spacing}")));
    }
    if spacing > mesh.lx().min(mesh.ly()) {
        return Err(invalid(format!(
            "grid spacing {spacing} exceeds the domain size {} x {}",
            mesh.lx(),
            mesh.ly()
        )));
    }
    if resolution == 0 {
        return Err(invalid("grid resolution must be at least 1"));
    }
    let h = spacing / resolution as f64;
    // Counts with a small tolerance so exact divisors of the domain do not
    // gain a duplicate line at the far edge.
    let count = |len: f64, step: f64| ((len / step) * (1.0 - 1e-12)).ceil() as usize;
    let mut out = Vec::new();
    let mut line = 0;
    for i in 0..count(mesh.lx(), spacing) {
        let x = i as f64 * spacing;
        for k in 0..count(mesh.ly(), h) {
            out.push((line, [x, k as f64 * h]));
        }
        line += 1;
    }
    for j in 0..count(mesh.ly(), spacing) {
        let y = j as f64 * spacing;
        for k in 0..count(mesh.lx(), h) {
            out.push((line, [k as f64 * h, y]));
        }
        line += 1;
    }
    Ok(out)
}

fn write_grid(path: &Path, lines: &[usize], points: &[Vec2]) -> Result<(), CliError> {
    let mut out = String::from("line,x,y\n");
    for (l, p) in lines.iter().zip(points) {
        let _ = writeln!(out, "{l},{},{}", format_g17(p[0]), format_g17(p[1]));
    }
    Ok(write_atomic(path, out.as_bytes())?)
}

/// Transports equispaced grid lines through a stored trajectory.
pub fn cmd_deform_grid(trajectory: &Path, out: &Path, spacing: f64, resolution: usize) -> Result<i32, CliError> {
    let (velocities, dt) = read_velocities(trajectory)?;
    let mesh = *velocities[0].mesh();
    let seeds = grid_lines(&mesh, spacing, resolution)?;
    let (ids, points): (Vec<usize>, Vec<Vec2>) = seeds.into_iter().unzip();
    let levels = transport_points(&points, &velocities, dt);
    create_dir(out)?;
    write_grid(&out.join("gridlines_initial.csv"), &ids, &levels[0])?;
    write_grid(&out.join("gridlines_final.csv"), &ids, levels.last().expect("N + 1 levels"))?;
    println!(
        "transported {} grid points over {} steps into {}",
        points.len(),
        velocities.len(),
        out.display()
    );
    Ok(EXIT_OK)
}

/// Runs the invariant suite on a small problem, printing one line per check.
/// Returns true when every check passes.
pub fn run_checks(out: &mut impl std::io::Write) -> bool {
    let results = checks::all();
    let mut ok = true;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag} {:<28} {:.3e} (limit {:.1e})", r.name, r.value, r.limit);
        ok &= r.passed;
    }
    ok
}

/// Invariant checks on a 16x16 problem with a dozen particles.
mod checks {
    use std::f64::consts::PI;

    use crate::current_matching::KernelOperator;
    use crate::geodesic_flow::{Flow, FlowSettings, TimeGrid};
    use crate::mesh_ops::{
        bspline_weight, bspline_weight_deriv, interp_to_points, spread_to_mesh, MeshConfig, MeshField, NormOperator,
        Spectral, Vec2,
    };
    use crate::shape::{make_shape, ShapeKind};
    use crate::shooting::{conservation_diagnostics, Shooter, ShootingProblem};

    pub struct CheckResult {
        pub name: &'static str,
        pub value: f64,
        pub limit: f64,
        pub passed: bool,
    }

    fn check(name: &'static str, value: f64, limit: f64) -> CheckResult {
        CheckResult {
            name,
            value,
            limit,
            passed: value.is_finite() && value <= limit,
        }
    }

    /// Deterministic values in `[0, 1)`.
    fn jitter(k: usize) -> f64 {
        ((k as f64 * 12.9898 + 1.0).sin() * 43758.5453).rem_euclid(1.0)
    }

    pub fn all() -> Vec<CheckResult> {
        let l = 2.0 * PI;
        let mesh = MeshConfig::square(16, l).expect("valid mesh");
        let spectral = Spectral::new(&mesh);
        let pts: Vec<Vec2> = (0..10).map(|k| [l * jitter(2 * k), l * jitter(2 * k + 1)]).collect();
        let mom: Vec<Vec2> = (0..10).map(|k| [jitter(40 + k) - 0.5, jitter(60 + k) - 0.5]).collect();
        let w = MeshField::from_fn(&mesh, |i, j| [jitter(100 + i + 16 * j) - 0.5, jitter(400 + i + 16 * j) - 0.5]);
        let mut out = Vec::new();

        let lhs = spread_to_mesh(&mom, &pts, &mesh).dot(&w);
        let rhs: f64 = interp_to_points(&w, &pts)
            .iter()
            .zip(&mom)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
            .sum();
        out.push(check("transfer adjointness", (lhs - rhs).abs() / lhs.abs().max(rhs.abs()), 1e-12));

        let mut unity = 0.0f64;
        let mut deriv = 0.0f64;
        for k in 0..100 {
            let x = 4.0 * jitter(700 + k);
            let r: Vec<f64> = (0..4).map(|a| x.fract() + 1.0 - a as f64).collect();
            unity = unity.max((r.iter().map(|&r| bspline_weight(r)).sum::<f64>() - 1.0).abs());
            deriv = deriv.max(r.iter().map(|&r| bspline_weight_deriv(r)).sum::<f64>().abs());
        }
        out.push(check("partition of unity", unity, 1e-13));
        out.push(check("weight derivative sum", deriv, 1e-12));

        let norm = NormOperator::new(0.4, 2).expect("valid operator");
        let back = spectral.invert_metric(&spectral.apply_metric(&w, &norm), &norm);
        let mut diff = back.clone();
        diff.axpy(-1.0, &w);
        out.push(check("metric roundtrip", diff.max_abs() / w.max_abs(), 1e-12));

        let source = make_shape(ShapeKind::Circle { radius: 0.8 }, 12, [PI, PI], &mesh, 1.6).expect("fits");
        let target =
            make_shape(ShapeKind::Ellipse { semi_x: 1.1, semi_y: 0.6 }, 12, [PI, PI], &mesh, 1.6).expect("fits");
        let problem = ShootingProblem {
            source: source.clone(),
            target,
            mesh,
            norm,
            kernel: KernelOperator::default(),
            grid: TimeGrid::new(4).expect("steps"),
            flow: FlowSettings::default(),
            penalty_sigma: None,
        };
        let shooter = Shooter::new(problem).expect("valid problem");
        let control: Vec<f64> = (0..12).map(|k| 0.3 * (jitter(900 + k) - 0.5)).collect();

        let flow = Flow::new(&mesh, norm, FlowSettings::default());
        let p0 = shooter.initial_momenta(&control).expect("length");
        let (relabel, tangential) = match flow.integrate(source.points(), &p0, TimeGrid::new(8).expect("steps")) {
            Ok(traj) => {
                let (r, t, _) = conservation_diagnostics(&traj, &source.tangent_vectors());
                (r, t)
            }
            Err(_) => (f64::INFINITY, f64::INFINITY),
        };
        out.push(check("J^T P conservation", relabel, 1e-10));
        out.push(check("tangential momentum", tangential, 1e-10));

        let grad_err = match shooter.gradient(&control) {
            Ok(eval) => {
                let gmax = eval.gradient.iter().fold(0.0f64, |a, g| a.max(g.abs()));
                let eps = 1e-6;
                let mut worst = 0.0f64;
                for i in [0, 5, 11] {
                    let mut plus = control.clone();
                    let mut minus = control.clone();
                    plus[i] += eps;
                    minus[i] -= eps;
                    let fd = match (shooter.objective(&plus), shooter.objective(&minus)) {
                        (Ok((a, _)), Ok((b, _))) => (a - b) / (2.0 * eps),
                        _ => f64::INFINITY,
                    };
                    worst = worst.max((fd - eval.gradient[i]).abs() / gmax);
                }
                worst
            }
            Err(_) => f64::INFINITY,
        };
        out.push(check("adjoint gradient", grad_err, 1e-6));
        out
    }
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "curvematch", version, about = "Diffeomorphic matching of closed planar curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize initial momenta carrying the source curve onto the target.
    Match {
        /// TOML run configuration; built-in defaults when omitted.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory, overriding `output.dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print one line per optimizer iteration to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Integrate the geodesic from given initial momenta.
    Forward {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// CSV of initial momenta, overriding `forward.momentum`.
        #[arg(short, long)]
        momentum: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Transport equispaced grid lines through a stored trajectory.
    DeformGrid {
        /// Directory written by `match` or `forward`.
        #[arg(short, long)]
        trajectory: PathBuf,
        /// Optional config supplying `grid.spacing` and `grid.resolution`.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        spacing: Option<f64>,
        #[arg(short, long)]
        resolution: Option<usize>,
        /// Output directory; defaults to the trajectory directory.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant checks on a small problem.
    Check,
}

fn load_config(path: Option<&Path>, out: Option<&Path>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = out {
        cfg.output.dir = std::path::absolute(o).map_err(|source| CliError::Output {
            path: o.to_path_buf(),
            source,
        })?;
    }
    Ok(cfg)
}

pub fn execute(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Match { config, out, verbose } => {
            let cfg = load_config(config.as_deref(), out.as_deref())?;
            cmd_match(&cfg, verbose)
        }
        Command::Forward { config, momentum, out } => {
            let cfg = load_config(config.as_deref(), out.as_deref())?;
            cmd_forward(&cfg, momentum.as_deref())
        }
        Command::DeformGrid {
            trajectory,
            config,
            spacing,
            resolution,
            out,
        } => {
            let grid = load_config(config.as_deref(), None)?.grid;
            let out = out.unwrap_or_else(|| trajectory.clone());
            cmd_deform_grid(
                &trajectory,
                &out,
                spacing.unwrap_or(grid.spacing),
                resolution.unwrap_or(grid.resolution),
            )
        }
        Command::Check => {
            let ok = run_checks(&mut std::io::stdout());
            Ok(if ok { EXIT_OK } else { EXIT_NUMERICAL })
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
