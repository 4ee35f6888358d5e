//! Command line driver: configuration parsing, runs and file output.
//!
//! Every subcommand reads one JSON document, computes all outputs in memory
//! and only then writes them (each through a temporary file and a rename),
//! so a failing run leaves nothing behind. The summary JSON goes to stdout
//! and to `summary.json` next to the CSV files it references.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    classify, error_bounds, format_table, Classification, ErrorBounds, ErrorBudget, GripperDims, TargetDims,
};
use crate::error::Error;
use crate::fem::{
    finger_pair, objectives, optimize_control, ArcSpec, Cable, ControlOptions, FemModel, FingerMesh,
    GraspObjectiveConfig,
};
use crate::geometry::{boxplus, exp_so3, Pose, Twist};
use crate::registration::{solve_tls, CorrespondenceSet, DEFAULT_C_BAR};
use crate::sim::{run_scenario, AxisTriple, GraspEvent, Scenario, ScenarioTrace, SensingModel};
use crate::smoother::{FixedLagSmoother, SmootherConfig};
use crate::trajectory::{plan_min_snap, BoundaryConditions};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "softgrasp",
    version,
    about = "Aerial grasping planner, estimator, simulator and gripper model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration document.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Minimum-snap trajectory through the grasp point.
    Plan(Common),
    /// Closed-loop grasp scenarios.
    Simulate(Common),
    /// Fixed-lag smoothing of target pose measurements.
    Smooth(Common),
    /// Robust registration of point correspondences.
    Register {
        #[command(flatten)]
        common: Common,
        /// Inlier threshold, m.
        #[arg(long)]
        c_bar: Option<f64>,
    },
    /// Gripper equilibrium and control optimization.
    Fem(Common),
    /// Geometric error bounds and budget verdicts.
    Bounds(Common),
    /// Simulate a scenario and classify its grasp error budget.
    Report(Common),
}

/// Files and summary produced by one run.
#[derive(Debug, Default)]
pub struct Outputs {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: Value,
}

/// Parses arguments, runs, writes outputs and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            // Outputs are already on disk; a closed stdout is not a failure.
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout(), "{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a command and writes its outputs; returns the summary.
pub fn run(cmd: &Command) -> CliResult<Value> {
    let start = Instant::now();
    let (name, common) = match cmd {
        Command::Plan(c) => ("plan", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Smooth(c) => ("smooth", c),
        Command::Register { common, .. } => ("register", common),
        Command::Fem(c) => ("fem", c),
        Command::Bounds(c) => ("bounds", c),
        Command::Report(c) => ("report", c),
    };
    let seed = common.seed;
    let mut out = match cmd {
        Command::Plan(c) => plan(&read_config(&c.config)?)?,
        Command::Simulate(c) => simulate(&read_config(&c.config)?, seed)?,
        Command::Smooth(c) => smooth(&read_config(&c.config)?, seed)?,
        Command::Register { common, c_bar } => register(&read_config(&common.config)?, seed, *c_bar)?,
        Command::Fem(c) => fem(&read_config(&c.config)?)?,
        Command::Bounds(c) => bounds(&read_config(&c.config)?)?,
        Command::Report(c) => report(&read_config(&c.config)?, seed)?,
    };
    let files: Vec<Value> = out.files.iter().map(|(n, _)| Value::from(n.as_str())).collect();
    if let Value::Object(map) = &mut out.summary {
        map.insert("command".into(), name.into());
        map.insert("files".into(), Value::Array(files));
        map.insert("wall_time_s".into(), start.elapsed().as_secs_f64().into());
    }
    let summary_bytes = serde_json::to_vec_pretty(&out.summary).expect("summary serializes");
    out.files.push(("summary.json".into(), summary_bytes));
    write_outputs(&common.out, &out.files)?;
    Ok(out.summary)
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("cannot write {}: {e}", path.display()))
}

/// Writes each file through a temporary sibling and a rename.
pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, bytes) in files {
        let target = dir.join(name);
        let tmp = dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| io_err(&target, e))?;
    }
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        debug_assert_eq!(r.len(), header.len());
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn vec3(v: &Vector3<f64>) -> [String; 3] {
    [num(v.x), num(v.y), num(v.z)]
}

fn json_vec(v: &Vector3<f64>) -> Value {
    json!([v.x, v.y, v.z])
}

fn safe_name(name: &str) -> CliResult<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) || name.starts_with('.')
    {
        return Err(CliError::Validation(format!(
            "scenario name `{name}` must be non-empty [A-Za-z0-9_.-]"
        )));
    }
    Ok(name.to_string())
}

// ---------------------------------------------------------------- plan

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default)]
    pub boundary_conditions: Option<BoundaryConditions>,
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default = "default_plan_rate")]
    pub sample_rate_hz: f64,
}

fn default_plan_rate() -> f64 {
    100.0
}

pub const TRAJECTORY_COLUMNS: [&str; 16] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "ax", "ay", "az", "jx", "jy", "jz", "sx", "sy", "sz",
];

pub fn plan(cfg: &PlanConfig) -> CliResult<Outputs> {
    let bc = match (&cfg.boundary_conditions, &cfg.scenario) {
        (Some(bc), None) => *bc,
        (None, Some(sc)) => {
            sc.validate()?;
            sc.boundary_conditions()
        }
        _ => {
            return Err(CliError::Validation(
                "exactly one of `boundary_conditions` or `scenario` is required".into(),
            ))
        }
    };
    if !(cfg.sample_rate_hz > 0.0 && cfg.sample_rate_hz <= 10_000.0) {
        return Err(Error::config("sample_rate_hz", "must lie in (0, 10000]").into());
    }
    let traj = plan_min_snap(&bc)?;
    let n = (bc.tf * cfg.sample_rate_hz).round() as usize;
    let rows = (0..=n).map(|k| {
        let t = k as f64 / cfg.sample_rate_hz;
        let mut r = vec![num(t)];
        for v in [
            traj.position(t),
            traj.velocity(t),
            traj.acceleration(t),
            traj.jerk(t),
            traj.snap(t),
        ] {
            r.extend(vec3(&v));
        }
        r
    });
    let residuals = traj.constraint_residuals(&bc);
    let max_res = traj.max_constraint_residual(&bc);
    let summary = json!({
        "tg": bc.tg,
        "tf": bc.tf,
        "snap_cost": traj.snap_cost(),
        "constraint_residuals": residuals,
        "max_constraint_residual": max_res,
        "residuals_below_1e-7": max_res < 1e-7,
        "coefficients": traj.coeffs.iter().map(|c| c.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
        "trajectory_file": "trajectory.csv",
    });
    Ok(Outputs {
        files: vec![("trajectory.csv".into(), csv_bytes(&TRAJECTORY_COLUMNS, rows))],
        summary,
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedSweep {
    pub speeds: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub speed_sweep: Option<SpeedSweep>,
}

pub const TRACE_COLUMNS: [&str; 50] = [
    "t",
    "sp_x",
    "sp_y",
    "sp_z",
    "sp_vx",
    "sp_vy",
    "sp_vz",
    "sp_ax",
    "sp_ay",
    "sp_az",
    "sp_yaw",
    "x",
    "y",
    "z",
    "vx",
    "vy",
    "vz",
    "r00",
    "r01",
    "r02",
    "r10",
    "r11",
    "r12",
    "r20",
    "r21",
    "r22",
    "wx",
    "wy",
    "wz",
    "ep_x",
    "ep_y",
    "ep_z",
    "ev_x",
    "ev_y",
    "ev_z",
    "theta_x",
    "theta_y",
    "theta_z",
    "thrust",
    "drift_x",
    "drift_y",
    "drift_z",
    "target_x",
    "target_y",
    "target_z",
    "target_est_x",
    "target_est_y",
    "target_est_z",
    "grasped",
    "event",
];

pub fn trace_csv(trace: &ScenarioTrace) -> Vec<u8> {
    let rows = trace.samples.iter().map(|s| {
        let mut r = vec![num(s.t)];
        r.extend(vec3(&s.setpoint.position));
        r.extend(vec3(&s.setpoint.velocity));
        r.extend(vec3(&s.setpoint.acceleration));
        r.push(num(s.setpoint.yaw));
        r.extend(vec3(&s.state.position));
        r.extend(vec3(&s.state.velocity));
        let m = s.state.rotation.matrix();
        for i in 0..3 {
            for j in 0..3 {
                r.push(num(m[(i, j)]));
            }
        }
        r.extend(vec3(&s.state.body_rate));
        r.extend(vec3(&s.e_p));
        r.extend(vec3(&s.e_v));
        r.extend(vec3(&s.theta_hat));
        r.push(num(s.thrust));
        r.extend(vec3(&s.drift));
        r.extend(vec3(&s.target_true));
        r.extend(vec3(&s.target_estimate));
        r.push(if s.grasped { "1".into() } else { "0".into() });
        r.push(s.event.clone().unwrap_or_default());
        r
    });
    csv_bytes(&TRACE_COLUMNS, rows)
}

pub const GRASP_COLUMNS: [&str; 37] = [
    "t",
    "plane_offset",
    "speed",
    "distance_travelled",
    "tracking_long",
    "tracking_lat",
    "tracking_vert",
    "velocity_long",
    "velocity_lat",
    "velocity_vert",
    "pose_long",
    "pose_lat",
    "pose_vert",
    "vio_long",
    "vio_lat",
    "vio_vert",
    "true_long",
    "true_lat",
    "true_vert",
    "est_x",
    "est_y",
    "est_z",
    "true_x",
    "true_y",
    "true_z",
    "grasp_est_x",
    "grasp_est_y",
    "grasp_est_z",
    "grasp_true_x",
    "grasp_true_y",
    "grasp_true_z",
    "axis_long_x",
    "axis_long_y",
    "axis_long_z",
    "axis_lat_x",
    "axis_lat_y",
    "axis_lat_z",
];

pub fn grasp_csv(g: &GraspEvent) -> Vec<u8> {
    let mut r = vec![num(g.t), num(g.plane_offset), num(g.speed), num(g.distance_travelled)];
    for a in [
        &g.tracking_error,
        &g.velocity_error,
        &g.pose_estimate_error,
        &g.vio_drift,
        &g.true_error,
    ] {
        r.extend(a.as_array().map(num));
    }
    for v in [
        &g.estimated_position,
        &g.true_position,
        &g.estimated_grasp_point,
        &g.true_grasp_point,
        &g.axes.longitudinal,
        &g.axes.lateral,
    ] {
        r.extend(vec3(v));
    }
    csv_bytes(&GRASP_COLUMNS, [r])
}

fn rmse(samples: &[&Vector3<f64>]) -> [f64; 3] {
    if samples.is_empty() {
        return [0.0; 3];
    }
    let mut acc = [0.0; 3];
    for v in samples {
        for i in 0..3 {
            acc[i] += v[i] * v[i];
        }
    }
    acc.map(|a| (a / samples.len() as f64).sqrt())
}

/// Summary metrics of a trace, all recomputable from its CSV files.
pub fn trace_summary(trace: &ScenarioTrace, seed: u64, trace_file: &str, grasp_file: Option<&str>) -> Value {
    let pre: Vec<_> = trace.samples.iter().filter(|s| !s.grasped).map(|s| &s.e_p).collect();
    let post: Vec<_> = trace.samples.iter().filter(|s| s.grasped).map(|s| &s.e_p).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in &trace.samples {
        for i in 0..3 {
            lo[i] = lo[i].min(s.theta_hat[i]);
            hi[i] = hi[i].max(s.theta_hat[i]);
        }
    }
    json!({
        "name": trace.name,
        "seed": seed,
        "trace_file": trace_file,
        "grasp_file": grasp_file,
        "samples": trace.samples.len(),
        "dt": trace.dt,
        "grasp": trace.grasp.as_ref().map(|g| json!({
            "t": g.t,
            "speed": g.speed,
            "plane_offset": g.plane_offset,
            "tracking_error": g.tracking_error,
            "velocity_error": g.velocity_error,
            "true_error": g.true_error,
        })),
        "rmse_e_p_pre_grasp": (!pre.is_empty()).then(|| rmse(&pre)),
        "rmse_e_p_post_grasp": (!post.is_empty()).then(|| rmse(&post)),
        "theta_hat_min": lo,
        "theta_hat_max": hi,
    })
}

fn scenario_list(cfg: &SimulateConfig, seed: Option<u64>) -> CliResult<Vec<Scenario>> {
    let mut list = cfg.scenarios.clone();
    if let Some(sw) = &cfg.speed_sweep {
        if sw.speeds.is_empty() {
            return Err(Error::config("speed_sweep.speeds", "must not be empty").into());
        }
        for &v in &sw.speeds {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("speed_sweep.speeds", format!("{v} is not a positive speed")).into());
            }
            list.push(Scenario::static_grasp(v, sw.seed));
        }
    }
    if list.is_empty() {
        return Err(CliError::Validation(
            "no scenarios: give `scenarios` or `speed_sweep`".into(),
        ));
    }
    if let Some(s) = seed {
        for sc in &mut list {
            sc.seed = s;
        }
    }
    let mut names: Vec<&str> = list.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::config("scenarios.name", format!("duplicate name `{}`", w[0])).into());
    }
    for sc in &list {
        safe_name(&sc.name)?;
        sc.validate()?;
    }
    Ok(list)
}

pub fn simulate(cfg: &SimulateConfig, seed: Option<u64>) -> CliResult<Outputs> {
    let list = scenario_list(cfg, seed)?;
    let mut out = Outputs::default();
    let mut runs = Vec::new();
    for sc in &list {
        let trace = run_scenario(sc)?;
        let trace_file = format!("{}_trace.csv", sc.name);
        out.files.push((trace_file.clone(), trace_csv(&trace)));
        let grasp_file = trace.grasp.as_ref().map(|g| {
            let f = format!("{}_grasp.csv", sc.name);
            out.files.push((f.clone(), grasp_csv(g)));
            f
        });
        runs.push(trace_summary(&trace, sc.seed, &trace_file, grasp_file.as_deref()));
    }
    out.summary = json!({ "scenarios": runs });
    Ok(out)
}

// ---------------------------------------------------------------- smooth

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StampedPose {
    pub stamp: f64,
    pub pose: Pose,
}

/// Target moving with a constant body twist, observed with Gaussian noise.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTarget {
    pub count: usize,
    #[serde(default)]
    pub start: Pose,
    pub linear_velocity: Vector3<f64>,
    #[serde(default)]
    pub angular_velocity: Vector3<f64>,
    pub position_noise_std: f64,
    #[serde(default)]
    pub rotation_noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothConfig {
    #[serde(default)]
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub measurements: Vec<StampedPose>,
    #[serde(default)]
    pub synthetic: Option<SyntheticTarget>,
}

/// Truth and noisy measurements of a synthetic target.
pub fn synthetic_measurements(s: &SyntheticTarget, dt: f64, seed: u64) -> CliResult<(Vec<Pose>, Vec<StampedPose>)> {
    if s.count == 0 {
        return Err(Error::config("synthetic.count", "must be positive").into());
    }
    if !(s.position_noise_std >= 0.0 && s.rotation_noise_std >= 0.0) {
        return Err(Error::config("synthetic.position_noise_std", "noise must be non-negative").into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pn = Normal::new(0.0, s.position_noise_std)
        .map_err(|e| Error::config("synthetic.position_noise_std", e.to_string()))?;
    let rn = Normal::new(0.0, s.rotation_noise_std)
        .map_err(|e| Error::config("synthetic.rotation_noise_std", e.to_string()))?;
    let twist = Twist::new(s.linear_velocity, s.angular_velocity);
    let mut truth = Vec::with_capacity(s.count);
    let mut meas = Vec::with_capacity(s.count);
    let mut pose = s.start;
    for k in 0..s.count {
        if k > 0 {
            pose = boxplus(&pose, &twist, dt);
        }
        let dp = Vector3::from_fn(|_, _| pn.sample(&mut rng));
        let dr = Vector3::from_fn(|_, _| rn.sample(&mut rng));
        truth.push(pose);
        meas.push(StampedPose {
            stamp: k as f64 * dt,
            pose: Pose::new(pose.rotation * exp_so3(&dr), pose.translation + dp),
        });
    }
    Ok((truth, meas))
}

pub const TRACK_COLUMNS: [&str; 23] = [
    "stamp",
    "meas_x",
    "meas_y",
    "meas_z",
    "x",
    "y",
    "z",
    "r00",
    "r01",
    "r02",
    "r10",
    "r11",
    "r12",
    "r20",
    "r21",
    "r22",
    "vx",
    "vy",
    "vz",
    "wx",
    "wy",
    "wz",
    "iterations",
];

pub fn smooth(cfg: &SmoothConfig, seed: Option<u64>) -> CliResult<Outputs> {
    let mut sm = FixedLagSmoother::new(cfg.smoother.clone())?;
    let (truth, measurements) = match (&cfg.synthetic, cfg.measurements.is_empty()) {
        (Some(s), true) => {
            let (t, m) = synthetic_measurements(s, cfg.smoother.dt, seed.unwrap_or(s.seed))?;
            (Some(t), m)
        }
        (None, false) => (None, cfg.measurements.clone()),
        _ => {
            return Err(CliError::Validation(
                "exactly one of `measurements` or `synthetic` is required".into(),
            ))
        }
    };
    let mut rows = Vec::with_capacity(measurements.len());
    let mut last = None;
    for m in &measurements {
        sm.push(m.pose, m.stamp)?;
        let track = sm.solve()?;
        let (pose, twist) = sm.latest()?;
        let mut r = vec![num(m.stamp)];
        r.extend(vec3(&m.pose.translation));
        r.extend(vec3(&pose.translation));
        let rm = pose.rotation.matrix();
        for i in 0..3 {
            for j in 0..3 {
                r.push(num(rm[(i, j)]));
            }
        }
        r.extend(vec3(&twist.linear));
        r.extend(vec3(&twist.angular));
        r.push(track.iterations.to_string());
        rows.push(r);
        last = Some(track);
    }
    let track = last.expect("at least one measurement");
    let mut files = vec![("track.csv".to_string(), csv_bytes(&TRACK_COLUMNS, rows))];
    let mut summary = json!({
        "measurements": measurements.len(),
        "final_cost": track.cost,
        "final_iterations": track.iterations,
        "converged": track.converged,
        "track_file": "track.csv",
    });
    if let (Some(truth), Some(s)) = (truth, &cfg.synthetic) {
        let rows = truth.iter().zip(&measurements).map(|(p, m)| {
            let mut r = vec![num(m.stamp)];
            r.extend(vec3(&p.translation));
            r.extend(vec3(&s.linear_velocity));
            r
        });
        files.push((
            "truth.csv".into(),
            csv_bytes(&["stamp", "x", "y", "z", "vx", "vy", "vz"], rows),
        ));
        summary["truth_file"] = "truth.csv".into();
    }
    Ok(Outputs { files, summary })
}

// ---------------------------------------------------------------- register

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterConfig {
    pub model_points: Vec<Vector3<f64>>,
    pub observed_points: Vec<Vector3<f64>>,
    #[serde(default = "default_c_bar")]
    pub c_bar: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_c_bar() -> f64 {
    DEFAULT_C_BAR
}

pub fn register(cfg: &RegisterConfig, seed: Option<u64>, c_bar: Option<f64>) -> CliResult<Outputs> {
    let c_bar = c_bar.unwrap_or(cfg.c_bar);
    if !(c_bar > 0.0 && c_bar.is_finite()) {
        return Err(Error::config("c_bar", "must be positive").into());
    }
    let pairs = CorrespondenceSet::new(cfg.model_points.clone(), cfg.observed_points.clone())?;
    let seed = seed.unwrap_or(cfg.seed);
    let r = solve_tls(&pairs, c_bar, seed)?;
    let rows = r
        .residuals
        .iter()
        .zip(&r.inlier_mask)
        .enumerate()
        .map(|(i, (res, inl))| vec![i.to_string(), num(*res), (*inl as u8).to_string()]);
    let m = r.rotation.matrix();
    let summary = json!({
        "c_bar": c_bar,
        "seed": seed,
        "rotation": [[m[(0,0)], m[(0,1)], m[(0,2)]], [m[(1,0)], m[(1,1)], m[(1,2)]], [m[(2,0)], m[(2,1)], m[(2,2)]]],
        "translation": json_vec(&r.translation),
        "cost": r.cost,
        "inlier_count": r.inlier_count(),
        "outliers": r.inlier_mask.iter().enumerate().filter(|(_, &i)| !i).map(|(k, _)| k).collect::<Vec<_>>(),
        "converged": r.converged,
        "residuals_file": "residuals.csv",
    });
    Ok(Outputs {
        files: vec![(
            "residuals.csv".into(),
            csv_bytes(&["index", "residual", "inlier"], rows),
        )],
        summary,
    })
}

// ---------------------------------------------------------------- fem

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FemModelConfig {
    Explicit {
        mesh: FingerMesh,
        cables: Vec<Cable>,
    },
    /// Two mirrored arc fingers with a fingertip grasp objective.
    FingerPair {
        #[serde(default)]
        arc: ArcSpec,
        stiffness: f64,
        target: Vector3<f64>,
        grasp_weight: f64,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemConfig {
    pub model: FemModelConfig,
    /// Replaces the generated objective of a finger pair.
    #[serde(default)]
    pub objective: Option<GraspObjectiveConfig>,
    /// Contraction to solve for, or the starting point when optimizing.
    pub u: Vec<f64>,
    #[serde(default)]
    pub optimize: bool,
    #[serde(default)]
    pub options: ControlOptions,
}

pub fn fem(cfg: &FemConfig) -> CliResult<Outputs> {
    let (model, generated) = match &cfg.model {
        FemModelConfig::Explicit { mesh, cables } => (FemModel::new(mesh.clone(), cables.clone())?, None),
        FemModelConfig::FingerPair {
            arc,
            stiffness,
            target,
            grasp_weight,
        } => {
            let (m, o) = finger_pair(arc, *stiffness, *target, *grasp_weight)?;
            (m, Some(o))
        }
    };
    let objective = cfg.objective.clone().or(generated);
    if let Some(o) = &objective {
        o.validate(model.mesh())?;
    }
    let mut files = Vec::new();
    let mut summary = json!({ "nodes_file": "nodes.csv" });
    let (x, u) = if cfg.optimize {
        let obj = objective
            .as_ref()
            .ok_or_else(|| CliError::Validation("`optimize` needs an `objective`".into()))?;
        let r = optimize_control(&model, obj, &cfg.u, &cfg.options)?;
        let rows = r.history.iter().enumerate().map(|(k, v)| vec![k.to_string(), num(*v)]);
        files.push(("history.csv".to_string(), csv_bytes(&["iteration", "objective"], rows)));
        summary["u"] = json!(r.u);
        summary["objective"] = json!(r.objective);
        summary["grasp"] = json!(r.grasp);
        summary["fov"] = json!(r.fov);
        summary["iterations"] = json!(r.iterations);
        summary["converged"] = json!(r.converged);
        summary["line_search_failed"] = json!(r.line_search_failed);
        summary["history_file"] = "history.csv".into();
        (r.x, r.u)
    } else {
        let eq = model.static_equilibrium(&cfg.u, None)?;
        summary["u"] = json!(cfg.u);
        summary["newton_iterations"] = json!(eq.iterations);
        summary["residual"] = json!(eq.residual);
        summary["inverted_elements"] = json!(eq.inverted);
        if let Some(o) = &objective {
            let e = objectives(model.mesh(), &eq.x, o);
            summary["grasp"] = json!(e.grasp);
            summary["fov"] = json!(e.fov);
        }
        (eq.x, cfg.u.clone())
    };
    summary["energy"] = json!(model.energy_value(&x, &u));
    let rest = model.rest_positions();
    let rows = (0..x.len() / 2).map(|i| {
        vec![
            i.to_string(),
            num(rest[2 * i]),
            num(rest[2 * i + 1]),
            num(x[2 * i]),
            num(x[2 * i + 1]),
        ]
    });
    files.insert(
        0,
        (
            "nodes.csv".into(),
            csv_bytes(&["node", "rest_x", "rest_y", "x", "y"], rows),
        ),
    );
    Ok(Outputs { files, summary })
}

// ---------------------------------------------------------------- bounds

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default)]
    pub gripper: GripperDims,
    pub target: TargetDims,
    #[serde(default)]
    pub budget: Option<ErrorBudget>,
}

pub const BUDGET_COLUMNS: [&str; 9] = [
    "axis",
    "pose",
    "vio",
    "tracking",
    "total",
    "effective_total",
    "bound",
    "feasible",
    "verdict",
];

fn budget_csv(budget: &ErrorBudget, c: &Classification) -> Vec<u8> {
    let rows = [
        ("longitudinal", &budget.longitudinal, &c.longitudinal),
        ("lateral", &budget.lateral, &c.lateral),
        ("vertical", &budget.vertical, &c.vertical),
    ]
    .map(|(name, b, v)| {
        vec![
            name.to_string(),
            num(b.pose_estimate_error),
            num(b.vio_drift),
            num(b.tracking_error),
            num(v.total),
            num(v.effective_total),
            num(v.bound),
            ((v.bound >= 0.0) as u8).to_string(),
            if v.within { "within".into() } else { "outside".into() },
        ]
    });
    csv_bytes(&BUDGET_COLUMNS, rows)
}

pub fn bounds(cfg: &BoundsConfig) -> CliResult<Outputs> {
    cfg.gripper.validate()?;
    cfg.target.validate()?;
    let budget = cfg.budget.unwrap_or_default();
    budget.validate()?;
    let b = error_bounds(&cfg.gripper, &cfg.target);
    let c = classify(&budget, &b);
    let table = format_table(&budget, &c);
    let summary = json!({
        "bounds": b,
        "infeasible_axes": b.infeasible_axes(),
        "classification": c,
        "all_within": c.all_within(),
        "budget_file": "bounds.csv",
        "table_file": "bounds_table.txt",
    });
    Ok(Outputs {
        files: vec![
            ("bounds.csv".into(), budget_csv(&budget, &c)),
            ("bounds_table.txt".into(), table.into_bytes()),
        ],
        summary,
    })
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, Serialize)]
pub struct BudgetReport {
    pub grasp_time: f64,
    pub grasp_speed: f64,
    pub budget: ErrorBudget,
    pub bounds: ErrorBounds,
    pub classification: Classification,
    /// Configured target position bias, projected on the grasp axes.
    pub injected_bias: AxisTriple,
    pub injected_drift_rate: f64,
    pub table: String,
}

/// Grasp-instant error decomposition against the geometric bounds.
pub fn error_budget_report(
    trace: &ScenarioTrace,
    injected: &SensingModel,
    gripper: &GripperDims,
    target: &TargetDims,
) -> crate::Result<BudgetReport> {
    gripper.validate()?;
    target.validate()?;
    let g = trace.grasp.as_ref().ok_or(Error::NoGraspEvent)?;
    let budget = ErrorBudget::from_components(&g.pose_estimate_error, &g.vio_drift, &g.tracking_error);
    let b = error_bounds(gripper, target);
    let c = classify(&budget, &b);
    Ok(BudgetReport {
        grasp_time: g.t,
        grasp_speed: g.speed,
        budget,
        bounds: b,
        classification: c,
        injected_bias: AxisTriple::project(&injected.target_position_bias, &g.axes),
        injected_drift_rate: injected.vio_drift_rate,
        table: format_table(&budget, &c),
    })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub gripper: GripperDims,
    pub target: TargetDims,
}

pub fn report(cfg: &ReportConfig, seed: Option<u64>) -> CliResult<Outputs> {
    let mut sc = cfg.scenario.clone();
    if let Some(s) = seed {
        sc.seed = s;
    }
    safe_name(&sc.name)?;
    cfg.gripper.validate()?;
    cfg.target.validate()?;
    let trace = run_scenario(&sc)?;
    let rep = error_budget_report(&trace, &sc.sensing, &cfg.gripper, &cfg.target)?;
    let trace_file = format!("{}_trace.csv", sc.name);
    let grasp_file = format!("{}_grasp.csv", sc.name);
    let g = trace.grasp.as_ref().expect("checked by the report");
    let mut summary = trace_summary(&trace, sc.seed, &trace_file, Some(&grasp_file));
    summary["report"] = serde_json::to_value(&rep).expect("report serializes");
    summary["budget_file"] = "budget.csv".into();
    summary["table_file"] = "budget_table.txt".into();
    Ok(Outputs {
        files: vec![
            (trace_file, trace_csv(&trace)),
            (grasp_file, grasp_csv(g)),
            ("budget.csv".into(), budget_csv(&rep.budget, &rep.classification)),
            ("budget_table.txt".into(), rep.table.clone().into_bytes()),
        ],
        summary,
    })
}
