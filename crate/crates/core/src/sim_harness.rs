//! Fixed-step simulator of a human-mounted limb pressing against a support,
//! driven by the task-space stiffness controller and an optional sEMG stream.
//!
//! The human joints follow a scripted trajectory. The limb joints integrate
//! the constrained dynamics with semi-implicit Euler; the support contact is
//! bilateral and enforced at velocity level.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, ContactSelector, DynamicsError, DynamicsSnapshot, PlanarPlant};
use crate::emg_pipeline::{self, fmt_num, EmgConfig, EmgError, EmgStream, EmgTrace, MotionSample};
use crate::kinematics::KinematicsError;
use crate::numerics::{self, Matrix, NumericsError, Vector};
use crate::stability::{self, ParametricChain, StabilityError, StabilityReport, SupportPosture};
use crate::stiffness_control::{self, ControlError, FrictionModel, StiffnessTable, TaskSpaceController, STICTION_VELOCITY};

pub const DEFAULT_DT: f64 = 1e-4;
pub const MAX_DT: f64 = 0.01;
pub const BLOWUP_LIMIT: f64 = 1e9;
/// Fraction of the contact position error removed per step.
const BAUMGARTE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{key}: {reason}")]
    ParseError { key: String, reason: String },
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("numeric blow-up: {0}")]
    NumericBlowup(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Emg(#[from] EmgError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    fn parse(key: &str, reason: impl Into<String>) -> Self {
        SimError::ParseError {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// Numeric failures as opposed to invalid input.
    pub fn is_numeric(&self) -> bool {
        match self {
            SimError::NumericBlowup(_) | SimError::Numerics(_) => true,
            SimError::AtStep { source, .. } => source.is_numeric(),
            SimError::Dynamics(DynamicsError::Numerics(_)) => true,
            SimError::Kinematics(KinematicsError::Singular(_) | KinematicsError::Numerics(_)) => true,
            SimError::Control(ControlError::SingularStiffness | ControlError::Numerics(_)) => true,
            SimError::Stability(StabilityError::Unachievable { .. } | StabilityError::Numerics(_)) => true,
            _ => false,
        }
    }

    /// 1 for validation errors, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_numeric() {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// Support force reported for zero limb acceleration (quasi-static).
    #[default]
    InverseDynamics,
    /// Support force reported for the simulated accelerations.
    Tracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub qdot: Option<Vec<f64>>,
}

/// Human joint waypoints `[t, q_h1, q_h2, ...]`, joined by minimum-jerk
/// segments that start and end at rest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanScript {
    #[serde(default)]
    pub waypoints: Vec<Vec<f64>>,
}

impl HumanScript {
    /// Position, velocity and acceleration of the human joints at `t`;
    /// `hold` is used when there are no waypoints.
    pub fn sample(&self, t: f64, hold: &Vector) -> (Vector, Vector, Vector) {
        let m = hold.len();
        let zero = Vector::zeros(m);
        let row = |i: usize| Vector::from_iterator(m, self.waypoints[i][1..].iter().copied());
        let Some(first) = self.waypoints.first() else {
            return (hold.clone(), zero.clone(), zero);
        };
        if t <= first[0] {
            return (row(0), zero.clone(), zero);
        }
        let last = self.waypoints.len() - 1;
        if t >= self.waypoints[last][0] {
            return (row(last), zero.clone(), zero);
        }
        let i = self.waypoints.partition_point(|w| w[0] <= t) - 1;
        let (t0, t1) = (self.waypoints[i][0], self.waypoints[i + 1][0]);
        let span = t1 - t0;
        let s = (t - t0) / span;
        let pos = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let vel = 30.0 * s * s * (1.0 - s) * (1.0 - s) / span;
        let acc = 60.0 * s * (1.0 - 3.0 * s + 2.0 * s * s) / (span * span);
        let (a, b) = (row(i), row(i + 1));
        let d = &b - &a;
        (a + &d * pos, &d * vel, d * acc)
    }
}

/// One stiffness level: a scalar for isotropic stiffness or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StiffnessSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl StiffnessSpec {
    fn to_matrix(&self, dim: usize) -> Option<Matrix> {
        match self {
            StiffnessSpec::Scalar(k) => Some(Matrix::identity(dim, dim) * *k),
            StiffnessSpec::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return None;
                }
                Some(Matrix::from_fn(dim, dim, |r, c| rows[r][c]))
            }
        }
    }
}

/// `"none"`, `"default"` or an explicit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrictionSpec {
    Named(String),
    Model(FrictionModel),
}

impl Default for FrictionSpec {
    fn default() -> Self {
        FrictionSpec::Named("none".into())
    }
}

impl FrictionSpec {
    fn model(&self, joints: usize) -> Result<FrictionModel, SimError> {
        let model = match self {
            FrictionSpec::Named(n) if n == "none" => FrictionModel::frictionless(joints),
            FrictionSpec::Named(n) if n == "default" => FrictionModel::default_for(joints),
            FrictionSpec::Named(n) => {
                return Err(SimError::parse("controller.friction", format!("unknown model '{n}'")));
            }
            FrictionSpec::Model(m) => m.clone(),
        };
        if model.joints() != joints {
            return Err(SimError::parse(
                "controller.friction",
                format!("expected {joints} limb joints, got {}", model.joints()),
            ));
        }
        model
            .validate()
            .map_err(|e| SimError::parse("controller.friction", e.to_string()))?;
        Ok(model)
    }
}

/// Task-space controller settings. The task point is the contact point, or
/// the tip of the last limb link without a contact; task coordinates are its
/// `x` and `z` offsets from the limb base in world-aligned axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub enabled: bool,
    pub stiffness_levels: Vec<StiffnessSpec>,
    pub level: usize,
    /// Absolute equilibrium; defaults to the initial task position.
    pub x_eq: Option<Vec<f64>>,
    /// Added to the equilibrium.
    pub x_eq_offset: Option<Vec<f64>>,
    pub f_gravity: Option<Vec<f64>>,
    /// Diagonal task damping, N·s/m.
    pub damping: Option<Vec<f64>>,
    /// Null-space posture stiffness towards the initial limb configuration.
    pub posture_stiffness: f64,
    pub posture_damping: f64,
    /// Cancel the limb's own weight at the joints.
    pub gravity_compensation: bool,
    pub torque_limit: Option<f64>,
    pub friction: FrictionSpec,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            enabled: true,
            stiffness_levels: stiffness_control::DEFAULT_LEVELS
                .iter()
                .map(|k| StiffnessSpec::Scalar(*k))
                .collect(),
            level: 1,
            x_eq: None,
            x_eq_offset: None,
            f_gravity: None,
            damping: None,
            posture_stiffness: 2.0,
            posture_damping: 0.5,
            gravity_compensation: true,
            torque_limit: None,
            friction: FrictionSpec::default(),
        }
    }
}

/// sEMG source and processing for the equilibrium-shift channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmgScenario {
    /// CSV trace `t,ch1,...`, relative to the scenario file.
    #[serde(default)]
    pub trace: Option<String>,
    /// Activation schedule `[t, a]` for a synthetic trace.
    #[serde(default)]
    pub profile: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_fs")]
    pub fs: f64,
    #[serde(default)]
    pub pipeline: EmgConfig,
    /// Yaw CSV `t,yaw_rad`; without a motion source the gate stays open.
    #[serde(default)]
    pub motion: Option<String>,
    /// Inline yaw samples `[t, yaw]`.
    #[serde(default)]
    pub yaw: Option<Vec<[f64; 2]>>,
    /// Task direction of the equilibrium shift; defaults to `+z`.
    #[serde(default)]
    pub direction: Option<Vec<f64>>,
}

fn default_fs() -> f64 {
    2000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, dim: usize) -> Option<Matrix> {
        match self {
            MatrixSpec::Diagonal(d) if d.len() == dim => Some(Matrix::from_diagonal(&Vector::from_column_slice(d))),
            MatrixSpec::Full(rows) if rows.len() == dim && rows.iter().all(|r| r.len() == dim) => {
                Some(Matrix::from_fn(dim, dim, |r, c| rows[r][c]))
            }
            _ => None,
        }
    }
}

/// Input of the quasi-static stability analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub chain: ParametricChain,
    /// `(x, y, z, rx, ry, rz)`.
    pub pose: [f64; 6],
    pub mass: f64,
    pub k_q: MatrixSpec,
    /// Joint torques at equilibrium; solved from the pose when omitted.
    #[serde(default)]
    pub tau_bar: Option<Vec<f64>>,
    /// Also report the servo stiffness reaching this margin.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default = "default_alpha_max")]
    pub alpha_max: f64,
}

fn default_alpha_max() -> f64 {
    1e6
}

impl StabilityConfig {
    pub fn posture(&self) -> Result<SupportPosture, SimError> {
        let chain = std::sync::Arc::new(self.chain);
        let pose = Vector::from_column_slice(&self.pose);
        let k_q = self
            .k_q
            .to_matrix(stability::POSE_DIM)
            .ok_or_else(|| SimError::parse("stability.k_q", "must be 6 diagonal entries or a 6x6 matrix"))?;
        let posture = match &self.tau_bar {
            None => SupportPosture::at_equilibrium(chain, pose, k_q, self.mass)?,
            Some(t) => SupportPosture::new(chain, pose, Vector::from_column_slice(t), k_q, self.mass)?,
        };
        Ok(posture)
    }

    /// Report, plus the stabilizing servo stiffness when a margin is set.
    pub fn analyze(&self) -> Result<(StabilityReport, Option<f64>), SimError> {
        let posture = self.posture()?;
        let report = stability::stiffness_matrix_kp(&posture)?;
        let servo = match self.margin {
            Some(m) => Some(stability::stabilizing_servo_stiffness(&posture, m, self.alpha_max)?),
            None => None,
        };
        Ok((report, servo))
    }
}

/// `key=value` lines followed by one eigenvalue per line.
pub fn stability_report_text(report: &StabilityReport, servo: Option<f64>) -> String {
    let mut s = String::new();
    s.push_str(&format!("is_stable={}\n", report.is_stable));
    s.push_str(&format!("min_eigenvalue={}\n", fmt_num(report.margin)));
    s.push_str(&format!("oracle_disagreement={}\n", fmt_num(report.oracle_disagreement)));
    s.push_str(&format!("diagnostic_mismatch={}\n", report.diagnostic_mismatch));
    s.push_str(&format!("equilibrium_residual={}\n", fmt_num(report.equilibrium_residual)));
    if let Some(a) = servo {
        s.push_str(&format!("servo_stiffness={}\n", fmt_num(a)));
    }
    for (i, e) in report.eigenvalues.iter().enumerate() {
        s.push_str(&format!("eigenvalue{}={}\n", i + 1, fmt_num(*e)));
    }
    s
}

/// Parse an `analyze-stability` config: either a `stability` section of a
/// scenario file or a bare stability object.
pub fn load_stability_config(path: &Path) -> Result<StabilityConfig, SimError> {
    let text = read_file(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| SimError::parse("<root>", e.to_string()))?;
    let (prefix, section) = match value.get("stability") {
        Some(s) => ("stability.", s.clone()),
        None => ("", value),
    };
    serde_path_to_error::deserialize(section).map_err(|e| {
        let path = e.path().to_string();
        SimError::parse(&format!("{prefix}{path}"), e.into_inner().to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub plant: PlanarPlant,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub contact: Option<ContactSelector>,
    #[serde(default)]
    pub human: HumanScript,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub emg: Option<EmgScenario>,
    pub sim: SimConfig,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    /// Directory against which relative file references resolve.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn read_file(path: &Path) -> Result<String, SimError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SimError::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

/// Read and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let text = read_file(path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Scenario::from_json_str(&text, &dir)
}

impl Scenario {
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self, SimError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            SimError::parse(&key, e.into_inner().to_string())
        })?;
        scenario.base_dir = base_dir.to_path_buf();
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn resolve(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn limb_joints(&self) -> Vec<usize> {
        self.plant.limb_joints()
    }

    pub fn human_joints(&self) -> Vec<usize> {
        self.plant.human_joints()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sim = &self.sim;
        if !(sim.dt > 0.0) {
            return Err(SimError::parse("sim.dt", "must be positive"));
        }
        if sim.dt > MAX_DT {
            return Err(SimError::parse("sim.dt", format!("must not exceed {MAX_DT}")));
        }
        if !(sim.duration >= 0.0) || !sim.duration.is_finite() {
            return Err(SimError::parse("sim.duration", "must be finite and nonnegative"));
        }
        self.plant.validate().map_err(|e| SimError::parse("plant", e.to_string()))?;
        let n = self.plant.dof();
        let limb = self.limb_joints();
        if limb.is_empty() {
            return Err(SimError::parse("plant.links", "needs at least one limb joint"));
        }
        for (key, v) in [("initial.q", &self.initial.q), ("initial.qdot", &self.initial.qdot)] {
            if let Some(v) = v {
                if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                    return Err(SimError::parse(key, format!("must hold {n} finite values")));
                }
            }
        }
        let m = self.human_joints().len();
        let mut prev = f64::NEG_INFINITY;
        for w in &self.human.waypoints {
            if w.len() != m + 1 || w.iter().any(|x| !x.is_finite()) {
                return Err(SimError::parse("human.waypoints", format!("rows must be [t, {m} joint values]")));
            }
            if w[0] <= prev {
                return Err(SimError::parse("human.waypoints", "times must increase"));
            }
            prev = w[0];
        }
        if let Some(c) = &self.contact {
            self.plant
                .link_index(&c.link)
                .map_err(|e| SimError::parse("contact.link", e.to_string()))?;
            if c.directions.is_empty() || c.directions.len() > 3 {
                return Err(SimError::parse("contact.directions", "select 1 to 3 directions"));
            }
        }
        self.validate_controller(limb.len())?;
        if let Some(e) = &self.emg {
            self.validate_emg(e)?;
        }
        Ok(())
    }

    fn validate_controller(&self, limb: usize) -> Result<(), SimError> {
        let c = &self.controller;
        self.stiffness_table()?;
        if !(1..=4).contains(&c.level) {
            return Err(SimError::parse("controller.level", "must be in 1..=4"));
        }
        for (key, v) in [
            ("controller.x_eq", &c.x_eq),
            ("controller.x_eq_offset", &c.x_eq_offset),
            ("controller.f_gravity", &c.f_gravity),
            ("controller.damping", &c.damping),
        ] {
            if let Some(v) = v {
                if v.len() != TASK_DIM || v.iter().any(|x| !x.is_finite()) {
                    return Err(SimError::parse(key, format!("must hold {TASK_DIM} finite values")));
                }
            }
        }
        if c.damping.as_ref().is_some_and(|d| d.iter().any(|x| *x < 0.0)) {
            return Err(SimError::parse("controller.damping", "must be nonnegative"));
        }
        if !(c.posture_stiffness >= 0.0) || !(c.posture_damping >= 0.0) {
            return Err(SimError::parse("controller.posture_stiffness", "posture gains must be nonnegative"));
        }
        if c.torque_limit.is_some_and(|l| !(l > 0.0)) {
            return Err(SimError::parse("controller.torque_limit", "must be positive"));
        }
        c.friction.model(limb)?;
        Ok(())
    }

    fn validate_emg(&self, e: &EmgScenario) -> Result<(), SimError> {
        match (&e.trace, &e.profile) {
            (Some(t), None) => {
                let p = self.resolve(t);
                if !p.exists() {
                    return Err(SimError::MissingFile(p));
                }
            }
            (None, Some(profile)) => {
                check_profile(profile).map_err(|r| SimError::parse("emg.profile", r))?;
                if !(e.fs > 0.0) {
                    return Err(SimError::parse("emg.fs", "must be positive"));
                }
            }
            _ => return Err(SimError::parse("emg", "set exactly one of trace and profile")),
        }
        if let Some(m) = &e.motion {
            if e.yaw.is_some() {
                return Err(SimError::parse("emg", "set at most one of motion and yaw"));
            }
            let p = self.resolve(m);
            if !p.exists() {
                return Err(SimError::MissingFile(p));
            }
        }
        if let Some(y) = &e.yaw {
            if y.windows(2).any(|w| w[1][0] < w[0][0]) {
                return Err(SimError::parse("emg.yaw", "times must be nondecreasing"));
            }
        }
        if let Some(d) = &e.direction {
            if d.len() != TASK_DIM || d.iter().any(|x| !x.is_finite()) {
                return Err(SimError::parse("emg.direction", format!("must hold {TASK_DIM} finite values")));
            }
        }
        e.pipeline
            .validate()
            .map_err(|err| SimError::parse("emg.pipeline", err.to_string()))
    }

    pub fn stiffness_table(&self) -> Result<StiffnessTable, SimError> {
        let levels = &self.controller.stiffness_levels;
        if levels.len() != 4 {
            return Err(SimError::parse("controller.stiffness_levels", "needs exactly 4 levels"));
        }
        let mats: Option<Vec<Matrix>> = levels.iter().map(|l| l.to_matrix(TASK_DIM)).collect();
        let mats = mats.ok_or_else(|| {
            SimError::parse("controller.stiffness_levels", format!("levels must be scalars or {TASK_DIM}x{TASK_DIM}"))
        })?;
        let arr: [Matrix; 4] = mats.try_into().expect("four levels");
        StiffnessTable::new(arr).map_err(|e| SimError::parse("controller.stiffness_levels", e.to_string()))
    }
}

fn check_profile(profile: &[[f64; 2]]) -> Result<(), String> {
    if profile.is_empty() {
        return Err("must not be empty".into());
    }
    if profile.iter().any(|p| !(0.0..=1.0).contains(&p[1]) || !p[0].is_finite()) {
        return Err("activation values must lie in [0, 1]".into());
    }
    if profile.windows(2).any(|w| w[1][0] < w[0][0]) {
        return Err("times must be nondecreasing".into());
    }
    Ok(())
}

fn profile_at(profile: &[[f64; 2]], t: f64) -> f64 {
    let i = profile.partition_point(|p| p[0] <= t);
    if i == 0 {
        return profile[0][1];
    }
    if i == profile.len() {
        return profile[i - 1][1];
    }
    let (a, b) = (profile[i - 1], profile[i]);
    let span = b[0] - a[0];
    if span <= 0.0 {
        return b[1];
    }
    a[1] + (b[1] - a[1]) * (t - a[0]) / span
}

/// Synthetic sEMG: Gaussian noise band-limited to the default pass band and
/// amplitude-modulated by the activation profile, sampled from `t = 0` to the
/// last profile time. The scale is chosen so that a full activation reads as
/// `mvc_reference` after the standard processing chain.
pub fn generate_emg(profile: &[[f64; 2]], fs: f64, seed: u64, mvc_reference: f64) -> Result<EmgTrace, SimError> {
    check_profile(profile).map_err(|r| SimError::parse("profile", r))?;
    if !(fs > 0.0) || !(mvc_reference > 0.0) {
        return Err(SimError::parse("fs", "sampling rate and mvc reference must be positive"));
    }
    let band = EmgConfig::default().band;
    let t_end = profile.last().expect("nonempty")[0].max(0.0);
    let n = (t_end * fs).floor() as usize + 1;
    let pad = (3.0 * fs / band[0]).ceil() as usize;
    let total = n + 2 * pad;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng)).collect();
    let once = emg_pipeline::bandpass(&EmgTrace::single(fs, noise), band[0], band[1])?;
    let twice = emg_pipeline::bandpass(&once, band[0], band[1])?;
    let core = &twice.channels[0].1[pad..pad + n];
    let rms = (core.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { mvc_reference / rms } else { 0.0 };

    let shaped = once.channels[0].1[pad..pad + n]
        .iter()
        .enumerate()
        .map(|(i, v)| v * scale * profile_at(profile, i as f64 / fs))
        .collect();
    Ok(EmgTrace::single(fs, shaped))
}

/// Read a `t,activation` CSV schedule.
pub fn read_profile_csv<R: std::io::Read>(reader: R) -> Result<Vec<[f64; 2]>, SimError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "t" {
        return Err(SimError::parse("profile", "header must be t,activation"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| {
            rec[j]
                .parse::<f64>()
                .map_err(|_| SimError::parse("profile", format!("row {} is not numeric", i + 1)))
        };
        out.push([parse(0)?, parse(1)?]);
    }
    Ok(out)
}

pub const TASK_DIM: usize = 2;

/// Joint positions, rates and the accelerations of the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub q: Vector,
    pub qdot: Vector,
    pub qdd: Vector,
}

/// What the integrator enforces besides the dynamics.
#[derive(Debug, Clone, Default)]
pub struct Constraints {
    /// Contact and the anchor position along its directions.
    pub contact: Option<(ContactSelector, Vector)>,
    /// Prescribed joints with their positions and rates at the end of the
    /// step.
    pub prescribed: Vec<usize>,
    pub prescribed_q: Vector,
    pub prescribed_qdot: Vector,
    pub friction: Option<FrictionModel>,
}

/// Integrator output: the new state and the contact force over the step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    pub lambda: Vector,
    /// Friction torques applied on the free joints.
    pub friction: Vector,
}

fn gather(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn gather_cols(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

fn gather_block(m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// Accelerations of the free joints under `force`, with `j qdd = c`.
struct ConstrainedSolver {
    a_inv: Matrix,
    j: Matrix,
    m_inv: Matrix,
}

impl ConstrainedSolver {
    fn new(a_ff: &Matrix, j: Matrix) -> Result<Self, SimError> {
        let chol = numerics::spd_factor(a_ff)?;
        let a_inv = chol.inverse();
        let m = &j * &a_inv * j.transpose();
        let m_inv = if m.nrows() == 0 {
            m
        } else {
            match m.clone().cholesky() {
                Some(c) => c.inverse(),
                None => numerics::svd_pinv(&m),
            }
        };
        Ok(ConstrainedSolver { a_inv, j, m_inv })
    }

    fn solve(&self, force: &Vector, c: &Vector) -> (Vector, Vector) {
        let free = &self.a_inv * force;
        let lambda = &self.m_inv * (c - &self.j * &free);
        let qdd = free + &self.a_inv * self.j.transpose() * &lambda;
        (qdd, lambda)
    }

    /// `A^-1 - A^-1 J^T (J A^-1 J^T)^-1 J A^-1`.
    fn mobility(&self) -> Matrix {
        let aj = &self.a_inv * self.j.transpose();
        &self.a_inv - &aj * &self.m_inv * aj.transpose()
    }
}

/// One semi-implicit Euler step. `tau_total` acts on all joints (entries of
/// prescribed joints are ignored); friction is added when configured.
pub fn integrate_step(
    state: &SimState,
    tau_total: &Vector,
    plant: &PlanarPlant,
    dt: f64,
    constraints: &Constraints,
) -> Result<StepOutcome, SimError> {
    let n = plant.dof();
    if tau_total.len() != n || state.q.len() != n || state.qdot.len() != n {
        return Err(DynamicsError::DimensionMismatch(format!("plant has {n} joints")).into());
    }
    let (a, h) = plant.dynamics(&state.q, &state.qdot)?;
    let pres = &constraints.prescribed;
    let free: Vec<usize> = (0..n).filter(|i| !pres.contains(i)).collect();

    let qdot_p_new = constraints.prescribed_qdot.clone();
    let qdd_p = (&qdot_p_new - gather(&state.qdot, pres)) / dt;
    let a_ff = gather_block(&a, &free, &free);
    let a_fp = gather_block(&a, &free, pres);
    let base_force = gather(tau_total, &free) - gather(&h, &free) - &a_fp * &qdd_p;
    let qdot_f = gather(&state.qdot, &free);

    let (j_f, c) = match &constraints.contact {
        Some((sel, anchor)) => {
            let j = plant.contact_jacobian(&state.q, sel)?;
            let (pos, _) = plant.contact_state(&state.q, &state.qdot, sel)?;
            let j_f = gather_cols(&j, &free);
            let j_p = gather_cols(&j, pres);
            let v_target = (anchor - pos) * (BAUMGARTE / dt);
            let c = (v_target - &j_f * &qdot_f - j_p * &qdot_p_new) / dt;
            (j_f, c)
        }
        None => (Matrix::zeros(0, free.len()), Vector::zeros(0)),
    };
    let solver = ConstrainedSolver::new(&a_ff, j_f)?;

    let mut friction = Vector::zeros(free.len());
    let (qdd_f, lambda) = match constraints.friction.as_ref().filter(|f| !f.is_frictionless()) {
        None => solver.solve(&base_force, &c),
        Some(model) => {
            friction = friction_step(&solver, model, &base_force, &c, &qdot_f, dt);
            solver.solve(&(&base_force + &friction), &c)
        }
    };

    let mut next = state.clone();
    next.t = state.t + dt;
    for (k, &i) in free.iter().enumerate() {
        next.qdot[i] = state.qdot[i] + qdd_f[k] * dt;
        next.q[i] = state.q[i] + next.qdot[i] * dt;
        next.qdd[i] = qdd_f[k];
    }
    for (k, &i) in pres.iter().enumerate() {
        next.q[i] = constraints.prescribed_q[k];
        next.qdot[i] = qdot_p_new[k];
        next.qdd[i] = qdd_p[k];
    }
    let worst = next.q.iter().chain(next.qdot.iter()).fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(worst <= BLOWUP_LIMIT) {
        return Err(SimError::NumericBlowup(format!("state magnitude {worst:e} at t = {}", next.t)));
    }
    Ok(StepOutcome {
        state: next,
        lambda,
        friction,
    })
}

/// Friction on the free joints. Moving joints get kinetic friction; joints
/// at rest, or that would reverse within the step, get the torque that keeps
/// them at rest, capped at the breakaway level.
fn friction_step(
    solver: &ConstrainedSolver,
    model: &FrictionModel,
    force: &Vector,
    c: &Vector,
    qdot: &Vector,
    dt: f64,
) -> Vector {
    let nf = qdot.len();
    let mut stuck: Vec<bool> = qdot.iter().map(|v| v.abs() <= STICTION_VELOCITY).collect();
    let kinetic = |stuck: &[bool]| {
        Vector::from_fn(nf, |i, _| {
            if stuck[i] {
                0.0
            } else {
                stiffness_control::joint_friction(model, i, qdot[i], 0.0)
            }
        })
    };
    let mut moving_friction = kinetic(&stuck);
    let mut qdd0 = solver.solve(&(force + &moving_friction), c).0;
    for _ in 0..nf {
        let reversing: Vec<usize> = (0..nf)
            .filter(|&i| !stuck[i] && qdot[i] * (qdot[i] + qdd0[i] * dt) < 0.0)
            .collect();
        if reversing.is_empty() {
            break;
        }
        for i in reversing {
            stuck[i] = true;
        }
        moving_friction = kinetic(&stuck);
        qdd0 = solver.solve(&(force + &moving_friction), c).0;
    }
    let s: Vec<usize> = (0..nf).filter(|&i| stuck[i]).collect();
    if s.is_empty() {
        return moving_friction;
    }
    let g = solver.mobility();
    let g_ss = gather_block(&g, &s, &s);
    let target = Vector::from_iterator(s.len(), s.iter().map(|&i| -qdot[i] / dt - qdd0[i]));
    let needed = numerics::svd_pinv(&g_ss) * target;
    let mut out = moving_friction;
    for (k, &i) in s.iter().enumerate() {
        out[i] = stiffness_control::joint_friction(model, i, 0.0, -needed[k]);
    }
    out
}

/// One logged step. Vectors are indexed by limb joint, human joint, task
/// axis or contact direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub q_s: Vec<f64>,
    pub qdot_s: Vec<f64>,
    pub q_h: Vec<f64>,
    pub x: Vec<f64>,
    pub f_cmd: Vec<f64>,
    /// Support force from the integrator.
    pub lambda: Vec<f64>,
    /// Support force from the torque/force decoupling.
    pub lambda_dec: Vec<f64>,
    pub tau_s: Vec<f64>,
    /// Human joint torques from the decoupling.
    pub tau_h: Vec<f64>,
    /// Generalized force the human supplies at its joints.
    pub f_int: Vec<f64>,
    pub a: f64,
    pub gate: bool,
    pub x_eq: Vec<f64>,
}

struct EmgChannel {
    stream: EmgStream,
    motion: Option<Vec<MotionSample>>,
    direction: Vector,
}

/// Stateful simulation of one scenario.
pub struct Simulation {
    scenario: Scenario,
    state: SimState,
    step: usize,
    steps: usize,
    limb: Vec<usize>,
    human: Vec<usize>,
    anchor: Option<Vector>,
    controller: Option<TaskSpaceController>,
    friction: Option<FrictionModel>,
    q0_limb: Vector,
    emg: Option<EmgChannel>,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let plant = &scenario.plant;
        let n = plant.dof();
        let q = scenario.initial.q.as_ref().map_or_else(|| Vector::zeros(n), |v| Vector::from_column_slice(v));
        let qdot = scenario.initial.qdot.as_ref().map_or_else(|| Vector::zeros(n), |v| Vector::from_column_slice(v));
        let limb = scenario.limb_joints();
        let human = scenario.human_joints();
        let mut state = SimState {
            t: 0.0,
            q,
            qdot,
            qdd: Vector::zeros(n),
        };
        if !scenario.human.waypoints.is_empty() {
            let (qh, qdh, _) = scenario.human.sample(0.0, &gather(&state.q, &human));
            for (k, &i) in human.iter().enumerate() {
                state.q[i] = qh[k];
                state.qdot[i] = qdh[k];
            }
        }
        let anchor = match &scenario.contact {
            Some(sel) => Some(plant.contact_state(&state.q, &state.qdot, sel)?.0),
            None => None,
        };

        let ctrl_cfg = &scenario.controller;
        let controller = if ctrl_cfg.enabled {
            let (x0, _, _) = task_state(scenario, &state)?;
            let mut x_eq = ctrl_cfg.x_eq.as_ref().map_or(x0, |v| Vector::from_column_slice(v));
            if let Some(off) = &ctrl_cfg.x_eq_offset {
                x_eq += Vector::from_column_slice(off);
            }
            let f_g = ctrl_cfg
                .f_gravity
                .as_ref()
                .map_or_else(|| Vector::zeros(TASK_DIM), |v| Vector::from_column_slice(v));
            let table = scenario.stiffness_table()?;
            let mut c = TaskSpaceController::new(table.level(ctrl_cfg.level)?.clone(), x_eq, f_g)?
                .set_stiffness_level(ctrl_cfg.level, &table)?;
            if let Some(d) = &ctrl_cfg.damping {
                c = c.with_damping(Matrix::from_diagonal(&Vector::from_column_slice(d)))?;
            }
            Some(c)
        } else {
            None
        };
        let friction = Some(ctrl_cfg.friction.model(limb.len())?).filter(|f| !f.is_frictionless());

        let emg = match &scenario.emg {
            Some(e) => Some(build_emg(scenario, e)?),
            None => None,
        };
        let steps = (scenario.sim.duration / scenario.sim.dt + 1e-9).floor() as usize;
        Ok(Simulation {
            q0_limb: gather(&state.q, &limb),
            scenario: scenario.clone(),
            state,
            step: 0,
            steps,
            limb,
            human,
            anchor,
            controller,
            friction,
            emg,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.steps
    }

    /// Advance one step and return its record, or `None` when finished.
    pub fn step(&mut self) -> Result<Option<LogRecord>, SimError> {
        if self.is_done() {
            return Ok(None);
        }
        let idx = self.step;
        self.advance()
            .map(Some)
            .map_err(|e| SimError::AtStep {
                step: idx,
                source: Box::new(e),
            })
    }

    fn advance(&mut self) -> Result<LogRecord, SimError> {
        let sc = &self.scenario;
        let plant = &sc.plant;
        let dt = sc.sim.dt;
        let t = self.step as f64 * dt;
        let state = self.state.clone();
        let n = plant.dof();

        let (activation, gate, dxeq) = match &mut self.emg {
            Some(ch) => {
                let yaw = ch.motion.as_ref().map(|m| emg_pipeline::yaw_at(m, t));
                let s = ch.stream.step(t, dt, yaw);
                (s.activation, s.gate, &ch.direction * s.dxeq_m)
            }
            None => (0.0, false, Vector::zeros(TASK_DIM)),
        };

        let (x, xdot, j_task) = task_state(sc, &state)?;
        let mut tau = Vector::zeros(n);
        let mut f_cmd = Vector::zeros(TASK_DIM);
        let mut x_eq = Vector::zeros(TASK_DIM);
        if let Some(base) = &self.controller {
            let ctrl = TaskSpaceController {
                x_eq: &base.x_eq + &dxeq,
                ..base.clone()
            };
            x_eq = ctrl.x_eq.clone();
            f_cmd = ctrl.control_force_damped(&x, &xdot)?;
            let mut tau_s = stiffness_control::task_to_joint_torque(&j_task, &f_cmd)?;
            let cfg = &sc.controller;
            if cfg.gravity_compensation {
                tau_s += gather(&plant.gravity_torque(&state.q)?, &self.limb);
            }
            if cfg.posture_stiffness > 0.0 || cfg.posture_damping > 0.0 {
                let ns = self.limb.len();
                let null = Matrix::identity(ns, ns) - numerics::svd_pinv(&j_task) * &j_task;
                let q_s = gather(&state.q, &self.limb);
                let qd_s = gather(&state.qdot, &self.limb);
                tau_s += null * ((&self.q0_limb - q_s) * cfg.posture_stiffness - qd_s * cfg.posture_damping);
            }
            if let Some(lim) = cfg.torque_limit {
                tau_s.apply(|v| *v = v.clamp(-lim, lim));
            }
            for (k, &i) in self.limb.iter().enumerate() {
                tau[i] = tau_s[k];
            }
        }

        let hold = gather(&state.q, &self.human);
        let (q_p, qd_p, _) = sc.human.sample(t + dt, &hold);
        let constraints = Constraints {
            contact: sc.contact.clone().zip(self.anchor.clone()),
            prescribed: self.human.clone(),
            prescribed_q: q_p,
            prescribed_qdot: qd_p,
            friction: self.friction.clone(),
        };
        let out = integrate_step(&state, &tau, plant, dt, &constraints)?;

        let (a, h) = plant.dynamics(&state.q, &state.qdot)?;
        let mut applied = tau.clone();
        for (k, &i) in self.limb.iter().enumerate() {
            if self.friction.is_some() {
                applied[i] += out.friction[k];
            }
        }
        let mut residual = &a * &out.state.qdd + &h - &applied;
        let (lambda_dec, tau_h) = match &sc.contact {
            Some(sel) => {
                let j_c = plant.contact_jacobian(&state.q, sel)?;
                residual -= j_c.transpose() * &out.lambda;
                let qdd = match sc.sim.mode {
                    SimMode::Tracking => out.state.qdd.clone(),
                    SimMode::InverseDynamics => {
                        let mut q = Vector::zeros(n);
                        for &i in &self.human {
                            q[i] = out.state.qdd[i];
                        }
                        q
                    }
                };
                let sol = dynamics::decouple(&DynamicsSnapshot::new(a, h, j_c, qdd)?)?;
                (sol.lambda.as_slice().to_vec(), gather(&sol.tau, &self.human).as_slice().to_vec())
            }
            None => (Vec::new(), vec![0.0; self.human.len()]),
        };

        let record = LogRecord {
            t,
            q_s: gather(&state.q, &self.limb).as_slice().to_vec(),
            qdot_s: gather(&state.qdot, &self.limb).as_slice().to_vec(),
            q_h: hold.as_slice().to_vec(),
            x: x.as_slice().to_vec(),
            f_cmd: f_cmd.as_slice().to_vec(),
            lambda: out.lambda.as_slice().to_vec(),
            lambda_dec,
            tau_s: gather(&tau, &self.limb).as_slice().to_vec(),
            tau_h,
            f_int: gather(&residual, &self.human).as_slice().to_vec(),
            a: activation,
            gate,
            x_eq: x_eq.as_slice().to_vec(),
        };
        self.state = out.state;
        self.step += 1;
        Ok(record)
    }
}

fn build_emg(scenario: &Scenario, e: &EmgScenario) -> Result<EmgChannel, SimError> {
    let trace = match (&e.trace, &e.profile) {
        (Some(path), _) => {
            let p = scenario.resolve(path);
            let file = std::fs::File::open(&p).map_err(|_| SimError::MissingFile(p.clone()))?;
            EmgTrace::read_csv(file)?
        }
        (None, Some(profile)) => generate_emg(profile, e.fs, scenario.sim.seed, e.pipeline.hill.mvc_reference)?,
        (None, None) => return Err(SimError::parse("emg", "set exactly one of trace and profile")),
    };
    let motion = match (&e.motion, &e.yaw) {
        (Some(path), _) => {
            let p = scenario.resolve(path);
            let file = std::fs::File::open(&p).map_err(|_| SimError::MissingFile(p.clone()))?;
            Some(emg_pipeline::read_motion_csv(file)?)
        }
        (None, Some(y)) => Some(y.iter().map(|s| MotionSample { t: s[0], yaw: s[1] }).collect()),
        (None, None) => None,
    };
    let direction = e
        .direction
        .as_ref()
        .map_or_else(|| Vector::from_column_slice(&[0.0, 1.0]), |d| Vector::from_column_slice(d));
    Ok(EmgChannel {
        stream: EmgStream::new(e.pipeline.clone(), &trace)?,
        motion,
        direction,
    })
}

/// Task position, velocity and Jacobian (over limb joints) of the task point
/// relative to the limb base.
fn task_state(scenario: &Scenario, state: &SimState) -> Result<(Vector, Vector, Matrix), SimError> {
    let plant = &scenario.plant;
    let limb = scenario.limb_joints();
    let (link, dist) = match &scenario.contact {
        Some(sel) => {
            let l = plant.link_index(&sel.link)?;
            (l, sel.point.unwrap_or(plant.links[l].length))
        }
        None => {
            let l = *limb.last().expect("validated limb");
            (l, plant.links[l].length)
        }
    };
    let first = limb[0];
    let tip = plant.point_state(&state.q, &state.qdot, link, dist)?;
    let base = plant.point_state(&state.q, &state.qdot, first, 0.0)?;
    let (jt, _) = plant.point_jacobian(&state.q, link, dist)?;
    let (jb, _) = plant.point_jacobian(&state.q, first, 0.0)?;
    let x = Vector::from_column_slice(&[tip.pos[0] - base.pos[0], tip.pos[1] - base.pos[1]]);
    let xdot = Vector::from_column_slice(&[tip.vel[0] - base.vel[0], tip.vel[1] - base.vel[1]]);
    Ok((x, xdot, gather_cols(&(jt - jb), &limb)))
}

/// Run a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<LogRecord>, SimError> {
    let mut sim = Simulation::new(scenario)?;
    let mut log = Vec::with_capacity(sim.steps());
    while let Some(r) = sim.step()? {
        log.push(r);
    }
    Ok(log)
}

fn push_cols(out: &mut Vec<String>, prefix: &str, n: usize) {
    out.extend((1..=n).map(|i| format!("{prefix}{i}")));
}

/// Column names for a log of this scenario.
pub fn log_header(scenario: &Scenario) -> Vec<String> {
    let s = scenario.limb_joints().len();
    let h = scenario.human_joints().len();
    let k = scenario.contact.as_ref().map_or(0, |c| c.directions.len());
    let mut cols = vec!["t".to_string()];
    push_cols(&mut cols, "q_s", s);
    push_cols(&mut cols, "qdot_s", s);
    push_cols(&mut cols, "q_h", h);
    push_cols(&mut cols, "x", TASK_DIM);
    push_cols(&mut cols, "f_cmd", TASK_DIM);
    push_cols(&mut cols, "lambda", k);
    push_cols(&mut cols, "lambda_dec", k);
    push_cols(&mut cols, "tau_s", s);
    push_cols(&mut cols, "tau_h", h);
    push_cols(&mut cols, "f_int", h);
    cols.push("a".into());
    cols.push("gate".into());
    push_cols(&mut cols, "x_eq", TASK_DIM);
    cols
}

fn record_fields(r: &LogRecord) -> Vec<String> {
    let mut out = vec![fmt_num(r.t)];
    for v in [
        &r.q_s,
        &r.qdot_s,
        &r.q_h,
        &r.x,
        &r.f_cmd,
        &r.lambda,
        &r.lambda_dec,
        &r.tau_s,
        &r.tau_h,
        &r.f_int,
    ] {
        out.extend(v.iter().map(|x| fmt_num(*x)));
    }
    out.push(fmt_num(r.a));
    out.push((r.gate as u8).to_string());
    out.extend(r.x_eq.iter().map(|x| fmt_num(*x)));
    out
}

pub fn write_log_csv<W: Write>(scenario: &Scenario, log: &[LogRecord], writer: W) -> Result<(), SimError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(log_header(scenario))?;
    for r in log {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Run and stream the log to `writer` as it is produced.
pub fn run_scenario_to_csv<W: Write>(scenario: &Scenario, writer: W) -> Result<usize, SimError> {
    let mut sim = Simulation::new(scenario)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(log_header(scenario))?;
    let mut rows = 0;
    while let Some(r) = sim.step()? {
        w.write_record(record_fields(&r))?;
        rows += 1;
    }
    w.flush()?;
    Ok(rows)
}
