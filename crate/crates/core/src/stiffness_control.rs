//! Task-space virtual spring at the support point, its mapping to joint
//! torques, and a Coulomb/viscous joint friction model with a stiction band.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, Matrix, NumericsError, Vector};

/// Joint speed below which a joint is treated as stuck, rad/s.
pub const STICTION_VELOCITY: f64 = 1e-3;

/// Default stiffness levels, N/m.
pub const DEFAULT_LEVELS: [f64; 4] = [100.0, 200.0, 400.0, 800.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("stiffness level {0} outside 1..=4")]
    BadLevel(usize),
    #[error("stiffness is singular along the commanded force change")]
    SingularStiffness,
    #[error("stiffness matrix is not symmetric positive semi-definite")]
    NotPsd,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn check_len(v: &Vector, n: usize, what: &str) -> Result<(), ControlError> {
    if v.len() != n {
        return Err(ControlError::DimensionMismatch(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn check_psd(k: &Matrix) -> Result<(), ControlError> {
    let tol = 1e-9 * (1.0 + numerics::max_abs(k));
    match numerics::psd_check(k, tol) {
        Ok(v) if v.is_psd => Ok(()),
        Ok(_) | Err(NumericsError::NotSymmetric { .. }) => Err(ControlError::NotPsd),
        Err(e) => Err(e.into()),
    }
}

/// Four selectable task stiffness matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessTable {
    levels: [Matrix; 4],
}

impl StiffnessTable {
    pub fn new(levels: [Matrix; 4]) -> Result<Self, ControlError> {
        let dim = levels[0].nrows();
        for k in &levels {
            if k.shape() != (dim, dim) {
                return Err(ControlError::DimensionMismatch("stiffness levels differ in size".into()));
            }
            check_psd(k)?;
        }
        Ok(StiffnessTable { levels })
    }

    /// Isotropic levels `diag(k)` of size `dim`.
    pub fn isotropic(values: [f64; 4], dim: usize) -> Result<Self, ControlError> {
        Self::new(values.map(|k| Matrix::identity(dim, dim) * k))
    }

    /// `diag(100)`, `diag(200)`, `diag(400)`, `diag(800)` N/m.
    pub fn default_for(dim: usize) -> Self {
        Self::isotropic(DEFAULT_LEVELS, dim).expect("default levels are PSD")
    }

    /// Stiffness for `level` in `1..=4`.
    pub fn level(&self, level: usize) -> Result<&Matrix, ControlError> {
        if !(1..=4).contains(&level) {
            return Err(ControlError::BadLevel(level));
        }
        Ok(&self.levels[level - 1])
    }
}

/// Virtual spring `F = K (x_eq - x) + F_gravity - D xdot` in task space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpaceController {
    pub k_task: Matrix,
    pub x_eq: Vector,
    pub f_gravity: Vector,
    /// Task-space damping; zero unless configured.
    pub damping: Matrix,
    pub level: Option<usize>,
}

impl TaskSpaceController {
    pub fn new(k_task: Matrix, x_eq: Vector, f_gravity: Vector) -> Result<Self, ControlError> {
        let m = x_eq.len();
        if k_task.shape() != (m, m) {
            return Err(ControlError::DimensionMismatch(format!(
                "stiffness is {}x{}, equilibrium has {m} entries",
                k_task.nrows(),
                k_task.ncols()
            )));
        }
        check_len(&f_gravity, m, "gravity compensation")?;
        check_psd(&k_task)?;
        Ok(TaskSpaceController {
            k_task,
            x_eq,
            f_gravity,
            damping: Matrix::zeros(m, m),
            level: None,
        })
    }

    pub fn with_damping(mut self, damping: Matrix) -> Result<Self, ControlError> {
        if damping.shape() != self.k_task.shape() {
            return Err(ControlError::DimensionMismatch("damping size differs from stiffness".into()));
        }
        self.damping = damping;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.x_eq.len()
    }

    /// Spring plus feedforward force at position `x`.
    pub fn control_force(&self, x: &Vector) -> Result<Vector, ControlError> {
        check_len(x, self.dim(), "task position")?;
        Ok(&self.k_task * (&self.x_eq - x) + &self.f_gravity)
    }

    /// [`Self::control_force`] minus the damping force at task velocity `xdot`.
    pub fn control_force_damped(&self, x: &Vector, xdot: &Vector) -> Result<Vector, ControlError> {
        check_len(xdot, self.dim(), "task velocity")?;
        Ok(self.control_force(x)? - &self.damping * xdot)
    }

    /// Replace the stiffness by `table` entry `level`.
    pub fn set_stiffness_level(&self, level: usize, table: &StiffnessTable) -> Result<Self, ControlError> {
        let k = table.level(level)?;
        if k.shape() != self.k_task.shape() {
            return Err(ControlError::DimensionMismatch("stiffness table size differs from controller".into()));
        }
        Ok(TaskSpaceController {
            k_task: k.clone(),
            level: Some(level),
            ..self.clone()
        })
    }

    /// Move the equilibrium by `K^-1 delta_f` so the force at any fixed
    /// position changes by exactly `delta_f`.
    pub fn shift_equilibrium(&self, delta_f: &Vector) -> Result<Self, ControlError> {
        check_len(delta_f, self.dim(), "force change")?;
        let dx = numerics::svd_pinv(&self.k_task) * delta_f;
        let achieved = &self.k_task * &dx;
        let scale = 1.0 + delta_f.amax();
        if (achieved - delta_f).amax() > 1e-9 * scale {
            return Err(ControlError::SingularStiffness);
        }
        Ok(TaskSpaceController {
            x_eq: &self.x_eq + dx,
            ..self.clone()
        })
    }
}

/// `F = K (x_eq - x) + F_gravity`.
pub fn control_force(ctrl: &TaskSpaceController, x: &Vector) -> Result<Vector, ControlError> {
    ctrl.control_force(x)
}

/// `tau = J^T F`.
pub fn task_to_joint_torque(j_task: &Matrix, f: &Vector) -> Result<Vector, ControlError> {
    if j_task.nrows() != f.len() {
        return Err(ControlError::DimensionMismatch(format!(
            "task Jacobian has {} rows, force has {}",
            j_task.nrows(),
            f.len()
        )));
    }
    Ok(j_task.transpose() * f)
}

/// Per-joint Coulomb and viscous friction with a stiction band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionModel {
    pub coulomb: Vec<f64>,
    pub viscous: Vec<f64>,
    #[serde(default = "default_breakaway")]
    pub stiction_breakaway_ratio: f64,
}

fn default_breakaway() -> f64 {
    1.0
}

impl FrictionModel {
    /// Default actuator friction: 0.3 N·m Coulomb per joint, no viscous term.
    pub fn default_for(joints: usize) -> Self {
        FrictionModel {
            coulomb: vec![0.3; joints],
            viscous: vec![0.0; joints],
            stiction_breakaway_ratio: default_breakaway(),
        }
    }

    pub fn frictionless(joints: usize) -> Self {
        FrictionModel {
            coulomb: vec![0.0; joints],
            viscous: vec![0.0; joints],
            stiction_breakaway_ratio: 1.0,
        }
    }

    pub fn joints(&self) -> usize {
        self.coulomb.len()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.viscous.len() != self.coulomb.len() {
            return Err(ControlError::DimensionMismatch("coulomb and viscous lengths differ".into()));
        }
        if self
            .coulomb
            .iter()
            .chain(self.viscous.iter())
            .any(|c| !(*c >= 0.0) || !c.is_finite())
        {
            return Err(ControlError::DimensionMismatch("friction coefficients must be nonnegative".into()));
        }
        if !(self.stiction_breakaway_ratio >= 1.0) {
            return Err(ControlError::DimensionMismatch("stiction breakaway ratio must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest friction torque a stuck joint can hold.
    pub fn breakaway(&self, joint: usize) -> f64 {
        self.stiction_breakaway_ratio * self.coulomb[joint]
    }

    pub fn is_frictionless(&self) -> bool {
        self.coulomb.iter().chain(self.viscous.iter()).all(|c| *c == 0.0)
    }
}

/// Friction torque for one joint.
pub fn joint_friction(model: &FrictionModel, joint: usize, qdot: f64, tau_applied: f64) -> f64 {
    if qdot.abs() > STICTION_VELOCITY {
        -qdot.signum() * model.coulomb[joint] - model.viscous[joint] * qdot
    } else {
        let limit = model.breakaway(joint);
        -tau_applied.clamp(-limit, limit)
    }
}

/// Friction torques opposing motion (moving joints) or the applied torque
/// up to the breakaway level (stuck joints).
pub fn friction_torque(model: &FrictionModel, qdot: &Vector, tau_applied: &Vector) -> Result<Vector, ControlError> {
    check_len(qdot, model.joints(), "joint rates")?;
    check_len(tau_applied, model.joints(), "applied torques")?;
    Ok(Vector::from_fn(model.joints(), |i, _| joint_friction(model, i, qdot[i], tau_applied[i])))
}
