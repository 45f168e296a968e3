//! Contact-constrained coupled dynamics `A qdd + h = tau + J_c^T lambda`.
//!
//! [`decouple`] splits the generalized force `A qdd + h` into joint torques
//! and a support force using the QR factorization of `J_c^T`. The rest of the
//! module is a planar serial-chain plant that supplies `A`, `h` and `J_c`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, max_abs, Matrix, NumericsError, Vector};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad model: {0}")]
    BadModel(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `S_k = [I_k, 0]` and `S_kc = [0, I_{n-k}]`.
pub fn selection_matrices(k: usize, n: usize) -> Result<(Matrix, Matrix), DynamicsError> {
    if k == 0 || k > n {
        return Err(DynamicsError::DimensionMismatch(format!(
            "selection matrices need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut s_k = Matrix::zeros(k, n);
    s_k.view_mut((0, 0), (k, k)).fill_with_identity();
    let mut s_kc = Matrix::zeros(n - k, n);
    s_kc.view_mut((0, k), (n - k, n - k)).fill_with_identity();
    Ok((s_k, s_kc))
}

/// `N = I - W^+ W` with the inertia-weighted pseudo-inverse of `W = S_kc Q^T`.
pub fn null_projection(s_kc_qt: &Matrix, a: &Matrix) -> Result<Matrix, DynamicsError> {
    let n = a.nrows();
    if s_kc_qt.ncols() != n {
        return Err(DynamicsError::DimensionMismatch(format!(
            "projection rows have {} columns, inertia is {n}x{n}",
            s_kc_qt.ncols()
        )));
    }
    let w_pinv = numerics::dyn_consistent_pinv(s_kc_qt, a)?;
    Ok(Matrix::identity(n, n) - w_pinv * s_kc_qt)
}

/// Inertia, bias forces, contact Jacobian and accelerations at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSnapshot {
    pub a: Matrix,
    pub h_bias: Vector,
    pub j_c: Matrix,
    pub qdd: Vector,
}

impl DynamicsSnapshot {
    pub fn new(a: Matrix, h_bias: Vector, j_c: Matrix, qdd: Vector) -> Result<Self, DynamicsError> {
        let n = a.nrows();
        if !a.is_square() || h_bias.len() != n || qdd.len() != n || j_c.ncols() != n {
            return Err(DynamicsError::DimensionMismatch(format!(
                "A {}x{}, h {}, qdd {}, J_c {}x{}",
                a.nrows(),
                a.ncols(),
                h_bias.len(),
                qdd.len(),
                j_c.nrows(),
                j_c.ncols()
            )));
        }
        if j_c.nrows() == 0 || j_c.nrows() > n {
            return Err(DynamicsError::DimensionMismatch(format!(
                "contact rows k={} must satisfy 1 <= k <= n={n}",
                j_c.nrows()
            )));
        }
        Ok(DynamicsSnapshot { a, h_bias, j_c, qdd })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn k(&self) -> usize {
        self.j_c.nrows()
    }

    /// `A qdd + h`.
    pub fn generalized_force(&self) -> Vector {
        &self.a * &self.qdd + &self.h_bias
    }

    /// Reorder joints: entry `i` of the result is joint `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self, DynamicsError> {
        let n = self.n();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(DynamicsError::DimensionMismatch("invalid joint permutation".into()));
        }
        Ok(DynamicsSnapshot {
            a: Matrix::from_fn(n, n, |r, c| self.a[(order[r], order[c])]),
            h_bias: Vector::from_fn(n, |r, _| self.h_bias[order[r]]),
            j_c: Matrix::from_fn(self.k(), n, |r, c| self.j_c[(r, order[c])]),
            qdd: Vector::from_fn(n, |r, _| self.qdd[order[r]]),
        })
    }
}

/// One feasible split of `A qdd + h` into joint torques and support force.
///
/// The split is not unique: any torque sharing the unconstrained components
/// of `A qdd + h` is admissible. This one takes the torque from the range of
/// the inertia-weighted pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledSolution {
    pub tau: Vector,
    pub lambda: Vector,
    pub n_kc: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl DecoupledSolution {
    /// `(tau_s, tau_h)` for a joint vector ordered as `[q_s, q_h]`.
    pub fn split_tau(&self, s: usize) -> (Vector, Vector) {
        let n = self.tau.len();
        let s = s.min(n);
        (self.tau.rows(0, s).clone_owned(), self.tau.rows(s, n - s).clone_owned())
    }

    /// `R^-1 S_k Q^T (A qdd + h - tau)`, the contact force read off the
    /// constrained rows directly.
    pub fn lambda_from_constrained_rows(&self, snapshot: &DynamicsSnapshot) -> Vector {
        let k = snapshot.k();
        let rhs = self.q.columns(0, k).transpose() * (snapshot.generalized_force() - &self.tau);
        solve_upper(&self.r, &rhs)
    }
}

fn solve_upper(r: &Matrix, b: &Vector) -> Vector {
    r.solve_upper_triangular(b)
        .expect("R has a nonzero diagonal after a successful full-rank QR")
}

/// Split `A qdd + h` into `tau` and `lambda` through `J_c^T = Q [R; 0]`.
pub fn decouple(snapshot: &DynamicsSnapshot) -> Result<DecoupledSolution, DynamicsError> {
    let (n, k) = (snapshot.n(), snapshot.k());
    let qr = numerics::qr_full(&snapshot.j_c.transpose())?;
    let (s_k, s_kc) = selection_matrices(k, n)?;
    let qt = qr.q.transpose();
    let w = &s_kc * &qt;
    let b = snapshot.generalized_force();
    let n_kc = null_projection(&w, &snapshot.a)?;
    let tau = &b - &n_kc * &b;
    let lambda = solve_upper(&qr.r, &(&s_k * &qt * &n_kc * &b));
    Ok(DecoupledSolution {
        tau,
        lambda,
        n_kc,
        q: qr.q,
        r: qr.r,
    })
}

/// `||A qdd + h - tau - J_c^T lambda||_inf`.
pub fn decoupling_residual(snapshot: &DynamicsSnapshot, sol: &DecoupledSolution) -> f64 {
    let r = snapshot.generalized_force() - &sol.tau - snapshot.j_c.transpose() * &sol.lambda;
    r.amax()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Prismatic,
}

/// A link of a planar chain in the vertical `x`-`z` plane.
///
/// A revolute joint rotates the link about the out-of-plane axis. A prismatic
/// joint slides the link origin along the direction `axis` (radians, relative
/// to the parent orientation) without rotating it. The link body extends
/// `length` along its orientation with its centre of mass at `com`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    #[serde(default)]
    pub name: String,
    pub joint: JointType,
    pub mass: f64,
    pub length: f64,
    /// Distance of the centre of mass from the joint; defaults to `length`.
    #[serde(default)]
    pub com: Option<f64>,
    /// Rotational inertia about the centre of mass.
    #[serde(default)]
    pub inertia: f64,
    #[serde(default)]
    pub rotor_inertia: f64,
    #[serde(default)]
    pub axis: f64,
    /// Joint belongs to the human (scripted) rather than the limb.
    #[serde(default)]
    pub human: bool,
}

impl Link {
    pub fn revolute(mass: f64, length: f64) -> Self {
        Link {
            name: String::new(),
            joint: JointType::Revolute,
            mass,
            length,
            com: None,
            inertia: 0.0,
            rotor_inertia: 0.0,
            axis: 0.0,
            human: false,
        }
    }

    pub fn prismatic(mass: f64, length: f64, axis: f64) -> Self {
        Link {
            joint: JointType::Prismatic,
            axis,
            ..Link::revolute(mass, length)
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn with_com(mut self, com: f64) -> Self {
        self.com = Some(com);
        self
    }

    pub fn human(mut self) -> Self {
        self.human = true;
        self
    }

    pub fn com_distance(&self) -> f64 {
        self.com.unwrap_or(self.length)
    }
}

/// Planar serial chain with gravity along `-z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarPlant {
    /// Orientation of the base frame, radians from `+x` towards `+z`.
    #[serde(default)]
    pub base_angle: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub links: Vec<Link>,
}

fn default_gravity() -> f64 {
    GRAVITY
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "x")]
    X,
    #[serde(rename = "z")]
    Z,
    #[serde(rename = "theta")]
    Theta,
}

/// A constrained direction at the support point, with sign.
///
/// The contact force `lambda` is measured along this direction, acting on
/// the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactDirection {
    pub axis: Axis,
    pub sign: f64,
}

impl ContactDirection {
    pub fn parse(s: &str) -> Option<Self> {
        let (sign, rest) = match s.trim().strip_prefix('-') {
            Some(r) => (-1.0, r),
            None => (1.0, s.trim().trim_start_matches('+')),
        };
        let axis = match rest {
            "x" => Axis::X,
            "z" => Axis::Z,
            "theta" => Axis::Theta,
            _ => return None,
        };
        Some(ContactDirection { axis, sign })
    }
}

impl Serialize for ContactDirection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let name = match self.axis {
            Axis::X => "x",
            Axis::Z => "z",
            Axis::Theta => "theta",
        };
        let prefix = if self.sign < 0.0 { "-" } else { "" };
        s.serialize_str(&format!("{prefix}{name}"))
    }
}

impl<'de> Deserialize<'de> for ContactDirection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContactDirection::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown contact direction '{s}'")))
    }
}

/// Support point and constrained directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactSelector {
    /// Link name or decimal index.
    pub link: String,
    /// Distance along the link; defaults to its tip.
    #[serde(default)]
    pub point: Option<f64>,
    pub directions: Vec<ContactDirection>,
}

impl ContactSelector {
    pub fn tip(link: &str, directions: &[&str]) -> Self {
        ContactSelector {
            link: link.to_string(),
            point: None,
            directions: directions
                .iter()
                .map(|d| ContactDirection::parse(d).expect("valid direction"))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    origin: [f64; 2],
    theta: f64,
    omega: f64,
    vel: [f64; 2],
    acc_bias: [f64; 2],
}

/// Position, velocity and velocity-product acceleration of a point on a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub pos: [f64; 2],
    pub theta: f64,
    pub vel: [f64; 2],
    pub omega: f64,
    /// Acceleration at zero joint acceleration (`Jdot * qdot`).
    pub acc_bias: [f64; 2],
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

impl PlanarPlant {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.links.is_empty() {
            return Err(DynamicsError::BadModel("plant has no links".into()));
        }
        for (i, l) in self.links.iter().enumerate() {
            let label = if l.name.is_empty() { format!("link {i}") } else { l.name.clone() };
            if !(l.mass > 0.0) || !l.mass.is_finite() {
                return Err(DynamicsError::BadModel(format!("{label}: mass must be positive")));
            }
            if !(l.length > 0.0) || !l.length.is_finite() {
                return Err(DynamicsError::BadModel(format!("{label}: length must be positive")));
            }
            if l.inertia < 0.0 || l.rotor_inertia < 0.0 || !l.com_distance().is_finite() {
                return Err(DynamicsError::BadModel(format!("{label}: inertias must be nonnegative")));
            }
        }
        Ok(())
    }

    /// Indices of limb joints followed by human joints.
    pub fn limb_first_order(&self) -> Vec<usize> {
        let limb = (0..self.dof()).filter(|&i| !self.links[i].human);
        let human = (0..self.dof()).filter(|&i| self.links[i].human);
        limb.chain(human).collect()
    }

    pub fn limb_joints(&self) -> Vec<usize> {
        (0..self.dof()).filter(|&i| !self.links[i].human).collect()
    }

    pub fn human_joints(&self) -> Vec<usize> {
        (0..self.dof()).filter(|&i| self.links[i].human).collect()
    }

    pub fn link_index(&self, link: &str) -> Result<usize, DynamicsError> {
        if let Some(i) = self.links.iter().position(|l| l.name == link) {
            return Ok(i);
        }
        match link.parse::<usize>() {
            Ok(i) if i < self.dof() => Ok(i),
            _ => Err(DynamicsError::BadModel(format!("unknown link '{link}'"))),
        }
    }

    fn check_state(&self, q: &Vector, qdot: &Vector) -> Result<(), DynamicsError> {
        if q.len() != self.dof() || qdot.len() != self.dof() {
            return Err(DynamicsError::DimensionMismatch(format!(
                "plant has {} joints, got q {} and qdot {}",
                self.dof(),
                q.len(),
                qdot.len()
            )));
        }
        Ok(())
    }

    fn frames(&self, q: &Vector, qdot: &Vector) -> Vec<Frame> {
        let mut out = Vec::with_capacity(self.dof());
        let mut end = [0.0, 0.0];
        let mut end_vel = [0.0, 0.0];
        let mut end_acc = [0.0, 0.0];
        let mut theta = self.base_angle;
        let mut omega = 0.0;
        for (i, link) in self.links.iter().enumerate() {
            let (origin, vel, acc_bias) = match link.joint {
                JointType::Revolute => {
                    theta += q[i];
                    omega += qdot[i];
                    (end, end_vel, end_acc)
                }
                JointType::Prismatic => {
                    let e = unit(theta + link.axis);
                    let ep = perp(e);
                    let origin = [end[0] + q[i] * e[0], end[1] + q[i] * e[1]];
                    let vel = [
                        end_vel[0] + qdot[i] * e[0] + q[i] * omega * ep[0],
                        end_vel[1] + qdot[i] * e[1] + q[i] * omega * ep[1],
                    ];
                    let acc = [
                        end_acc[0] + 2.0 * qdot[i] * omega * ep[0] - q[i] * omega * omega * e[0],
                        end_acc[1] + 2.0 * qdot[i] * omega * ep[1] - q[i] * omega * omega * e[1],
                    ];
                    (origin, vel, acc)
                }
            };
            let frame = Frame { origin, theta, omega, vel, acc_bias };
            let tip = point_on(&frame, link.length);
            end = tip.pos;
            end_vel = tip.vel;
            end_acc = tip.acc_bias;
            out.push(frame);
        }
        out
    }

    /// Kinematic state of the point `distance` along link `link`.
    pub fn point_state(
        &self,
        q: &Vector,
        qdot: &Vector,
        link: usize,
        distance: f64,
    ) -> Result<PointState, DynamicsError> {
        self.check_state(q, qdot)?;
        if link >= self.dof() {
            return Err(DynamicsError::BadModel(format!("unknown link index {link}")));
        }
        Ok(point_on(&self.frames(q, qdot)[link], distance))
    }

    /// Linear (2 x n) and angular (1 x n) Jacobians of a point on link `link`.
    pub fn point_jacobian(&self, q: &Vector, link: usize, distance: f64) -> Result<(Matrix, Matrix), DynamicsError> {
        let zero = Vector::zeros(self.dof());
        self.check_state(q, &zero)?;
        if link >= self.dof() {
            return Err(DynamicsError::BadModel(format!("unknown link index {link}")));
        }
        let frames = self.frames(q, &zero);
        Ok(self.jacobians_with(&frames, link, point_on(&frames[link], distance).pos))
    }

    fn jacobians_with(&self, frames: &[Frame], link: usize, p: [f64; 2]) -> (Matrix, Matrix) {
        let n = self.dof();
        let mut jv = Matrix::zeros(2, n);
        let mut jw = Matrix::zeros(1, n);
        let mut parent_theta = self.base_angle;
        for j in 0..=link {
            match self.links[j].joint {
                JointType::Revolute => {
                    let o = frames[j].origin;
                    let col = perp([p[0] - o[0], p[1] - o[1]]);
                    jv[(0, j)] = col[0];
                    jv[(1, j)] = col[1];
                    jw[(0, j)] = 1.0;
                }
                JointType::Prismatic => {
                    let e = unit(parent_theta + self.links[j].axis);
                    jv[(0, j)] = e[0];
                    jv[(1, j)] = e[1];
                }
            }
            parent_theta = frames[j].theta;
        }
        (jv, jw)
    }

    /// Inertia matrix `A(q)` and bias vector `h(q, qdot)` (Coriolis,
    /// centrifugal and gravity).
    pub fn dynamics(&self, q: &Vector, qdot: &Vector) -> Result<(Matrix, Vector), DynamicsError> {
        self.validate()?;
        self.check_state(q, qdot)?;
        let n = self.dof();
        let frames = self.frames(q, qdot);
        let mut a = Matrix::zeros(n, n);
        let mut h = Vector::zeros(n);
        for (i, link) in self.links.iter().enumerate() {
            let com = point_on(&frames[i], link.com_distance());
            let (jv, jw) = self.jacobians_with(&frames, i, com.pos);
            a += link.mass * jv.transpose() * &jv;
            if link.inertia > 0.0 {
                a += link.inertia * jw.transpose() * &jw;
            }
            let force = Vector::from_vec(vec![
                link.mass * com.acc_bias[0],
                link.mass * (com.acc_bias[1] + self.gravity),
            ]);
            h += jv.transpose() * force;
            a[(i, i)] += link.rotor_inertia;
        }
        Ok((a, h))
    }

    /// Gravity part of the bias vector.
    pub fn gravity_torque(&self, q: &Vector) -> Result<Vector, DynamicsError> {
        let (_, h) = self.dynamics(q, &Vector::zeros(self.dof()))?;
        Ok(h)
    }

    pub fn potential_energy(&self, q: &Vector) -> Result<f64, DynamicsError> {
        let zero = Vector::zeros(self.dof());
        self.check_state(q, &zero)?;
        let frames = self.frames(q, &zero);
        Ok(self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| l.mass * self.gravity * point_on(&frames[i], l.com_distance()).pos[1])
            .sum())
    }

    pub fn kinetic_energy(&self, q: &Vector, qdot: &Vector) -> Result<f64, DynamicsError> {
        let (a, _) = self.dynamics(q, qdot)?;
        Ok(0.5 * qdot.dot(&(a * qdot)))
    }

    fn contact_point(&self, contact: &ContactSelector) -> Result<(usize, f64), DynamicsError> {
        if contact.directions.is_empty() || contact.directions.len() > 3 {
            return Err(DynamicsError::BadModel(format!(
                "contact must select 1 to 3 directions, got {}",
                contact.directions.len()
            )));
        }
        let link = self.link_index(&contact.link)?;
        Ok((link, contact.point.unwrap_or(self.links[link].length)))
    }

    /// Rows of the support-point Jacobian along the selected directions.
    pub fn contact_jacobian(&self, q: &Vector, contact: &ContactSelector) -> Result<Matrix, DynamicsError> {
        let (link, d) = self.contact_point(contact)?;
        let (jv, jw) = self.point_jacobian(q, link, d)?;
        let mut out = Matrix::zeros(contact.directions.len(), self.dof());
        for (r, dir) in contact.directions.iter().enumerate() {
            let row = match dir.axis {
                Axis::X => jv.row(0).clone_owned(),
                Axis::Z => jv.row(1).clone_owned(),
                Axis::Theta => jw.row(0).clone_owned(),
            };
            out.set_row(r, &(row * dir.sign));
        }
        Ok(out)
    }

    /// Support-point coordinates along the selected directions, and the
    /// matching `Jdot_c * qdot`.
    pub fn contact_state(
        &self,
        q: &Vector,
        qdot: &Vector,
        contact: &ContactSelector,
    ) -> Result<(Vector, Vector), DynamicsError> {
        let (link, d) = self.contact_point(contact)?;
        let ps = self.point_state(q, qdot, link, d)?;
        let k = contact.directions.len();
        let mut pos = Vector::zeros(k);
        let mut bias = Vector::zeros(k);
        for (r, dir) in contact.directions.iter().enumerate() {
            let (p, b) = match dir.axis {
                Axis::X => (ps.pos[0], ps.acc_bias[0]),
                Axis::Z => (ps.pos[1], ps.acc_bias[1]),
                Axis::Theta => (ps.theta, 0.0),
            };
            pos[r] = dir.sign * p;
            bias[r] = dir.sign * b;
        }
        Ok((pos, bias))
    }
}

fn point_on(frame: &Frame, distance: f64) -> PointState {
    let u = unit(frame.theta);
    let up = perp(u);
    let w = frame.omega;
    PointState {
        pos: [frame.origin[0] + distance * u[0], frame.origin[1] + distance * u[1]],
        theta: frame.theta,
        vel: [frame.vel[0] + distance * w * up[0], frame.vel[1] + distance * w * up[1]],
        omega: w,
        acc_bias: [
            frame.acc_bias[0] - distance * w * w * u[0],
            frame.acc_bias[1] - distance * w * w * u[1],
        ],
    }
}

/// `(A, h)` of a planar chain; see [`PlanarPlant::dynamics`].
pub fn plant_dynamics(model: &PlanarPlant, q: &Vector, qdot: &Vector) -> Result<(Matrix, Vector), DynamicsError> {
    model.dynamics(q, qdot)
}

/// See [`PlanarPlant::contact_jacobian`].
pub fn contact_jacobian(model: &PlanarPlant, q: &Vector, contact: &ContactSelector) -> Result<Matrix, DynamicsError> {
    model.validate()?;
    model.contact_jacobian(q, contact)
}

/// `max |A - A^T|`, used by callers checking inertia symmetry.
pub fn asymmetry(a: &Matrix) -> f64 {
    max_abs(&(a - a.transpose()))
}
