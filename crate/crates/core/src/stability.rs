//! Quasi-static stability of a body held by a support chain.
//!
//! Around an equilibrium pose `p_bar` the body sees the potential
//! `U(p) = m g z_c(p) - tau_bar^T dq + 1/2 dq^T K_q dq` with
//! `dq = ik(p) - q_bar`. Its Hessian at `p_bar` is
//! `K_p = m g E_z + J^T K_q J - sum_i tau_bar_i H_i`, and the posture is
//! stable when `K_p` is positive semi-definite.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::GRAVITY;
use crate::numerics::{self, FdStep, Matrix, NumericsError, Vector};

pub const POSE_DIM: usize = 6;

/// Relative disagreement between the assembled `K_p` and the
/// finite-difference Hessian of `U` above which the report flags a mismatch.
pub const ORACLE_TOL: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("inverse kinematics failed: {0}")]
    IkFailure(String),
    #[error("invalid posture: {0}")]
    BadPosture(String),
    #[error("no servo stiffness up to {alpha_max} reaches margin {margin}")]
    Unachievable { alpha_max: f64, margin: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Inverse kinematics and centre-of-mass height of a supported body.
pub trait SupportChain: Send + Sync {
    fn joints(&self) -> usize;
    fn ik(&self, p: &Vector) -> Result<Vector, StabilityError>;
    fn com_height(&self, p: &Vector) -> Result<f64, StabilityError>;
}

type IkFn = dyn Fn(&Vector) -> Result<Vector, StabilityError> + Send + Sync;
type HeightFn = dyn Fn(&Vector) -> Result<f64, StabilityError> + Send + Sync;

/// Support chain given as a pair of closures.
pub struct ClosureChain {
    joints: usize,
    ik: Box<IkFn>,
    z: Box<HeightFn>,
}

impl ClosureChain {
    pub fn new(
        joints: usize,
        ik: impl Fn(&Vector) -> Result<Vector, StabilityError> + Send + Sync + 'static,
        z: impl Fn(&Vector) -> Result<f64, StabilityError> + Send + Sync + 'static,
    ) -> Self {
        ClosureChain {
            joints,
            ik: Box::new(ik),
            z: Box::new(z),
        }
    }
}

impl SupportChain for ClosureChain {
    fn joints(&self) -> usize {
        self.joints
    }
    fn ik(&self, p: &Vector) -> Result<Vector, StabilityError> {
        (self.ik)(p)
    }
    fn com_height(&self, p: &Vector) -> Result<f64, StabilityError> {
        (self.z)(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    /// One prismatic joint per pose coordinate: `q = p`.
    Prismatic,
    /// A revolute-prismatic leg from the origin to `(x, z)`:
    /// `q0 = atan2(z, x)`, `q1 = hypot(x, z)`, remaining coordinates direct.
    Polar,
}

/// Built-in support chains. The centre of mass sits `com_offset` above the
/// pose reference point along the body's vertical axis, so
/// `z_c = z + com_offset * cos(rx) * cos(ry)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametricChain {
    pub kind: ChainKind,
    #[serde(default)]
    pub com_offset: f64,
}

fn check_pose(p: &Vector) -> Result<(), StabilityError> {
    if p.len() != POSE_DIM || p.iter().any(|v| !v.is_finite()) {
        return Err(StabilityError::IkFailure(format!("pose must be 6 finite values, got {}", p.len())));
    }
    Ok(())
}

impl SupportChain for ParametricChain {
    fn joints(&self) -> usize {
        POSE_DIM
    }

    fn ik(&self, p: &Vector) -> Result<Vector, StabilityError> {
        check_pose(p)?;
        match self.kind {
            ChainKind::Prismatic => Ok(p.clone()),
            ChainKind::Polar => {
                let r = p[0].hypot(p[2]);
                if r < 1e-9 {
                    return Err(StabilityError::IkFailure("leg length vanishes at the pivot".into()));
                }
                let mut q = p.clone();
                q[0] = p[2].atan2(p[0]);
                q[2] = r;
                // reorder so that q = (angle, length, y, rx, ry, rz)
                q.swap_rows(1, 2);
                Ok(q)
            }
        }
    }

    fn com_height(&self, p: &Vector) -> Result<f64, StabilityError> {
        check_pose(p)?;
        Ok(p[2] + self.com_offset * p[3].cos() * p[4].cos())
    }
}

/// Equilibrium pose and joint state of a supported body.
#[derive(Clone)]
pub struct SupportPosture {
    pub p_bar: Vector,
    pub q_bar: Vector,
    pub tau_bar: Vector,
    pub k_q: Matrix,
    pub mass: f64,
    pub gravity: f64,
    pub chain: Arc<dyn SupportChain>,
}

impl std::fmt::Debug for SupportPosture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SupportPosture")
            .field("p_bar", &self.p_bar)
            .field("q_bar", &self.q_bar)
            .field("tau_bar", &self.tau_bar)
            .field("k_q", &self.k_q)
            .field("mass", &self.mass)
            .finish_non_exhaustive()
    }
}

impl SupportPosture {
    pub fn new(
        chain: Arc<dyn SupportChain>,
        p_bar: Vector,
        tau_bar: Vector,
        k_q: Matrix,
        mass: f64,
    ) -> Result<Self, StabilityError> {
        check_pose(&p_bar)?;
        let n = chain.joints();
        if tau_bar.len() != n || k_q.shape() != (n, n) {
            return Err(StabilityError::BadPosture(format!(
                "chain has {n} joints; tau_bar has {}, K_q is {}x{}",
                tau_bar.len(),
                k_q.nrows(),
                k_q.ncols()
            )));
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(StabilityError::BadPosture("mass must be positive".into()));
        }
        let tol = 1e-9 * (1.0 + numerics::max_abs(&k_q));
        let verdict = numerics::psd_check(&k_q, tol).map_err(|_| StabilityError::BadPosture("K_q must be symmetric".into()))?;
        if !verdict.is_psd {
            return Err(StabilityError::BadPosture("K_q must be positive semi-definite".into()));
        }
        let q_bar = chain.ik(&p_bar)?;
        Ok(SupportPosture {
            p_bar,
            q_bar,
            tau_bar,
            k_q,
            mass,
            gravity: GRAVITY,
            chain,
        })
    }

    /// Posture whose joint torques hold the body still with no human force:
    /// `tau_bar` solves `J^T tau_bar = m g grad z_c` (least squares).
    pub fn at_equilibrium(chain: Arc<dyn SupportChain>, p_bar: Vector, k_q: Matrix, mass: f64) -> Result<Self, StabilityError> {
        let n = chain.joints();
        let mut posture = SupportPosture::new(chain, p_bar, Vector::zeros(n), k_q, mass)?;
        let j = posture.jacobian()?;
        let grad = posture.com_gradient(&posture.p_bar)?;
        posture.tau_bar = numerics::svd_pinv(&j.transpose()) * (grad * (posture.mass * posture.gravity));
        Ok(posture)
    }

    /// `dq/dp` at `p_bar`.
    pub fn jacobian(&self) -> Result<Matrix, StabilityError> {
        numerics::finite_diff_jacobian(|p| self.chain.ik(p), &self.p_bar, FdStep::Auto)
    }

    pub fn com_gradient(&self, p: &Vector) -> Result<Vector, StabilityError> {
        let j = numerics::finite_diff_jacobian(
            |p| self.chain.com_height(p).map(|z| Vector::from_element(1, z)),
            p,
            FdStep::Auto,
        )?;
        Ok(j.row(0).transpose())
    }

    fn delta_q(&self, p: &Vector) -> Result<Vector, StabilityError> {
        let q = self.chain.ik(p)?;
        Ok(q - &self.q_bar)
    }
}

/// `-m g grad z_c + F_h + J^T tau_bar` at `p_bar`: gravity acts along
/// `-grad z_c`, so an upward `F_h = m g` or `tau_bar` balances it.
pub fn equilibrium_residual(posture: &SupportPosture, f_h: &Vector) -> Result<Vector, StabilityError> {
    if f_h.len() != POSE_DIM {
        return Err(StabilityError::BadPosture("human force must be a 6-vector".into()));
    }
    let j = posture.jacobian()?;
    let grad = posture.com_gradient(&posture.p_bar)?;
    Ok(-grad * (posture.mass * posture.gravity) + f_h + j.transpose() * &posture.tau_bar)
}

/// `U(p) = m g z_c(p) - tau_bar^T dq + 1/2 dq^T K_q dq`.
pub fn potential(posture: &SupportPosture, p: &Vector) -> Result<f64, StabilityError> {
    let dq = posture.delta_q(p)?;
    let z = posture.chain.com_height(p)?;
    Ok(posture.mass * posture.gravity * z - posture.tau_bar.dot(&dq) + 0.5 * dq.dot(&(&posture.k_q * &dq)))
}

/// Runs a fallible scalar map through the finite-difference Hessian,
/// surfacing the map's own error instead of a generic non-finite one.
fn hessian_of<F>(f: F, p: &Vector) -> Result<Matrix, StabilityError>
where
    F: Fn(&Vector) -> Result<f64, StabilityError>,
{
    let failure = std::cell::RefCell::new(None);
    let h = numerics::finite_diff_hessian(
        |x| match f(x) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        p,
        FdStep::Auto,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(h?)
}

/// `E_z = d^2 z_c / dp dp`.
pub fn hessian_ez(posture: &SupportPosture, p: &Vector) -> Result<Matrix, StabilityError> {
    hessian_of(|x| posture.chain.com_height(x), p)
}

/// `H_i = d^2 q_i / dp dp`.
pub fn hessian_qi(posture: &SupportPosture, p: &Vector, i: usize) -> Result<Matrix, StabilityError> {
    if i >= posture.chain.joints() {
        return Err(StabilityError::BadPosture(format!("joint index {i} out of range")));
    }
    hessian_of(|x| posture.chain.ik(x).map(|q| q[i]), p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub k_p: Matrix,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub is_stable: bool,
    /// Smallest eigenvalue of `K_p`.
    pub margin: f64,
    /// Finite-difference Hessian of the potential at `p_bar`.
    pub k_p_oracle: Matrix,
    /// `max |K_p - oracle| / max(|K_p|, |oracle|)`.
    pub oracle_disagreement: f64,
    /// The oracle disagreed by more than [`ORACLE_TOL`].
    pub diagnostic_mismatch: bool,
    /// `max |residual|` with `F_h = 0`.
    pub equilibrium_residual: f64,
}

fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// The three gravity/servo/torque terms at `p_bar` without the servo term.
fn passive_terms(posture: &SupportPosture) -> Result<(Matrix, Matrix), StabilityError> {
    let p = &posture.p_bar;
    let mut base = hessian_ez(posture, p)? * (posture.mass * posture.gravity);
    for i in 0..posture.chain.joints() {
        let t = posture.tau_bar[i];
        if t != 0.0 {
            base -= hessian_qi(posture, p, i)? * t;
        }
    }
    let j = posture.jacobian()?;
    Ok((base, j))
}

/// Assemble `K_p = m g E_z + J^T K_q J - sum tau_i H_i` at `p_bar` and test it.
pub fn stiffness_matrix_kp(posture: &SupportPosture) -> Result<StabilityReport, StabilityError> {
    let (base, j) = passive_terms(posture)?;
    let k_p = base + j.transpose() * &posture.k_q * &j;
    let k_p = (&k_p + k_p.transpose()) * 0.5;
    let tol = 1e-8 * inf_norm(&k_p);
    let verdict = numerics::psd_check(&k_p, tol)?;
    let eigenvalues = numerics::symmetric_eigenvalues(&k_p);

    let oracle = hessian_of(|p| potential(posture, p), &posture.p_bar)?;
    let scale = numerics::max_abs(&k_p).max(numerics::max_abs(&oracle));
    let oracle_disagreement = if scale > 0.0 {
        numerics::max_abs(&(&k_p - &oracle)) / scale
    } else {
        0.0
    };
    let diagnostic_mismatch = oracle_disagreement > ORACLE_TOL;
    if diagnostic_mismatch {
        log::warn!("K_p disagrees with the potential Hessian (relative {oracle_disagreement:.3e})");
    }
    let residual = equilibrium_residual(posture, &Vector::zeros(POSE_DIM))?.amax();
    if residual > 1e-6 {
        log::warn!("posture is not at equilibrium (residual {residual:.3e} N)");
    }

    Ok(StabilityReport {
        k_p,
        eigenvalues,
        is_stable: verdict.is_psd,
        margin: verdict.min_eigenvalue,
        k_p_oracle: oracle,
        oracle_disagreement,
        diagnostic_mismatch,
        equilibrium_residual: residual,
    })
}

/// Smallest `alpha` such that `K_q = alpha I` gives `min eig(K_p) >= margin`,
/// found by bisection on `[0, alpha_max]`.
pub fn stabilizing_servo_stiffness(posture: &SupportPosture, margin: f64, alpha_max: f64) -> Result<f64, StabilityError> {
    let (base, j) = passive_terms(posture)?;
    let jtj = j.transpose() * &j;
    let sv = numerics::singular_values(&jtj);
    if sv.last().is_none_or(|s| *s <= 1e-12 * sv[0]) {
        return Err(StabilityError::BadPosture("J^T J must be full rank".into()));
    }
    let min_eig = |alpha: f64| {
        let k = &base + &jtj * alpha;
        numerics::symmetric_eigenvalues(&((&k + k.transpose()) * 0.5))[0]
    };
    if min_eig(0.0) >= margin {
        return Ok(0.0);
    }
    if min_eig(alpha_max) < margin {
        return Err(StabilityError::Unachievable { alpha_max, margin });
    }
    let (mut lo, mut hi) = (0.0, alpha_max);
    while hi - lo > 1e-6 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if min_eig(mid) >= margin {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use std::f64::consts::FRAC_PI_2;

    fn prismatic(d: f64) -> Arc<dyn SupportChain> {
        Arc::new(ParametricChain {
            kind: ChainKind::Prismatic,
            com_offset: d,
        })
    }

    fn pose(x: f64, z: f64) -> Vector {
        dvector![x, 0.0, z, 0.0, 0.0, 0.0]
    }

    fn vertical_slot(v: f64) -> Vector {
        let mut f = Vector::zeros(6);
        f[2] = v;
        f
    }

    #[test]
    fn residual_examples() {
        let m = 10.0;
        let mut tau = Vector::zeros(6);
        tau[2] = m * GRAVITY;
        let p = SupportPosture::new(prismatic(0.0), pose(0.0, 1.0), tau, Matrix::identity(6, 6), m).unwrap();
        assert!(equilibrium_residual(&p, &Vector::zeros(6)).unwrap().amax() < 1e-6);

        let p = SupportPosture::new(prismatic(0.0), pose(0.0, 1.0), Vector::zeros(6), Matrix::identity(6, 6), m).unwrap();
        let r = equilibrium_residual(&p, &Vector::zeros(6)).unwrap();
        assert!((r - vertical_slot(-m * GRAVITY)).amax() < 1e-6);

        let r = equilibrium_residual(&p, &vertical_slot(m * GRAVITY)).unwrap();
        assert!(r.amax() < 1e-6);
    }

    #[test]
    fn potential_examples() {
        let m = 5.0;
        let k = 300.0;
        let tau = 40.0;
        let z_bar = 0.8;
        let mut tau_bar = Vector::zeros(6);
        tau_bar[2] = tau;
        let kq = Matrix::identity(6, 6) * k;
        let p = SupportPosture::new(prismatic(0.0), pose(0.0, z_bar), tau_bar, kq, m).unwrap();
        assert!((potential(&p, &p.p_bar).unwrap() - m * GRAVITY * z_bar).abs() < 1e-12);
        for z in [0.7, 0.8, 0.95] {
            let expected = m * GRAVITY * z - tau * (z - z_bar) + 0.5 * k * (z - z_bar).powi(2);
            assert!((potential(&p, &pose(0.0, z)).unwrap() - expected).abs() < 1e-10);
        }
        let p = SupportPosture::new(prismatic(0.2), pose(0.0, z_bar), Vector::zeros(6), Matrix::zeros(6, 6), m).unwrap();
        let q = dvector![0.1, 0.0, 0.9, 0.3, 0.0, 0.0];
        let expected = m * GRAVITY * (0.9 + 0.2 * 0.3_f64.cos());
        assert!((potential(&p, &q).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn ez_examples() {
        let p = SupportPosture::new(prismatic(0.0), pose(0.0, 1.0), Vector::zeros(6), Matrix::zeros(6, 6), 1.0).unwrap();
        assert!(numerics::max_abs(&hessian_ez(&p, &p.p_bar).unwrap()) < 1e-8);

        let r = 0.7;
        let chain = Arc::new(ClosureChain::new(6, |p: &Vector| Ok(p.clone()), move |p: &Vector| Ok(r * p[3].sin())));
        let mut pb = Vector::zeros(6);
        pb[3] = FRAC_PI_2;
        let p = SupportPosture::new(chain, pb.clone(), Vector::zeros(6), Matrix::zeros(6, 6), 1.0).unwrap();
        let e = hessian_ez(&p, &pb).unwrap();
        assert!((e[(3, 3)] + r).abs() < 1e-6);
        assert_eq!(e, e.transpose());
    }

    #[test]
    fn qi_examples() {
        let p = SupportPosture::new(prismatic(0.0), pose(0.3, 1.0), Vector::zeros(6), Matrix::zeros(6, 6), 1.0).unwrap();
        for i in 0..6 {
            assert!(numerics::max_abs(&hessian_qi(&p, &p.p_bar, i).unwrap()) < 1e-8);
        }

        let polar: Arc<dyn SupportChain> = Arc::new(ParametricChain {
            kind: ChainKind::Polar,
            com_offset: 0.0,
        });
        let (x, z) = (0.6, 0.8);
        let p = SupportPosture::new(polar, pose(x, z), Vector::zeros(6), Matrix::zeros(6, 6), 1.0).unwrap();
        let h = hessian_qi(&p, &p.p_bar, 0).unwrap();
        let r4 = (x * x + z * z).powi(2);
        let hxx = 2.0 * x * z / r4;
        let hzz = -2.0 * x * z / r4;
        let hxz = (z * z - x * x) / r4;
        assert!((h[(0, 0)] - hxx).abs() <= 1e-4 * hxx.abs());
        assert!((h[(2, 2)] - hzz).abs() <= 1e-4 * hzz.abs());
        assert!((h[(0, 2)] - hxz).abs() <= 1e-4 * hxz.abs());
        assert_eq!(h, h.transpose());
        assert!(hessian_qi(&p, &p.p_bar, 6).is_err());
    }

    #[test]
    fn prismatic_support_kp_equals_kq() {
        let kq = Matrix::from_diagonal(&dvector![100.0, 200.0, 300.0, 10.0, 20.0, 30.0]);
        let p = SupportPosture::at_equilibrium(prismatic(0.0), pose(0.0, 1.0), kq.clone(), 20.0).unwrap();
        let rep = stiffness_matrix_kp(&p).unwrap();
        assert!(numerics::max_abs(&(&rep.k_p - &kq)) < 1e-4);
        assert!(rep.is_stable);
        assert!(!rep.diagnostic_mismatch);
        assert!(rep.equilibrium_residual < 1e-6);
    }

    #[test]
    fn zero_torque_drops_hessian_term() {
        let polar: Arc<dyn SupportChain> = Arc::new(ParametricChain {
            kind: ChainKind::Polar,
            com_offset: 0.3,
        });
        let kq = Matrix::identity(6, 6) * 50.0;
        let p = SupportPosture::new(polar, pose(0.5, 0.9), Vector::zeros(6), kq.clone(), 8.0).unwrap();
        let rep = stiffness_matrix_kp(&p).unwrap();
        let j = p.jacobian().unwrap();
        let expected = hessian_ez(&p, &p.p_bar).unwrap() * (8.0 * GRAVITY) + j.transpose() * kq * j;
        assert!(numerics::max_abs(&(rep.k_p - expected)) < 1e-9);
    }

    #[test]
    fn inverted_pendulum_is_unstable() {
        let p = SupportPosture::at_equilibrium(prismatic(0.5), pose(0.0, 1.0), Matrix::zeros(6, 6), 10.0).unwrap();
        let rep = stiffness_matrix_kp(&p).unwrap();
        assert!(!rep.is_stable);
        assert!(rep.margin < -10.0);
        assert!(!rep.diagnostic_mismatch, "disagreement {}", rep.oracle_disagreement);
    }

    #[test]
    fn servo_stiffness() {
        let kq = Matrix::identity(6, 6) * 1000.0;
        let p = SupportPosture::at_equilibrium(prismatic(0.0), pose(0.0, 1.0), kq, 10.0).unwrap();
        assert_eq!(stabilizing_servo_stiffness(&p, 0.0, 1e6).unwrap(), 0.0);

        // scalar case along rx: K_p = -c + alpha, c = m g d
        let (m, d) = (10.0, 0.5);
        let p = SupportPosture::at_equilibrium(prismatic(d), pose(0.0, 1.0), Matrix::zeros(6, 6), m).unwrap();
        let c = m * GRAVITY * d;
        for margin in [0.0, 5.0, 50.0] {
            let alpha = stabilizing_servo_stiffness(&p, margin, 1e6).unwrap();
            assert!((alpha - (c + margin)).abs() < 1e-3 * (c + margin), "{alpha}");
        }
        let a1 = stabilizing_servo_stiffness(&p, 1.0, 1e6).unwrap();
        let a2 = stabilizing_servo_stiffness(&p, 2.0, 1e6).unwrap();
        assert!(a2 >= a1);
        assert!(matches!(
            stabilizing_servo_stiffness(&p, 0.0, 1.0),
            Err(StabilityError::Unachievable { .. })
        ));
    }

    #[test]
    fn ik_failure_propagates() {
        let polar: Arc<dyn SupportChain> = Arc::new(ParametricChain {
            kind: ChainKind::Polar,
            com_offset: 0.0,
        });
        let r = SupportPosture::new(polar, pose(0.0, 0.0), Vector::zeros(6), Matrix::zeros(6, 6), 1.0);
        assert!(matches!(r, Err(StabilityError::IkFailure(_))));
    }

    #[test]
    fn bad_posture() {
        let r = SupportPosture::new(prismatic(0.0), pose(0.0, 1.0), Vector::zeros(6), -Matrix::identity(6, 6), 1.0);
        assert!(matches!(r, Err(StabilityError::BadPosture(_))));
        let r = SupportPosture::new(prismatic(0.0), pose(0.0, 1.0), Vector::zeros(6), Matrix::zeros(6, 6), 0.0);
        assert!(matches!(r, Err(StabilityError::BadPosture(_))));
    }
}
