//! Coupled human/limb kinematics.
//!
//! Joint vectors are split as `q_s = [q_s1, q_s2]` and `q_h = [q_h1, q_h2]`.
//! The coupled part follows `q_h2 = K q_s2`; the remaining part obeys a
//! closed-chain map `q_h1 = f(q_s1)` whose Jacobian is `j_hat`. Rates are
//! related through the block-diagonal matrix `[[j_hat, 0], [0, K]]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, FdStep, Matrix, NumericsError, Vector};

/// Condition-number ceiling used by [`desired_joint_rates`].
pub const DEFAULT_COND_MAX: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coupled Jacobian is singular (condition number {0:e})")]
    Singular(f64),
    #[error("invalid coupling: {0}")]
    InvalidCoupling(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DofKind {
    Rotational,
    Translational,
}

/// Index sets splitting a joint vector into a free part and a coupled part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub free: Vec<usize>,
    pub coupled: Vec<usize>,
}

impl Partition {
    /// First `n_free` indices free, the next `n_coupled` coupled.
    pub fn contiguous(n_free: usize, n_coupled: usize) -> Self {
        Partition {
            free: (0..n_free).collect(),
            coupled: (n_free..n_free + n_coupled).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.free.len() + self.coupled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Concatenated order `[free, coupled]`.
    pub fn order(&self) -> Vec<usize> {
        self.free.iter().chain(self.coupled.iter()).copied().collect()
    }

    fn validate(&self, n: usize, what: &str) -> Result<(), KinematicsError> {
        if self.len() != n {
            return Err(KinematicsError::DimensionMismatch(format!(
                "{what} partition covers {} indices, vector has {n}",
                self.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.free.iter().chain(self.coupled.iter()) {
            if i >= n || seen[i] {
                return Err(KinematicsError::DimensionMismatch(format!(
                    "{what} partition index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    fn gather(&self, v: &Vector) -> Vector {
        Vector::from_iterator(self.len(), self.order().into_iter().map(|i| v[i]))
    }

    fn scatter(&self, v: &Vector) -> Vector {
        let mut out = Vector::zeros(self.len());
        for (src, dst) in self.order().into_iter().enumerate() {
            out[dst] = v[src];
        }
        out
    }
}

/// Partitioned human and limb joint vectors with the coupling matrix `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConfig {
    pub q_s: Vector,
    pub q_h: Vector,
    pub srl_kinds: Vec<DofKind>,
    pub human_kinds: Vec<DofKind>,
    pub srl_partition: Partition,
    pub human_partition: Partition,
    pub k_couple: Matrix,
}

impl CoupledConfig {
    pub fn new(
        q_s: Vector,
        q_h: Vector,
        srl_kinds: Vec<DofKind>,
        human_kinds: Vec<DofKind>,
        srl_partition: Partition,
        human_partition: Partition,
        k_couple: Matrix,
    ) -> Result<Self, KinematicsError> {
        let cfg = CoupledConfig {
            q_s,
            q_h,
            srl_kinds,
            human_kinds,
            srl_partition,
            human_partition,
            k_couple,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        let (s, h) = (self.q_s.len(), self.q_h.len());
        if self.srl_kinds.len() != s || self.human_kinds.len() != h {
            return Err(KinematicsError::DimensionMismatch(
                "DoF kind tags must match joint vector lengths".into(),
            ));
        }
        self.srl_partition.validate(s, "limb")?;
        self.human_partition.validate(h, "human")?;
        let (kr, kc) = self.k_couple.shape();
        if kr != self.human_partition.coupled.len() || kc != self.srl_partition.coupled.len() {
            return Err(KinematicsError::DimensionMismatch(format!(
                "K is {kr}x{kc}, coupled sets are {}x{}",
                self.human_partition.coupled.len(),
                self.srl_partition.coupled.len()
            )));
        }
        if kr > 0 {
            let sv = numerics::singular_values(&self.k_couple);
            let rank = sv.iter().filter(|s| **s > 1e-12 * sv[0].max(f64::MIN_POSITIVE)).count();
            if rank < kr {
                return Err(KinematicsError::InvalidCoupling("K must have full row rank".into()));
            }
        }
        for (r, &hi) in self.human_partition.coupled.iter().enumerate() {
            for (c, &si) in self.srl_partition.coupled.iter().enumerate() {
                if self.k_couple[(r, c)] != 0.0 && self.human_kinds[hi] != self.srl_kinds[si] {
                    return Err(KinematicsError::InvalidCoupling(format!(
                        "human DoF {hi} ({:?}) coupled to limb DoF {si} ({:?})",
                        self.human_kinds[hi], self.srl_kinds[si]
                    )));
                }
            }
        }
        Ok(())
    }

    /// The free limb joints `q_s1`.
    pub fn q_s1(&self) -> Vector {
        Vector::from_iterator(
            self.srl_partition.free.len(),
            self.srl_partition.free.iter().map(|&i| self.q_s[i]),
        )
    }
}

/// A differentiable closed-chain map `q_h1 = f(q_s1)`.
pub trait ForwardMap {
    fn eval(&self, q: &Vector) -> Vector;

    /// Defaults to central differences.
    fn jacobian(&self, q: &Vector) -> Result<Matrix, KinematicsError> {
        numerics::finite_diff_jacobian(|p| Ok::<_, KinematicsError>(self.eval(p)), q, FdStep::Auto)
    }
}

/// Closure-backed map differentiated by central differences.
pub struct FnMap<F>(pub F);

impl<F: Fn(&Vector) -> Vector> ForwardMap for FnMap<F> {
    fn eval(&self, q: &Vector) -> Vector {
        (self.0)(q)
    }
}

/// End point `(x, z)` of a planar revolute chain with the given link lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarChainMap {
    pub lengths: Vec<f64>,
}

impl ForwardMap for PlanarChainMap {
    fn eval(&self, q: &Vector) -> Vector {
        let mut theta = 0.0;
        let (mut x, mut z) = (0.0, 0.0);
        for (l, qi) in self.lengths.iter().zip(q.iter()) {
            theta += qi;
            x += l * theta.cos();
            z += l * theta.sin();
        }
        Vector::from_vec(vec![x, z])
    }

    fn jacobian(&self, q: &Vector) -> Result<Matrix, KinematicsError> {
        let n = self.lengths.len();
        if q.len() != n {
            return Err(KinematicsError::DimensionMismatch(format!(
                "chain has {n} joints, got {} positions",
                q.len()
            )));
        }
        let mut angles = Vec::with_capacity(n);
        let mut theta = 0.0;
        for qi in q.iter() {
            theta += qi;
            angles.push(theta);
        }
        let mut jac = Matrix::zeros(2, n);
        for j in 0..n {
            for (l, a) in self.lengths[j..].iter().zip(&angles[j..]) {
                jac[(0, j)] -= l * a.sin();
                jac[(1, j)] += l * a.cos();
            }
        }
        Ok(jac)
    }
}

/// Assembled coupled Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledJacobian {
    pub j_hat: Matrix,
    pub k_couple: Matrix,
    /// `[[j_hat, 0], [0, K]]` in partitioned order.
    pub block: Matrix,
    pub srl_partition: Partition,
    pub human_partition: Partition,
}

impl CoupledJacobian {
    /// Assemble from blocks with contiguous partitions.
    pub fn from_blocks(j_hat: Matrix, k_couple: Matrix) -> Self {
        let (h1, s1) = j_hat.shape();
        let (h2, s2) = k_couple.shape();
        let mut block = Matrix::zeros(h1 + h2, s1 + s2);
        block.view_mut((0, 0), (h1, s1)).copy_from(&j_hat);
        block.view_mut((h1, s1), (h2, s2)).copy_from(&k_couple);
        CoupledJacobian {
            j_hat,
            k_couple,
            block,
            srl_partition: Partition::contiguous(s1, s2),
            human_partition: Partition::contiguous(h1, h2),
        }
    }

    pub fn is_square(&self) -> bool {
        self.block.is_square()
    }

    /// Block inverse `[[j_hat^-1 or j_hat^+, 0], [0, K^-1]]` in partitioned order.
    pub fn block_inverse(&self) -> Result<Matrix, KinematicsError> {
        let (h1, s1) = self.j_hat.shape();
        let (h2, s2) = self.k_couple.shape();
        let inv_hat = invert_block(&self.j_hat)?;
        let inv_k = invert_block(&self.k_couple)?;
        let mut out = Matrix::zeros(s1 + s2, h1 + h2);
        out.view_mut((0, 0), (s1, h1)).copy_from(&inv_hat);
        out.view_mut((s1, h1), (s2, h2)).copy_from(&inv_k);
        Ok(out)
    }
}

fn invert_block(m: &Matrix) -> Result<Matrix, KinematicsError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Matrix::zeros(m.ncols(), m.nrows()));
    }
    if m.is_square() {
        m.clone()
            .lu()
            .try_inverse()
            .ok_or(KinematicsError::Singular(f64::INFINITY))
    } else {
        Ok(numerics::svd_pinv(m))
    }
}

/// Jacobian of the closed-chain map at the configuration, assembled with `K`.
pub fn coupled_jacobian(
    config: &CoupledConfig,
    fk_model: &dyn ForwardMap,
) -> Result<CoupledJacobian, KinematicsError> {
    config.validate()?;
    let q_s1 = config.q_s1();
    let j_hat = fk_model.jacobian(&q_s1)?;
    let h1 = config.human_partition.free.len();
    if j_hat.nrows() != h1 || j_hat.ncols() != q_s1.len() {
        return Err(KinematicsError::DimensionMismatch(format!(
            "forward map Jacobian is {}x{}, expected {h1}x{}",
            j_hat.nrows(),
            j_hat.ncols(),
            q_s1.len()
        )));
    }
    let mut jac = CoupledJacobian::from_blocks(j_hat, config.k_couple.clone());
    jac.srl_partition = config.srl_partition.clone();
    jac.human_partition = config.human_partition.clone();
    Ok(jac)
}

/// Condition number of the assembled block; `Singular` above `cond_max`.
pub fn singularity_guard(j: &CoupledJacobian, cond_max: f64) -> Result<f64, KinematicsError> {
    let cond = numerics::condition_number(&j.block);
    if !(cond <= cond_max) {
        return Err(KinematicsError::Singular(cond));
    }
    Ok(cond)
}

/// Limb joint rates reproducing the human rates `qdot_h`.
///
/// Both vectors use natural joint order; the partition stored in `j`
/// maps them onto the block structure.
pub fn desired_joint_rates(j: &CoupledJacobian, qdot_h: &Vector) -> Result<Vector, KinematicsError> {
    if qdot_h.len() != j.block.nrows() {
        return Err(KinematicsError::DimensionMismatch(format!(
            "expected {} human rates, got {}",
            j.block.nrows(),
            qdot_h.len()
        )));
    }
    if j.block.nrows() > j.block.ncols() {
        return Err(KinematicsError::DimensionMismatch(
            "limb must have at least as many DoFs as the human".into(),
        ));
    }
    singularity_guard(j, DEFAULT_COND_MAX)?;
    let inv = j.block_inverse()?;
    let rates = inv * j.human_partition.gather(qdot_h);
    Ok(j.srl_partition.scatter(&rates))
}

/// `q_s_actual + dt * desired_joint_rates(j, qdot_h)`.
pub fn desired_joint_positions(
    j: &CoupledJacobian,
    qdot_h: &Vector,
    q_s_actual: &Vector,
    dt: f64,
) -> Result<Vector, KinematicsError> {
    let rates = desired_joint_rates(j, qdot_h)?;
    if q_s_actual.len() != rates.len() {
        return Err(KinematicsError::DimensionMismatch(format!(
            "expected {} limb positions, got {}",
            rates.len(),
            q_s_actual.len()
        )));
    }
    Ok(q_s_actual + rates * dt)
}
