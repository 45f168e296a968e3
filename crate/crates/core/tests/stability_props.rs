use std::sync::Arc;

use proptest::collection::vec;
use proptest::prelude::*;

use superlimb::numerics::{self, Matrix, Vector};
use superlimb::stability::{
    self, ChainKind, ParametricChain, SupportChain, SupportPosture, ORACLE_TOL, POSE_DIM,
};

fn chain() -> impl Strategy<Value = ParametricChain> {
    (prop_oneof![Just(ChainKind::Prismatic), Just(ChainKind::Polar)], 0.0..0.8f64)
        .prop_map(|(kind, com_offset)| ParametricChain { kind, com_offset })
}

fn shared(c: ParametricChain) -> Arc<dyn SupportChain> {
    Arc::new(c)
}

fn pose() -> impl Strategy<Value = Vector> {
    (0.2..1.0f64, -0.3..0.3f64, 0.5..1.5f64, -0.4..0.4f64, -0.4..0.4f64, -0.5..0.5f64)
        .prop_map(|(x, y, z, rx, ry, rz)| Vector::from_vec(vec![x, y, z, rx, ry, rz]))
}

fn k_q() -> impl Strategy<Value = Matrix> {
    (vec(-1.0..1.0f64, POSE_DIM * POSE_DIM), 1.0..1000.0f64).prop_map(|(b, s)| {
        let b = Matrix::from_vec(POSE_DIM, POSE_DIM, b);
        (&b * b.transpose()) * s
    })
}

fn posture() -> impl Strategy<Value = SupportPosture> {
    (chain(), pose(), k_q(), 1.0..80.0f64)
        .prop_map(|(c, p, k, m)| SupportPosture::at_equilibrium(shared(c), p, k, m).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kp_is_symmetric_and_matches_potential_hessian(posture in posture()) {
        let report = stability::stiffness_matrix_kp(&posture).unwrap();
        let scale = 1.0 + numerics::max_abs(&report.k_p);
        prop_assert!((&report.k_p - report.k_p.transpose()).amax() <= 1e-6 * scale);
        prop_assert!(report.equilibrium_residual <= 1e-6);
        prop_assert!(report.oracle_disagreement <= ORACLE_TOL);
        prop_assert!(!report.diagnostic_mismatch);
    }

    #[test]
    fn verdict_is_scale_invariant(posture in posture(), s in 0.01..100.0f64) {
        // scaling mass, joint torques and joint stiffness together scales K_p by s
        let base = stability::stiffness_matrix_kp(&posture).unwrap();
        let scaled = SupportPosture {
            mass: posture.mass * s,
            tau_bar: &posture.tau_bar * s,
            k_q: &posture.k_q * s,
            ..posture.clone()
        };
        let report = stability::stiffness_matrix_kp(&scaled).unwrap();
        prop_assert!((&report.k_p - &base.k_p * s).amax() <= 1e-6 * s * (1.0 + numerics::max_abs(&base.k_p)));
        if base.margin.abs() > 1e-6 * (1.0 + numerics::max_abs(&base.k_p)) {
            prop_assert_eq!(report.is_stable, base.is_stable);
        }
    }

    #[test]
    fn unloaded_joints_leave_only_gravity(
        c in chain(), p in pose(), m in 1.0..80.0f64,
    ) {
        let posture = SupportPosture::new(
            shared(c), p.clone(), Vector::zeros(POSE_DIM), Matrix::zeros(POSE_DIM, POSE_DIM), m,
        ).unwrap();
        let report = stability::stiffness_matrix_kp(&posture).unwrap();
        // z_c = z + d cos(rx) cos(ry): only the tilt block curves
        let d = c.com_offset;
        let (rx, ry) = (p[3], p[4]);
        let mut e_z = Matrix::zeros(POSE_DIM, POSE_DIM);
        e_z[(3, 3)] = -d * rx.cos() * ry.cos();
        e_z[(4, 4)] = -d * rx.cos() * ry.cos();
        e_z[(3, 4)] = d * rx.sin() * ry.sin();
        e_z[(4, 3)] = e_z[(3, 4)];
        let mg = m * posture.gravity;
        let oracle = e_z * mg;
        // finite-difference roundoff scales with m g |z_c| eps / h^2, not with the curvature
        prop_assert!((&report.k_p - &oracle).amax() <= 1e-6 * mg);
    }
}
