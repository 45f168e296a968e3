use proptest::collection::vec;
use proptest::prelude::*;

use superlimb::numerics::{Matrix, Vector};
use superlimb::stiffness_control::{self, FrictionModel, StiffnessTable, TaskSpaceController, STICTION_VELOCITY};

fn vector(m: usize, r: f64) -> impl Strategy<Value = Vector> {
    vec(-r..r, m).prop_map(Vector::from_vec)
}

/// Controller with a symmetric positive definite stiffness.
fn controller() -> impl Strategy<Value = TaskSpaceController> {
    (1usize..4).prop_flat_map(|m| {
        (vec(-1.0..1.0f64, m * m), 10.0..1000.0f64, vector(m, 1.0), vector(m, 50.0)).prop_map(move |(b, s, x_eq, fg)| {
            let b = Matrix::from_vec(m, m, b);
            let k = (&b * b.transpose() + Matrix::identity(m, m)) * s;
            TaskSpaceController::new(k, x_eq, fg).unwrap()
        })
    })
}

fn with_dim<T: std::fmt::Debug>(
    f: impl Fn(usize) -> BoxedStrategy<T> + 'static,
) -> impl Strategy<Value = (TaskSpaceController, T)> {
    controller().prop_flat_map(move |c| {
        let m = c.dim();
        (Just(c), f(m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn spring_force_is_linear_in_displacement((ctrl, x) in with_dim(|m| vector(m, 1.0).boxed())) {
        let f1 = ctrl.control_force(&x).unwrap() - &ctrl.f_gravity;
        let x2 = &ctrl.x_eq - (&ctrl.x_eq - &x) * 2.0;
        let f2 = ctrl.control_force(&x2).unwrap() - &ctrl.f_gravity;
        prop_assert!((f2 - f1 * 2.0).amax() <= 1e-10 * (1.0 + ctrl.k_task.amax()));
    }

    #[test]
    fn shifting_equilibrium_adds_exactly_delta_f(
        (ctrl, (x, df)) in with_dim(|m| (vector(m, 1.0), vector(m, 100.0)).boxed())
    ) {
        let before = ctrl.control_force(&x).unwrap();
        let after = ctrl.shift_equilibrium(&df).unwrap().control_force(&x).unwrap();
        prop_assert!((after - before - &df).amax() <= 1e-10 * (1.0 + df.amax()));
    }

    #[test]
    fn frictionless_spring_does_no_work_on_closed_paths(
        (ctrl, pts) in with_dim(|m| vec(vector(m, 0.5), 3..8).boxed())
    ) {
        // trapezoidal work along the closed polygon; exact for an affine field
        let mut work = 0.0;
        for i in 0..pts.len() {
            let (a, b) = (&pts[i], &pts[(i + 1) % pts.len()]);
            let fa = ctrl.control_force(a).unwrap();
            let fb = ctrl.control_force(b).unwrap();
            work += 0.5 * (fa + fb).dot(&(b - a));
        }
        prop_assert!(work.abs() <= 1e-9 * (1.0 + ctrl.k_task.amax()));
    }

    #[test]
    fn level_switch_keeps_equilibrium(ctrl in controller(), level in 1usize..=4) {
        let table = StiffnessTable::default_for(ctrl.dim());
        let switched = ctrl.set_stiffness_level(level, &table).unwrap();
        prop_assert_eq!(&switched.x_eq, &ctrl.x_eq);
        prop_assert_eq!(&switched.k_task, table.level(level).unwrap());
        prop_assert_eq!(switched.control_force(&ctrl.x_eq).unwrap(), ctrl.f_gravity.clone());
    }

    #[test]
    fn friction_never_exceeds_its_limits(
        coulomb in 0.0..2.0f64,
        viscous in 0.0..1.0f64,
        ratio in 1.0..2.0f64,
        qdot in prop_oneof![-3.0..3.0f64, -1e-3..1e-3f64],
        tau in -10.0..10.0f64,
    ) {
        let model = FrictionModel {
            coulomb: vec![coulomb],
            viscous: vec![viscous],
            stiction_breakaway_ratio: ratio,
        };
        let f = stiffness_control::joint_friction(&model, 0, qdot, tau);
        if qdot.abs() > STICTION_VELOCITY {
            // kinetic friction opposes motion
            prop_assert!(f * qdot <= 0.0);
            prop_assert!((f.abs() - (coulomb + viscous * qdot.abs())).abs() <= 1e-12);
        } else {
            // stuck joints resist at most up to breakaway, never reversing the load
            prop_assert!(f.abs() <= ratio * coulomb + 1e-12);
            prop_assert!(f * tau <= 0.0);
            prop_assert!((tau + f).abs() <= (tau.abs() - ratio * coulomb).max(0.0) + 1e-12);
        }
    }

    #[test]
    fn task_torque_is_transpose_map(
        (j, f) in (1usize..4, 1usize..6).prop_flat_map(|(m, n)| (
            vec(-1.0..1.0f64, m * n).prop_map(move |v| Matrix::from_vec(m, n, v)),
            vector(m, 100.0),
        ))
    ) {
        let tau = stiffness_control::task_to_joint_torque(&j, &f).unwrap();
        // virtual work: tau . qdot = F . (J qdot) for any qdot
        let qdot = Vector::from_fn(j.ncols(), |i, _| (i as f64 + 1.0).sin());
        prop_assert!((tau.dot(&qdot) - f.dot(&(&j * &qdot))).abs() <= 1e-9 * (1.0 + f.amax()));
    }
}
