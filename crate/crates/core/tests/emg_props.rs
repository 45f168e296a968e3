use proptest::collection::vec;
use proptest::prelude::*;

use superlimb::emg_pipeline::{self, EmgConfig, EmgStream, EmgTrace, HillParams, MotionGate, GateParams};

fn hill() -> impl Strategy<Value = HillParams> {
    (10.0..500.0f64, 0.01..0.2f64, 0.01..0.3f64, 0.5..1.5f64, 0.5..1.5f64, 0.1..2.0f64).prop_map(
        |(f_max, rise, fall, fl, fv, mvc)| HillParams {
            f_max,
            act_tau_rise: rise,
            act_tau_fall: fall,
            fl_factor: fl,
            fv_factor: fv,
            mvc_reference: mvc,
        },
    )
}

fn trace() -> impl Strategy<Value = EmgTrace> {
    vec(-2.0..2.0f64, 400..1200).prop_map(|s| EmgTrace::single(2000.0, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rectified_and_envelope_are_bounded(t in trace(), window in 0.005..0.2f64) {
        let rect = emg_pipeline::rectify(&t);
        let peak = rect.channels[0].1.iter().cloned().fold(0.0, f64::max);
        prop_assert!(rect.channels[0].1.iter().all(|v| *v >= 0.0));
        let env = emg_pipeline::envelope(&rect, window).unwrap();
        for v in &env.channels[0].1 {
            prop_assert!(*v >= 0.0 && *v <= peak * (1.0 + 1e-12));
        }
    }

    #[test]
    fn activation_stays_in_unit_interval_and_is_monotone(
        params in hill(),
        a0 in 0.0..1.0f64,
        dt in 1e-4..0.05f64,
        env in 0.0..5.0f64,
    ) {
        let full = params.mvc_reference * (1.0 + env);
        let mut a = a0;
        for _ in 0..200 {
            let next = emg_pipeline::activation(full, &params, a, dt);
            prop_assert!((0.0..=1.0).contains(&next));
            prop_assert!(next >= a);
            a = next;
        }
        for _ in 0..200 {
            let next = emg_pipeline::activation(0.0, &params, a, dt);
            prop_assert!((0.0..=1.0).contains(&next));
            prop_assert!(next <= a);
            a = next;
        }
    }

    #[test]
    fn hill_force_is_monotone(params in hill(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(emg_pipeline::hill_force(lo, &params) <= emg_pipeline::hill_force(hi, &params));
        prop_assert_eq!(emg_pipeline::hill_force(0.0, &params), 0.0);
    }

    #[test]
    fn gate_replay_is_deterministic(
        yaws in vec(-1.0..1.0f64, 1..300),
        threshold in 0.1..0.8f64,
        frac in 0.0..0.9f64,
    ) {
        let params = GateParams { threshold, hysteresis: frac * threshold };
        let run = || {
            let mut g = MotionGate::new(params);
            yaws.iter().map(|y| g.update(*y)).collect::<Vec<_>>()
        };
        let first = run();
        prop_assert_eq!(&first, &run());
        // decisions outside the hysteresis band do not depend on history
        for (y, on) in yaws.iter().zip(&first) {
            if y.abs() >= threshold {
                prop_assert!(*on);
            } else if y.abs() <= threshold - params.hysteresis {
                prop_assert!(!*on);
            }
        }
    }

    #[test]
    fn closed_gate_has_no_effect(t in trace(), gain in 0.0..0.01f64) {
        let cfg = EmgConfig { gain, ..EmgConfig::default() };
        let mut stream = EmgStream::new(cfg.clone(), &t).unwrap();
        let dt = 1.0 / t.fs;
        for i in 0..t.len() {
            let s = stream.step(t.time(i), dt, Some(cfg.gate.threshold - cfg.gate.hysteresis));
            prop_assert!(!s.gate);
            prop_assert_eq!(s.dxeq_m, 0.0);
        }
    }
}
