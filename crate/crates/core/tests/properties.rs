use std::f64::consts::PI;

use krflab::bergman::bergman_kernel;
use krflab::flow;
use krflab::geometry::{MetricState, ScalarField};
use krflab::green::{green_profile, mean_value_residual};
use krflab::ode::StepController;
use krflab::spectral::GridSpec;
use krflab::verify::{member_state, member_trajectory, run_checks, sample_profile, EnsembleSpec, VerifyOptions};
use proptest::prelude::*;

fn potential() -> impl Strategy<Value = Vec<f64>> {
    // small enough that w = 1 + L f / 2 stays positive
    prop::collection::vec(-1.0f64..1.0, 1..6).prop_map(|v| {
        let mut c = vec![0.0];
        c.extend(v.iter().enumerate().map(|(k, a)| 0.02 * a / (k + 1) as f64));
        c
    })
}

fn ctrl() -> StepController {
    StepController::default()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn flow_conserves_volume_and_total_curvature(c in potential()) {
        let grid = GridSpec::new(24).unwrap();
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        prop_assert!((st.volume() - 4.0 * PI).abs() < 1e-10);
        let traj = flow::run(&st, 0.25, &ctrl(), &[0.125]).unwrap();
        prop_assert!(traj.conservation_error() < 1e-9);
        // the minimum of R never decreases below min(R_min(0), 0)
        let floor = st.r_min().min(0.0);
        prop_assert!(traj.snapshots().iter().all(|s| s.state.r_min() >= floor - 1e-9));
    }

    #[test]
    fn bergman_trace_is_section_count(c in potential(), l in 1usize..5) {
        let grid = GridSpec::new(24).unwrap();
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        let k = bergman_kernel(&st, l).unwrap();
        prop_assert!((st.integrate_values(k.rho.values()) - (2 * l + 1) as f64).abs() < 1e-8);
        prop_assert!(k.rho.min() > 0.0);
    }

    #[test]
    fn green_representation_holds(c in potential(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let grid = GridSpec::new(32).unwrap();
        let st = MetricState::from_coefficients(&grid, c).unwrap();
        let gp = green_profile(&st).unwrap();
        let f = ScalarField::from_fn(&grid, |x| a * x + b * x * x * x + (2.0 * x).sin()).unwrap();
        prop_assert!(mean_value_residual(&gp, &st, &f).unwrap().abs() < 1e-7);
    }

    #[test]
    fn sampled_members_respect_the_curvature_floor(seed in 0u64..1000, index in 0usize..8) {
        let spec = EnsembleSpec { seed, roughness: 1.2, max_degree: 10, modes: 64, r0: 0.4, ..Default::default() };
        let (profile, lambda) = sample_profile(&spec, index).unwrap();
        prop_assert!(lambda > 0.0 && lambda <= 1.0);
        prop_assert!(profile.min_value() >= spec.r0 - 1e-9);
        let st = member_state(&spec, index).unwrap();
        prop_assert!(st.r_min() >= spec.r0 - 1e-6, "R_min {} below {}", st.r_min(), spec.r0);
    }
}

#[test]
fn blowup_constant_grows_with_roughness() {
    let mut last = (0.0, 0.0);
    for roughness in [0.0, 0.1, 0.2, 0.4, 0.8, 1.6] {
        let spec = EnsembleSpec { roughness, seed: 9, modes: 48, ..Default::default() };
        let traj = member_trajectory(&spec, 0).unwrap();
        let report = run_checks(&traj, &VerifyOptions::default(), None, (String::new(), 9));
        let o = report.get("o_blowup_shape").unwrap();
        let c = (o.values["c_r"], o.values["c_grad"]);
        assert!(c.0 >= last.0 * (1.0 - 1e-9) && c.1 >= last.1 * (1.0 - 1e-9), "roughness {roughness}: {c:?} after {last:?}");
        last = c;
    }
}
