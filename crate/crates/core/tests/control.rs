use std::sync::OnceLock;

use koopman_core::control::*;
use koopman_core::setup::{build_dictionary, default_systems, fixed_points_in};
use koopman_core::systems::{BoxRegion, FixedPoint, VectorFieldSpec};
use proptest::prelude::*;

struct Setup {
    spec: VectorFieldSpec,
    region: BoxRegion,
    model: KoopmanControlModel,
    decomp: LiftedDecomposition,
    bound: InputBound,
    fixed_points: Vec<FixedPoint>,
}

fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ControlConfig::default();
        let block = default_systems()[&cfg.system].clone();
        let spec = block.spec().unwrap();
        let psi_x = build_dictionary(&spec, &block.region, &cfg.state_dictionary, 1).unwrap();
        let psi_xu = control_dictionary(1, cfg.factor_degree, cfg.input_degree, 1).unwrap();
        let data = sample_control_data(&block.region, &cfg.input_box, cfg.samples, cfg.zero_fraction, 1).unwrap();
        let model = fit_control_model(&spec, &data, &psi_x, &psi_xu, None).unwrap();
        let decomp = eigen_decompose_control(&model, cfg.null_threshold).unwrap();
        let bound = estimate_input_bound(&psi_xu, &block.region, &cfg.input_box, cfg.bound_samples, 1).unwrap();
        let fixed_points = fixed_points_in(&spec, &block.region).unwrap();
        Setup {
            spec,
            region: block.region,
            model,
            decomp,
            bound,
            fixed_points,
        }
    })
}

fn experiment(schedule: &Schedule, x0: f64, horizon: f64) -> ExperimentReport {
    let s = setup();
    basin_crossing_experiment(
        &s.spec,
        &s.model,
        &s.decomp,
        &s.bound,
        &CrossingSetup {
            scenario: "test",
            x0: &[x0],
            schedule,
            horizon,
            grid_step: 1e-3,
            fixed_points: &s.fixed_points,
        },
    )
    .unwrap()
}

#[test]
fn control_observables_vanish_without_input() {
    let s = setup();
    let mut r = koopman_core::rng::stream(5, "psi_xu_zero");
    for _ in 0..1000 {
        let x = s.region.sample(&mut r);
        assert!(s.model.control_dictionary.eval(&x, &[0.0]).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn decomposition_reconstructs_l_x() {
    let s = setup();
    assert!(s.decomp.reconstruction_error <= 1e-8, "{}", s.decomp.reconstruction_error);
    assert!(!s.decomp.null_rows.is_empty());
}

#[test]
fn uncontrolled_lifted_rollout_tracks_the_flow() {
    let s = setup();
    let cfg = ControlConfig::default();
    let holdout = sample_control_data(&s.region, &cfg.input_box, 1000, 1.0, 2).unwrap();
    let limit = 10.0 * s.model.holdout_residual(&s.spec, &holdout).unwrap();
    let times: Vec<f64> = (1..=20).map(|k| 0.1 * k as f64).collect();
    for x0 in [-1.9, -1.2, -0.5, -0.1, 0.2, 0.7, 1.3, 1.9] {
        let err = s.model.lifted_prediction_error(&s.spec, &[x0], &times).unwrap();
        assert!(err <= limit, "x0 = {x0}: {err} > {limit}");
    }
}

#[test]
fn constant_push_crosses_basins_with_certified_null_change() {
    let r = experiment(&Schedule::Constant { value: vec![1.5] }, -0.5, 5.0);
    let t_c = r.t_c.expect("the pushed state crosses");
    assert!(t_c > 0.0 && t_c < 5.0);
    assert_ne!(r.initial_label, r.final_label);
    assert!(r.certified, "{:?}", r.null_rows);
    for c in &r.null_rows {
        assert!(c.realized_change <= c.rate_bound * t_c * (1.0 + 1e-6));
    }
    assert!(r.indicator_error_at_t_c.unwrap() > 0.5);

    let still = experiment(&Schedule::Constant { value: vec![0.0] }, -0.5, 5.0);
    assert_eq!(still.t_c, None);
    assert!(still.certified);
    assert!(still.null_rows.iter().all(|c| c.realized_change == 0.0));
    assert!(!serde_json::to_string(&still).unwrap().contains("\"t_c\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn null_coordinate_change_respects_rate_bound(u1 in -2.0..2.0f64, u2 in -2.0..2.0f64,
                                                  switch in 0.1..1.5f64, x0 in -1.8..1.8f64) {
        let schedule = Schedule::Piecewise { switch_times: vec![switch], values: vec![vec![u1], vec![u2]] };
        let r = experiment(&schedule, x0, 2.0);
        prop_assert!(r.max_trajectory_input_norm <= r.input_bound.value);
        for c in &r.null_rows {
            prop_assert!(c.max_interval_rate <= c.rate_bound * (1.0 + 1e-6), "{c:?}");
            prop_assert!(c.realized_change <= c.rate_bound * r.certification_interval * (1.0 + 1e-6));
        }
        prop_assert!(r.certified);
    }
}
