use std::collections::BTreeMap;

use koopman_core::checks::{
    check_basin_constancy, check_blowup_near_stable_point, check_closed_orbit_spectrum, check_escape_time,
    check_exit_when_bounded_away, check_fixed_point_zero, check_level_set_invariance, run_all_checks,
    verify_eigen_evolution, SuiteConfig, Verdict,
};
use koopman_core::koopman_fit::Eigenpair;
use koopman_core::oracles::AnalyticOracle;
use koopman_core::rng;
use koopman_core::setup::{default_fits, default_systems};
use koopman_core::systems::{find_fixed_points, BasinGrid, BoxRegion, FixedPoint, StabilityClass, VectorFieldSpec};
use rand::Rng;

fn bistable() -> (VectorFieldSpec, Vec<FixedPoint>) {
    let spec = VectorFieldSpec::named("bistable").unwrap();
    let fps = find_fixed_points(&spec, &[vec![-1.2], vec![0.1], vec![1.3]], 1e-12).unwrap().points;
    assert_eq!(fps.len(), 3);
    (spec, fps)
}

fn growth() -> Eigenpair {
    Eigenpair::from_oracle(AnalyticOracle::bistable_growth())
}

fn decay() -> Eigenpair {
    Eigenpair::from_oracle(AnalyticOracle::bistable_decay())
}

fn uniform(lo: f64, hi: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "test_starts");
    (0..n).map(|_| vec![r.gen_range(lo..hi)]).collect()
}

/// Richardson-extrapolated central difference, independent of the library's
/// stencil.
fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn bistable_oracles_satisfy_the_generator_relation() {
    let (spec, _) = bistable();
    for pair in [growth(), decay()] {
        let mut r = rng::stream(11, "oracle_points");
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let x = loop {
                let x: f64 = r.gen_range(-2.0..2.0);
                if x.abs() > 0.05 && (x.abs() - 1.0).abs() > 0.05 {
                    break x;
                }
            };
            let phi = |y: f64| koopman_core::koopman_fit::eval_eigenfunction(&pair, None, &[y]).unwrap().re;
            let fx = spec.eval(&[x], &[]).unwrap()[0];
            let lhs = fx * derivative(phi, x, 2e-4);
            let err = (lhs - pair.lambda.re * phi(x)).abs() / phi(x).abs().max(1.0);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-8, "lambda {}: {worst:e}", pair.lambda);
    }
}

#[test]
fn oracle_evolution_identity() {
    let (spec, _) = bistable();
    let times: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    for (pair, lo, hi) in [(growth(), -0.9, 0.9), (decay(), 0.2, 1.8)] {
        let starts = uniform(lo, hi, 100, 4);
        let r = verify_eigen_evolution(&pair, None, &spec, &starts, &times, 1e-5).unwrap();
        assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
        assert!(r.statistics["max_deviation"] <= 1e-5);
        let strict = verify_eigen_evolution(&pair, None, &spec, &starts, &times, 0.0).unwrap();
        assert_eq!(strict.verdict, Verdict::Violated);
    }
}

#[test]
fn oracle_pairs_vanish_at_fixed_points_where_defined() {
    let (_, fps) = bistable();
    let r = check_fixed_point_zero(&[growth(), decay()], None, &fps, 1e-3, 1e-10).unwrap();
    assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
    assert!(r.statistics["not_applicable_points"] >= 2.0);
}

#[test]
fn level_set_of_decaying_oracle_is_invariant() {
    let (spec, _) = bistable();
    let starts: Vec<Vec<f64>> = uniform(-2.0, 2.0, 400, 5)
        .into_iter()
        .filter(|x| x[0].abs() >= 1.0 / 2f64.sqrt())
        .take(200)
        .collect();
    let r = check_level_set_invariance(&decay(), None, &spec, 1.0, &starts, 5.0, 50, 1e-6).unwrap();
    assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
    // lambda = 1 > 0 breaks the hypothesis
    let g = check_level_set_invariance(&growth(), None, &spec, 1.0, &starts, 5.0, 50, 1e-6).unwrap();
    assert_eq!(g.verdict, Verdict::Inconclusive);
}

#[test]
fn escape_time_bound() {
    let (spec, _) = bistable();
    let region = BoxRegion::new(vec![0.1], vec![0.9]).unwrap();
    let starts = uniform(0.1, 0.9, 200, 6);
    let r = check_escape_time(&growth(), None, &spec, &region, &starts, 0.01, 1001, 1e-3).unwrap();
    assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
    // C = phi(0.9), eps = phi(0.1)
    let phi = |x: f64| x / (1.0 - x * x).sqrt();
    let t = (phi(0.9) / phi(0.1)).ln();
    assert!((t - 3.0226).abs() < 1e-3);
    assert!(r.statistics.values().any(|v| (v - t).abs() < 1e-6), "{:?}", r.statistics);
    let d = check_escape_time(&decay(), None, &spec, &region, &starts, 0.01, 1001, 1e-3).unwrap();
    assert_eq!(d.verdict, Verdict::Inconclusive);
}

#[test]
fn exit_when_bounded_away() {
    let (spec, _) = bistable();
    let region = BoxRegion::new(vec![0.1], vec![0.9]).unwrap();
    let starts = uniform(0.1, 0.9, 50, 7);
    let r = check_exit_when_bounded_away(&growth(), None, &spec, &region, &starts, 20.0, 1001, 1e-3).unwrap();
    assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
}

#[test]
fn blowup_needs_a_stable_point() {
    let (spec, fps) = bistable();
    let radii = [0.1, 0.03, 0.01, 0.003, 0.001];
    let stable = fps.iter().find(|f| f.location[0] > 0.5).unwrap();
    let r = check_blowup_near_stable_point(&growth(), &spec, stable, &radii, 20.0).unwrap();
    assert_eq!(r.verdict, Verdict::Supported, "{r:?}");
    let unstable = fps.iter().find(|f| f.stability != StabilityClass::Stable).unwrap();
    let u = check_blowup_near_stable_point(&growth(), &spec, unstable, &radii, 20.0).unwrap();
    assert_eq!(u.verdict, Verdict::Inconclusive);
}

#[test]
fn closed_orbit_check_needs_closed_orbits() {
    let (spec, _) = bistable();
    let pts = uniform(-1.0, 1.0, 20, 8);
    let r = check_closed_orbit_spectrum(&spec, &[growth()], None, &pts, &pts, 1e-6, 0.05).unwrap();
    assert_eq!(r.verdict, Verdict::Inconclusive);
}

#[test]
fn basin_constancy_needs_two_basins() {
    let spec = VectorFieldSpec::named("linear").unwrap();
    let fps = find_fixed_points(&spec, &[vec![0.3]], 1e-12).unwrap().points;
    let grid = BasinGrid::compute(&spec, &BoxRegion::cube(1, 1.0), &[21], &fps, 50.0, 1e-2, 1e-9).unwrap();
    let r = check_basin_constancy(&Eigenpair::constant(), None, &grid, 0.05, None).unwrap();
    assert_eq!(r.verdict, Verdict::Inconclusive);
}

#[test]
fn suite_filter_determinism_and_missing_system() {
    let systems = default_systems();
    let fits = default_fits();
    let cfg = SuiteConfig::default();
    let only = vec!["theorem2".to_string(), "theorem4".to_string()];
    let a = run_all_checks(&systems, &fits, &cfg, 3, Some(&only)).unwrap();
    let b = run_all_checks(&systems, &fits, &cfg, 3, Some(&only)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.iter().map(|r| r.theorem_id.as_str()).collect::<Vec<_>>(), ["theorem2", "theorem4"]);
    assert!(a.iter().all(|r| r.verdict == Verdict::Supported));

    assert!(run_all_checks(&systems, &fits, &cfg, 3, Some(&["theorem99".to_string()])).is_err());

    let mut missing: BTreeMap<_, _> = systems.clone();
    missing.remove("bistable");
    let r = run_all_checks(&missing, &fits, &cfg, 3, Some(&["theorem3".to_string()])).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].verdict, Verdict::Inconclusive);
    assert!(r[0].notes.iter().any(|n| n.contains("error: unknown system")), "{:?}", r[0].notes);
}
