use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::TheoremReport;
use crate::dictionaries::Dictionary;
use crate::error::{KoopmanError, Result};
use crate::koopman_fit::{eval_eigenfunction, Eigenfunction, Eigenpair};
use crate::linalg::eigen_decompose;
use crate::systems::{trajectory, BasinGrid, BoxRegion, FixedPoint, StabilityClass, VectorFieldSpec, DEFAULT_TOL};

/// Floor under which `|phi|` on a region counts as zero.
pub const PHI_FLOOR: f64 = 1e-12;

fn phi(pair: &Eigenpair, dict: Option<&Dictionary>, x: &[f64]) -> Result<Complex64> {
    eval_eigenfunction(pair, dict, x)
}

fn pair_inputs(pair: &Eigenpair, dict: Option<&Dictionary>) -> serde_json::Value {
    json!({ "pair": pair, "dictionary": dict.map(|d| d.hash()) })
}

enum Orbit {
    States(Vec<Vec<f64>>),
    Escaped,
}

/// Orbit of `x0` at `times` (sorted, non-negative), with escapes reported
/// instead of raised.
fn orbit(spec: &VectorFieldSpec, x0: &[f64], times: &[f64]) -> Result<Orbit> {
    match trajectory(spec, x0, times, DEFAULT_TOL) {
        Ok(t) => Ok(Orbit::States(t.states)),
        Err(KoopmanError::FiniteEscape { .. }) => Ok(Orbit::Escaped),
        Err(e) => Err(e),
    }
}

fn grid_times(horizon: f64, step: f64) -> Vec<f64> {
    let n = (horizon / step).ceil() as usize;
    (0..=n).map(|k| (k as f64 * step).min(horizon)).collect()
}

/// First time on a `step` grid at which the orbit of `x0` is outside
/// `region`, searched up to `horizon`.
pub fn exit_time(spec: &VectorFieldSpec, x0: &[f64], region: &BoxRegion, horizon: f64, step: f64) -> Result<Option<f64>> {
    if !region.contains(x0) {
        return Ok(Some(0.0));
    }
    let times = grid_times(horizon, step);
    match trajectory(spec, x0, &times, DEFAULT_TOL) {
        Ok(t) => Ok(t
            .states
            .iter()
            .zip(&times)
            .find(|(s, _)| !region.contains(s))
            .map(|(_, &t)| t)),
        // leaving every bounded region
        Err(KoopmanError::FiniteEscape { time, .. }) => Ok(Some(time)),
        Err(e) => Err(e),
    }
}

/// Max over starts x times of `|phi(F^t x) - e^{lambda t} phi(x)| / (1 + |phi(x)|)`.
/// Escaping starts are excluded and counted.
pub fn verify_eigen_evolution(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    spec: &VectorFieldSpec,
    starts: &[Vec<f64>],
    times: &[f64],
    tol: f64,
) -> Result<TheoremReport> {
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(KoopmanError::InvalidArgument("evolution times must be finite and >= 0".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let inputs = json!({ "target": pair_inputs(pair, dict), "system": spec, "starts": starts, "times": sorted, "tol": tol });
    let mut report = TheoremReport::new("eigen_evolution", &inputs);
    report.tolerance("deviation", tol);

    struct StartResult {
        escaped: bool,
        not_applicable: usize,
        deviations: Vec<(f64, f64)>,
    }
    let results: Vec<Result<StartResult>> = starts
        .par_iter()
        .map(|x| {
            if !pair.defined_at(x) {
                return Ok(StartResult {
                    escaped: false,
                    not_applicable: 1,
                    deviations: vec![],
                });
            }
            let p0 = phi(pair, dict, x)?;
            let states = match orbit(spec, x, &sorted)? {
                Orbit::Escaped => {
                    return Ok(StartResult {
                        escaped: true,
                        not_applicable: 0,
                        deviations: vec![],
                    })
                }
                Orbit::States(s) => s,
            };
            let mut out = StartResult {
                escaped: false,
                not_applicable: 0,
                deviations: Vec::with_capacity(sorted.len()),
            };
            for (y, &t) in states.iter().zip(&sorted) {
                if !pair.defined_at(y) {
                    out.not_applicable += 1;
                    continue;
                }
                let predicted = (pair.lambda * t).exp() * p0;
                let dev = (phi(pair, dict, y)? - predicted).norm() / (1.0 + p0.norm());
                out.deviations.push((t, dev));
            }
            Ok(out)
        })
        .collect();

    let (mut worst, mut evaluated, mut escaped, mut not_applicable) = (0.0f64, 0usize, 0usize, 0usize);
    for (x, r) in starts.iter().zip(results) {
        let r = r?;
        escaped += r.escaped as usize;
        not_applicable += r.not_applicable;
        for (t, dev) in r.deviations {
            evaluated += 1;
            worst = worst.max(dev);
            if dev > tol {
                report.counterexample(x, &[("t", t), ("deviation", dev)]);
            }
        }
    }
    report.stat("max_deviation", worst);
    report.stat("evaluated_points", evaluated as f64);
    report.stat("escaped_starts", escaped as f64);
    report.stat("not_applicable_points", not_applicable as f64);
    if evaluated == 0 {
        return Ok(report.inapplicable("no start could be evaluated"));
    }
    report.decide();
    Ok(report)
}

/// `|phi(x*)| <= tol_phi` at every fixed point, for pairs with `|lambda| > tol_lambda`.
pub fn check_fixed_point_zero(
    pairs: &[Eigenpair],
    dict: Option<&Dictionary>,
    fixed_points: &[FixedPoint],
    tol_lambda: f64,
    tol_phi: f64,
) -> Result<TheoremReport> {
    let inputs = json!({
        "pairs": pairs, "dictionary": dict.map(|d| d.hash()), "fixed_points": fixed_points,
        "tol_lambda": tol_lambda, "tol_phi": tol_phi
    });
    let mut report = TheoremReport::new("lemma1", &inputs);
    report.tolerance("lambda", tol_lambda);
    report.tolerance("phi", tol_phi);
    let (mut tested_pairs, mut tested_points, mut not_applicable, mut zero_lambda, mut vanishing) = (0, 0, 0, 0, 0);
    let mut worst = 0.0f64;
    for (i, pair) in pairs.iter().enumerate() {
        if pair.lambda.norm() <= tol_lambda {
            zero_lambda += 1;
            continue;
        }
        if pair.vanishes_on_sample {
            vanishing += 1;
            continue;
        }
        tested_pairs += 1;
        for fp in fixed_points {
            if !pair.defined_at(&fp.location) {
                not_applicable += 1;
                continue;
            }
            tested_points += 1;
            let v = phi(pair, dict, &fp.location)?.norm();
            worst = worst.max(v);
            if v > tol_phi {
                report.counterexample(
                    &fp.location,
                    &[
                        ("pair", i as f64),
                        ("lambda_re", pair.lambda.re),
                        ("lambda_im", pair.lambda.im),
                        ("abs_phi", v),
                    ],
                );
            }
        }
    }
    report.stat("tested_pairs", tested_pairs as f64);
    report.stat("tested_points", tested_points as f64);
    report.stat("not_applicable_points", not_applicable as f64);
    report.stat("excluded_zero_lambda", zero_lambda as f64);
    report.stat("excluded_vanishing", vanishing as f64);
    report.stat("max_abs_phi", worst);
    if tested_points == 0 {
        return Ok(report.inapplicable("no pair with nonzero lambda is defined at a fixed point"));
    }
    report.decide();
    Ok(report)
}

/// Starts in `M(c) = {|phi| <= c}` stay in it: `|phi(F^t x0)| <= c (1 + drift_tol)`
/// at `steps` equally spaced times in `(0, horizon]`.
#[allow(clippy::too_many_arguments)]
pub fn check_level_set_invariance(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    spec: &VectorFieldSpec,
    c: f64,
    starts: &[Vec<f64>],
    horizon: f64,
    steps: usize,
    drift_tol: f64,
) -> Result<TheoremReport> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(KoopmanError::InvalidArgument("level c must be > 0".into()));
    }
    if !(horizon > 0.0) || steps == 0 {
        return Err(KoopmanError::InvalidArgument("horizon and steps must be positive".into()));
    }
    let inputs = json!({
        "target": pair_inputs(pair, dict), "system": spec, "c": c, "starts": starts,
        "horizon": horizon, "steps": steps, "drift_tol": drift_tol
    });
    let mut report = TheoremReport::new("theorem4", &inputs);
    report.tolerance("drift", drift_tol);
    report.stat("c", c);
    if pair.lambda.re > 0.0 {
        return Ok(report.inapplicable(format!("Re lambda = {} > 0", pair.lambda.re)));
    }
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let mut inside = Vec::new();
    let mut excluded = 0;
    for x in starts {
        if pair.defined_at(x) && phi(pair, dict, x)?.norm() <= c {
            inside.push(x.clone());
        } else {
            excluded += 1;
        }
    }
    // per start: (t, |phi(x(t))|) samples, None when the orbit escapes
    type Samples = Option<Vec<(f64, f64)>>;
    let results: Vec<Result<Samples>> = inside
        .par_iter()
        .map(|x| match orbit(spec, x, &times)? {
            Orbit::Escaped => Ok(None),
            Orbit::States(states) => {
                let mut out = Vec::new();
                for (y, &t) in states.iter().zip(&times).skip(1) {
                    if pair.defined_at(y) {
                        out.push((t, phi(pair, dict, y)?.norm()));
                    }
                }
                Ok(Some(out))
            }
        })
        .collect();
    let (mut worst, mut escaped) = (0.0f64, 0usize);
    for (x, r) in inside.iter().zip(results) {
        match r? {
            None => escaped += 1,
            Some(values) => {
                for (t, v) in values {
                    let exceed = (v / c - 1.0).max(0.0);
                    worst = worst.max(exceed);
                    if v > c * (1.0 + drift_tol) {
                        report.counterexample(x, &[("t", t), ("abs_phi", v), ("relative_exceedance", exceed)]);
                    }
                }
            }
        }
    }
    report.stat("tested_starts", (inside.len() - escaped) as f64);
    report.stat("excluded_starts", excluded as f64);
    report.stat("escaped_starts", escaped as f64);
    report.stat("max_relative_exceedance", worst);
    if inside.len() == escaped {
        return Ok(report.inapplicable("no start inside M(c)"));
    }
    report.decide();
    Ok(report)
}

/// `epsilon <= |phi| <= C` on a dense grid of `region`.
fn phi_bounds(pair: &Eigenpair, dict: Option<&Dictionary>, region: &BoxRegion, dense: usize) -> Result<Option<(f64, f64)>> {
    let grid = region.grid(&vec![dense.max(1); region.dim()])?;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for x in &grid {
        if !pair.defined_at(x) {
            return Ok(None);
        }
        let v = phi(pair, dict, x)?.norm();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(Some((lo, hi)))
}

/// Every start leaves `region` within `T = ln(C / epsilon) / Re lambda`
/// (times `1 + tol`).
#[allow(clippy::too_many_arguments)]
pub fn check_escape_time(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    spec: &VectorFieldSpec,
    region: &BoxRegion,
    starts: &[Vec<f64>],
    tol: f64,
    dense: usize,
    exit_step: f64,
) -> Result<TheoremReport> {
    let inputs = json!({
        "target": pair_inputs(pair, dict), "system": spec, "region": region, "starts": starts,
        "tol": tol, "dense": dense, "exit_step": exit_step
    });
    let mut report = TheoremReport::new("theorem3", &inputs);
    report.tolerance("time", tol);
    report.tolerance("exit_step", exit_step);
    report.note("the bound uses 1 / Re lambda");
    if !(pair.lambda.re > 0.0) {
        return Ok(report.inapplicable(format!("Re lambda = {} is not > 0", pair.lambda.re)));
    }
    let Some((eps, c)) = phi_bounds(pair, dict, region, dense)? else {
        return Ok(report.inapplicable("phi is undefined somewhere in the region"));
    };
    report.stat("epsilon", eps);
    report.stat("c_upper", c);
    if eps < PHI_FLOOR {
        return Ok(report.inapplicable(format!("|phi| = {eps:e} on the region is below the floor {PHI_FLOOR:e}")));
    }
    let bound = (c / eps).ln() / pair.lambda.re;
    report.stat("predicted_exit_time", bound);
    let limit = bound * (1.0 + tol);
    let exits: Vec<Result<Option<f64>>> = starts
        .par_iter()
        .map(|x| exit_time(spec, x, region, limit, exit_step))
        .collect();
    let (mut worst, mut exited) = (0.0f64, 0usize);
    for (x, e) in starts.iter().zip(exits) {
        match e? {
            Some(t) if t <= limit => {
                exited += 1;
                worst = worst.max(t);
            }
            other => report.counterexample(
                x,
                &[("exit_time", other.unwrap_or(f64::INFINITY)), ("predicted_exit_time", bound)],
            ),
        }
    }
    report.stat("starts", starts.len() as f64);
    report.stat("exited_fraction", if starts.is_empty() { 0.0 } else { exited as f64 / starts.len() as f64 });
    report.stat("max_exit_time", worst);
    if starts.is_empty() {
        return Ok(report.inapplicable("no starts"));
    }
    report.decide();
    Ok(report)
}

/// Within-basin spread of `Re phi` against the gap between basin means.
pub fn check_basin_constancy(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    basins: &BasinGrid,
    separation_tol: f64,
    min_accuracy: Option<f64>,
) -> Result<TheoremReport> {
    let inputs = json!({
        "target": pair_inputs(pair, dict), "basins": basins, "separation_tol": separation_tol,
        "min_accuracy": min_accuracy
    });
    let mut report = TheoremReport::new("lemma6_theorem7", &inputs);
    report.tolerance("separation", separation_tol);
    if let Some(a) = min_accuracy {
        report.tolerance("min_accuracy", a);
    }
    let ids = basins.attractor_basins();
    report.stat("basins", ids.len() as f64);
    if ids.len() < 2 {
        return Ok(report.inapplicable("fewer than two attractor basins on the grid"));
    }
    let mut values: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ids.len()];
    let mut skipped = 0;
    for (k, (x, label)) in basins.attractor_labelled().enumerate() {
        if !pair.defined_at(x) {
            skipped += 1;
            continue;
        }
        let b = ids.iter().position(|&i| i == label).expect("attractor label");
        values[b].push((k, phi(pair, dict, x)?.re));
    }
    let points: Vec<&Vec<f64>> = basins.attractor_labelled().map(|(x, _)| x).collect();
    if values.iter().any(|v| v.is_empty()) {
        return Ok(report.inapplicable("a basin has no evaluable grid point"));
    }
    let means: Vec<f64> = values
        .iter()
        .map(|v| v.iter().map(|(_, y)| y).sum::<f64>() / v.len() as f64)
        .collect();
    let n: usize = values.iter().map(|v| v.len()).sum();
    let ss: f64 = values
        .iter()
        .zip(&means)
        .map(|(v, m)| v.iter().map(|(_, y)| (y - m) * (y - m)).sum::<f64>())
        .sum();
    let sigma_w = (ss / n as f64).sqrt();
    let mut gap = f64::INFINITY;
    for a in 0..means.len() {
        for b in (a + 1)..means.len() {
            gap = gap.min((means[a] - means[b]).abs());
        }
    }
    let scale = values
        .iter()
        .flatten()
        .map(|(_, y)| y.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    let nearest = |y: f64| {
        (0..means.len())
            .min_by(|&a, &b| (y - means[a]).abs().total_cmp(&(y - means[b]).abs()))
            .expect("at least two basins")
    };
    let correct: usize = values
        .iter()
        .enumerate()
        .map(|(b, v)| v.iter().filter(|(_, y)| nearest(*y) == b).count())
        .sum();
    let accuracy = correct as f64 / n as f64;
    for (i, (&id, m)) in ids.iter().zip(&means).enumerate() {
        report.stat(&format!("mean_basin_{id}"), *m);
        report.stat(&format!("points_basin_{id}"), values[i].len() as f64);
    }
    report.stat("sigma_w", sigma_w);
    report.stat("delta", gap);
    report.stat("accuracy", accuracy);
    report.stat("skipped_points", skipped as f64);
    if gap <= 1e-12 * scale {
        return Ok(report.inapplicable("degenerate: basin means coincide (no between-basin gap)"));
    }
    report.stat("sigma_over_delta", sigma_w / gap);
    if sigma_w > separation_tol * gap {
        // the point farthest from its basin mean
        let (b, k, y) = values
            .iter()
            .enumerate()
            .flat_map(|(b, v)| v.iter().map(move |&(k, y)| (b, k, y)))
            .max_by(|p, q| (p.2 - means[p.0]).abs().total_cmp(&(q.2 - means[q.0]).abs()))
            .expect("non-empty");
        report.counterexample(
            points[k],
            &[("re_phi", y), ("basin_mean", means[b]), ("sigma_w", sigma_w), ("delta", gap)],
        );
    }
    if let Some(min) = min_accuracy {
        if accuracy < min {
            for (b, v) in values.iter().enumerate() {
                for &(k, y) in v.iter().filter(|(_, y)| nearest(*y) != b) {
                    report.counterexample(points[k], &[("re_phi", y), ("basin_mean", means[b]), ("accuracy", accuracy)]);
                }
            }
        }
    }
    report.decide();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldKind {
    Stable,
    Unstable,
}

/// Points on the unstable manifold of `fixed_point`, traced forward from
/// `+-offset` along each real unstable Jacobian direction and sampled at
/// `samples + 1` equally spaced times in `[0, horizon]`.
pub fn trace_unstable_manifold(
    spec: &VectorFieldSpec,
    fixed_point: &[f64],
    offset: f64,
    horizon: f64,
    samples: usize,
) -> Result<Vec<Vec<f64>>> {
    let jac = spec.jacobian(fixed_point);
    let ed = eigen_decompose(&jac)?;
    let times: Vec<f64> = (0..=samples).map(|k| horizon * k as f64 / samples.max(1) as f64).collect();
    let mut out = Vec::new();
    for (i, mu) in ed.values.iter().enumerate() {
        if !(mu.re > 0.0) || mu.im.abs() > 1e-12 * mu.norm() {
            continue;
        }
        let v: Vec<f64> = ed.right.column(i).iter().map(|z| z.re).collect();
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        for sign in [1.0, -1.0] {
            let x0: Vec<f64> = fixed_point.iter().zip(&v).map(|(p, c)| p + sign * offset * c / norm).collect();
            if let Orbit::States(states) = orbit(spec, &x0, &times)? {
                out.extend(states);
            }
        }
    }
    if out.is_empty() {
        return Err(KoopmanError::InvalidArgument("fixed point has no real unstable direction".into()));
    }
    Ok(out)
}

/// `max |phi|` on manifold samples against `tol * sup |phi|` over the region.
/// Values above `bound_cap` (or undefined) count as unbounded, which fails
/// the precondition.
#[allow(clippy::too_many_arguments)]
pub fn check_zero_on_invariant_manifold(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    manifold_samples: &[Vec<f64>],
    direction: ManifoldKind,
    region_samples: &[Vec<f64>],
    tol: f64,
    bound_cap: f64,
) -> Result<TheoremReport> {
    let inputs = json!({
        "target": pair_inputs(pair, dict), "manifold": manifold_samples, "direction": direction,
        "region": region_samples, "tol": tol, "bound_cap": bound_cap
    });
    let mut report = TheoremReport::new("corollary5", &inputs);
    report.tolerance("relative", tol);
    report.tolerance("bound_cap", bound_cap);
    let sign_ok = match direction {
        ManifoldKind::Stable => pair.lambda.re > 0.0,
        ManifoldKind::Unstable => pair.lambda.re < 0.0,
    };
    if !sign_ok {
        return Ok(report.inapplicable(format!("Re lambda = {} does not match a {direction:?} manifold", pair.lambda.re)));
    }
    if manifold_samples.is_empty() || region_samples.is_empty() {
        return Ok(report.inapplicable("empty sample set"));
    }
    let bounded_max = |xs: &[Vec<f64>]| -> Result<Option<(f64, Vec<f64>)>> {
        let mut best = (0.0f64, xs[0].clone());
        for x in xs {
            if !pair.defined_at(x) {
                return Ok(None);
            }
            let v = phi(pair, dict, x)?.norm();
            if !v.is_finite() || v > bound_cap {
                return Ok(None);
            }
            if v > best.0 {
                best = (v, x.clone());
            }
        }
        Ok(Some(best))
    };
    let Some((sup, _)) = bounded_max(region_samples)? else {
        return Ok(report.inapplicable("phi is unbounded on the region sample; the corollary does not apply"));
    };
    let Some((on_manifold, at)) = bounded_max(manifold_samples)? else {
        return Ok(report.inapplicable("phi is unbounded on the manifold sample; the corollary does not apply"));
    };
    report.stat("sup_abs_phi_region", sup);
    report.stat("max_abs_phi_manifold", on_manifold);
    report.stat("manifold_samples", manifold_samples.len() as f64);
    if sup <= PHI_FLOOR {
        return Ok(report.inapplicable("phi vanishes on the region sample"));
    }
    report.stat("ratio", on_manifold / sup);
    if on_manifold > tol * sup {
        report.counterexample(&at, &[("abs_phi", on_manifold), ("sup_abs_phi", sup)]);
    }
    report.decide();
    Ok(report)
}

/// Orbit points of a conservative system: `per_orbit` samples on
/// `[0, horizon)` for each start.
pub fn orbit_samples(spec: &VectorFieldSpec, starts: &[Vec<f64>], horizon: f64, per_orbit: usize) -> Result<Vec<Vec<f64>>> {
    let times: Vec<f64> = (0..per_orbit).map(|k| horizon * k as f64 / per_orbit as f64).collect();
    let mut out = Vec::new();
    for x in starts {
        if let Orbit::States(s) = orbit(spec, x, &times)? {
            out.extend(s);
        }
    }
    Ok(out)
}

/// (a) pairs with `|Re lambda| > tol_re` are small on the orbit samples
/// relative to their sup over `reference_samples`; (b) share of the
/// spectrum within `tol_re` of the imaginary axis.
pub fn check_closed_orbit_spectrum(
    spec: &VectorFieldSpec,
    pairs: &[Eigenpair],
    dict: Option<&Dictionary>,
    orbit_points: &[Vec<f64>],
    reference_samples: &[Vec<f64>],
    tol_re: f64,
    tol_phi: f64,
) -> Result<TheoremReport> {
    let inputs = json!({
        "system": spec, "pairs": pairs, "dictionary": dict.map(|d| d.hash()), "orbits": orbit_points,
        "reference": reference_samples.len(), "tol_re": tol_re, "tol_phi": tol_phi
    });
    let mut report = TheoremReport::new("theorem8", &inputs);
    report.tolerance("re_lambda", tol_re);
    report.tolerance("phi", tol_phi);
    if !spec.has_closed_orbits() {
        return Ok(report.inapplicable(format!("system `{}` has no family of closed orbits", spec.name())));
    }
    if orbit_points.is_empty() {
        return Ok(report.inapplicable("no orbit samples"));
    }
    let considered: Vec<&Eigenpair> = pairs.iter().filter(|p| !p.vanishes_on_sample).collect();
    let near_axis = considered.iter().filter(|p| p.lambda.re.abs() <= tol_re).count();
    let max_re = considered.iter().map(|p| p.lambda.re.abs()).fold(0.0, f64::max);
    report.stat("pairs", considered.len() as f64);
    report.stat("pairs_near_imaginary_axis", near_axis as f64);
    report.stat(
        "fraction_near_imaginary_axis",
        if considered.is_empty() { 1.0 } else { near_axis as f64 / considered.len() as f64 },
    );
    report.stat("max_abs_re_lambda", max_re);
    let mut tested = 0;
    let mut worst = 0.0f64;
    for (i, p) in pairs.iter().enumerate() {
        if p.vanishes_on_sample || p.lambda.re.abs() <= tol_re {
            continue;
        }
        tested += 1;
        let mut sup = 0.0f64;
        for x in reference_samples.iter().chain(orbit_points) {
            sup = sup.max(phi(p, dict, x)?.norm());
        }
        if sup <= PHI_FLOOR {
            continue;
        }
        let (mut on_orbit, mut at) = (0.0f64, &orbit_points[0]);
        for x in orbit_points {
            let v = phi(p, dict, x)?.norm();
            if v > on_orbit {
                on_orbit = v;
                at = x;
            }
        }
        worst = worst.max(on_orbit / sup);
        if on_orbit > tol_phi * sup {
            report.counterexample(
                at,
                &[("pair", i as f64), ("lambda_re", p.lambda.re), ("abs_phi", on_orbit), ("sup_abs_phi", sup)],
            );
        }
    }
    report.stat("tested_pairs", tested as f64);
    report.stat("max_orbit_ratio", worst);
    if tested == 0 {
        report.note(format!("no pair has |Re lambda| > {tol_re}; assertion (a) holds with an empty test set"));
    }
    report.decide();
    Ok(report)
}

fn short(r: f64) -> String {
    format!("{r:e}")
}

/// Growth table of `|phi(x* +- r e_i)|` as `r` decreases; checks strict
/// monotone growth and that the smallest radius exceeds `threshold`.
pub fn check_blowup_near_stable_point(
    pair: &Eigenpair,
    spec: &VectorFieldSpec,
    fixed_point: &FixedPoint,
    radii: &[f64],
    threshold: f64,
) -> Result<TheoremReport> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|w| w[1] >= w[0]) {
        return Err(KoopmanError::InvalidArgument("radii must be positive and strictly decreasing".into()));
    }
    let inputs = json!({ "pair": pair, "system": spec, "fixed_point": fixed_point, "radii": radii, "threshold": threshold });
    let mut report = TheoremReport::new("theorem2", &inputs);
    report.tolerance("threshold", threshold);
    if !matches!(pair.eigenfunction, Eigenfunction::Oracle(_)) {
        return Ok(report.inapplicable("the growth table needs a closed-form eigenfunction"));
    }
    if !(pair.lambda.re > 0.0) {
        return Ok(report.inapplicable(format!("Re lambda = {} is not > 0", pair.lambda.re)));
    }
    if fixed_point.stability != StabilityClass::Stable {
        return Ok(report.inapplicable("the fixed point is not stable"));
    }
    let d = fixed_point.location.len();
    let mut table: Vec<(String, Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
    for axis in 0..d {
        for (side, sign) in [("minus", -1.0), ("plus", 1.0)] {
            let mut values = Vec::new();
            let mut points = Vec::new();
            for &r in radii {
                let mut x = fixed_point.location.clone();
                x[axis] += sign * r;
                if !pair.defined_at(&x) {
                    return Ok(report.inapplicable(format!("phi undefined at {x:?}")));
                }
                let v = phi(pair, None, &x)?;
                if !(v.re > 0.0) || v.im.abs() > 1e-12 * v.norm() {
                    return Ok(report.inapplicable(format!("phi is not positive at {x:?}")));
                }
                values.push(v.re);
                points.push(x);
            }
            let name = if d == 1 { side.to_string() } else { format!("{side}{axis}") };
            table.push((name, values, points));
        }
    }
    for (name, values, points) in &table {
        for (i, (&r, v)) in radii.iter().zip(values).enumerate() {
            report.stat(&format!("abs_phi_{name}_r{}", short(r)), *v);
            if i > 0 && *v <= values[i - 1] {
                report.counterexample(&points[i], &[("r", r), ("abs_phi", *v), ("previous", values[i - 1])]);
            }
        }
        let last = *values.last().expect("non-empty radii");
        if last <= threshold {
            report.counterexample(points.last().expect("non-empty"), &[("abs_phi", last), ("threshold", threshold)]);
        }
    }
    report.decide();
    Ok(report)
}

/// With `phi` real, positive and bounded away from 0 on `region`, every
/// start leaves the region within `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn check_exit_when_bounded_away(
    pair: &Eigenpair,
    dict: Option<&Dictionary>,
    spec: &VectorFieldSpec,
    region: &BoxRegion,
    starts: &[Vec<f64>],
    horizon: f64,
    dense: usize,
    exit_step: f64,
) -> Result<TheoremReport> {
    let inputs = json!({
        "target": pair_inputs(pair, dict), "system": spec, "region": region, "starts": starts,
        "horizon": horizon, "dense": dense, "exit_step": exit_step
    });
    let mut report = TheoremReport::new("exit_theorem", &inputs);
    report.tolerance("exit_step", exit_step);
    report.stat("horizon", horizon);
    if pair.lambda.re.abs() <= PHI_FLOOR {
        return Ok(report.inapplicable("Re lambda = 0"));
    }
    let grid = region.grid(&vec![dense.max(1); region.dim()])?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for x in &grid {
        if !pair.defined_at(x) {
            return Ok(report.inapplicable(format!("phi undefined at {x:?}")));
        }
        let v = phi(pair, dict, x)?;
        if !(v.re > 0.0) || v.im.abs() > 1e-9 * v.norm() {
            return Ok(report.inapplicable(format!("phi is not real positive at {x:?}")));
        }
        lo = lo.min(v.re);
        hi = hi.max(v.re);
    }
    report.stat("epsilon", lo);
    report.stat("c_upper", hi);
    if lo < PHI_FLOOR {
        return Ok(report.inapplicable("phi is not bounded away from 0"));
    }
    let exits: Vec<Result<Option<f64>>> = starts
        .par_iter()
        .map(|x| exit_time(spec, x, region, horizon, exit_step))
        .collect();
    let (mut worst, mut exited) = (0.0f64, 0usize);
    for (x, e) in starts.iter().zip(exits) {
        match e? {
            Some(t) => {
                exited += 1;
                worst = worst.max(t);
            }
            None => report.counterexample(x, &[("horizon", horizon)]),
        }
    }
    report.stat("starts", starts.len() as f64);
    report.stat("exited_fraction", if starts.is_empty() { 0.0 } else { exited as f64 / starts.len() as f64 });
    report.stat("max_exit_time", worst);
    if starts.is_empty() {
        return Ok(report.inapplicable("no starts"));
    }
    report.decide();
    Ok(report)
}
