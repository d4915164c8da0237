//! The registered check suite: one report per theorem id, in fixed order.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{TheoremReport, Verdict};
use super::theorems::*;
use crate::error::{KoopmanError, Result};
use crate::koopman_fit::{compose_eigenpairs, Eigenpair};
use crate::oracles::AnalyticOracle;
use crate::rng;
use crate::setup::{build_fit, derive_seed, fixed_points_in, FitBlock, Fitted, SystemBlock};
use crate::systems::{
    BasinGrid, BoxRegion, FixedPoint, StabilityClass, SystemKind, VectorFieldSpec, DEFAULT_CAPTURE_RADIUS,
    DEFAULT_HORIZON,
};

/// Registered check ids, in report order.
pub const CHECK_IDS: [&str; 8] = [
    "lemma1",
    "theorem2",
    "theorem3",
    "theorem4",
    "exit_theorem",
    "corollary5",
    "lemma6_theorem7",
    "theorem8",
];

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `|lambda| <= tol` (continuous) or `|lambda_d - 1| <= tol` (discrete).
pub fn near_zero(pair: &Eigenpair, tol: f64) -> bool {
    match pair.lambda_discrete {
        Some(ld) => (ld - 1.0).norm() <= tol,
        None => pair.lambda.norm() <= tol,
    }
}

defaults!(Lemma1Config {
    fit: String = "bistable_anchored".into(),
    oracle_system: String = "bistable".into(),
    tol_lambda: f64 = 1e-3,
    tol_phi: f64 = 5e-2,
    oracle_tol_phi: f64 = 1e-10,
});

defaults!(Theorem2Config {
    system: String = "bistable".into(),
    radii: Vec<f64> = vec![0.1, 0.03, 0.01, 0.003, 0.001],
    threshold: f64 = 20.0,
});

defaults!(Theorem3Config {
    system: String = "bistable".into(),
    region: BoxRegion = BoxRegion { lower: vec![0.1], upper: vec![0.9] },
    starts: usize = 200,
    tol: f64 = 0.01,
    dense: usize = 1001,
    exit_step: f64 = 1e-3,
});

defaults!(Theorem4Config {
    system: String = "bistable".into(),
    c: f64 = 1.0,
    sample_region: BoxRegion = BoxRegion::cube(1, 2.0),
    starts: usize = 200,
    horizon: f64 = 5.0,
    steps: usize = 50,
    drift_tol: f64 = 1e-6,
});

defaults!(ExitConfig {
    system: String = "bistable".into(),
    growth_region: BoxRegion = BoxRegion { lower: vec![0.1], upper: vec![0.9] },
    decay_region: BoxRegion = BoxRegion { lower: vec![0.5], upper: vec![0.9] },
    starts: usize = 200,
    horizon: f64 = 20.0,
    dense: usize = 1001,
    exit_step: f64 = 1e-3,
});

defaults!(Corollary5Config {
    oracle_system: String = "bistable".into(),
    oracle_tol: f64 = 1e-10,
    /// Half-width of the bounded region sample around the stable manifold {0}.
    stable_half_width: f64 = 0.5,
    bound_cap: f64 = 1e6,
    fit: String = "duffing_discrete".into(),
    offset: f64 = 1e-4,
    horizon: f64 = 10.0,
    samples: usize = 200,
    tol: f64 = 0.1,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinCase {
    pub fit: String,
    /// Ground-truth basin grid over the fit's region.
    pub truth_resolution: Vec<usize>,
    pub min_accuracy: f64,
}

defaults!(Lemma6Config {
    cases: Vec<BasinCase> = vec![
        BasinCase { fit: "bistable_basin".into(), truth_resolution: vec![401], min_accuracy: 0.99 },
        BasinCase { fit: "duffing_basin".into(), truth_resolution: vec![101, 101], min_accuracy: 0.95 },
    ],
    separation_tol: f64 = 0.05,
    lambda_tol: f64 = 1e-3,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitCase {
    pub fit: String,
    pub tol_re: f64,
}

defaults!(Theorem8Config {
    cases: Vec<OrbitCase> = vec![
        OrbitCase { fit: "harmonic".into(), tol_re: 1e-6 },
        OrbitCase { fit: "duffing_undamped".into(), tol_re: 0.05 },
        OrbitCase { fit: "duffing_discrete".into(), tol_re: 0.05 },
    ],
    tol_phi: f64 = 0.05,
    /// Orbit starts are drawn from `{energy <= max_energy}`.
    max_energy: f64 = 1.0,
    orbit_starts: usize = 20,
    orbit_horizon: f64 = 10.0,
    per_orbit: usize = 50,
});

/// Tolerances and fit references of every registered check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub lemma1: Lemma1Config,
    pub theorem2: Theorem2Config,
    pub theorem3: Theorem3Config,
    pub theorem4: Theorem4Config,
    pub exit_theorem: ExitConfig,
    pub corollary5: Corollary5Config,
    pub lemma6_theorem7: Lemma6Config,
    pub theorem8: Theorem8Config,
}

/// The serialized output of a suite run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub verdict: Verdict,
    pub reports: Vec<TheoremReport>,
}

/// Violated if any report is, supported if all are decided, else inconclusive.
pub fn aggregate(reports: &[TheoremReport]) -> Verdict {
    if reports.iter().any(|r| r.verdict == Verdict::Violated) {
        Verdict::Violated
    } else if !reports.is_empty() && reports.iter().all(|r| r.verdict == Verdict::Supported) {
        Verdict::Supported
    } else {
        Verdict::Inconclusive
    }
}

struct Context<'a> {
    systems: &'a BTreeMap<String, SystemBlock>,
    fits: &'a BTreeMap<String, FitBlock>,
    seed: u64,
    cache: RefCell<BTreeMap<String, std::result::Result<Rc<Fitted>, String>>>,
}

impl Context<'_> {
    fn fit(&self, name: &str) -> Result<Rc<Fitted>> {
        if let Some(hit) = self.cache.borrow().get(name) {
            return hit.clone().map_err(KoopmanError::InvalidArgument);
        }
        let built = match self.fits.get(name) {
            None => Err(format!("unknown fit `{name}`")),
            Some(block) => build_fit(name, block, self.systems, derive_seed(self.seed, name))
                .map(Rc::new)
                .map_err(|e| format!("fit `{name}`: {e}")),
        };
        self.cache.borrow_mut().insert(name.to_string(), built.clone());
        built.map_err(KoopmanError::InvalidArgument)
    }

    fn system(&self, name: &str) -> Result<(VectorFieldSpec, BoxRegion)> {
        let block = self
            .systems
            .get(name)
            .ok_or_else(|| KoopmanError::UnknownSystem(name.to_string()))?;
        Ok((block.spec()?, block.region.clone()))
    }

    /// A system block that must be the bistable system the oracles belong to.
    fn bistable(&self, name: &str) -> Result<(VectorFieldSpec, BoxRegion)> {
        let (spec, region) = self.system(name)?;
        if spec.kind() != SystemKind::Bistable {
            return Err(KoopmanError::InvalidArgument(format!(
                "system `{name}` is `{}`; the closed-form pairs belong to `bistable`",
                spec.name()
            )));
        }
        Ok((spec, region))
    }
}

fn errored(id: &str, case: &str, err: &KoopmanError) -> TheoremReport {
    let mut r = TheoremReport::new(id, &json!({ "case": case, "error": err.to_string() }));
    r.note(format!("error: {err}"));
    r
}

fn case(id: &str, name: &str, run: impl FnOnce() -> Result<TheoremReport>) -> TheoremReport {
    let mut r = match run() {
        Ok(r) => r,
        Err(e) => errored(id, name, &e),
    };
    r.theorem_id = id.to_string();
    r.with_case(name)
}

fn uniform_starts(region: &BoxRegion, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| region.sample(rng)).collect()
}

fn growth() -> Eigenpair {
    Eigenpair::from_oracle(AnalyticOracle::bistable_growth())
}

fn decay() -> Eigenpair {
    Eigenpair::from_oracle(AnalyticOracle::bistable_decay())
}

fn stable_point(points: &[FixedPoint], at: f64) -> Result<FixedPoint> {
    points
        .iter()
        .find(|p| p.stability == StabilityClass::Stable && (p.location[0] - at).abs() < 1e-6)
        .cloned()
        .ok_or_else(|| KoopmanError::InvalidArgument(format!("no stable fixed point at {at}")))
}

fn lemma1(ctx: &Context, cfg: &Lemma1Config) -> Vec<TheoremReport> {
    let id = "lemma1";
    let oracle = case(id, "oracle", || {
        let (spec, region) = ctx.bistable(&cfg.oracle_system)?;
        let fps = fixed_points_in(&spec, &region)?;
        check_fixed_point_zero(&[growth(), decay()], None, &fps, cfg.tol_lambda, cfg.oracle_tol_phi)
    });
    let fitted = case(id, "fitted", || {
        let fit = ctx.fit(&cfg.fit)?;
        check_fixed_point_zero(&fit.pairs, Some(fit.dictionary()), &fit.fixed_points, cfg.tol_lambda, cfg.tol_phi)
    });
    vec![oracle, fitted]
}

fn theorem2(ctx: &Context, cfg: &Theorem2Config) -> Vec<TheoremReport> {
    vec![case("theorem2", "oracle_growth", || {
        let (spec, region) = ctx.bistable(&cfg.system)?;
        let fp = stable_point(&fixed_points_in(&spec, &region)?, 1.0)?;
        check_blowup_near_stable_point(&growth(), &spec, &fp, &cfg.radii, cfg.threshold)
    })]
}

fn theorem3(ctx: &Context, cfg: &Theorem3Config) -> Vec<TheoremReport> {
    let mut rng = rng::stream(ctx.seed, "theorem3");
    vec![case("theorem3", "oracle_growth", || {
        let (spec, _) = ctx.bistable(&cfg.system)?;
        let starts = uniform_starts(&cfg.region, cfg.starts, &mut rng);
        check_escape_time(&growth(), None, &spec, &cfg.region, &starts, cfg.tol, cfg.dense, cfg.exit_step)
    })]
}

fn theorem4(ctx: &Context, cfg: &Theorem4Config) -> Vec<TheoremReport> {
    let id = "theorem4";
    let mut rng = rng::stream(ctx.seed, id);
    let mut sample_inside = |pair: &Eigenpair| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(cfg.starts);
        for _ in 0..cfg.starts.saturating_mul(1000) {
            if out.len() == cfg.starts {
                break;
            }
            let x = cfg.sample_region.sample(&mut rng);
            if pair.defined_at(&x) && crate::koopman_fit::eval_eigenfunction(pair, None, &x)?.norm() <= cfg.c {
                out.push(x);
            }
        }
        Ok(out)
    };
    let oracle = case(id, "oracle_decay", || {
        let (spec, _) = ctx.bistable(&cfg.system)?;
        let pair = decay();
        let starts = sample_inside(&pair)?;
        check_level_set_invariance(&pair, None, &spec, cfg.c, &starts, cfg.horizon, cfg.steps, cfg.drift_tol)
    });
    let composed = case(id, "composed_invariant", || {
        let (spec, _) = ctx.bistable(&cfg.system)?;
        // phi_1^2 phi_2 = sign(1 - x^2), lambda = 2 * 1 - 2 = 0
        let pair = compose_eigenpairs(&growth(), &decay(), 2, 1)?;
        let starts = sample_inside(&pair)?;
        check_level_set_invariance(&pair, None, &spec, cfg.c, &starts, cfg.horizon, cfg.steps, cfg.drift_tol)
    });
    vec![oracle, composed]
}

fn exit_theorem(ctx: &Context, cfg: &ExitConfig) -> Vec<TheoremReport> {
    let id = "exit_theorem";
    let mut rng = rng::stream(ctx.seed, id);
    let mut run = |name: &str, pair: Eigenpair, region: &BoxRegion| {
        let starts = uniform_starts(region, cfg.starts, &mut rng);
        case(id, name, || {
            let (spec, _) = ctx.bistable(&cfg.system)?;
            check_exit_when_bounded_away(&pair, None, &spec, region, &starts, cfg.horizon, cfg.dense, cfg.exit_step)
        })
    };
    vec![
        run("oracle_growth", growth(), &cfg.growth_region),
        run("oracle_decay", decay(), &cfg.decay_region),
    ]
}

fn corollary5(ctx: &Context, cfg: &Corollary5Config) -> Vec<TheoremReport> {
    let id = "corollary5";
    let mut out = Vec::new();
    out.push(case(id, "oracle_growth_stable_manifold", || {
        ctx.bistable(&cfg.oracle_system)?;
        let h = cfg.stable_half_width;
        let region = BoxRegion::new(vec![-h], vec![h])?.grid(&[101])?;
        check_zero_on_invariant_manifold(&growth(), None, &[vec![0.0]], ManifoldKind::Stable, &region, cfg.oracle_tol, cfg.bound_cap)
    }));
    out.push(case(id, "oracle_decay_unstable_manifold", || {
        ctx.bistable(&cfg.oracle_system)?;
        // the unstable manifold of 0 inside (0, 1), refined towards 0
        let samples: Vec<Vec<f64>> = (0..200).map(|k| vec![10f64.powf(-6.0 * (k as f64 + 1.0) / 200.0)]).collect();
        check_zero_on_invariant_manifold(&decay(), None, &samples, ManifoldKind::Unstable, &samples, cfg.oracle_tol, cfg.bound_cap)
    }));
    match ctx.fit(&cfg.fit).and_then(|fit| {
        let saddle = fit
            .fixed_points
            .iter()
            .find(|p| p.stability == StabilityClass::Saddle)
            .ok_or_else(|| KoopmanError::InvalidArgument(format!("fit `{}` has no saddle in its region", cfg.fit)))?;
        let manifold = trace_unstable_manifold(&fit.spec, &saddle.location, cfg.offset, cfg.horizon, cfg.samples)?;
        Ok((fit, manifold))
    }) {
        Err(e) => out.push(errored(id, "fitted", &e)),
        Ok((fit, manifold)) => {
            // complex pairs of a damped focus are unbounded near the saddle's
            // stable manifold, so only real decaying pairs meet the hypothesis
            for (k, pair) in fit.pairs.iter().enumerate() {
                let real = pair.lambda.im.abs() <= 1e-9 * pair.lambda.norm().max(1.0);
                if pair.vanishes_on_sample || !real || !(pair.lambda.re < 0.0) || near_zero(pair, 1e-3) {
                    continue;
                }
                out.push(case(id, &format!("fitted_pair_{k}"), || {
                    let mut r = check_zero_on_invariant_manifold(
                        pair,
                        Some(fit.dictionary()),
                        &manifold,
                        ManifoldKind::Unstable,
                        fit.model.samples(),
                        cfg.tol,
                        cfg.bound_cap,
                    )?;
                    r.stat("lambda_re", pair.lambda.re);
                    r.note("saddle smallness of a fitted eigenfunction (qualitative continuity evidence)");
                    Ok(r)
                }));
            }
        }
    }
    out
}

fn lemma6(ctx: &Context, cfg: &Lemma6Config) -> Vec<TheoremReport> {
    let id = "lemma6_theorem7";
    cfg.cases
        .iter()
        .map(|c| {
            case(id, &c.fit, || {
                let fit = ctx.fit(&c.fit)?;
                let truth = BasinGrid::compute(
                    &fit.spec,
                    &fit.region,
                    &c.truth_resolution,
                    &fit.fixed_points,
                    DEFAULT_HORIZON,
                    DEFAULT_CAPTURE_RADIUS,
                    1e-9,
                )?;
                let candidates: Vec<(usize, &Eigenpair)> = fit
                    .pairs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| near_zero(p, cfg.lambda_tol) && !p.vanishes_on_sample)
                    .collect();
                if candidates.is_empty() {
                    let r = TheoremReport::new(id, &json!({ "fit": c.fit }));
                    return Ok(r.inapplicable("no lambda ~ 0 pair"));
                }
                let mut best: Option<(f64, usize, TheoremReport)> = None;
                for &(k, pair) in &candidates {
                    let r = check_basin_constancy(pair, Some(fit.dictionary()), &truth, cfg.separation_tol, Some(c.min_accuracy))?;
                    let score = r.statistics.get("sigma_over_delta").copied().unwrap_or(f64::INFINITY);
                    if best.as_ref().is_none_or(|b| score < b.0) {
                        best = Some((score, k, r));
                    }
                }
                let (_, k, mut r) = best.expect("non-empty candidates");
                r.stat("pair_index", k as f64);
                r.stat("lambda_re", fit.pairs[k].lambda.re);
                r.note(format!(
                    "pair {k} has the smallest sigma_w / delta among {} lambda ~ 0 pairs",
                    candidates.len()
                ));
                Ok(r)
            })
        })
        .collect()
}

fn theorem8(ctx: &Context, cfg: &Theorem8Config) -> Vec<TheoremReport> {
    let id = "theorem8";
    let mut rng = rng::stream(ctx.seed, id);
    cfg.cases
        .iter()
        .map(|c| {
            let fit = match ctx.fit(&c.fit) {
                Ok(f) => f,
                Err(e) => return errored(id, &c.fit, &e),
            };
            let mut starts = Vec::with_capacity(cfg.orbit_starts);
            for _ in 0..cfg.orbit_starts.saturating_mul(1000) {
                if starts.len() == cfg.orbit_starts {
                    break;
                }
                let x = fit.region.sample(&mut rng);
                if fit.spec.energy(&x).is_none_or(|e| e <= cfg.max_energy) {
                    starts.push(x);
                }
            }
            case(id, &c.fit, || {
                let orbits = orbit_samples(&fit.spec, &starts, cfg.orbit_horizon, cfg.per_orbit)?;
                check_closed_orbit_spectrum(
                    &fit.spec,
                    &fit.pairs,
                    Some(fit.dictionary()),
                    &orbits,
                    fit.model.samples(),
                    c.tol_re,
                    cfg.tol_phi,
                )
            })
        })
        .collect()
}

/// Runs the registered checks (all of them, or those named in `only`) and
/// returns one merged report per check in registry order. Errors inside a
/// check become inconclusive cases with an error note.
pub fn run_all_checks(
    systems: &BTreeMap<String, SystemBlock>,
    fits: &BTreeMap<String, FitBlock>,
    config: &SuiteConfig,
    seed: u64,
    only: Option<&[String]>,
) -> Result<Vec<TheoremReport>> {
    if let Some(ids) = only {
        if let Some(bad) = ids.iter().find(|i| !CHECK_IDS.contains(&i.as_str())) {
            return Err(KoopmanError::InvalidArgument(format!(
                "unknown check id `{bad}` (known: {})",
                CHECK_IDS.join(", ")
            )));
        }
    }
    let ctx = Context {
        systems,
        fits,
        seed,
        cache: RefCell::new(BTreeMap::new()),
    };
    let mut reports = Vec::new();
    for id in CHECK_IDS {
        if only.is_some_and(|ids| !ids.iter().any(|i| i == id)) {
            continue;
        }
        let (inputs, cases) = match id {
            "lemma1" => (json!(config.lemma1), lemma1(&ctx, &config.lemma1)),
            "theorem2" => (json!(config.theorem2), theorem2(&ctx, &config.theorem2)),
            "theorem3" => (json!(config.theorem3), theorem3(&ctx, &config.theorem3)),
            "theorem4" => (json!(config.theorem4), theorem4(&ctx, &config.theorem4)),
            "exit_theorem" => (json!(config.exit_theorem), exit_theorem(&ctx, &config.exit_theorem)),
            "corollary5" => (json!(config.corollary5), corollary5(&ctx, &config.corollary5)),
            "lemma6_theorem7" => (json!(config.lemma6_theorem7), lemma6(&ctx, &config.lemma6_theorem7)),
            "theorem8" => (json!(config.theorem8), theorem8(&ctx, &config.theorem8)),
            _ => unreachable!("registry id"),
        };
        let inputs = json!({ "config": inputs, "seed": seed });
        let mut report = TheoremReport::merge(id, &inputs, cases);
        for c in &report.cases {
            for n in c.notes.iter().filter(|n| n.starts_with("error:")) {
                report.notes.push(format!("{}: {n}", c.case));
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
