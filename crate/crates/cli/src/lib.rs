//! Config-driven commands behind the `koopman` binary. Each command returns
//! an [`Outcome`] (exit code, machine summary, human summary) or a
//! [`CliError`] that maps onto exit code 2 (config) or 3 (runtime).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use koopman_core::checks::report::TheoremReport;
use koopman_core::checks::suite::{aggregate, ReportDocument, REPORT_SCHEMA_VERSION};
use koopman_core::checks::{run_all_checks, Verdict};
use koopman_core::control::{run_control, ControlRun};
use koopman_core::koopman_fit::{eval_eigenfunction, Eigenpair};
use koopman_core::setup::{build_fit, derive_seed, FitBlock, Model, SystemBlock};
use koopman_core::systems::{trajectory, BoxRegion, FixedPoint, DEFAULT_TOL};
use koopman_core::KoopmanError;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub mod config;
pub mod output;

pub use config::ExperimentConfig;
use output::{file_stem, num, write_json, CsvTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// The JSON object written to stderr.
    pub fn to_json(&self) -> Value {
        let kind = match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        };
        json!({ "error": { "kind": kind, "message": self.to_string() }, "exit_code": self.exit_code() })
    }
}

impl From<KoopmanError> for CliError {
    fn from(e: KoopmanError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    /// Printed with `--json`.
    pub summary: Value,
    /// Printed otherwise.
    pub human: String,
    pub files: Vec<PathBuf>,
}

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A loaded config with the command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

impl Session {
    pub fn new(mut config: ExperimentConfig, opts: &RunOptions) -> Result<Self, CliError> {
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        config.validate()?;
        let out_dir = opts
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(config::DEFAULT_OUTPUT_DIR));
        let config_hash = config.hash();
        Ok(Self {
            config,
            out_dir,
            config_hash,
        })
    }

    pub fn load(path: Option<&Path>, opts: &RunOptions) -> Result<Self, CliError> {
        let config = match path {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Self::new(config, opts)
    }

    fn path(&self, name: &str) -> PathBuf {
        output::out_path(&self.out_dir, name)
    }
}

/// Integrates `x0` over `[0, t]` (backwards when `t < 0`) and writes
/// `trajectory_<system>.csv` with `steps + 1` rows.
pub fn cmd_simulate(s: &Session, system: &str, x0: &[f64], t: f64, steps: usize) -> Result<Outcome, CliError> {
    let block = s.config.system(system)?;
    let spec = block.spec().map_err(|e| CliError::Config(e.to_string()))?;
    if x0.len() != spec.dimension() {
        return Err(CliError::Config(format!(
            "x0 has {} entries, system `{system}` has dimension {}",
            x0.len(),
            spec.dimension()
        )));
    }
    if !t.is_finite() || x0.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("x0 and t must be finite".into()));
    }
    if steps == 0 {
        return Err(CliError::Config("steps must be >= 1".into()));
    }
    let times: Vec<f64> = if t == 0.0 {
        vec![0.0]
    } else {
        (0..=steps).map(|k| if k == 0 { 0.0 } else { t * k as f64 / steps as f64 }).collect()
    };
    let traj = trajectory(&spec, x0, &times, DEFAULT_TOL)?;
    let mut table = CsvTable::new(std::iter::once("t".to_string()).chain((1..=x0.len()).map(|i| format!("x{i}"))));
    for (t, x) in traj.times.iter().zip(&traj.states) {
        table.push(std::iter::once(*t).chain(x.iter().copied()).map(num).collect());
    }
    let path = s.path(&format!("trajectory_{}.csv", file_stem(system)));
    table.write(&path, &s.config_hash)?;
    let last = traj.states.last().expect("at least one sample");
    Ok(Outcome {
        exit_code: EXIT_OK,
        summary: json!({
            "command": "simulate",
            "system": system,
            "rows": table.len(),
            "final_state": last,
            "backward": t < 0.0,
            "config_hash": s.config_hash,
            "files": [path],
        }),
        human: format!("{system}: {} samples, x({t}) = {last:?}\nwrote {}\n", table.len(), path.display()),
        files: vec![path],
    })
}

/// Serialized fit: the model, its eigenpairs and the system it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub fit: String,
    pub block: FitBlock,
    pub system: SystemBlock,
    pub fixed_points: Vec<FixedPoint>,
    pub model: Model,
    pub eigenpairs: Vec<Eigenpair>,
}

impl ModelArtifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("model artifact {} unavailable ({e}); run `koopman fit` first", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("model artifact {}: {e}", path.display())))
    }
}

pub fn model_file(fit: &str) -> String {
    format!("model_{}.json", file_stem(fit))
}

fn pair_table(pairs: &[Eigenpair], residual: f64) -> (String, Vec<Value>) {
    let mut text = format!("{:>4} {:>14} {:>14} {:>12} {:>11}\n", "id", "Re lambda", "Im lambda", "|lambda_d|", "residual");
    let mut rows = Vec::new();
    for (k, p) in pairs.iter().enumerate() {
        let ld = p.lambda_discrete.map(|l| l.norm());
        text.push_str(&format!(
            "{k:>4} {:>14.8} {:>14.8} {:>12} {:>11.3e}{}\n",
            p.lambda.re,
            p.lambda.im,
            ld.map_or("-".to_string(), |v| format!("{v:.8}")),
            residual,
            if p.vanishes_on_sample { "  (vanishes on sample)" } else { "" }
        ));
        rows.push(json!({
            "id": k,
            "lambda": [p.lambda.re, p.lambda.im],
            "abs_lambda_discrete": ld,
            "residual": residual,
            "vanishes_on_sample": p.vanishes_on_sample,
        }));
    }
    (text, rows)
}

/// Fits one named fit block, or all of them, and writes `model_<fit>.json`.
pub fn cmd_fit(s: &Session, fit: Option<&str>) -> Result<Outcome, CliError> {
    let names: Vec<String> = match fit {
        Some(name) => {
            s.config.fit(name)?;
            vec![name.to_string()]
        }
        None => s.config.fits.keys().cloned().collect(),
    };
    for name in &names {
        let block = &s.config.fits[name];
        s.config
            .system(&block.system)
            .map_err(|e| CliError::Config(format!("fit `{name}`: {e}")))?;
    }
    let mut human = String::new();
    let mut fits = Vec::new();
    let mut files = Vec::new();
    for name in &names {
        let block = &s.config.fits[name];
        let fitted = build_fit(name, block, &s.config.systems, derive_seed(s.config.seed, name))?;
        let artifact = ModelArtifact {
            schema_version: config::SCHEMA_VERSION,
            config_hash: s.config_hash.clone(),
            seed: s.config.seed,
            fit: name.clone(),
            block: block.clone(),
            system: s.config.systems[&block.system].clone(),
            fixed_points: fitted.fixed_points.clone(),
            model: fitted.model.clone(),
            eigenpairs: fitted.pairs.clone(),
        };
        let path = s.path(&model_file(name));
        write_json(&path, &artifact)?;
        let (ridge, defaulted) = match &fitted.model {
            Model::Discrete(m) => (m.ridge, m.ridge_defaulted),
            Model::Generator(m) => (m.ridge, m.ridge_defaulted),
        };
        let (table, rows) = pair_table(&fitted.pairs, fitted.model.residual());
        human.push_str(&format!(
            "fit {name} ({}), ridge {ridge:.3e}{}\n{table}wrote {}\n\n",
            block.system,
            if defaulted { " (default)" } else { "" },
            path.display()
        ));
        fits.push(json!({
            "fit": name,
            "system": block.system,
            "ridge": ridge,
            "ridge_defaulted": defaulted,
            "residual": fitted.model.residual(),
            "eigenpairs": rows,
            "file": path,
        }));
        files.push(path);
    }
    Ok(Outcome {
        exit_code: EXIT_OK,
        summary: json!({ "command": "fit", "config_hash": s.config_hash, "fits": fits }),
        human,
        files,
    })
}

fn counterexample_table(report: &TheoremReport) -> CsvTable {
    fn collect<'a>(r: &'a TheoremReport, case: &'a str, out: &mut Vec<(&'a str, &'a koopman_core::checks::Counterexample)>) {
        let name = if r.case.is_empty() { case } else { r.case.as_str() };
        for c in &r.counterexamples {
            out.push((name, c));
        }
        for sub in &r.cases {
            collect(sub, name, out);
        }
    }
    let mut all = Vec::new();
    collect(report, "", &mut all);
    let d = all.iter().map(|(_, c)| c.point.len()).max().unwrap_or(0);
    let mut table = CsvTable::new(
        ["case".to_string(), "index".to_string()]
            .into_iter()
            .chain((1..=d).map(|i| format!("x{i}")))
            .chain(["quantity".to_string(), "value".to_string()]),
    );
    for (k, (case, c)) in all.iter().enumerate() {
        for (q, v) in &c.values {
            let mut row = vec![case.to_string(), k.to_string()];
            row.extend((0..d).map(|i| c.point.get(i).map_or(String::new(), |v| num(*v))));
            row.push(q.clone());
            row.push(num(*v));
            table.push(row);
        }
    }
    table
}

/// Runs the theorem suite; writes `report.json` and one counterexample CSV
/// per check. Exit 1 when any check is violated.
pub fn cmd_verify(s: &Session, only: Option<&[String]>) -> Result<Outcome, CliError> {
    let reports = run_all_checks(&s.config.systems, &s.config.fits, &s.config.checks, s.config.seed, only).map_err(
        |e| match e {
            KoopmanError::InvalidArgument(m) => CliError::Config(m),
            other => other.into(),
        },
    )?;
    let doc = ReportDocument {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: s.config.seed,
        config_hash: s.config_hash.clone(),
        verdict: aggregate(&reports),
        reports,
    };
    let report_path = s.path("report.json");
    write_json(&report_path, &doc)?;
    let mut files = vec![report_path.clone()];
    let mut human = String::new();
    let mut verdicts = BTreeMap::new();
    for r in &doc.reports {
        let path = s.path(&format!("counterexamples_{}.csv", r.theorem_id));
        counterexample_table(r).write(&path, &s.config_hash)?;
        files.push(path);
        let label = verdict_name(r.verdict);
        human.push_str(&format!("{:<16} {label}\n", r.theorem_id));
        for n in r.notes.iter().filter(|n| n.starts_with("error:")) {
            human.push_str(&format!("{:<16}   {n}\n", ""));
        }
        verdicts.insert(r.theorem_id.clone(), label);
    }
    human.push_str(&format!("overall          {}\nwrote {}\n", verdict_name(doc.verdict), report_path.display()));
    let exit_code = if doc.verdict == Verdict::Violated { EXIT_VIOLATION } else { EXIT_OK };
    Ok(Outcome {
        exit_code,
        summary: json!({
            "command": "verify",
            "config_hash": s.config_hash,
            "seed": s.config.seed,
            "verdict": verdict_name(doc.verdict),
            "checks": verdicts,
            "files": files,
        }),
        human,
        files,
    })
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Supported => "supported",
        Verdict::Violated => "violated",
        Verdict::Inconclusive => "inconclusive",
    }
}

/// Parses `lo:hi,lo:hi,...`.
pub fn parse_region(text: &str) -> Result<BoxRegion, CliError> {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for part in text.split(',') {
        let (a, b) = part
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("region axis `{part}` is not lo:hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("region bound `{v}` is not a number")))
        };
        lower.push(parse(a)?);
        upper.push(parse(b)?);
    }
    BoxRegion::new(lower, upper).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct GridRequest {
    pub fit: String,
    pub pair: usize,
    pub region: Option<BoxRegion>,
    /// Points per axis; a single entry applies to every axis.
    pub resolution: Vec<usize>,
    /// Artifact path; defaults to `model_<fit>.json` in the output directory.
    pub model: Option<PathBuf>,
}

fn axis_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }
}

/// Evaluates one eigenfunction of a fitted artifact on a tensor grid and
/// writes `grid_<fit>_pair<k>.csv` (first axis slowest). Points outside the
/// training region are flagged in the `extrapolation` column.
pub fn cmd_grid(s: &Session, req: &GridRequest) -> Result<Outcome, CliError> {
    let path = req.model.clone().unwrap_or_else(|| s.path(&model_file(&req.fit)));
    let artifact = ModelArtifact::load(&path)?;
    let pair = artifact.eigenpairs.get(req.pair).ok_or_else(|| {
        CliError::Config(format!(
            "unknown pair id {} (fit `{}` has {} eigenpairs)",
            req.pair,
            artifact.fit,
            artifact.eigenpairs.len()
        ))
    })?;
    let training = &artifact.system.region;
    let region = req.region.clone().unwrap_or_else(|| training.clone());
    let d = training.dim();
    if region.dim() != d {
        return Err(CliError::Config(format!("grid region has dimension {}, the model {d}", region.dim())));
    }
    let resolution = match req.resolution.len() {
        1 => vec![req.resolution[0]; d],
        n if n == d => req.resolution.clone(),
        n => return Err(CliError::Config(format!("resolution has {n} entries for a {d}-dimensional model"))),
    };
    if resolution.contains(&0) {
        return Err(CliError::Config("resolution entries must be >= 1".into()));
    }
    let axes: Vec<Vec<f64>> = (0..d).map(|i| axis_points(region.lower[i], region.upper[i], resolution[i])).collect();
    let dict = artifact.model.dictionary();
    let mut table = CsvTable::new(
        (1..=d)
            .map(|i| format!("x{i}"))
            .chain(["re_phi", "im_phi", "abs_phi", "extrapolation"].map(String::from)),
    );
    let total: usize = resolution.iter().product();
    let mut by_basin: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut idx = vec![0usize; d];
    let mut extrapolated = 0;
    for _ in 0..total {
        let x: Vec<f64> = (0..d).map(|i| axes[i][idx[i]]).collect();
        let v = eval_eigenfunction(pair, Some(dict), &x)?;
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(CliError::Runtime(format!("non-finite eigenfunction value at {x:?}")));
        }
        let outside = !training.contains(&x);
        extrapolated += outside as usize;
        if let Some(map) = dict.indicator_map() {
            let e = by_basin.entry(map.nearest_basin(&x)).or_insert((0.0, 0));
            e.0 += v.re;
            e.1 += 1;
        }
        let mut row: Vec<String> = x.iter().map(|v| num(*v)).collect();
        row.extend([num(v.re), num(v.im), num(v.norm()), (outside as u8).to_string()]);
        table.push(row);
        for i in (0..d).rev() {
            idx[i] += 1;
            if idx[i] < resolution[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    let means: BTreeMap<String, f64> = by_basin.iter().map(|(b, (sum, n))| (b.to_string(), sum / *n as f64)).collect();
    let gap = if means.len() >= 2 {
        let lo = means.values().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(hi - lo)
    } else {
        None
    };
    let out = s.path(&format!("grid_{}_pair{}.csv", file_stem(&artifact.fit), req.pair));
    table.write(&out, &s.config_hash)?;
    let mut human = format!(
        "fit {} pair {} (lambda = {} {:+}i): {} points, {} outside the training region\n",
        artifact.fit, req.pair, pair.lambda.re, pair.lambda.im, total, extrapolated
    );
    if let Some(g) = gap {
        human.push_str(&format!("per-basin mean Re phi {means:?}, plateau gap {g:.6}\n"));
    }
    human.push_str(&format!("wrote {}\n", out.display()));
    Ok(Outcome {
        exit_code: EXIT_OK,
        summary: json!({
            "command": "grid",
            "fit": artifact.fit,
            "pair": req.pair,
            "lambda": [pair.lambda.re, pair.lambda.im],
            "points": total,
            "extrapolated_points": extrapolated,
            "basin_means": means,
            "plateau_gap": gap,
            "config_hash": s.config_hash,
            "model_config_hash": artifact.config_hash,
            "files": [out],
        }),
        human,
        files: vec![out],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDocument {
    pub schema_version: u32,
    pub config_hash: String,
    #[serde(flatten)]
    pub run: ControlRun,
}

/// Runs the control experiment; writes `control_report.json` and one
/// `control_<scenario>.csv` time series per scenario. Exit 1 when a
/// certificate fails.
pub fn cmd_control(s: &Session) -> Result<Outcome, CliError> {
    let cfg = &s.config.control;
    let block = s.config.system(&cfg.system)?;
    let spec = block.spec().map_err(|e| CliError::Config(e.to_string()))?;
    if spec.control_arity() == 0 {
        return Err(CliError::Config(format!("control system `{}` takes no input", cfg.system)));
    }
    if cfg.x0.len() != spec.dimension() {
        return Err(CliError::Config(format!("control x0 must have {} entries", spec.dimension())));
    }
    let run = run_control(cfg, &s.config.systems, s.config.seed)?;
    let mut files = Vec::new();
    let mut human = format!(
        "lifted model: residual {:.3e}, null rows {:?}, eigenvector condition {:.3e}\n",
        run.model_residual, run.null_rows, run.condition
    );
    let mut experiments = Vec::new();
    for e in &run.experiments {
        let d = e.x0.len();
        let k = e.series.first().map_or(0, |r| r.true_indicators.len());
        let r = e.series.first().map_or(0, |r| r.null_changes.len());
        let mut table = CsvTable::new(
            std::iter::once("t".to_string())
                .chain((1..=d).map(|i| format!("x{i}")))
                .chain(std::iter::once("label".to_string()))
                .chain((0..k).map(|i| format!("true_indicator{i}")))
                .chain((0..k).map(|i| format!("predicted_indicator{i}")))
                .chain(std::iter::once("indicator_error".to_string()))
                .chain(e.null_rows.iter().take(r).map(|c| format!("null_change_row{}", c.row))),
        );
        for row in &e.series {
            let mut cells = vec![num(row.t)];
            cells.extend(row.state.iter().map(|v| num(*v)));
            cells.push(row.label.map_or(String::new(), |l| l.to_string()));
            cells.extend(row.true_indicators.iter().chain(&row.predicted_indicators).map(|v| num(*v)));
            cells.push(num(row.indicator_error));
            cells.extend(row.null_changes.iter().map(|v| num(*v)));
            table.push(cells);
        }
        let path = s.path(&format!("control_{}.csv", file_stem(&e.scenario)));
        table.write(&path, &s.config_hash)?;
        files.push(path);
        let realized = e.null_rows.iter().map(|c| c.realized_change).fold(0.0, f64::max);
        match e.t_c {
            Some(t_c) => human.push_str(&format!(
                "{}: t_c = {t_c}, max |phi_r(t_c) - phi_r(0)| = {realized:.3e} <= ||B~_r|| B t_c = {:.3e} ({}), indicator error at t_c {:.3}\n",
                e.scenario,
                e.certified_change_bound,
                if e.certified { "certified" } else { "NOT certified" },
                e.indicator_error_at_t_c.unwrap_or(f64::NAN),
            )),
            None => human.push_str(&format!(
                "{}: no basin crossing within {}, max null change {realized:.3e} <= {:.3e} ({})\n",
                e.scenario,
                e.horizon,
                e.certified_change_bound,
                if e.certified { "certified" } else { "NOT certified" },
            )),
        }
        experiments.push(json!({
            "scenario": e.scenario,
            "t_c": e.t_c,
            "certified": e.certified,
            "certified_change_bound": e.certified_change_bound,
            "max_realized_change": realized,
            "indicator_error_at_t_c": e.indicator_error_at_t_c,
        }));
    }
    let certified = run.experiments.iter().all(|e| e.certified);
    let doc = ControlDocument {
        schema_version: config::SCHEMA_VERSION,
        config_hash: s.config_hash.clone(),
        run,
    };
    let path = s.path("control_report.json");
    write_json(&path, &doc)?;
    files.insert(0, path.clone());
    human.push_str(&format!("wrote {}\n", path.display()));
    Ok(Outcome {
        exit_code: if certified { EXIT_OK } else { EXIT_VIOLATION },
        summary: json!({
            "command": "control",
            "config_hash": s.config_hash,
            "certified": certified,
            "experiments": experiments,
            "files": files,
        }),
        human,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_parsing() {
        let r = parse_region("-2:2,0:1.5").unwrap();
        assert_eq!(r.lower, vec![-2.0, 0.0]);
        assert_eq!(r.upper, vec![2.0, 1.5]);
        assert!(parse_region("1:0").is_err());
        assert!(parse_region("a:b").is_err());
        assert!(parse_region("1").is_err());
    }

    #[test]
    fn axis_points_cover_bounds() {
        assert_eq!(axis_points(-2.0, 2.0, 5), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(axis_points(-2.0, 2.0, 1), vec![0.0]);
    }

    #[test]
    fn error_json_shape() {
        let e = CliError::Config("bad".into());
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.to_json()["error"]["kind"], "config");
        assert_eq!(CliError::Runtime("x".into()).to_json()["exit_code"], 3);
    }
}
