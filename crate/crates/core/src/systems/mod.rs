//! Benchmark vector fields, flows, fixed points and simulated basins.

mod basin;
mod fixed_points;
pub mod integrator;
mod region;
mod sampling;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{KoopmanError, Result};
pub use basin::{classify_basin, BasinGrid, BasinLabel, DEFAULT_CAPTURE_RADIUS, DEFAULT_HORIZON};
pub use fixed_points::{find_fixed_points, FixedPoint, FixedPointSet, StabilityClass, NON_HYPERBOLIC_THRESHOLD};
pub use integrator::{integrate, Integration, IntegratorOptions, DEFAULT_ESCAPE_BOUND};
pub use region::BoxRegion;
pub use sampling::{sample_snapshot_pairs, SnapshotPairs};

/// Default integration tolerance used by the experiment drivers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// The benchmark families known to the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// x' = a x
    ScalarLinear,
    /// x' = a x, y' = b y
    DiagonalLinear,
    /// x' = w y, y' = -w x
    Harmonic,
    /// x' = x - x^3
    Bistable,
    /// x' = y, y' = x - x^3 - delta y
    Duffing,
    /// x' = x - x^3 + u
    ControlledBistable,
    /// x' = a x + b u
    ControlledLinear,
}

struct Registration {
    name: &'static str,
    kind: SystemKind,
    dimension: usize,
    control_arity: usize,
    defaults: &'static [(&'static str, f64)],
    /// parameters that are fixed by the registration and cannot be overridden
    fixed: &'static [(&'static str, f64)],
}

const REGISTRY: &[Registration] = &[
    Registration {
        name: "linear",
        kind: SystemKind::ScalarLinear,
        dimension: 1,
        control_arity: 0,
        defaults: &[("a", -1.0)],
        fixed: &[],
    },
    Registration {
        name: "linear2d",
        kind: SystemKind::DiagonalLinear,
        dimension: 2,
        control_arity: 0,
        defaults: &[("a", -1.0), ("b", -2.0)],
        fixed: &[],
    },
    Registration {
        name: "harmonic",
        kind: SystemKind::Harmonic,
        dimension: 2,
        control_arity: 0,
        defaults: &[("omega", 1.0)],
        fixed: &[],
    },
    Registration {
        name: "bistable",
        kind: SystemKind::Bistable,
        dimension: 1,
        control_arity: 0,
        defaults: &[],
        fixed: &[],
    },
    Registration {
        name: "duffing",
        kind: SystemKind::Duffing,
        dimension: 2,
        control_arity: 0,
        defaults: &[("delta", 0.5)],
        fixed: &[],
    },
    Registration {
        name: "duffing_undamped",
        kind: SystemKind::Duffing,
        dimension: 2,
        control_arity: 0,
        defaults: &[],
        fixed: &[("delta", 0.0)],
    },
    Registration {
        name: "controlled_bistable",
        kind: SystemKind::ControlledBistable,
        dimension: 1,
        control_arity: 1,
        defaults: &[],
        fixed: &[],
    },
    Registration {
        name: "controlled_linear",
        kind: SystemKind::ControlledLinear,
        dimension: 1,
        control_arity: 1,
        defaults: &[("a", -1.0), ("b", 1.0)],
        fixed: &[],
    },
];

/// Names of every registered system.
pub fn registered_systems() -> Vec<&'static str> {
    REGISTRY.iter().map(|r| r.name).collect()
}

/// A registered vector field with its parameters bound.
///
/// Parameters are fixed at construction; the struct exposes them read-only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorFieldSpec {
    name: String,
    kind: SystemKind,
    dimension: usize,
    parameters: BTreeMap<String, f64>,
    control_arity: usize,
}

impl VectorFieldSpec {
    /// Looks up `name` in the registry and applies parameter overrides.
    pub fn new(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let reg = REGISTRY
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| KoopmanError::UnknownSystem(name.to_string()))?;
        let mut parameters: BTreeMap<String, f64> = reg
            .defaults
            .iter()
            .chain(reg.fixed)
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        for (key, value) in overrides {
            if !reg.defaults.iter().any(|(k, _)| k == key) {
                return Err(KoopmanError::UnknownParameter {
                    system: name.to_string(),
                    parameter: key.clone(),
                });
            }
            if !value.is_finite() {
                return Err(KoopmanError::NonFinite("system parameter"));
            }
            parameters.insert(key.clone(), *value);
        }
        Ok(Self {
            name: name.to_string(),
            kind: reg.kind,
            dimension: reg.dimension,
            parameters,
            control_arity: reg.control_arity,
        })
    }

    /// Registry defaults for `name`.
    pub fn named(name: &str) -> Result<Self> {
        Self::new(name, &BTreeMap::new())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn control_arity(&self) -> usize {
        self.control_arity
    }

    pub fn parameters(&self) -> &BTreeMap<String, f64> {
        &self.parameters
    }

    fn p(&self, key: &str) -> f64 {
        self.parameters[key]
    }

    /// f(x, u) without argument checks. `u` may be empty for controlled
    /// systems, meaning u = 0.
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let u0 = u.first().copied().unwrap_or(0.0);
        match self.kind {
            SystemKind::ScalarLinear => out[0] = self.p("a") * x[0],
            SystemKind::DiagonalLinear => {
                out[0] = self.p("a") * x[0];
                out[1] = self.p("b") * x[1];
            }
            SystemKind::Harmonic => {
                let w = self.p("omega");
                out[0] = w * x[1];
                out[1] = -w * x[0];
            }
            SystemKind::Bistable => out[0] = x[0] - x[0].powi(3),
            SystemKind::Duffing => {
                out[0] = x[1];
                out[1] = x[0] - x[0].powi(3) - self.p("delta") * x[1];
            }
            SystemKind::ControlledBistable => out[0] = x[0] - x[0].powi(3) + u0,
            SystemKind::ControlledLinear => out[0] = self.p("a") * x[0] + self.p("b") * u0,
        }
    }

    /// f(x, u), checked. Autonomous systems take an empty `u`.
    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dimension {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.dimension,
                actual: x.len(),
                context: "state",
            });
        }
        if u.len() != self.control_arity {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.control_arity,
                actual: u.len(),
                context: "control",
            });
        }
        if x.iter().chain(u).any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("vector field argument"));
        }
        let mut out = vec![0.0; self.dimension];
        self.eval_into(x, u, &mut out);
        Ok(out)
    }

    /// Closed-form Jacobian of the uncontrolled field, when registered.
    pub fn analytic_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let j = match self.kind {
            SystemKind::ScalarLinear | SystemKind::ControlledLinear => DMatrix::from_element(1, 1, self.p("a")),
            SystemKind::DiagonalLinear => DMatrix::from_row_slice(2, 2, &[self.p("a"), 0.0, 0.0, self.p("b")]),
            SystemKind::Harmonic => {
                let w = self.p("omega");
                DMatrix::from_row_slice(2, 2, &[0.0, w, -w, 0.0])
            }
            SystemKind::Bistable | SystemKind::ControlledBistable => {
                DMatrix::from_element(1, 1, 1.0 - 3.0 * x[0] * x[0])
            }
            SystemKind::Duffing => {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0 - 3.0 * x[0] * x[0], -self.p("delta")])
            }
        };
        Some(j)
    }

    /// Jacobian of the uncontrolled field: analytic when registered, central
    /// finite differences otherwise.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.analytic_jacobian(x)
            .unwrap_or_else(|| self.finite_difference_jacobian(x, 1e-6))
    }

    pub fn finite_difference_jacobian(&self, x: &[f64], step: f64) -> DMatrix<f64> {
        let d = self.dimension;
        let mut j = DMatrix::zeros(d, d);
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for col in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[col] += step;
            xm[col] -= step;
            self.eval_into(&xp, &[], &mut plus);
            self.eval_into(&xm, &[], &mut minus);
            for row in 0..d {
                j[(row, col)] = (plus[row] - minus[row]) / (2.0 * step);
            }
        }
        j
    }

    /// System matrix of the uncontrolled linear benchmarks.
    pub fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        match self.kind {
            SystemKind::ScalarLinear | SystemKind::DiagonalLinear | SystemKind::Harmonic | SystemKind::ControlledLinear => {
                self.analytic_jacobian(&vec![0.0; self.dimension])
            }
            _ => None,
        }
    }

    /// True for the conservative benchmarks whose bounded orbits are closed.
    pub fn has_closed_orbits(&self) -> bool {
        match self.kind {
            SystemKind::Harmonic => true,
            SystemKind::Duffing => self.p("delta") == 0.0,
            _ => false,
        }
    }

    /// Conserved quantity of the closed-orbit benchmarks: `(x^2 + y^2) / 2`
    /// for the oscillator, `y^2/2 - x^2/2 + x^4/4` for undamped Duffing.
    pub fn energy(&self, x: &[f64]) -> Option<f64> {
        if !self.has_closed_orbits() || x.len() != self.dimension {
            return None;
        }
        Some(match self.kind {
            SystemKind::Harmonic => 0.5 * (x[0] * x[0] + x[1] * x[1]),
            _ => 0.5 * x[1] * x[1] - 0.5 * x[0] * x[0] + 0.25 * x[0].powi(4),
        })
    }

    /// Right-hand side closure for the integrator; `sign = -1` runs time backwards.
    pub fn rhs(&self, sign: f64) -> impl Fn(f64, &[f64], &mut [f64]) + '_ {
        move |_, x, dx| {
            self.eval_into(x, &[], dx);
            if sign < 0.0 {
                dx.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
}

/// A sampled orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub integrator_tolerance: f64,
}

impl Trajectory {
    /// CSV with header `t,x1..xd`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |s| s.len());
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x{i}")));
        writer.write_record(&header).expect("in-memory write");
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![t.to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("flush")).expect("utf8")
    }
}

fn check_state(spec: &VectorFieldSpec, x0: &[f64]) -> Result<()> {
    if x0.len() != spec.dimension() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.dimension(),
            actual: x0.len(),
            context: "initial state",
        });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(KoopmanError::NonFinite("initial state"));
    }
    Ok(())
}

/// F^t(x0). Negative `t` integrates backwards in time. A trajectory whose norm
/// passes the escape bound yields [`KoopmanError::FiniteEscape`].
pub fn flow(spec: &VectorFieldSpec, x0: &[f64], t: f64, tol: f64) -> Result<Vec<f64>> {
    check_state(spec, x0)?;
    if !t.is_finite() {
        return Err(KoopmanError::NonFinite("flow time"));
    }
    if t == 0.0 {
        return Ok(x0.to_vec());
    }
    let sign = t.signum();
    let out = integrate(spec.rhs(sign), x0, &[t.abs()], IntegratorOptions::with_tol(tol))?;
    match out.escaped_at {
        Some(te) => Err(KoopmanError::FiniteEscape {
            time: sign * te,
            bound: DEFAULT_ESCAPE_BOUND,
        }),
        None => Ok(out.states.into_iter().next().expect("one output")),
    }
}

/// Samples the orbit of `x0` at `times` (all of the same sign, sorted by
/// magnitude).
pub fn trajectory(spec: &VectorFieldSpec, x0: &[f64], times: &[f64], tol: f64) -> Result<Trajectory> {
    check_state(spec, x0)?;
    let backward = times.iter().any(|t| *t < 0.0);
    if backward && times.iter().any(|t| *t > 0.0) {
        return Err(KoopmanError::InvalidArgument("mixed-sign output times".into()));
    }
    let sign = if backward { -1.0 } else { 1.0 };
    let abs_times: Vec<f64> = times.iter().map(|t| t.abs()).collect();
    let out = integrate(spec.rhs(sign), x0, &abs_times, IntegratorOptions::with_tol(tol))?;
    if let Some(te) = out.escaped_at {
        return Err(KoopmanError::FiniteEscape {
            time: sign * te,
            bound: DEFAULT_ESCAPE_BOUND,
        });
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states: out.states,
        integrator_tolerance: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_examples() {
        let bistable = VectorFieldSpec::named("bistable").unwrap();
        assert_eq!(bistable.eval(&[1.0], &[]).unwrap(), vec![0.0]);
        let duffing = VectorFieldSpec::named("duffing").unwrap();
        assert_eq!(duffing.parameters()["delta"], 0.5);
        assert_eq!(duffing.eval(&[0.0, 0.0], &[]).unwrap(), vec![0.0, 0.0]);
        let linear = VectorFieldSpec::named("linear").unwrap();
        assert_eq!(linear.eval(&[2.0], &[]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn eval_errors() {
        assert!(matches!(VectorFieldSpec::named("lorenz"), Err(KoopmanError::UnknownSystem(_))));
        let duffing = VectorFieldSpec::named("duffing").unwrap();
        assert!(matches!(duffing.eval(&[0.0], &[]), Err(KoopmanError::DimensionMismatch { .. })));
        let controlled = VectorFieldSpec::named("controlled_bistable").unwrap();
        assert!(controlled.eval(&[0.0], &[]).is_err());
        assert_eq!(controlled.eval(&[0.0], &[1.5]).unwrap(), vec![1.5]);
        let mut bad = BTreeMap::new();
        bad.insert("gamma".to_string(), 1.0);
        assert!(matches!(VectorFieldSpec::new("duffing", &bad), Err(KoopmanError::UnknownParameter { .. })));
        let mut fixed = BTreeMap::new();
        fixed.insert("delta".to_string(), 0.2);
        assert!(VectorFieldSpec::new("duffing_undamped", &fixed).is_err());
    }

    #[test]
    fn all_registered_systems_evaluate() {
        for name in registered_systems() {
            let spec = VectorFieldSpec::named(name).unwrap();
            let x = vec![0.3; spec.dimension()];
            let u = vec![0.1; spec.control_arity()];
            let f = spec.eval(&x, &u).unwrap();
            assert_eq!(f.len(), spec.dimension());
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        for name in registered_systems() {
            let spec = VectorFieldSpec::named(name).unwrap();
            let x: Vec<f64> = (0..spec.dimension()).map(|i| 0.7 - 0.4 * i as f64).collect();
            let a = spec.analytic_jacobian(&x).unwrap();
            let fd = spec.finite_difference_jacobian(&x, 1e-6);
            assert!((a - fd).abs().max() < 1e-8, "{name}");
        }
    }

    #[test]
    fn flow_examples() {
        let linear = VectorFieldSpec::named("linear").unwrap();
        let x = flow(&linear, &[1.0], 1.0, 1e-10).unwrap();
        assert!((x[0] - 0.3678794).abs() < 1e-6);
        assert_eq!(flow(&linear, &[0.42], 0.0, 1e-10).unwrap(), vec![0.42]);

        let bistable = VectorFieldSpec::named("bistable").unwrap();
        let reference = flow(&bistable, &[0.5], 10.0, 1e-12).unwrap();
        let x = flow(&bistable, &[0.5], 10.0, 1e-8).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-4);
        assert!((x[0] - reference[0]).abs() < 1e-6);
    }

    #[test]
    fn backward_flow_inverts_forward_flow() {
        let duffing = VectorFieldSpec::named("duffing").unwrap();
        let x = flow(&duffing, &[0.3, -0.2], 1.5, 1e-11).unwrap();
        let back = flow(&duffing, &x, -1.5, 1e-11).unwrap();
        assert!((back[0] - 0.3).abs() < 1e-8 && (back[1] + 0.2).abs() < 1e-8);
    }

    #[test]
    fn backward_escape_is_reported() {
        // backwards, x' = -(x - x^3) blows up for |x| > 1
        let bistable = VectorFieldSpec::named("bistable").unwrap();
        assert!(matches!(flow(&bistable, &[2.0], -5.0, 1e-8), Err(KoopmanError::FiniteEscape { .. })));
    }

    #[test]
    fn trajectory_csv_header() {
        let duffing = VectorFieldSpec::named("duffing").unwrap();
        let traj = trajectory(&duffing, &[0.5, 0.0], &[0.0, 0.1, 0.2], 1e-9).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1,x2"));
        assert_eq!(lines.count(), 3);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn energy_is_conserved_along_orbits() {
        for name in ["harmonic", "duffing_undamped"] {
            let spec = VectorFieldSpec::named(name).unwrap();
            let x0 = [0.3, 0.9];
            let x1 = flow(&spec, &x0, 7.0, 1e-11).unwrap();
            let (e0, e1) = (spec.energy(&x0).unwrap(), spec.energy(&x1).unwrap());
            assert!((e0 - e1).abs() < 1e-8, "{name}: {e0} vs {e1}");
        }
        assert!(VectorFieldSpec::named("duffing").unwrap().energy(&[0.0, 0.0]).is_none());
    }
}
