//! Lifted control models `psi_x' = L_x psi_x + L_xu psi_xu(x, u)`, their
//! eigendecomposition, the bound on null-eigenfunction rates and the
//! basin-crossing experiment.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionaries::{Dictionary, Observable};
use crate::error::{KoopmanError, Result};
use crate::koopman_fit::{check_ridge, default_ridge, matrix_rows, relative_residual};
use crate::linalg::{eigen_decompose, ridge_least_squares, DEFECTIVE_CONDITION};
use crate::rng;
use crate::setup::{build_dictionary, derive_seed, fixed_points_in, DictionaryBlock, IndicatorBlock, BaseDictionary, SystemBlock};
use crate::systems::{
    classify_basin, flow, integrate, BoxRegion, FixedPoint, IntegratorOptions, VectorFieldSpec, DEFAULT_CAPTURE_RADIUS,
    DEFAULT_HORIZON, DEFAULT_TOL,
};

/// Control observables `u_i * xi_j(x)` and `u_i^k` (`k = 1..=input_degree`),
/// so every entry vanishes at `u = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDictionary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Dictionary>,
    pub input_degree: u32,
    pub control_arity: usize,
}

impl ControlDictionary {
    pub fn new(factors: Option<Dictionary>, input_degree: u32, control_arity: usize) -> Result<Self> {
        if control_arity == 0 {
            return Err(KoopmanError::InvalidArgument("control dictionary needs at least one input".into()));
        }
        if let Some(f) = &factors {
            if input_degree > 0 && f.position(&Observable::Constant).is_some() {
                return Err(KoopmanError::InvalidArgument(
                    "state factors must exclude the constant when pure input powers are present".into(),
                ));
            }
        }
        let dict = Self {
            factors,
            input_degree,
            control_arity,
        };
        if dict.size() == 0 {
            return Err(KoopmanError::InvalidArgument("control dictionary is empty".into()));
        }
        Ok(dict)
    }

    pub fn size(&self) -> usize {
        self.control_arity * (self.factors.as_ref().map_or(0, |f| f.size()) + self.input_degree as usize)
    }

    /// Unchecked evaluation into `out` (length [`ControlDictionary::size`]).
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let xi = self.factors.as_ref().map(|f| {
            let mut v = vec![0.0; f.size()];
            f.eval_into(x, &mut v);
            v
        });
        let mut k = 0;
        for &ui in u {
            if let Some(xi) = &xi {
                for v in xi {
                    out[k] = ui * v;
                    k += 1;
                }
            }
            for p in 1..=self.input_degree {
                out[k] = ui.powi(p as i32);
                k += 1;
            }
        }
    }

    pub fn eval(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.control_arity {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.control_arity,
                actual: u.len(),
                context: "control input",
            });
        }
        if let Some(f) = &self.factors {
            if x.len() != f.dimension() {
                return Err(KoopmanError::DimensionMismatch {
                    expected: f.dimension(),
                    actual: x.len(),
                    context: "control dictionary state",
                });
            }
        }
        if x.iter().chain(u).any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("control dictionary argument"));
        }
        let mut out = vec![0.0; self.size()];
        self.eval_into(x, u, &mut out);
        Ok(out)
    }
}

/// State/input samples for the control regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSamples {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
}

/// `n` uniform states in `region`; the first `round(zero_fraction * n)` get
/// `u = 0`, the rest uniform inputs in `input_box`.
pub fn sample_control_data(
    region: &BoxRegion,
    input_box: &BoxRegion,
    n: usize,
    zero_fraction: f64,
    seed: u64,
) -> Result<ControlSamples> {
    if n == 0 {
        return Err(KoopmanError::InvalidArgument("sample count must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&zero_fraction) {
        return Err(KoopmanError::InvalidArgument("zero_fraction must lie in [0, 1]".into()));
    }
    let mut r = rng::stream(seed, "control_samples");
    let zeros = (zero_fraction * n as f64).round() as usize;
    let mut out = ControlSamples {
        states: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
    };
    for k in 0..n {
        out.states.push(region.sample(&mut r));
        out.inputs.push(if k < zeros {
            vec![0.0; input_box.dim()]
        } else {
            input_box.sample(&mut r)
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanControlModel {
    #[serde(with = "matrix_rows")]
    pub l_x: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub l_xu: DMatrix<f64>,
    pub state_dictionary: Dictionary,
    pub control_dictionary: ControlDictionary,
    pub ridge: f64,
    pub ridge_defaulted: bool,
    pub residual: f64,
    pub samples: usize,
    /// Samples dropped for lying on an indicator boundary.
    pub excluded_boundary: usize,
}

fn regression_rows(
    spec: &VectorFieldSpec,
    data: &ControlSamples,
    psi_x: &Dictionary,
    psi_xu: &ControlDictionary,
) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    if data.states.len() != data.inputs.len() {
        return Err(KoopmanError::DimensionMismatch {
            expected: data.states.len(),
            actual: data.inputs.len(),
            context: "control samples",
        });
    }
    let kept: Vec<usize> = (0..data.states.len())
        .filter(|&k| !psi_x.on_indicator_boundary(&data.states[k]))
        .collect();
    if kept.is_empty() {
        return Err(KoopmanError::Empty("control samples"));
    }
    let (n, m) = (psi_x.size(), psi_xu.size());
    let mut design = DMatrix::zeros(kept.len(), n + m);
    let mut targets = DMatrix::zeros(kept.len(), n);
    for (row, &k) in kept.iter().enumerate() {
        let (x, u) = (&data.states[k], &data.inputs[k]);
        let psi = psi_x.eval(x)?.values;
        let c = psi_xu.eval(x, u)?;
        for (j, v) in psi.iter().chain(&c).enumerate() {
            design[(row, j)] = *v;
        }
        let f = DVector::from_vec(spec.eval(x, u)?);
        let lf = psi_x.gradient(x)? * f;
        targets.row_mut(row).copy_from(&lf.transpose());
    }
    Ok((design, targets, data.states.len() - kept.len()))
}

/// Joint ridge regression of the analytic targets `f(x, u) . grad psi_x`
/// onto `[psi_x; psi_xu]`. Samples on an indicator boundary are dropped.
pub fn fit_control_model(
    spec: &VectorFieldSpec,
    data: &ControlSamples,
    psi_x: &Dictionary,
    psi_xu: &ControlDictionary,
    ridge: Option<f64>,
) -> Result<KoopmanControlModel> {
    check_ridge(ridge)?;
    if spec.dimension() != psi_x.dimension() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.dimension(),
            actual: psi_x.dimension(),
            context: "state dictionary vs system",
        });
    }
    if spec.control_arity() != psi_xu.control_arity {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.control_arity(),
            actual: psi_xu.control_arity,
            context: "control dictionary vs system",
        });
    }
    let (design, targets, excluded) = regression_rows(spec, data, psi_x, psi_xu)?;
    let n = psi_x.size();
    if design.columns(n, psi_xu.size()).iter().all(|v| *v == 0.0) {
        return Err(KoopmanError::NoExcitation);
    }
    let gamma = ridge.unwrap_or_else(|| default_ridge(&design));
    let b = ridge_least_squares(&design, &targets, gamma)?;
    let residual = relative_residual(&design, &b, &targets);
    Ok(KoopmanControlModel {
        l_x: b.rows(0, n).transpose(),
        l_xu: b.rows(n, psi_xu.size()).transpose(),
        state_dictionary: psi_x.clone(),
        control_dictionary: psi_xu.clone(),
        ridge: gamma,
        ridge_defaulted: ridge.is_none(),
        residual,
        samples: design.nrows(),
        excluded_boundary: excluded,
    })
}

impl KoopmanControlModel {
    /// Relative error of the derivative targets on held-out samples.
    pub fn holdout_residual(&self, spec: &VectorFieldSpec, holdout: &ControlSamples) -> Result<f64> {
        let (design, targets, _) = regression_rows(spec, holdout, &self.state_dictionary, &self.control_dictionary)?;
        let mut b = DMatrix::zeros(design.ncols(), self.l_x.nrows());
        b.rows_mut(0, self.l_x.ncols()).copy_from(&self.l_x.transpose());
        b.rows_mut(self.l_x.ncols(), self.l_xu.ncols()).copy_from(&self.l_xu.transpose());
        Ok(relative_residual(&design, &b, &targets))
    }

    /// Largest relative error `|psi_hat(t) - psi_x(F^t x0)| / |psi_x(F^t x0)|`
    /// of the uncontrolled lifted prediction `psi_hat' = L_x psi_hat`.
    pub fn lifted_prediction_error(&self, spec: &VectorFieldSpec, x0: &[f64], times: &[f64]) -> Result<f64> {
        let psi0 = self.state_dictionary.eval(x0)?.values;
        let a = &self.l_x;
        let lifted = integrate(
            |_, z, dz| {
                let out = a * DVector::from_column_slice(z);
                dz.copy_from_slice(out.as_slice());
            },
            &psi0,
            times,
            IntegratorOptions::with_tol(DEFAULT_TOL),
        )?;
        if let Some(t) = lifted.escaped_at {
            return Err(KoopmanError::FiniteEscape {
                time: t,
                bound: crate::systems::DEFAULT_ESCAPE_BOUND,
            });
        }
        let mut worst = 0.0f64;
        for (pred, &t) in lifted.states.iter().zip(times) {
            let truth = self.state_dictionary.eval(&flow(spec, x0, t, DEFAULT_TOL)?)?.values;
            let err: f64 = pred.iter().zip(&truth).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let scale: f64 = truth.iter().map(|q| q * q).sum::<f64>().sqrt();
            worst = worst.max(err / scale.max(f64::MIN_POSITIVE));
        }
        Ok(worst)
    }
}

/// `L_x = Q D Q^-1`, lifted coordinates `phi_x = Q^-1 psi_x` and input map
/// `B~ = Q^-1 L_xu`.
#[derive(Debug, Clone)]
pub struct LiftedDecomposition {
    pub q: DMatrix<Complex64>,
    pub q_inv: DMatrix<Complex64>,
    pub d: Vec<Complex64>,
    pub b_tilde: DMatrix<Complex64>,
    /// Rows with `|D_ii| <= null_threshold`.
    pub null_rows: Vec<usize>,
    pub null_threshold: f64,
    pub condition: f64,
    pub reconstruction_error: f64,
}

impl LiftedDecomposition {
    pub fn b_tilde_row_norm(&self, r: usize) -> f64 {
        self.b_tilde.row(r).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn lift(&self, psi: &[f64]) -> Vec<Complex64> {
        let v = DVector::from_iterator(psi.len(), psi.iter().map(|&p| Complex64::new(p, 0.0)));
        (&self.q_inv * v).iter().cloned().collect()
    }

    /// `Re(Q phi)`.
    pub fn unlift(&self, phi: &[Complex64]) -> Vec<f64> {
        (&self.q * DVector::from_column_slice(phi)).iter().map(|z| z.re).collect()
    }
}

pub fn eigen_decompose_control(model: &KoopmanControlModel, null_threshold: f64) -> Result<LiftedDecomposition> {
    if !(null_threshold >= 0.0) || !null_threshold.is_finite() {
        return Err(KoopmanError::InvalidArgument("null threshold must be finite and >= 0".into()));
    }
    let ed = eigen_decompose(&model.l_x)?;
    if ed.defective || ed.condition > DEFECTIVE_CONDITION {
        return Err(KoopmanError::Defective(ed.condition));
    }
    let reconstruction_error = ed.reconstruction_error(&model.l_x);
    let l_xu = model.l_xu.map(|v| Complex64::new(v, 0.0));
    let b_tilde = &ed.left * l_xu;
    let null_rows = (0..ed.values.len()).filter(|&i| ed.values[i].norm() <= null_threshold).collect();
    Ok(LiftedDecomposition {
        q: ed.right,
        q_inv: ed.left,
        d: ed.values,
        b_tilde,
        null_rows,
        null_threshold,
        condition: ed.condition,
        reconstruction_error,
    })
}

/// `max_r ||B~_r|| * input_bound` over the null rows: a bound on
/// `|d phi_r / dt|` whenever `||psi_xu|| <= input_bound`.
pub fn null_rate_bound(decomp: &LiftedDecomposition, input_bound: f64) -> Result<f64> {
    if !(input_bound >= 0.0) || !input_bound.is_finite() {
        return Err(KoopmanError::InvalidArgument("input bound must be finite and >= 0".into()));
    }
    if decomp.null_rows.is_empty() {
        return Err(KoopmanError::NoNullMode);
    }
    Ok(decomp
        .null_rows
        .iter()
        .map(|&r| decomp.b_tilde_row_norm(r) * input_bound)
        .fold(0.0, f64::max))
}

pub const INPUT_BOUND_INFLATION: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBound {
    pub value: f64,
    pub sampled_sup: f64,
    pub samples: usize,
    pub inflation: f64,
}

/// Sampled sup of `||psi_xu||` over `region x input_box`, inflated by 10%.
pub fn estimate_input_bound(
    psi_xu: &ControlDictionary,
    region: &BoxRegion,
    input_box: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<InputBound> {
    if samples == 0 {
        return Err(KoopmanError::InvalidArgument("bound sample count must be > 0".into()));
    }
    let mut r = rng::stream(seed, "input_bound");
    let mut sup = 0.0f64;
    for _ in 0..samples {
        let x = region.sample(&mut r);
        let u = input_box.sample(&mut r);
        let c = psi_xu.eval(&x, &u)?;
        sup = sup.max(c.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(InputBound {
        value: sup * INPUT_BOUND_INFLATION,
        sampled_sup: sup,
        samples,
        inflation: INPUT_BOUND_INFLATION,
    })
}

/// Open-loop input as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { value: Vec<f64> },
    /// `values[i]` applies on `[switch_times[i-1], switch_times[i])`.
    Piecewise { switch_times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl Schedule {
    pub fn validate(&self, control_arity: usize) -> Result<()> {
        let values: &[Vec<f64>] = match self {
            Schedule::Constant { value } => std::slice::from_ref(value),
            Schedule::Piecewise { switch_times, values } => {
                if values.len() != switch_times.len() + 1 {
                    return Err(KoopmanError::InvalidArgument(
                        "piecewise schedule needs one more value than switch times".into(),
                    ));
                }
                if switch_times.iter().any(|t| !(*t > 0.0) || !t.is_finite())
                    || switch_times.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(KoopmanError::InvalidArgument(
                        "switch times must be positive, finite and increasing".into(),
                    ));
                }
                values
            }
        };
        for v in values {
            if v.len() != control_arity {
                return Err(KoopmanError::DimensionMismatch {
                    expected: control_arity,
                    actual: v.len(),
                    context: "schedule input",
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(KoopmanError::NonFinite("schedule input"));
            }
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> &[f64] {
        match self {
            Schedule::Constant { value } => value,
            Schedule::Piecewise { switch_times, values } => {
                let i = switch_times.iter().take_while(|&&s| t >= s).count();
                &values[i]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullRowCertificate {
    pub row: usize,
    pub eigenvalue: Complex64,
    pub b_tilde_norm: f64,
    /// `||B~_r|| * B`.
    pub rate_bound: f64,
    /// `|phi_r(T) - phi_r(0)|` over the certification interval.
    pub realized_change: f64,
    /// Largest `|delta phi_r| / delta t` over consecutive grid intervals.
    pub max_interval_rate: f64,
    pub certified: bool,
}

/// One row of the experiment time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub t: f64,
    pub state: Vec<f64>,
    pub label: Option<usize>,
    pub true_indicators: Vec<f64>,
    pub predicted_indicators: Vec<f64>,
    pub indicator_error: f64,
    pub null_changes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub system: String,
    pub x0: Vec<f64>,
    pub schedule: Schedule,
    pub horizon: f64,
    pub grid_step: f64,
    /// First grid time whose basin label differs from the initial one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_c: Option<f64>,
    pub initial_label: Option<usize>,
    pub final_label: Option<usize>,
    pub input_bound: InputBound,
    /// Largest `||psi_xu||` met along the true trajectory.
    pub max_trajectory_input_norm: f64,
    pub null_rate_bound: f64,
    /// `t_c`, or the horizon when no crossing occurs.
    pub certification_interval: f64,
    pub certified_change_bound: f64,
    pub null_rows: Vec<NullRowCertificate>,
    pub certified: bool,
    /// Max over indicator entries of `|predicted - true|` at `t_c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicator_error_at_t_c: Option<f64>,
    pub max_indicator_error: f64,
    pub model_residual: f64,
    pub reconstruction_error: f64,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub series: Vec<SeriesRow>,
}

/// Relative slack of the certified inequalities.
pub const CERTIFICATE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CrossingSetup<'a> {
    pub scenario: &'a str,
    pub x0: &'a [f64],
    pub schedule: &'a Schedule,
    pub horizon: f64,
    pub grid_step: f64,
    pub fixed_points: &'a [FixedPoint],
}

/// Runs the true controlled system and the lifted model side by side.
///
/// The lifted state is `phi = Q^-1 psi_x`, advanced by
/// `phi' = D phi + B~ psi_xu(x(t), u(t))` with `x(t)` the true state, so the
/// input channel sees the realized trajectory. Null-row eigenvalues are set
/// to exactly 0 (they are 0 up to the fit's rounding), which is the setting
/// the rate bound certifies. Basin labels come from the uncontrolled flow.
pub fn basin_crossing_experiment(
    spec: &VectorFieldSpec,
    model: &KoopmanControlModel,
    decomp: &LiftedDecomposition,
    input_bound: &InputBound,
    setup: &CrossingSetup,
) -> Result<ExperimentReport> {
    setup.schedule.validate(spec.control_arity())?;
    if setup.x0.len() != spec.dimension() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.dimension(),
            actual: setup.x0.len(),
            context: "initial state",
        });
    }
    if !(setup.horizon > 0.0) || !(setup.grid_step > 0.0) || setup.grid_step > setup.horizon {
        return Err(KoopmanError::InvalidArgument("need 0 < grid_step <= horizon".into()));
    }
    let bound = null_rate_bound(decomp, input_bound.value)?;
    let indicators = model.state_dictionary.indicator_indices();
    if indicators.is_empty() {
        return Err(KoopmanError::InvalidArgument("the state dictionary has no basin indicators".into()));
    }
    let d = spec.dimension();
    let n = model.state_dictionary.size();
    let psi_xu = &model.control_dictionary;
    let mut rates = decomp.d.clone();
    for &r in &decomp.null_rows {
        rates[r] = Complex64::new(0.0, 0.0);
    }
    let phi0 = decomp.lift(&model.state_dictionary.eval(setup.x0)?.values);

    // state: x, then Re/Im of phi - phi0
    let mut z0 = setup.x0.to_vec();
    z0.resize(d + 2 * n, 0.0);
    let steps = (setup.horizon / setup.grid_step).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * setup.grid_step).collect();
    let mut c = vec![0.0; psi_xu.size()];
    let run = integrate(
        |t, z, dz| {
            let u = setup.schedule.at(t);
            spec.eval_into(&z[..d], u, &mut dz[..d]);
            psi_xu.eval_into(&z[..d], u, &mut c);
            for i in 0..n {
                let xi = Complex64::new(z[d + i], z[d + n + i]);
                let mut v = rates[i] * (phi0[i] + xi);
                for (j, cj) in c.iter().enumerate() {
                    v += decomp.b_tilde[(i, j)] * cj;
                }
                dz[d + i] = v.re;
                dz[d + n + i] = v.im;
            }
        },
        &z0,
        &times,
        IntegratorOptions::with_tol(DEFAULT_TOL),
    )?;
    if let Some(t) = run.escaped_at {
        return Err(KoopmanError::FiniteEscape {
            time: t,
            bound: crate::systems::DEFAULT_ESCAPE_BOUND,
        });
    }

    let labels: Vec<Option<usize>> = run
        .states
        .par_iter()
        .map(|z| {
            classify_basin(spec, &z[..d], setup.fixed_points, DEFAULT_HORIZON, DEFAULT_CAPTURE_RADIUS, 1e-9)
                .map(|l| l.index())
        })
        .collect::<Result<_>>()?;
    let t_c_index = labels.iter().position(|l| *l != labels[0]);
    let t_c = t_c_index.map(|k| times[k]);
    let end = t_c_index.unwrap_or(steps);
    let interval = times[end];

    let xi_at = |k: usize, r: usize| Complex64::new(run.states[k][d + r], run.states[k][d + n + r]);
    let mut series = Vec::with_capacity(times.len());
    let mut max_input = 0.0f64;
    let mut max_error = 0.0f64;
    for (k, z) in run.states.iter().enumerate() {
        let x = &z[..d];
        let u = setup.schedule.at(times[k]);
        max_input = max_input.max(psi_xu.eval(x, u)?.iter().map(|v| v * v).sum::<f64>().sqrt());
        let phi: Vec<Complex64> = (0..n).map(|i| phi0[i] + xi_at(k, i)).collect();
        let predicted = decomp.unlift(&phi);
        let truth = model.state_dictionary.eval(x)?.values;
        let true_ind: Vec<f64> = indicators.iter().map(|&i| truth[i]).collect();
        let pred_ind: Vec<f64> = indicators.iter().map(|&i| predicted[i]).collect();
        let err = true_ind.iter().zip(&pred_ind).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_error = max_error.max(err);
        series.push(SeriesRow {
            t: times[k],
            state: x.to_vec(),
            label: labels[k],
            true_indicators: true_ind,
            predicted_indicators: pred_ind,
            indicator_error: err,
            null_changes: decomp.null_rows.iter().map(|&r| xi_at(k, r).norm()).collect(),
        });
    }

    let mut certificates = Vec::new();
    for &r in &decomp.null_rows {
        let rate_bound = decomp.b_tilde_row_norm(r) * input_bound.value;
        let realized = xi_at(end, r).norm();
        let max_rate = (0..end)
            .map(|k| (xi_at(k + 1, r) - xi_at(k, r)).norm() / (times[k + 1] - times[k]))
            .fold(0.0, f64::max);
        let limit = 1.0 + CERTIFICATE_SLACK;
        certificates.push(NullRowCertificate {
            row: r,
            eigenvalue: decomp.d[r],
            b_tilde_norm: decomp.b_tilde_row_norm(r),
            rate_bound,
            realized_change: realized,
            max_interval_rate: max_rate,
            certified: realized <= rate_bound * interval * limit && max_rate <= rate_bound * limit,
        });
    }
    let mut notes = Vec::new();
    if max_input > input_bound.value {
        notes.push(format!(
            "||psi_xu|| reached {max_input} on the trajectory, above the sampled bound {}",
            input_bound.value
        ));
    }
    if decomp.null_rows.iter().any(|&r| decomp.d[r] != Complex64::new(0.0, 0.0)) {
        notes.push("null-row eigenvalues within the threshold were set to 0 in the rollout".into());
    }
    Ok(ExperimentReport {
        scenario: setup.scenario.to_string(),
        system: spec.name().to_string(),
        x0: setup.x0.to_vec(),
        schedule: setup.schedule.clone(),
        horizon: setup.horizon,
        grid_step: setup.grid_step,
        t_c,
        initial_label: labels[0],
        final_label: *labels.last().expect("non-empty grid"),
        input_bound: *input_bound,
        max_trajectory_input_norm: max_input,
        null_rate_bound: bound,
        certification_interval: interval,
        certified_change_bound: bound * interval,
        certified: certificates.iter().all(|c| c.certified),
        null_rows: certificates,
        indicator_error_at_t_c: t_c_index.map(|k| series[k].indicator_error),
        max_indicator_error: max_error,
        model_residual: model.residual,
        reconstruction_error: decomp.reconstruction_error,
        notes,
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRollout {
    pub times: Vec<f64>,
    /// Lifted states `psi_x` at `times` (up to the escape, if any).
    pub lifted: Vec<Vec<f64>>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escaped_at: Option<f64>,
}

/// Closed lifted system `psi' = (L_x - L_xu F) psi` under `psi_xu = -F psi_x`,
/// sampled at `steps + 1` equally spaced times on `[0, horizon]`.
pub fn feedback_rollout(
    model: &KoopmanControlModel,
    gain: &DMatrix<f64>,
    x0: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<FeedbackRollout> {
    let (n, m) = (model.l_x.nrows(), model.l_xu.ncols());
    if gain.nrows() != m || gain.ncols() != n {
        return Err(KoopmanError::DimensionMismatch {
            expected: m * n,
            actual: gain.nrows() * gain.ncols(),
            context: "feedback gain (M x N)",
        });
    }
    if !(horizon >= 0.0) || steps == 0 {
        return Err(KoopmanError::InvalidArgument("need horizon >= 0 and steps > 0".into()));
    }
    let a = &model.l_x - &model.l_xu * gain;
    let psi0 = model.state_dictionary.eval(x0)?.values;
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    let run = integrate(
        |_, z, dz| {
            let out = &a * DVector::from_column_slice(z);
            dz.copy_from_slice(out.as_slice());
        },
        &psi0,
        &times,
        IntegratorOptions::with_tol(DEFAULT_TOL),
    )?;
    let reached = run.states.len();
    Ok(FeedbackRollout {
        times: times[..reached].to_vec(),
        lifted: run.states,
        truncated: run.escaped_at.is_some(),
        escaped_at: run.escaped_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub schedule: Schedule,
}

defaults!(ControlConfig {
    /// Key into the system blocks; the system must take a control input.
    system: String = "controlled_bistable".into(),
    state_dictionary: DictionaryBlock = DictionaryBlock {
        base: BaseDictionary::Monomials { degree: 5, cap: crate::dictionaries::DEFAULT_SIZE_CAP },
        indicators: Some(IndicatorBlock {
            resolution: vec![101],
            horizon: DEFAULT_HORIZON,
            capture_radius: DEFAULT_CAPTURE_RADIUS,
        }),
    },
    /// Degree of the monomial factors `xi` in `u * xi(x)`; 0 for none.
    factor_degree: u32 = 4,
    input_degree: u32 = 1,
    samples: usize = 4000,
    zero_fraction: f64 = 0.5,
    input_box: BoxRegion = BoxRegion::cube(1, 2.0),
    ridge: Option<f64> = None,
    null_threshold: f64 = 1e-8,
    bound_samples: usize = 10_000,
    x0: Vec<f64> = vec![-0.5],
    horizon: f64 = 5.0,
    grid_step: f64 = 1e-3,
    scenarios: Vec<Scenario> = vec![
        Scenario { name: "crossing".into(), schedule: Schedule::Constant { value: vec![1.5] } },
        Scenario { name: "uncontrolled".into(), schedule: Schedule::Constant { value: vec![0.0] } },
    ],
});

/// Summary of a control run; the per-scenario series go to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRun {
    pub seed: u64,
    pub model_residual: f64,
    pub ridge: f64,
    pub eigenvalues: Vec<Complex64>,
    pub null_rows: Vec<usize>,
    pub reconstruction_error: f64,
    pub condition: f64,
    pub experiments: Vec<ExperimentReport>,
}

pub fn control_dictionary(d: usize, factor_degree: u32, input_degree: u32, control_arity: usize) -> Result<ControlDictionary> {
    let factors = if factor_degree == 0 {
        None
    } else {
        Some(Dictionary::monomials(d, factor_degree)?.without_constant()?)
    };
    ControlDictionary::new(factors, input_degree, control_arity)
}

/// Fits the lifted model of `cfg` and runs every scenario.
pub fn run_control(cfg: &ControlConfig, systems: &BTreeMap<String, SystemBlock>, master_seed: u64) -> Result<ControlRun> {
    let block = systems
        .get(&cfg.system)
        .ok_or_else(|| KoopmanError::UnknownSystem(cfg.system.clone()))?;
    let spec = block.spec()?;
    if spec.control_arity() == 0 {
        return Err(KoopmanError::InvalidArgument(format!("system `{}` takes no control input", spec.name())));
    }
    if cfg.input_box.dim() != spec.control_arity() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.control_arity(),
            actual: cfg.input_box.dim(),
            context: "input box",
        });
    }
    for s in &cfg.scenarios {
        s.schedule.validate(spec.control_arity())?;
    }
    let seed = derive_seed(master_seed, "control");
    let region = &block.region;
    let psi_x = build_dictionary(&spec, region, &cfg.state_dictionary, seed)?;
    let psi_xu = control_dictionary(spec.dimension(), cfg.factor_degree, cfg.input_degree, spec.control_arity())?;
    let data = sample_control_data(region, &cfg.input_box, cfg.samples, cfg.zero_fraction, seed)?;
    let model = fit_control_model(&spec, &data, &psi_x, &psi_xu, cfg.ridge)?;
    let decomp = eigen_decompose_control(&model, cfg.null_threshold)?;
    let bound = estimate_input_bound(&psi_xu, region, &cfg.input_box, cfg.bound_samples, seed)?;
    let fixed_points = fixed_points_in(&spec, region)?;
    let experiments = cfg
        .scenarios
        .iter()
        .map(|s| {
            basin_crossing_experiment(
                &spec,
                &model,
                &decomp,
                &bound,
                &CrossingSetup {
                    scenario: &s.name,
                    x0: &cfg.x0,
                    schedule: &s.schedule,
                    horizon: cfg.horizon,
                    grid_step: cfg.grid_step,
                    fixed_points: &fixed_points,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlRun {
        seed: master_seed,
        model_residual: model.residual,
        ridge: model.ridge,
        eigenvalues: decomp.d.clone(),
        null_rows: decomp.null_rows.clone(),
        reconstruction_error: decomp.reconstruction_error,
        condition: decomp.condition,
        experiments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_model() -> KoopmanControlModel {
        let spec = VectorFieldSpec::named("controlled_linear").unwrap();
        let psi_x = Dictionary::monomials(1, 1).unwrap().without_constant().unwrap();
        let psi_xu = ControlDictionary::new(None, 1, 1).unwrap();
        let data = sample_control_data(&BoxRegion::cube(1, 1.0), &BoxRegion::cube(1, 1.0), 200, 0.5, 1).unwrap();
        fit_control_model(&spec, &data, &psi_x, &psi_xu, None).unwrap()
    }

    #[test]
    fn identifies_scalar_linear_control() {
        let m = linear_model();
        assert!((m.l_x[(0, 0)] + 1.0).abs() < 1e-6);
        assert!((m.l_xu[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_input_data_is_not_excitation() {
        let spec = VectorFieldSpec::named("controlled_linear").unwrap();
        let psi_x = Dictionary::monomials(1, 2).unwrap();
        let psi_xu = control_dictionary(1, 2, 1, 1).unwrap();
        let data = sample_control_data(&BoxRegion::cube(1, 1.0), &BoxRegion::cube(1, 1.0), 50, 1.0, 1).unwrap();
        assert_eq!(fit_control_model(&spec, &data, &psi_x, &psi_xu, None), Err(KoopmanError::NoExcitation));
    }

    #[test]
    fn closed_loop_linear_decay() {
        let m = linear_model();
        let r = feedback_rollout(&m, &DMatrix::from_element(1, 1, 1.0), &[0.8], 1.0, 10).unwrap();
        let last = r.lifted.last().unwrap()[0];
        assert!((last - 0.8 * (-2.0f64).exp()).abs() < 1e-6);
        let open = feedback_rollout(&m, &DMatrix::zeros(1, 1), &[0.8], 1.0, 10).unwrap();
        assert!((open.lifted.last().unwrap()[0] - 0.8 * (-1.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rate_bound_is_product() {
        let decomp = LiftedDecomposition {
            q: DMatrix::identity(1, 1),
            q_inv: DMatrix::identity(1, 1),
            d: vec![Complex64::new(0.0, 0.0)],
            b_tilde: DMatrix::from_element(1, 1, Complex64::new(2.0, 0.0)),
            null_rows: vec![0],
            null_threshold: 1e-8,
            condition: 1.0,
            reconstruction_error: 0.0,
        };
        assert_eq!(null_rate_bound(&decomp, 1.5).unwrap(), 3.0);
        assert_eq!(null_rate_bound(&decomp, 3.0).unwrap(), 6.0);
        let none = LiftedDecomposition {
            null_rows: vec![],
            ..decomp.clone()
        };
        assert_eq!(null_rate_bound(&none, 1.0), Err(KoopmanError::NoNullMode));
        let zero = LiftedDecomposition {
            b_tilde: DMatrix::zeros(1, 1),
            ..decomp
        };
        assert_eq!(null_rate_bound(&zero, 1.5).unwrap(), 0.0);
    }

    #[test]
    fn piecewise_schedule_switches() {
        let s = Schedule::Piecewise {
            switch_times: vec![1.0, 2.0],
            values: vec![vec![0.0], vec![1.0], vec![2.0]],
        };
        s.validate(1).unwrap();
        assert_eq!(s.at(0.5), &[0.0]);
        assert_eq!(s.at(1.0), &[1.0]);
        assert_eq!(s.at(9.0), &[2.0]);
        assert!(s.validate(2).is_err());
        let bad = Schedule::Piecewise {
            switch_times: vec![1.0],
            values: vec![vec![0.0]],
        };
        assert!(bad.validate(1).is_err());
    }
}
