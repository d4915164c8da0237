//! Adaptive Dormand–Prince 5(4) integrator.

use crate::error::{KoopmanError, Result};

/// State norm beyond which a trajectory is reported as a finite escape.
pub const DEFAULT_ESCAPE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy)]
pub struct IntegratorOptions {
    /// Absolute and relative local error tolerance.
    pub tol: f64,
    pub escape_bound: f64,
    pub max_steps: usize,
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            escape_bound: DEFAULT_ESCAPE_BOUND,
            max_steps: 2_000_000,
        }
    }
}

/// States at the requested output times. When the trajectory escapes,
/// `states` holds only the outputs reached before the escape.
#[derive(Debug, Clone)]
pub struct Integration {
    pub states: Vec<Vec<f64>>,
    pub escaped_at: Option<f64>,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Integrates `x' = rhs(t, x)` from `t = 0` and records the state at every
/// entry of `times` (non-negative, non-decreasing). Output at `t = 0` is `x0`
/// exactly.
pub fn integrate<F>(mut rhs: F, x0: &[f64], times: &[f64], opts: IntegratorOptions) -> Result<Integration>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(opts.tol > 0.0) {
        return Err(KoopmanError::InvalidArgument(format!("tolerance must be > 0, got {}", opts.tol)));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(KoopmanError::NonFinite("initial state"));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(KoopmanError::InvalidArgument("output times must be finite, >= 0 and sorted".into()));
    }
    let d = x0.len();
    let tol = opts.tol;
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut states = Vec::with_capacity(times.len());

    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut k5 = vec![0.0; d];
    let mut k6 = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut x_new = vec![0.0; d];

    rhs(t, &x, &mut k1);
    let mut h = initial_step(&mut rhs, &x, &k1, tol);
    let mut steps = 0usize;

    for &t_out in times {
        while t < t_out {
            if steps >= opts.max_steps {
                return Err(KoopmanError::StepLimit(opts.max_steps));
            }
            let remaining = t_out - t;
            let clipped = h >= remaining;
            let step = if clipped { remaining } else { h };

            for i in 0..d {
                tmp[i] = x[i] + step * A21 * k1[i];
            }
            rhs(t + C2 * step, &tmp, &mut k2);
            for i in 0..d {
                tmp[i] = x[i] + step * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(t + C3 * step, &tmp, &mut k3);
            for i in 0..d {
                tmp[i] = x[i] + step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(t + C4 * step, &tmp, &mut k4);
            for i in 0..d {
                tmp[i] = x[i] + step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(t + C5 * step, &tmp, &mut k5);
            for i in 0..d {
                tmp[i] = x[i]
                    + step * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(t + step, &tmp, &mut k6);
            for i in 0..d {
                x_new[i] = x[i] + step * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(t + step, &x_new, &mut k7);

            let mut err: f64 = 0.0;
            for i in 0..d {
                let e = step
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = tol + tol * x[i].abs().max(x_new[i].abs());
                err = err.max(e.abs() / sc);
            }
            if !err.is_finite() {
                err = 1e10;
            }
            steps += 1;

            if err <= 1.0 {
                t = if clipped { t_out } else { t + step };
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut k1, &mut k7);
                if x.iter().any(|v| !v.is_finite()) || norm2(&x) > opts.escape_bound {
                    return Ok(Integration {
                        states,
                        escaped_at: Some(t),
                    });
                }
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // a clipped step says nothing about how large h may grow
                if !clipped || step * factor < h {
                    h = step * factor;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(KoopmanError::InvalidArgument(format!("step size underflow at t = {t}")));
            }
        }
        states.push(x.clone());
    }
    Ok(Integration {
        states,
        escaped_at: None,
    })
}

fn initial_step<F>(rhs: &mut F, x: &[f64], f0: &[f64], tol: f64) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let sc: Vec<f64> = x.iter().map(|v| tol + tol * v.abs()).collect();
    let d0 = x.iter().zip(&sc).map(|(v, s)| (v / s).abs()).fold(0.0, f64::max);
    let d1 = f0.iter().zip(&sc).map(|(v, s)| (v / s).abs()).fold(0.0, f64::max);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let x1: Vec<f64> = x.iter().zip(f0).map(|(v, f)| v + h0 * f).collect();
    let mut f1 = vec![0.0; x.len()];
    rhs(h0, &x1, &mut f1);
    let d2 = f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).abs())
        .fold(0.0, f64::max)
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    let h = (100.0 * h0).min(h1);
    if max_abs(f0) == 0.0 {
        h.max(1e-3)
    } else {
        h
    }
}
