use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::VectorFieldSpec;
use crate::error::{KoopmanError, Result};

/// |Re mu| below this on any Jacobian eigenvalue makes a point non-hyperbolic.
pub const NON_HYPERBOLIC_THRESHOLD: f64 = 1e-6;
const DEDUP_TOL: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityClass {
    Stable,
    Unstable,
    Saddle,
    NonHyperbolic,
}

impl StabilityClass {
    pub fn from_eigenvalues(eigenvalues: &[Complex64]) -> Self {
        if eigenvalues.iter().any(|m| m.re.abs() < NON_HYPERBOLIC_THRESHOLD) {
            StabilityClass::NonHyperbolic
        } else if eigenvalues.iter().all(|m| m.re < 0.0) {
            StabilityClass::Stable
        } else if eigenvalues.iter().all(|m| m.re > 0.0) {
            StabilityClass::Unstable
        } else {
            StabilityClass::Saddle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub location: Vec<f64>,
    pub jacobian_eigenvalues: Vec<Complex64>,
    pub stability: StabilityClass,
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    /// Deduplicated roots sorted lexicographically by location.
    pub points: Vec<FixedPoint>,
    /// Seeds whose Newton iteration did not converge.
    pub dropped_seeds: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn newton(spec: &VectorFieldSpec, seed: &[f64], tol: f64) -> Option<Vec<f64>> {
    let d = spec.dimension();
    let mut x = seed.to_vec();
    let mut f = vec![0.0; d];
    for _ in 0..MAX_NEWTON_ITERS {
        spec.eval_into(&x, &[], &mut f);
        let fnorm = norm(&f);
        if !fnorm.is_finite() {
            return None;
        }
        if fnorm <= 1e-15 {
            break;
        }
        let jac = spec.jacobian(&x);
        let rhs = nalgebra::DVector::from_vec(f.clone());
        let step = jac.lu().solve(&rhs)?;
        for i in 0..d {
            x[i] -= step[i];
        }
        if norm(step.as_slice()) <= 1e-15 * (1.0 + norm(&x)) {
            break;
        }
    }
    spec.eval_into(&x, &[], &mut f);
    (norm(&f) <= tol && x.iter().all(|v| v.is_finite())).then_some(x)
}

/// Newton-converged zeros of the uncontrolled field reached from `seeds`,
/// deduplicated in the max norm and classified by their Jacobian spectrum.
pub fn find_fixed_points(spec: &VectorFieldSpec, seeds: &[Vec<f64>], tol: f64) -> Result<FixedPointSet> {
    if !(tol > 0.0) {
        return Err(KoopmanError::InvalidArgument("fixed-point tolerance must be > 0".into()));
    }
    let mut roots: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0;
    for seed in seeds {
        if seed.len() != spec.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: spec.dimension(),
                actual: seed.len(),
                context: "fixed-point seed",
            });
        }
        if seed.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("fixed-point seed"));
        }
        match newton(spec, seed, tol) {
            Some(root) => {
                let duplicate = roots.iter().any(|r| {
                    r.iter().zip(&root).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) <= DEDUP_TOL
                });
                if !duplicate {
                    roots.push(root);
                }
            }
            None => dropped += 1,
        }
    }
    // canonical signed zero
    for r in &mut roots {
        for v in r.iter_mut() {
            if *v == 0.0 {
                *v = 0.0;
            }
        }
    }
    roots.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut points = Vec::with_capacity(roots.len());
    for location in roots {
        let jac = spec.jacobian(&location);
        let mut eigenvalues: Vec<Complex64> = jac.complex_eigenvalues().iter().cloned().collect();
        eigenvalues.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let residual_norm = norm(&spec.eval(&location, &vec![0.0; spec.control_arity()])?);
        points.push(FixedPoint {
            stability: StabilityClass::from_eigenvalues(&eigenvalues),
            jacobian_eigenvalues: eigenvalues,
            location,
            residual_norm,
        });
    }
    Ok(FixedPointSet {
        points,
        dropped_seeds: dropped,
    })
}
