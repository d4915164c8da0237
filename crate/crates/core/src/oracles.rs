//! Closed-form eigenfunctions used as ground truth.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KoopmanError, Result};
use crate::linalg::eigen_decompose;
use crate::rng;
use crate::systems::VectorFieldSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleExpr {
    /// `x / sqrt|1 - x^2|` for `x' = x - x^3`, lambda = 1.
    BistableGrowth,
    /// `(1 - x^2) / x^2` for `x' = x - x^3`, lambda = -2.
    BistableDecay,
    /// `<w, x>` for a linear field with left eigenvector `w`.
    Linear { w: Vec<Complex64> },
}

/// Half-width of the excluded band around an oracle's singular set.
pub const SINGULAR_BAND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOracle {
    pub system: String,
    pub expression: OracleExpr,
    pub lambda: Complex64,
}

/// Outcome of checking `f . grad(phi) = lambda phi` at random domain points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValidation {
    pub points: usize,
    /// Max of `|D_f phi - lambda phi| / max(1, |phi|)`.
    pub max_relative_error: f64,
}

impl AnalyticOracle {
    pub fn bistable_growth() -> Self {
        Self {
            system: "bistable".into(),
            expression: OracleExpr::BistableGrowth,
            lambda: Complex64::new(1.0, 0.0),
        }
    }

    pub fn bistable_decay() -> Self {
        Self {
            system: "bistable".into(),
            expression: OracleExpr::BistableDecay,
            lambda: Complex64::new(-2.0, 0.0),
        }
    }

    /// One oracle per left eigenvector of a linear system's matrix.
    pub fn linear(spec: &VectorFieldSpec) -> Result<Vec<Self>> {
        let a = spec
            .linear_matrix()
            .ok_or_else(|| KoopmanError::InvalidArgument(format!("system `{}` is not linear", spec.name())))?;
        let ed = eigen_decompose(&a)?;
        if ed.defective {
            return Err(KoopmanError::Defective(ed.condition));
        }
        Ok((0..ed.values.len())
            .map(|i| Self {
                system: spec.name().to_string(),
                expression: OracleExpr::Linear {
                    w: ed.left.row(i).iter().cloned().collect(),
                },
                lambda: ed.values[i],
            })
            .collect())
    }

    pub fn dimension(&self) -> usize {
        match &self.expression {
            OracleExpr::Linear { w } => w.len(),
            _ => 1,
        }
    }

    /// Points within [`SINGULAR_BAND`] of the singular set count as outside:
    /// a value there is dominated by rounding in the location.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        if x.len() != self.dimension() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self.expression {
            OracleExpr::BistableGrowth => (1.0 - x[0] * x[0]).abs() > SINGULAR_BAND,
            OracleExpr::BistableDecay => x[0].abs() > SINGULAR_BAND,
            OracleExpr::Linear { .. } => true,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<Complex64> {
        if x.len() != self.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.dimension(),
                actual: x.len(),
                context: "oracle argument",
            });
        }
        if !self.in_domain(x) {
            return Err(KoopmanError::OutsideDomain);
        }
        Ok(match &self.expression {
            OracleExpr::BistableGrowth => Complex64::new(x[0] / (1.0 - x[0] * x[0]).abs().sqrt(), 0.0),
            OracleExpr::BistableDecay => Complex64::new((1.0 - x[0] * x[0]) / (x[0] * x[0]), 0.0),
            OracleExpr::Linear { w } => w.iter().zip(x).map(|(wi, xi)| wi * xi).sum(),
        })
    }

    /// Seeded sample from the validation domain: [-2, 2]^d with 0.1-wide bands
    /// around the singular set removed.
    pub fn sample_domain<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let x: Vec<f64> = (0..self.dimension()).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let clear = match self.expression {
                OracleExpr::BistableGrowth => (x[0].abs() - 1.0).abs() > 0.1,
                OracleExpr::BistableDecay => x[0].abs() > 0.1,
                OracleExpr::Linear { .. } => true,
            };
            if clear {
                return x;
            }
        }
    }

    /// Checks the generator relation with a five-point central difference
    /// along the vector field direction.
    pub fn validate(&self, spec: &VectorFieldSpec, points: usize, seed: u64) -> Result<OracleValidation> {
        if spec.dimension() != self.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.dimension(),
                actual: spec.dimension(),
                context: "oracle system",
            });
        }
        let mut rng = rng::stream(seed, "oracle_validation");
        let u = vec![0.0; spec.control_arity()];
        let mut worst = 0.0f64;
        for _ in 0..points {
            let x = self.sample_domain(&mut rng);
            let f = spec.eval(&x, &u)?;
            let phi = self.eval(&x)?;
            let derivative = directional_derivative(|p| self.eval(p), &x, &f, 1e-4)?;
            let err = (derivative - self.lambda * phi).norm() / phi.norm().max(1.0);
            worst = worst.max(err);
        }
        Ok(OracleValidation {
            points,
            max_relative_error: worst,
        })
    }
}

/// Five-point central difference of `g` at `x` along `v`. The step is scaled
/// so that `|h v|` equals `step`.
pub fn directional_derivative<G>(g: G, x: &[f64], v: &[f64], step: f64) -> Result<Complex64>
where
    G: Fn(&[f64]) -> Result<Complex64>,
{
    let speed = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let h = step / speed;
    let at = |s: f64| -> Result<Complex64> {
        let p: Vec<f64> = x.iter().zip(v).map(|(xi, vi)| xi + s * vi).collect();
        g(&p)
    };
    Ok((at(-2.0 * h)? - at(2.0 * h)? + 8.0 * (at(h)? - at(-h)?)) / (12.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        let g = AnalyticOracle::bistable_growth();
        assert!((g.eval(&[0.9]).unwrap().re - 2.064742).abs() < 1e-5);
        assert!((g.eval(&[0.99]).unwrap().re - 7.018).abs() < 1e-3);
        assert_eq!(g.eval(&[0.0]).unwrap().re, 0.0);
        assert_eq!(g.eval(&[1.0]), Err(KoopmanError::OutsideDomain));
        let d = AnalyticOracle::bistable_decay();
        assert_eq!(d.eval(&[1.0]).unwrap().re, 0.0);
        assert_eq!(d.eval(&[-1.0]).unwrap().re, 0.0);
        assert_eq!(d.eval(&[0.0]), Err(KoopmanError::OutsideDomain));
    }

    #[test]
    fn bistable_oracles_validate() {
        let spec = VectorFieldSpec::named("bistable").unwrap();
        for oracle in [AnalyticOracle::bistable_growth(), AnalyticOracle::bistable_decay()] {
            let v = oracle.validate(&spec, 1000, 3).unwrap();
            assert!(v.max_relative_error <= 1e-8, "{oracle:?}: {}", v.max_relative_error);
        }
    }

    #[test]
    fn wrong_lambda_fails_validation() {
        let spec = VectorFieldSpec::named("bistable").unwrap();
        let mut oracle = AnalyticOracle::bistable_growth();
        oracle.lambda = Complex64::new(1.1, 0.0);
        assert!(oracle.validate(&spec, 50, 3).unwrap().max_relative_error > 1e-3);
    }

    #[test]
    fn harmonic_oracles() {
        let spec = VectorFieldSpec::named("harmonic").unwrap();
        let oracles = AnalyticOracle::linear(&spec).unwrap();
        assert_eq!(oracles.len(), 2);
        for o in &oracles {
            assert!((o.lambda.re).abs() < 1e-12 && (o.lambda.im.abs() - 1.0).abs() < 1e-12);
            assert!(o.validate(&spec, 200, 1).unwrap().max_relative_error <= 1e-8);
        }
    }
}
