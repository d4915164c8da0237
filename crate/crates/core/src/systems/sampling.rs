use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{flow, BoxRegion, VectorFieldSpec};
use crate::error::{KoopmanError, Result};
use crate::rng;

/// Snapshot pairs `(x_k, F^dt(x_k))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPairs {
    pub x_states: Vec<Vec<f64>>,
    pub y_states: Vec<Vec<f64>>,
    pub dt: f64,
    pub seed: u64,
    pub region: BoxRegion,
    /// Draws replaced because their trajectory escaped.
    pub resampled: usize,
    pub tol: f64,
}

impl SnapshotPairs {
    /// Pairs built from already computed states.
    pub fn from_states(x_states: Vec<Vec<f64>>, y_states: Vec<Vec<f64>>, dt: f64) -> Result<Self> {
        if x_states.len() != y_states.len() {
            return Err(KoopmanError::DimensionMismatch {
                expected: x_states.len(),
                actual: y_states.len(),
                context: "snapshot pair count",
            });
        }
        if !(dt > 0.0) {
            return Err(KoopmanError::InvalidArgument("dt must be > 0".into()));
        }
        let d = x_states.first().map_or(1, |x| x.len());
        Ok(Self {
            x_states,
            y_states,
            dt,
            seed: 0,
            region: BoxRegion::cube(d, 0.0),
            resampled: 0,
            tol: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.x_states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_states.is_empty()
    }
}

/// `n` pairs with `x_k` uniform in `region` and `y_k = F^dt(x_k)`.
/// Escaping draws are replaced; the number of replacements is recorded.
pub fn sample_snapshot_pairs(
    spec: &VectorFieldSpec,
    region: &BoxRegion,
    n: usize,
    dt: f64,
    seed: u64,
    tol: f64,
) -> Result<SnapshotPairs> {
    region.validate()?;
    if n == 0 {
        return Err(KoopmanError::InvalidArgument("sample count must be > 0".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KoopmanError::InvalidArgument("dt must be > 0".into()));
    }
    if region.dim() != spec.dimension() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.dimension(),
            actual: region.dim(),
            context: "sampling region",
        });
    }
    let mut rng = rng::stream(seed, "snapshot_pairs");
    let mut x_states: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut y_states: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut resampled = 0usize;
    loop {
        let missing: Vec<usize> = (0..n).filter(|&k| y_states[k].is_none()).collect();
        if missing.is_empty() {
            break;
        }
        if resampled > 100 * n {
            return Err(KoopmanError::InvalidArgument("too many escaping samples; shrink the region or dt".into()));
        }
        let draws: Vec<(usize, Vec<f64>)> = missing.iter().map(|&k| (k, region.sample(&mut rng))).collect();
        let results: Vec<(usize, Vec<f64>, Result<Vec<f64>>)> = draws
            .into_par_iter()
            .map(|(k, x)| {
                let y = flow(spec, &x, dt, tol);
                (k, x, y)
            })
            .collect();
        for (k, x, y) in results {
            match y {
                Ok(y) => {
                    x_states[k] = Some(x);
                    y_states[k] = Some(y);
                }
                Err(KoopmanError::FiniteEscape { .. }) => resampled += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(SnapshotPairs {
        x_states: x_states.into_iter().map(Option::unwrap).collect(),
        y_states: y_states.into_iter().map(Option::unwrap).collect(),
        dt,
        seed,
        region: region.clone(),
        resampled,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_and_determinism() {
        let spec = VectorFieldSpec::named("duffing").unwrap();
        let region = BoxRegion::cube(2, 2.0);
        let a = sample_snapshot_pairs(&spec, &region, 100, 0.1, 11, 1e-10).unwrap();
        let b = sample_snapshot_pairs(&spec, &region, 100, 0.1, 11, 1e-10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert_eq!(a.dt, 0.1);
        for (x, y) in a.x_states.iter().zip(&a.y_states) {
            assert!(region.contains(x));
            let reference = flow(&spec, x, 0.1, 1e-13).unwrap();
            let err = reference.iter().zip(y).map(|(r, v)| (r - v).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9);
        }
        let c = sample_snapshot_pairs(&spec, &region, 100, 0.1, 12, 1e-10).unwrap();
        assert_ne!(a.x_states, c.x_states);
    }

    #[test]
    fn escaping_draws_are_resampled() {
        // x' = 3x leaves the escape ball from most of this region within dt = 1
        let mut params = std::collections::BTreeMap::new();
        params.insert("a".to_string(), 3.0);
        let spec = VectorFieldSpec::new("linear", &params).unwrap();
        let region = BoxRegion::new(vec![-1e-3], vec![1e5]).unwrap();
        let pairs = sample_snapshot_pairs(&spec, &region, 20, 1.0, 5, 1e-8).unwrap();
        assert_eq!(pairs.len(), 20);
        assert!(pairs.resampled > 0);
        assert!(pairs.y_states.iter().all(|y| y[0].abs() <= 1e6));
    }

    #[test]
    fn rejects_bad_arguments() {
        let spec = VectorFieldSpec::named("linear").unwrap();
        let region = BoxRegion::cube(1, 1.0);
        assert!(sample_snapshot_pairs(&spec, &region, 0, 0.1, 1, 1e-8).is_err());
        assert!(sample_snapshot_pairs(&spec, &region, 5, 0.0, 1, 1e-8).is_err());
    }
}
