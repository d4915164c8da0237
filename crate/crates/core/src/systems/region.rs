use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KoopmanError, Result};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let region = Self { lower, upper };
        region.validate()?;
        Ok(region)
    }

    /// The symmetric box `[-half, half]^d`.
    pub fn cube(d: usize, half: f64) -> Self {
        Self {
            lower: vec![-half; d],
            upper: vec![half; d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(KoopmanError::InvalidArgument("region bounds must be non-empty and of equal length".into()));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !l.is_finite() || !u.is_finite() || l > u)
        {
            return Err(KoopmanError::InvalidArgument("region requires finite lower <= upper".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Uniform sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if l == u { *l } else { rng.gen_range(*l..*u) })
            .collect()
    }

    /// Coordinate of point `k` of `r` along `axis` in [`BoxRegion::grid`].
    pub fn grid_coordinate(&self, axis: usize, k: usize, r: usize) -> f64 {
        let (l, u) = (self.lower[axis], self.upper[axis]);
        if r == 1 {
            0.5 * (l + u)
        } else {
            l + (u - l) * k as f64 / (r - 1) as f64
        }
    }

    /// Tensor grid with `resolution[i]` points along axis `i`, endpoints
    /// included, first axis varying slowest. A resolution of 1 puts the
    /// single point at the midpoint of that axis.
    pub fn grid(&self, resolution: &[usize]) -> Result<Vec<Vec<f64>>> {
        if resolution.len() != self.dim() || resolution.contains(&0) {
            return Err(KoopmanError::InvalidArgument("grid resolution must be positive per axis".into()));
        }
        let axes: Vec<Vec<f64>> = resolution
            .iter()
            .enumerate()
            .map(|(i, &r)| (0..r).map(|k| self.grid_coordinate(i, k, r)).collect())
            .collect();
        let total: usize = resolution.iter().product();
        let mut points = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = vec![0.0; self.dim()];
            for axis in (0..self.dim()).rev() {
                let r = resolution[axis];
                p[axis] = axes[axis][rem % r];
                rem /= r;
            }
            points.push(p);
        }
        Ok(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_row_major_with_endpoints() {
        let r = BoxRegion::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let g = r.grid(&[3, 2]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![-1.0, 0.0]);
        assert_eq!(g[1], vec![-1.0, 2.0]);
        assert_eq!(g[5], vec![1.0, 2.0]);
    }

    #[test]
    fn single_point_grid_is_center() {
        let r = BoxRegion::new(vec![-2.0], vec![2.0]).unwrap();
        assert_eq!(r.grid(&[1]).unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(BoxRegion::new(vec![1.0], vec![0.0]).is_err());
    }
}
