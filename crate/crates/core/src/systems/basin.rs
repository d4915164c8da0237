use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{flow, BoxRegion, FixedPoint, StabilityClass, VectorFieldSpec};
use crate::error::{KoopmanError, Result};

/// Default simulation horizon for basin labelling (time units).
pub const DEFAULT_HORIZON: f64 = 50.0;
/// Default capture radius around a fixed point.
pub const DEFAULT_CAPTURE_RADIUS: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasinLabel {
    /// Index into the fixed-point list the grid was labelled against.
    Basin(usize),
    Unresolved { escaped: bool },
}

impl BasinLabel {
    pub fn index(self) -> Option<usize> {
        match self {
            BasinLabel::Basin(i) => Some(i),
            BasinLabel::Unresolved { .. } => None,
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Label of the fixed point whose capture ball contains `F^horizon(x0)`.
pub fn classify_basin(
    spec: &VectorFieldSpec,
    x0: &[f64],
    fixed_points: &[FixedPoint],
    horizon: f64,
    capture_radius: f64,
    tol: f64,
) -> Result<BasinLabel> {
    if !(horizon > 0.0) || !(capture_radius > 0.0) {
        return Err(KoopmanError::InvalidArgument("horizon and capture radius must be > 0".into()));
    }
    let end = match flow(spec, x0, horizon, tol) {
        Ok(end) => end,
        Err(KoopmanError::FiniteEscape { .. }) => return Ok(BasinLabel::Unresolved { escaped: true }),
        Err(e) => return Err(e),
    };
    let nearest = fixed_points
        .iter()
        .enumerate()
        .map(|(i, fp)| (i, distance(&end, &fp.location)))
        .filter(|(_, d)| *d <= capture_radius)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    Ok(match nearest {
        Some((i, _)) => BasinLabel::Basin(i),
        None => BasinLabel::Unresolved { escaped: false },
    })
}

/// Simulated basin labels on a tensor grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinGrid {
    pub region: BoxRegion,
    pub resolution: Vec<usize>,
    pub grid_points: Vec<Vec<f64>>,
    pub labels: Vec<BasinLabel>,
    pub fixed_points: Vec<FixedPoint>,
    pub horizon: f64,
    pub capture_radius: f64,
}

impl BasinGrid {
    /// Labels every grid point; points are processed in parallel and stored
    /// in grid order.
    pub fn compute(
        spec: &VectorFieldSpec,
        region: &BoxRegion,
        resolution: &[usize],
        fixed_points: &[FixedPoint],
        horizon: f64,
        capture_radius: f64,
        tol: f64,
    ) -> Result<Self> {
        region.validate()?;
        if region.dim() != spec.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: spec.dimension(),
                actual: region.dim(),
                context: "basin region",
            });
        }
        let grid_points = region.grid(resolution)?;
        let labels = grid_points
            .par_iter()
            .map(|x| classify_basin(spec, x, fixed_points, horizon, capture_radius, tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            region: region.clone(),
            resolution: resolution.to_vec(),
            grid_points,
            labels,
            fixed_points: fixed_points.to_vec(),
            horizon,
            capture_radius,
        })
    }

    /// Fixed-point indices that are attractors and label at least one grid point.
    pub fn attractor_basins(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .labels
            .iter()
            .filter_map(|l| l.index())
            .filter(|&i| self.fixed_points[i].stability == StabilityClass::Stable)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Grid points labelled with an attractor, with that attractor's index.
    pub fn attractor_labelled(&self) -> impl Iterator<Item = (&Vec<f64>, usize)> {
        self.grid_points.iter().zip(&self.labels).filter_map(|(p, l)| {
            l.index()
                .filter(|&i| self.fixed_points[i].stability == StabilityClass::Stable)
                .map(|i| (p, i))
        })
    }

    pub fn resolved_count(&self) -> usize {
        self.labels.iter().filter(|l| l.index().is_some()).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::find_fixed_points;

    fn bistable_fps() -> (VectorFieldSpec, Vec<FixedPoint>) {
        let spec = VectorFieldSpec::named("bistable").unwrap();
        let fps = find_fixed_points(&spec, &[vec![-2.0], vec![0.1], vec![2.0]], 1e-10).unwrap().points;
        (spec, fps)
    }

    #[test]
    fn bistable_examples() {
        let (spec, fps) = bistable_fps();
        let label = |x: f64| classify_basin(&spec, &[x], &fps, 50.0, 1e-2, 1e-9).unwrap();
        assert_eq!(label(0.5), BasinLabel::Basin(2));
        assert_eq!(label(-0.5), BasinLabel::Basin(0));
        assert_eq!(label(0.0), BasinLabel::Basin(1));
    }

    #[test]
    fn short_horizon_is_unresolved() {
        let (spec, fps) = bistable_fps();
        let label = classify_basin(&spec, &[0.01], &fps, 0.5, 1e-2, 1e-9).unwrap();
        assert_eq!(label, BasinLabel::Unresolved { escaped: false });
    }

    #[test]
    fn grid_labels_and_attractors() {
        let (spec, fps) = bistable_fps();
        let region = BoxRegion::new(vec![-2.0], vec![2.0]).unwrap();
        let grid = BasinGrid::compute(&spec, &region, &[41], &fps, 50.0, 1e-2, 1e-9).unwrap();
        assert_eq!(grid.labels.len(), 41);
        assert_eq!(grid.attractor_basins(), vec![0, 2]);
        for (p, l) in grid.attractor_labelled() {
            assert_eq!(l, if p[0] < 0.0 { 0 } else { 2 });
        }
        // the midpoint sits on the unstable root
        assert_eq!(grid.labels[20], BasinLabel::Basin(1));
    }
}
