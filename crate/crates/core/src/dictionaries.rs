//! Observable dictionaries psi(x) with analytic gradients.
//!
//! Entries are monomials (graded-lexicographic order), Gaussian radial basis
//! functions, the constant function, and piecewise-constant basin indicators
//! looked up from a simulated basin grid.

use std::cell::Cell;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KoopmanError, Result};
use crate::systems::{BasinGrid, BoxRegion};

/// Default cap on the number of dictionary entries.
pub const DEFAULT_SIZE_CAP: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    Constant,
    Monomial { exponents: Vec<u32> },
    Gaussian { center: Vec<f64>, shape: f64 },
    /// 1 on the estimated basin of attractor `basin`, 0 elsewhere.
    Indicator { basin: usize },
}

/// Basin labels on a tensor grid, looked up by nearest labelled grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMap {
    pub region: BoxRegion,
    pub resolution: Vec<usize>,
    /// Indicator index per grid point in grid order; `None` where the point
    /// is not labelled with an attractor.
    pub labels: Vec<Option<usize>>,
    /// Attractor locations, one per indicator.
    pub attractors: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Closest labelled grid point of one basin (or of any basin).
#[derive(Debug, Clone, Copy)]
struct Hit {
    dist2: f64,
    flat: usize,
    basin: usize,
}

impl IndicatorMap {
    pub fn from_grid(grid: &BasinGrid) -> Result<Self> {
        let attractors = grid.attractor_basins();
        if attractors.len() < 2 {
            return Err(KoopmanError::InvalidArgument(format!(
                "basin grid resolves {} attractor basin(s); indicators need at least 2",
                attractors.len()
            )));
        }
        let labels = grid
            .labels
            .iter()
            .map(|l| l.index().and_then(|i| attractors.iter().position(|&a| a == i)))
            .collect();
        Ok(Self {
            region: grid.region.clone(),
            resolution: grid.resolution.clone(),
            labels,
            attractors: attractors.iter().map(|&i| grid.fixed_points[i].location.clone()).collect(),
        })
    }

    pub fn n_basins(&self) -> usize {
        self.attractors.len()
    }

    fn validate(&self) -> Result<()> {
        self.region.validate()?;
        let total: usize = self.resolution.iter().product();
        if self.resolution.len() != self.region.dim() || self.resolution.contains(&0) || total != self.labels.len() {
            return Err(KoopmanError::InvalidArgument("indicator grid shape does not match its labels".into()));
        }
        if self.labels.iter().any(|l| l.is_some_and(|b| b >= self.n_basins())) {
            return Err(KoopmanError::InvalidArgument("indicator label out of range".into()));
        }
        if self.labels.iter().all(|l| l.is_none()) {
            return Err(KoopmanError::InvalidArgument("indicator grid has no labelled points".into()));
        }
        Ok(())
    }

    fn spacing(&self, axis: usize) -> f64 {
        let r = self.resolution[axis];
        if r == 1 {
            f64::INFINITY
        } else {
            (self.region.upper[axis] - self.region.lower[axis]) / (r - 1) as f64
        }
    }

    /// Visits labelled grid points in shells of growing Chebyshev index
    /// radius around the cell nearest to `x`, until `done(lower_bound^2)`
    /// says no further shell can matter.
    fn search(&self, x: &[f64], mut visit: impl FnMut(Hit), mut done: impl FnMut(f64) -> bool) {
        let d = self.resolution.len();
        let center: Vec<i64> = (0..d)
            .map(|a| {
                let r = self.resolution[a];
                if r == 1 {
                    0
                } else {
                    (((x[a] - self.region.lower[a]) / self.spacing(a)).round() as i64).clamp(0, r as i64 - 1)
                }
            })
            .collect();
        let h_min = (0..d).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min);
        let max_radius = self.resolution.iter().cloned().max().unwrap_or(1) as i64;
        let mut p = vec![0.0; d];
        let mut cell = vec![0usize; d];
        for radius in 0..=max_radius {
            if radius > 0 {
                let bound = if h_min.is_finite() { (radius as f64 - 0.5) * h_min } else { f64::INFINITY };
                if done(bound * bound) {
                    return;
                }
            }
            // every cell with Chebyshev distance exactly `radius`
            let side = (2 * radius + 1) as usize;
            let cells = side.pow(d as u32);
            'cell: for code in 0..cells {
                let mut rem = code;
                let mut flat = 0usize;
                let mut on_shell = false;
                for a in 0..d {
                    let o = (rem % side) as i64 - radius;
                    rem /= side;
                    on_shell |= o.abs() == radius;
                    let c = center[a] + o;
                    if c < 0 || c >= self.resolution[a] as i64 {
                        continue 'cell;
                    }
                    p[a] = self.region.grid_coordinate(a, c as usize, self.resolution[a]);
                    cell[a] = c as usize;
                }
                if !on_shell {
                    continue;
                }
                for a in 0..d {
                    flat = flat * self.resolution[a] + cell[a];
                }
                if let Some(basin) = self.labels[flat] {
                    visit(Hit {
                        dist2: sq_dist(&p, x),
                        flat,
                        basin,
                    });
                }
            }
        }
    }

    fn nearest(&self, x: &[f64]) -> Hit {
        let best: Cell<Option<Hit>> = Cell::new(None);
        self.search(
            x,
            |hit| {
                let better = match best.get() {
                    None => true,
                    Some(b) => hit.dist2 < b.dist2 || (hit.dist2 == b.dist2 && hit.flat < b.flat),
                };
                if better {
                    best.set(Some(hit));
                }
            },
            |bound2| best.get().is_some_and(|b| bound2 > b.dist2),
        );
        best.get().expect("validated map has a labelled point")
    }

    /// Indicator index of the nearest labelled grid point (lowest grid index
    /// on ties).
    pub fn nearest_basin(&self, x: &[f64]) -> usize {
        self.nearest(x).basin
    }

    /// True when a grid point of another basin is (numerically) as close as
    /// the nearest one.
    pub fn on_boundary(&self, x: &[f64], margin: f64) -> bool {
        let winner = self.nearest(x);
        let own = winner.dist2.sqrt();
        let reach = own + margin * (1.0 + own);
        let other = Cell::new(f64::INFINITY);
        self.search(
            x,
            |hit| {
                if hit.basin != winner.basin {
                    other.set(other.get().min(hit.dist2.sqrt()));
                }
            },
            |bound2| bound2.sqrt() > reach || other.get() <= reach,
        );
        other.get() <= reach
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DictionaryRepr {
    dimension: usize,
    entries: Vec<Observable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    indicator: Option<IndicatorMap>,
}

/// An ordered set of scalar observables on R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DictionaryRepr", into = "DictionaryRepr")]
pub struct Dictionary {
    repr: DictionaryRepr,
    hash: String,
}

impl TryFrom<DictionaryRepr> for Dictionary {
    type Error = KoopmanError;

    fn try_from(repr: DictionaryRepr) -> Result<Self> {
        Dictionary::from_entries(repr.dimension, repr.entries, repr.indicator)
    }
}

impl From<Dictionary> for DictionaryRepr {
    fn from(d: Dictionary) -> Self {
        d.repr
    }
}

/// Values of every dictionary entry at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableVector {
    pub values: Vec<f64>,
    pub at: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exponent tuples of total degree `degree`, descending lexicographic.
fn exponents_of_degree(d: usize, degree: u32) -> Vec<Vec<u32>> {
    if d == 1 {
        return vec![vec![degree]];
    }
    let mut out = Vec::new();
    for first in (0..=degree).rev() {
        for mut rest in exponents_of_degree(d - 1, degree - first) {
            let mut e = vec![first];
            e.append(&mut rest);
            out.push(e);
        }
    }
    out
}

impl Dictionary {
    /// General constructor; validates every entry against the dimension.
    pub fn from_entries(dimension: usize, entries: Vec<Observable>, indicator: Option<IndicatorMap>) -> Result<Self> {
        if dimension == 0 {
            return Err(KoopmanError::InvalidArgument("dictionary dimension must be >= 1".into()));
        }
        if entries.is_empty() {
            return Err(KoopmanError::InvalidArgument("dictionary has no entries".into()));
        }
        if let Some(map) = &indicator {
            map.validate()?;
            if map.region.dim() != dimension {
                return Err(KoopmanError::DimensionMismatch {
                    expected: dimension,
                    actual: map.region.dim(),
                    context: "indicator grid",
                });
            }
        }
        for e in &entries {
            match e {
                Observable::Constant => {}
                Observable::Monomial { exponents } => {
                    if exponents.len() != dimension {
                        return Err(KoopmanError::DimensionMismatch {
                            expected: dimension,
                            actual: exponents.len(),
                            context: "monomial exponents",
                        });
                    }
                }
                Observable::Gaussian { center, shape } => {
                    if center.len() != dimension {
                        return Err(KoopmanError::DimensionMismatch {
                            expected: dimension,
                            actual: center.len(),
                            context: "rbf center",
                        });
                    }
                    if !(*shape > 0.0) || !shape.is_finite() {
                        return Err(KoopmanError::InvalidArgument(format!("rbf shape must be > 0, got {shape}")));
                    }
                }
                Observable::Indicator { basin } => {
                    let map = indicator
                        .as_ref()
                        .ok_or_else(|| KoopmanError::InvalidArgument("indicator entry without a basin map".into()))?;
                    if *basin >= map.n_basins() {
                        return Err(KoopmanError::InvalidArgument(format!("indicator basin {basin} out of range")));
                    }
                }
            }
        }
        let repr = DictionaryRepr {
            dimension,
            entries,
            indicator,
        };
        let json = serde_json::to_vec(&repr).expect("dictionary serializes");
        let digest = Sha256::digest(&json);
        let hash = digest.iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { repr, hash })
    }

    /// All monomials of total degree <= `max_degree`, graded-lex order.
    pub fn monomials(d: usize, max_degree: u32) -> Result<Self> {
        Self::monomials_capped(d, max_degree, DEFAULT_SIZE_CAP)
    }

    pub fn monomials_capped(d: usize, max_degree: u32, cap: usize) -> Result<Self> {
        if max_degree < 1 {
            return Err(KoopmanError::InvalidArgument("max_degree must be >= 1".into()));
        }
        if d == 0 {
            return Err(KoopmanError::InvalidArgument("dimension must be >= 1".into()));
        }
        let size = binomial(d + max_degree as usize, d);
        if size > cap as f64 {
            return Err(KoopmanError::DictionaryTooLarge {
                size: size.min(usize::MAX as f64) as usize,
                cap,
            });
        }
        let mut entries = vec![Observable::Constant];
        for degree in 1..=max_degree {
            entries.extend(
                exponents_of_degree(d, degree)
                    .into_iter()
                    .map(|exponents| Observable::Monomial { exponents }),
            );
        }
        Self::from_entries(d, entries, None)
    }

    /// Gaussian entries `exp(-shape |x - c|^2)`, optionally preceded by the constant.
    pub fn rbf(centers: &[Vec<f64>], shape: f64, include_constant: bool) -> Result<Self> {
        if centers.is_empty() {
            return Err(KoopmanError::InvalidArgument("rbf dictionary needs at least one center".into()));
        }
        if !(shape > 0.0) {
            return Err(KoopmanError::InvalidArgument(format!("rbf shape must be > 0, got {shape}")));
        }
        let d = centers[0].len();
        let mut entries = Vec::with_capacity(centers.len() + 1);
        if include_constant {
            entries.push(Observable::Constant);
        }
        entries.extend(centers.iter().map(|c| Observable::Gaussian {
            center: c.clone(),
            shape,
        }));
        Self::from_entries(d, entries, None)
    }

    /// `base` followed by one indicator per attractor basin of `basins`.
    pub fn with_indicators(base: &Dictionary, basins: &BasinGrid) -> Result<Self> {
        if base.repr.indicator.is_some() {
            return Err(KoopmanError::InvalidArgument("dictionary already carries indicators".into()));
        }
        if basins.region.dim() != base.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: base.dimension(),
                actual: basins.region.dim(),
                context: "basin grid",
            });
        }
        let map = IndicatorMap::from_grid(basins)?;
        let mut entries = base.repr.entries.clone();
        entries.extend((0..map.n_basins()).map(|basin| Observable::Indicator { basin }));
        Self::from_entries(base.dimension(), entries, Some(map))
    }

    /// Same entries with the constant function removed.
    pub fn without_constant(&self) -> Result<Self> {
        let entries = self
            .repr
            .entries
            .iter()
            .filter(|e| !matches!(e, Observable::Constant))
            .cloned()
            .collect();
        Self::from_entries(self.dimension(), entries, self.repr.indicator.clone())
    }

    pub fn dimension(&self) -> usize {
        self.repr.dimension
    }

    pub fn size(&self) -> usize {
        self.repr.entries.len()
    }

    pub fn entries(&self) -> &[Observable] {
        &self.repr.entries
    }

    pub fn indicator_map(&self) -> Option<&IndicatorMap> {
        self.repr.indicator.as_ref()
    }

    /// SHA-256 of the serialized descriptor.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Position of the entry `observable`, if present.
    pub fn position(&self, observable: &Observable) -> Option<usize> {
        self.repr.entries.iter().position(|e| e == observable)
    }

    /// Indices of indicator entries.
    pub fn indicator_indices(&self) -> Vec<usize> {
        self.repr
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, Observable::Indicator { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn on_indicator_boundary(&self, x: &[f64]) -> bool {
        self.repr
            .indicator
            .as_ref()
            .is_some_and(|m| m.on_boundary(x, 1e-9))
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: self.dimension(),
                actual: x.len(),
                context: "dictionary argument",
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::NonFinite("dictionary argument"));
        }
        Ok(())
    }

    /// Writes psi(x) into `out` without argument checks.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let basin = self.repr.indicator.as_ref().map(|m| m.nearest_basin(x));
        for (slot, entry) in out.iter_mut().zip(&self.repr.entries) {
            *slot = match entry {
                Observable::Constant => 1.0,
                Observable::Monomial { exponents } => {
                    exponents.iter().zip(x).map(|(&e, &v)| v.powi(e as i32)).product()
                }
                Observable::Gaussian { center, shape } => (-shape * sq_dist(x, center)).exp(),
                Observable::Indicator { basin: b } => {
                    if basin == Some(*b) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<ObservableVector> {
        self.check_point(x)?;
        let mut values = vec![0.0; self.size()];
        self.eval_into(x, &mut values);
        Ok(ObservableVector { values, at: x.to_vec() })
    }

    /// N x d matrix whose row i is the gradient of entry i. Indicator rows are
    /// zero (exact away from basin boundaries).
    pub fn gradient(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let d = self.dimension();
        let mut g = DMatrix::zeros(self.size(), d);
        for (i, entry) in self.repr.entries.iter().enumerate() {
            match entry {
                Observable::Constant | Observable::Indicator { .. } => {}
                Observable::Monomial { exponents } => {
                    for j in 0..d {
                        if exponents[j] == 0 {
                            continue;
                        }
                        let mut v = exponents[j] as f64;
                        for (k, (&e, &xk)) in exponents.iter().zip(x).enumerate() {
                            let p = if k == j { e - 1 } else { e };
                            v *= xk.powi(p as i32);
                        }
                        g[(i, j)] = v;
                    }
                }
                Observable::Gaussian { center, shape } => {
                    let value = (-shape * sq_dist(x, center)).exp();
                    for j in 0..d {
                        g[(i, j)] = -2.0 * shape * (x[j] - center[j]) * value;
                    }
                }
            }
        }
        Ok(g)
    }

    /// Rows psi(x_k)^T for every point, evaluated in parallel.
    pub fn design_matrix(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for p in points {
            self.check_point(p)?;
        }
        let n = self.size();
        let rows: Vec<Vec<f64>> = points
            .par_iter()
            .map(|p| {
                let mut row = vec![0.0; n];
                self.eval_into(p, &mut row);
                row
            })
            .collect();
        Ok(DMatrix::from_fn(points.len(), n, |r, c| rows[r][c]))
    }
}
