//! Declarative experiment blocks (systems, dictionaries, fits) and the code
//! that turns them into fitted models. The CLI config and the check suite
//! both refer to fits by name.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dictionaries::Dictionary;
use crate::error::{KoopmanError, Result};
use crate::koopman_fit::{eig, fit_edmd, fit_generator_edmd_anchored, Eigenpair, GeneratorModel, KoopmanModel};
use crate::rng;
use crate::systems::{
    find_fixed_points, sample_snapshot_pairs, BasinGrid, BoxRegion, FixedPoint, SnapshotPairs, VectorFieldSpec,
    DEFAULT_CAPTURE_RADIUS, DEFAULT_HORIZON, DEFAULT_TOL,
};

/// A registered system with parameter overrides and its working region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    /// Registered system name.
    pub system: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    pub region: BoxRegion,
}

impl SystemBlock {
    pub fn new(system: &str, region: BoxRegion) -> Self {
        Self {
            system: system.to_string(),
            parameters: BTreeMap::new(),
            region,
        }
    }

    pub fn spec(&self) -> Result<VectorFieldSpec> {
        let spec = VectorFieldSpec::new(&self.system, &self.parameters)?;
        self.region.validate()?;
        if self.region.dim() != spec.dimension() {
            return Err(KoopmanError::DimensionMismatch {
                expected: spec.dimension(),
                actual: self.region.dim(),
                context: "system region",
            });
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseDictionary {
    Monomials {
        degree: u32,
        #[serde(default = "default_cap")]
        cap: usize,
    },
    /// Gaussians at `centers` seeded uniform points of the system region.
    Rbf {
        centers: usize,
        shape: f64,
        #[serde(default = "yes")]
        include_constant: bool,
    },
}

fn default_cap() -> usize {
    crate::dictionaries::DEFAULT_SIZE_CAP
}

fn yes() -> bool {
    true
}

/// Basin indicators from a simulated grid over the system region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorBlock {
    pub resolution: Vec<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_capture")]
    pub capture_radius: f64,
}

fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}

fn default_capture() -> f64 {
    DEFAULT_CAPTURE_RADIUS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryBlock {
    pub base: BaseDictionary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<IndicatorBlock>,
}

/// Where generator-EDMD samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSet {
    /// Seeded uniform points of the system region.
    Uniform { count: usize },
    /// Points of the region's tensor grid inside the invariant set
    /// `{energy <= max_energy}` of a conservative system.
    EnergyGrid { resolution: Vec<usize>, max_energy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitMethod {
    Discrete {
        dt: f64,
        pairs: usize,
    },
    Generator {
        samples: SampleSet,
        /// Add the fixed points in the region as weighted zero-target rows.
        #[serde(default)]
        anchor_fixed_points: bool,
        /// Anchor row weight, in units of the sample count.
        #[serde(default = "default_anchor_weight")]
        anchor_weight: f64,
    },
}

fn default_anchor_weight() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBlock {
    /// Key into the system blocks.
    pub system: String,
    pub dictionary: DictionaryBlock,
    pub method: FitMethod,
    /// Ridge parameter; omitted means the default ridge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Discrete(KoopmanModel),
    Generator(GeneratorModel),
}

impl Model {
    pub fn dictionary(&self) -> &Dictionary {
        match self {
            Model::Discrete(m) => &m.dictionary,
            Model::Generator(m) => &m.dictionary,
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            Model::Discrete(m) => m.residual,
            Model::Generator(m) => m.residual,
        }
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        match self {
            Model::Discrete(m) => &m.samples,
            Model::Generator(m) => &m.samples,
        }
    }

    pub fn eigenpairs(&self) -> Result<Vec<Eigenpair>> {
        match self {
            Model::Discrete(m) => eig(m),
            Model::Generator(m) => eig(m),
        }
    }
}

/// A fitted model with everything the checks need about its system.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub name: String,
    pub spec: VectorFieldSpec,
    pub region: BoxRegion,
    pub fixed_points: Vec<FixedPoint>,
    pub model: Model,
    pub pairs: Vec<Eigenpair>,
    /// Seed of this fit's random streams.
    pub seed: u64,
}

impl Fitted {
    pub fn dictionary(&self) -> &Dictionary {
        self.model.dictionary()
    }
}

/// Sub-seed for a named consumer of the master seed.
pub fn derive_seed(master_seed: u64, name: &str) -> u64 {
    rng::stream(master_seed, name).gen()
}

/// Fixed points reached by Newton from a seed grid over `region`
/// (11 points per axis, widened by one grid step).
pub fn fixed_points_in(spec: &VectorFieldSpec, region: &BoxRegion) -> Result<Vec<FixedPoint>> {
    let widened = BoxRegion::new(
        region.lower.iter().zip(&region.upper).map(|(l, u)| l - 0.1 * (u - l)).collect(),
        region.upper.iter().zip(&region.lower).map(|(u, l)| u + 0.1 * (u - l)).collect(),
    )?;
    let seeds = widened.grid(&vec![11; region.dim()])?;
    let set = find_fixed_points(spec, &seeds, 1e-10)?;
    Ok(set.points.into_iter().filter(|p| region.contains(&p.location)).collect())
}

pub fn basin_grid(spec: &VectorFieldSpec, region: &BoxRegion, block: &IndicatorBlock) -> Result<BasinGrid> {
    let fps = fixed_points_in(spec, region)?;
    BasinGrid::compute(spec, region, &block.resolution, &fps, block.horizon, block.capture_radius, 1e-9)
}

pub fn build_dictionary(spec: &VectorFieldSpec, region: &BoxRegion, block: &DictionaryBlock, seed: u64) -> Result<Dictionary> {
    let base = match &block.base {
        BaseDictionary::Monomials { degree, cap } => Dictionary::monomials_capped(spec.dimension(), *degree, *cap)?,
        BaseDictionary::Rbf {
            centers,
            shape,
            include_constant,
        } => {
            if *centers == 0 {
                return Err(KoopmanError::InvalidArgument("rbf dictionary needs at least one center".into()));
            }
            let mut r = rng::stream(seed, "rbf_centers");
            let points: Vec<Vec<f64>> = (0..*centers).map(|_| region.sample(&mut r)).collect();
            Dictionary::rbf(&points, *shape, *include_constant)?
        }
    };
    match &block.indicators {
        None => Ok(base),
        Some(ind) => Dictionary::with_indicators(&base, &basin_grid(spec, region, ind)?),
    }
}

fn generator_samples(spec: &VectorFieldSpec, region: &BoxRegion, set: &SampleSet, seed: u64) -> Result<Vec<Vec<f64>>> {
    match set {
        SampleSet::Uniform { count } => {
            if *count == 0 {
                return Err(KoopmanError::InvalidArgument("sample count must be > 0".into()));
            }
            let mut r = rng::stream(seed, "generator_samples");
            Ok((0..*count).map(|_| region.sample(&mut r)).collect())
        }
        SampleSet::EnergyGrid { resolution, max_energy } => {
            if !spec.has_closed_orbits() {
                return Err(KoopmanError::InvalidArgument(format!(
                    "system `{}` has no conserved energy",
                    spec.name()
                )));
            }
            let points: Vec<Vec<f64>> = region
                .grid(resolution)?
                .into_iter()
                .filter(|x| spec.energy(x).is_some_and(|e| e <= *max_energy))
                .collect();
            if points.is_empty() {
                return Err(KoopmanError::Empty("energy sublevel grid"));
            }
            Ok(points)
        }
    }
}

/// Snapshot pairs of a discrete fit block (same seed as [`build_fit`]).
pub fn fit_pairs(spec: &VectorFieldSpec, region: &BoxRegion, dt: f64, pairs: usize, seed: u64) -> Result<SnapshotPairs> {
    sample_snapshot_pairs(spec, region, pairs, dt, seed, DEFAULT_TOL)
}

/// Builds and fits one block. `seed` is the fit's own seed
/// (see [`derive_seed`]).
pub fn build_fit(name: &str, block: &FitBlock, systems: &BTreeMap<String, SystemBlock>, seed: u64) -> Result<Fitted> {
    let system = systems
        .get(&block.system)
        .ok_or_else(|| KoopmanError::UnknownSystem(block.system.clone()))?;
    let spec = system.spec()?;
    let region = system.region.clone();
    let dict = build_dictionary(&spec, &region, &block.dictionary, seed)?;
    let fixed_points = fixed_points_in(&spec, &region)?;
    let model = match &block.method {
        FitMethod::Discrete { dt, pairs } => {
            let data = fit_pairs(&spec, &region, *dt, *pairs, seed)?;
            Model::Discrete(fit_edmd(&data, &dict, block.ridge)?)
        }
        FitMethod::Generator {
            samples,
            anchor_fixed_points,
            anchor_weight,
        } => {
            let xs = generator_samples(&spec, &region, samples, seed)?;
            let anchors: Vec<Vec<f64>> = if *anchor_fixed_points {
                fixed_points.iter().map(|p| p.location.clone()).collect()
            } else {
                Vec::new()
            };
            let weight = anchor_weight * xs.len() as f64;
            Model::Generator(fit_generator_edmd_anchored(&xs, &anchors, weight, &spec, &dict, block.ridge)?)
        }
    };
    let pairs = model.eigenpairs()?;
    Ok(Fitted {
        name: name.to_string(),
        spec,
        region,
        fixed_points,
        model,
        pairs,
        seed,
    })
}

/// Shipped system blocks, keyed by the names the default fits and checks use.
pub fn default_systems() -> BTreeMap<String, SystemBlock> {
    let entries = [
        ("linear", "linear", 1),
        ("linear2d", "linear2d", 2),
        ("harmonic", "harmonic", 2),
        ("bistable", "bistable", 1),
        ("duffing", "duffing", 2),
        ("duffing_undamped", "duffing_undamped", 2),
        ("controlled_bistable", "controlled_bistable", 1),
    ];
    entries
        .iter()
        .map(|(key, system, d)| (key.to_string(), SystemBlock::new(system, BoxRegion::cube(*d, 2.0))))
        .collect()
}

fn monomials(degree: u32) -> BaseDictionary {
    BaseDictionary::Monomials {
        degree,
        cap: default_cap(),
    }
}

fn indicators(resolution: Vec<usize>) -> Option<IndicatorBlock> {
    Some(IndicatorBlock {
        resolution,
        horizon: DEFAULT_HORIZON,
        capture_radius: DEFAULT_CAPTURE_RADIUS,
    })
}

/// Shipped fit blocks used by the check suite.
pub fn default_fits() -> BTreeMap<String, FitBlock> {
    let fit = |system: &str, base, indicators, method| FitBlock {
        system: system.to_string(),
        dictionary: DictionaryBlock { base, indicators },
        method,
        ridge: None,
    };
    let uniform = |count| FitMethod::Generator {
        samples: SampleSet::Uniform { count },
        anchor_fixed_points: false,
        anchor_weight: default_anchor_weight(),
    };
    let mut fits = BTreeMap::new();
    fits.insert(
        "linear".to_string(),
        fit("linear", monomials(5), None, FitMethod::Discrete { dt: 0.1, pairs: 200 }),
    );
    fits.insert(
        "bistable_anchored".to_string(),
        fit(
            "bistable",
            monomials(5),
            indicators(vec![101]),
            FitMethod::Generator {
                samples: SampleSet::Uniform { count: 2000 },
                anchor_fixed_points: true,
                anchor_weight: default_anchor_weight(),
            },
        ),
    );
    fits.insert(
        "bistable_basin".to_string(),
        fit("bistable", monomials(5), indicators(vec![101]), FitMethod::Discrete { dt: 0.1, pairs: 2000 }),
    );
    fits.insert(
        "duffing_basin".to_string(),
        fit(
            "duffing",
            BaseDictionary::Rbf {
                centers: 100,
                shape: 4.0,
                include_constant: true,
            },
            indicators(vec![400, 400]),
            FitMethod::Discrete { dt: 0.1, pairs: 3000 },
        ),
    );
    fits.insert(
        "duffing_discrete".to_string(),
        fit("duffing", monomials(5), None, FitMethod::Discrete { dt: 0.1, pairs: 3000 }),
    );
    fits.insert("harmonic".to_string(), fit("harmonic", monomials(3), None, uniform(1000)));
    fits.insert(
        "duffing_undamped".to_string(),
        fit(
            "duffing_undamped",
            monomials(5),
            None,
            FitMethod::Generator {
                samples: SampleSet::EnergyGrid {
                    resolution: vec![201, 201],
                    max_energy: 1.0,
                },
                anchor_fixed_points: false,
                anchor_weight: default_anchor_weight(),
            },
        ),
    );
    fits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn systems() -> BTreeMap<String, SystemBlock> {
        let mut s = BTreeMap::new();
        s.insert("lin".to_string(), SystemBlock::new("linear", BoxRegion::cube(1, 1.0)));
        s.insert("osc".to_string(), SystemBlock::new("harmonic", BoxRegion::cube(2, 1.0)));
        s
    }

    #[test]
    fn discrete_block_recovers_linear_decay() {
        let block = FitBlock {
            system: "lin".into(),
            dictionary: DictionaryBlock {
                base: BaseDictionary::Monomials { degree: 2, cap: 100 },
                indicators: None,
            },
            method: FitMethod::Discrete { dt: 0.1, pairs: 50 },
            ridge: None,
        };
        let fit = build_fit("f", &block, &systems(), 1).unwrap();
        let rates: Vec<f64> = fit.pairs.iter().map(|p| p.lambda.re).collect();
        assert!(rates.iter().any(|r| (r + 1.0).abs() < 1e-6), "{rates:?}");
        assert_eq!(fit.fixed_points.len(), 1);
    }

    #[test]
    fn unknown_system_reference() {
        let block = FitBlock {
            system: "nope".into(),
            dictionary: DictionaryBlock {
                base: BaseDictionary::Monomials { degree: 1, cap: 100 },
                indicators: None,
            },
            method: FitMethod::Discrete { dt: 0.1, pairs: 10 },
            ridge: None,
        };
        assert!(matches!(build_fit("f", &block, &systems(), 1), Err(KoopmanError::UnknownSystem(_))));
    }

    #[test]
    fn energy_grid_needs_conservative_system() {
        let set = SampleSet::EnergyGrid {
            resolution: vec![5],
            max_energy: 1.0,
        };
        let lin = VectorFieldSpec::named("linear").unwrap();
        assert!(generator_samples(&lin, &BoxRegion::cube(1, 1.0), &set, 0).is_err());
        let osc = VectorFieldSpec::named("harmonic").unwrap();
        let set = SampleSet::EnergyGrid {
            resolution: vec![5, 5],
            max_energy: 0.2,
        };
        let pts = generator_samples(&osc, &BoxRegion::cube(2, 1.0), &set, 0).unwrap();
        // grid step 0.5: the origin and four axis points (E = 0.125); diagonals have E = 0.25
        assert_eq!(pts.len(), 5);
    }

    #[test]
    fn blocks_reject_unknown_fields() {
        let json = r#"{"system":"lin","dictionary":{"base":{"kind":"monomials","degree":2}},"method":{"kind":"discrete","dt":0.1,"pairs":5},"extra":1}"#;
        assert!(serde_json::from_str::<FitBlock>(json).is_err());
        let ok = json.replace(r#","extra":1"#, "");
        assert!(serde_json::from_str::<FitBlock>(&ok).is_ok());
    }
}
