//! EDMD and generator EDMD fits, eigenpair extraction and composition.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dictionaries::{Dictionary, Observable};
use crate::error::{KoopmanError, Result};
use crate::linalg::{eigen_decompose, ridge_least_squares};
use crate::oracles::AnalyticOracle;
use crate::systems::{SnapshotPairs, VectorFieldSpec};

/// Row-major (de)serialization for dense matrices.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// `1e-10 * trace(G) / N` with the sample-averaged Gram matrix
/// `G = X^T X / n` of an `n x N` design matrix.
pub fn default_ridge(design: &DMatrix<f64>) -> f64 {
    1e-10 * design.norm_squared() / (design.nrows().max(1) * design.ncols().max(1)) as f64
}

pub(crate) fn relative_residual(design: &DMatrix<f64>, coefficients: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let scale = targets.norm();
    let err = (targets - design * coefficients).norm();
    if scale == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        err / scale
    }
}

/// Finite section of the Koopman operator at time step `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KoopmanModel {
    #[serde(with = "matrix_rows")]
    pub matrix: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub dt: f64,
    pub ridge: f64,
    pub ridge_defaulted: bool,
    /// Relative Frobenius residual on the training pairs.
    pub residual: f64,
    /// Training states `x_k`; eigenfunctions are normalized over these.
    pub samples: Vec<Vec<f64>>,
    /// Pairs dropped because `x` and `y` carry different basin indicators.
    pub excluded_crossings: usize,
}

/// Finite section of the generator, fitted from `f . grad(psi)` targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    #[serde(with = "matrix_rows")]
    pub matrix: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub ridge: f64,
    pub ridge_defaulted: bool,
    pub residual: f64,
    pub samples: Vec<Vec<f64>>,
    /// Samples dropped for lying on an indicator boundary.
    pub excluded_boundary: usize,
}

pub(crate) fn check_ridge(ridge: Option<f64>) -> Result<()> {
    match ridge {
        Some(g) if !(g >= 0.0) || !g.is_finite() => Err(KoopmanError::InvalidArgument(format!("ridge must be >= 0, got {g}"))),
        _ => Ok(()),
    }
}

/// Discrete EDMD: `K` minimizing `sum_k |psi(y_k) - K psi(x_k)|^2 + ridge |K|_F^2`.
/// `ridge = None` applies [`default_ridge`].
///
/// With basin indicators in the dictionary, pairs whose indicator vectors
/// differ between `x_k` and `y_k` are dropped: the flow preserves basins, so
/// such a pair straddles an error in the nearest-neighbour boundary estimate.
pub fn fit_edmd(pairs: &SnapshotPairs, dict: &Dictionary, ridge: Option<f64>) -> Result<KoopmanModel> {
    check_ridge(ridge)?;
    if pairs.is_empty() {
        return Err(KoopmanError::Empty("snapshot pairs"));
    }
    if !(pairs.dt > 0.0) {
        return Err(KoopmanError::InvalidArgument("dt must be > 0".into()));
    }
    let mut x = dict.design_matrix(&pairs.x_states)?;
    let mut y = dict.design_matrix(&pairs.y_states)?;
    let mut samples = pairs.x_states.clone();
    let indicators = dict.indicator_indices();
    let mut excluded = 0;
    if !indicators.is_empty() {
        let keep: Vec<usize> = (0..pairs.len())
            .filter(|&k| indicators.iter().all(|&i| x[(k, i)] == y[(k, i)]))
            .collect();
        excluded = pairs.len() - keep.len();
        if keep.is_empty() {
            return Err(KoopmanError::Empty("snapshot pairs after indicator filtering"));
        }
        x = x.select_rows(&keep);
        y = y.select_rows(&keep);
        samples = keep.iter().map(|&k| pairs.x_states[k].clone()).collect();
    }
    let gamma = ridge.unwrap_or_else(|| default_ridge(&x));
    let b = ridge_least_squares(&x, &y, gamma)?;
    let residual = relative_residual(&x, &b, &y);
    Ok(KoopmanModel {
        matrix: b.transpose(),
        dictionary: dict.clone(),
        dt: pairs.dt,
        ridge: gamma,
        ridge_defaulted: ridge.is_none(),
        residual,
        samples,
        excluded_crossings: excluded,
    })
}

/// Rows `(f(x) . grad psi_i(x))_i` for each point, evaluated with zero control.
pub fn generator_targets(spec: &VectorFieldSpec, dict: &Dictionary, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let u = vec![0.0; spec.control_arity()];
    let mut t = DMatrix::zeros(points.len(), dict.size());
    for (k, x) in points.iter().enumerate() {
        let f = spec.eval(x, &u)?;
        let g = dict.gradient(x)?;
        let lf = &g * nalgebra::DVector::from_vec(f);
        t.row_mut(k).copy_from(&lf.transpose());
    }
    Ok(t)
}

/// Generator EDMD. Samples on an indicator boundary are dropped and counted.
pub fn fit_generator_edmd(
    samples: &[Vec<f64>],
    spec: &VectorFieldSpec,
    dict: &Dictionary,
    ridge: Option<f64>,
) -> Result<GeneratorModel> {
    fit_generator_edmd_anchored(samples, &[], 0.0, spec, dict, ridge)
}

/// Generator EDMD with extra weighted rows at equilibria. At a fixed point
/// `f = 0`, so every target is zero (indicator entries included) and anchors
/// are kept even on an indicator boundary. A large weight makes the
/// finite section reproduce `L psi(x*) = 0`.
pub fn fit_generator_edmd_anchored(
    samples: &[Vec<f64>],
    anchors: &[Vec<f64>],
    anchor_weight: f64,
    spec: &VectorFieldSpec,
    dict: &Dictionary,
    ridge: Option<f64>,
) -> Result<GeneratorModel> {
    check_ridge(ridge)?;
    if spec.dimension() != dict.dimension() {
        return Err(KoopmanError::DimensionMismatch {
            expected: spec.dimension(),
            actual: dict.dimension(),
            context: "dictionary vs system",
        });
    }
    if !anchors.is_empty() && !(anchor_weight > 0.0 && anchor_weight.is_finite()) {
        return Err(KoopmanError::InvalidArgument("anchor weight must be > 0".into()));
    }
    let kept: Vec<Vec<f64>> = samples.iter().filter(|x| !dict.on_indicator_boundary(x)).cloned().collect();
    if kept.is_empty() {
        return Err(KoopmanError::Empty("generator samples"));
    }
    let x = dict.design_matrix(&kept)?;
    let t = generator_targets(spec, dict, &kept)?;
    let gamma = ridge.unwrap_or_else(|| default_ridge(&x));
    let (x_all, t_all) = if anchors.is_empty() {
        (x.clone(), t.clone())
    } else {
        let root = anchor_weight.sqrt();
        let xa = dict.design_matrix(anchors)? * root;
        let u = vec![0.0; spec.control_arity()];
        for a in anchors {
            let f = spec.eval(a, &u)?;
            if f.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-8 {
                return Err(KoopmanError::InvalidArgument("anchors must be equilibria (|f| <= 1e-8)".into()));
            }
        }
        let ta = DMatrix::zeros(anchors.len(), dict.size());
        let mut xs = DMatrix::zeros(x.nrows() + xa.nrows(), x.ncols());
        xs.rows_mut(0, x.nrows()).copy_from(&x);
        xs.rows_mut(x.nrows(), xa.nrows()).copy_from(&xa);
        let mut ts = DMatrix::zeros(t.nrows() + ta.nrows(), t.ncols());
        ts.rows_mut(0, t.nrows()).copy_from(&t);
        ts.rows_mut(t.nrows(), ta.nrows()).copy_from(&ta);
        (xs, ts)
    };
    let b = ridge_least_squares(&x_all, &t_all, gamma)?;
    let residual = relative_residual(&x, &b, &t);
    Ok(GeneratorModel {
        matrix: b.transpose(),
        dictionary: dict.clone(),
        ridge: gamma,
        ridge_defaulted: ridge.is_none(),
        residual,
        excluded_boundary: samples.len() - kept.len(),
        samples: kept,
    })
}

impl KoopmanModel {
    /// Relative error of `psi(y) ~ K psi(x)` on held-out pairs.
    pub fn holdout_residual(&self, holdout: &SnapshotPairs) -> Result<f64> {
        if holdout.is_empty() {
            return Err(KoopmanError::Empty("holdout pairs"));
        }
        let x = self.dictionary.design_matrix(&holdout.x_states)?;
        let y = self.dictionary.design_matrix(&holdout.y_states)?;
        Ok(relative_residual(&x, &self.matrix.transpose(), &y))
    }
}

impl GeneratorModel {
    /// Relative error of the generator targets on held-out samples.
    pub fn holdout_residual(&self, spec: &VectorFieldSpec, holdout: &[Vec<f64>]) -> Result<f64> {
        let kept: Vec<Vec<f64>> = holdout
            .iter()
            .filter(|x| !self.dictionary.on_indicator_boundary(x))
            .cloned()
            .collect();
        if kept.is_empty() {
            return Err(KoopmanError::Empty("holdout samples"));
        }
        let x = self.dictionary.design_matrix(&kept)?;
        let t = generator_targets(spec, &self.dictionary, &kept)?;
        Ok(relative_residual(&x, &self.matrix.transpose(), &t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Discrete,
    Generator,
    Composed,
    AnalyticOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Eigenfunction {
    /// `phi = w . psi` on the dictionary with the given hash.
    Coefficients { w: Vec<Complex64>, dictionary_hash: String },
    Oracle(AnalyticOracle),
    /// Pointwise product of powers.
    Product { factors: Vec<(Eigenfunction, u32)> },
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub lambda: Complex64,
    pub lambda_discrete: Option<Complex64>,
    pub eigenfunction: Eigenfunction,
    /// Scale divided out so that the sample sup of `|phi|` is 1.
    pub normalization: f64,
    pub source: PairSource,
    pub defective: bool,
    /// The eigenvector is a null direction of the design: `phi` is zero on
    /// the whole training sample.
    pub vanishes_on_sample: bool,
}

impl Eigenpair {
    pub fn from_oracle(oracle: AnalyticOracle) -> Self {
        Self {
            lambda: oracle.lambda,
            lambda_discrete: None,
            eigenfunction: Eigenfunction::Oracle(oracle),
            normalization: 1.0,
            source: PairSource::AnalyticOracle,
            defective: false,
            vanishes_on_sample: false,
        }
    }

    pub fn constant() -> Self {
        Self {
            lambda: Complex64::new(0.0, 0.0),
            lambda_discrete: None,
            eigenfunction: Eigenfunction::Constant,
            normalization: 1.0,
            source: PairSource::Composed,
            defective: false,
            vanishes_on_sample: false,
        }
    }

    pub fn coefficients(&self) -> Option<&[Complex64]> {
        match &self.eigenfunction {
            Eigenfunction::Coefficients { w, .. } => Some(w),
            _ => None,
        }
    }

    /// Whether `x` lies in the domain of every closed-form factor.
    pub fn defined_at(&self, x: &[f64]) -> bool {
        fn go(e: &Eigenfunction, x: &[f64]) -> bool {
            match e {
                Eigenfunction::Oracle(o) => o.in_domain(x),
                Eigenfunction::Product { factors } => factors.iter().all(|(f, _)| go(f, x)),
                _ => true,
            }
        }
        go(&self.eigenfunction, x)
    }
}

/// Anything with a finite-section matrix and a training sample.
pub trait FittedModel {
    fn matrix(&self) -> &DMatrix<f64>;
    fn dictionary(&self) -> &Dictionary;
    fn samples(&self) -> &[Vec<f64>];
    /// Time step for discrete models.
    fn dt(&self) -> Option<f64>;
}

impl FittedModel for KoopmanModel {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }
    fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }
    fn dt(&self) -> Option<f64> {
        Some(self.dt)
    }
}

impl FittedModel for GeneratorModel {
    fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }
    fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }
    fn dt(&self) -> Option<f64> {
        None
    }
}

/// Continuous rate from a discrete eigenvalue (principal branch of the log).
pub fn continuous_rate(lambda_discrete: Complex64, dt: f64) -> Complex64 {
    // a zero eigenvalue (null direction of the design) would give -inf
    let z = if lambda_discrete.norm() < f64::MIN_POSITIVE {
        Complex64::new(f64::MIN_POSITIVE, 0.0)
    } else {
        lambda_discrete
    };
    z.ln() / dt
}

/// `exp(lambda dt)`.
pub fn discretize_spectrum(lambda: Complex64, dt: f64) -> Result<Complex64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KoopmanError::InvalidArgument("dt must be > 0".into()));
    }
    Ok((lambda * dt).exp())
}

/// Singular values (descending) and right singular vectors of `values`.
fn complex_svd_right(values: &DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let m = values.ncols();
    if values.nrows() == 0 {
        return (vec![0.0; m], DMatrix::identity(m, m));
    }
    // pad to at least m rows so v_t is square
    let padded = if values.nrows() < m {
        let mut p = DMatrix::zeros(m, m);
        p.rows_mut(0, values.nrows()).copy_from(values);
        p
    } else {
        values.clone()
    };
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let v = DMatrix::from_fn(m, m, |r, c| v_t[(order[c], r)].conj());
    (s, v)
}

/// Rotates the left eigenvectors of one cluster (rows of `w`) into a
/// canonical basis: the function equal to 1 on the sample (if it lies in the
/// span), then the remaining directions by decreasing spread of their sample
/// values, then directions that vanish on the sample.
fn canonical_cluster_basis(w: &DMatrix<Complex64>, psi: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let m = w.nrows();
    if m == 1 {
        return w.clone();
    }
    let values = psi * w.transpose(); // n x m
    let n = values.nrows().max(1) as f64;
    let mean = DMatrix::from_fn(1, m, |_, j| values.column(j).sum() / n);
    let centered = DMatrix::from_fn(values.nrows(), m, |i, j| values[(i, j)] - mean[(0, j)]);
    let (s, v) = complex_svd_right(&centered);
    let scale = values.norm().max(f64::MIN_POSITIVE);
    let spread: Vec<usize> = (0..m).filter(|&j| s[j] > 1e-9 * scale).collect();
    let flat: Vec<usize> = (0..m).filter(|&j| s[j] <= 1e-9 * scale).collect();
    let mut constant = Vec::new();
    let mut vanishing = Vec::new();
    if !flat.is_empty() {
        // inside the flat subspace Z, the direction along the means is the
        // constant; its orthogonal complement vanishes on the sample
        let z = DMatrix::from_fn(m, flat.len(), |r, c| v[(r, flat[c])]);
        let a = (&mean * &z).adjoint();
        let a2 = a.norm_squared();
        if a2.sqrt() > 1e-9 * scale / n.sqrt() {
            constant.push((&z * (&a / Complex64::new(a2, 0.0))).column(0).into_owned());
            let proj = DMatrix::<Complex64>::identity(flat.len(), flat.len()) - &a * a.adjoint() / Complex64::new(a2, 0.0);
            let (_, rest) = complex_svd_right(&proj);
            vanishing.extend((0..flat.len() - 1).map(|c| &z * rest.column(c)));
        } else {
            vanishing.extend((0..flat.len()).map(|c| z.column(c).into_owned()));
        }
    }
    let ordered: Vec<nalgebra::DVector<Complex64>> = constant
        .into_iter()
        .chain(spread.iter().map(|&j| v.column(j).into_owned()))
        .chain(vanishing)
        .collect();
    let c = DMatrix::from_fn(m, m, |r, col| ordered[col][r]);
    c.transpose() * w
}

fn lex_cmp(a: &[Complex64], b: &[Complex64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Canonical eigenpair order: descending Re lambda, ascending |Im lambda|,
/// then lexicographic coefficients.
pub fn sort_eigenpairs(pairs: &mut [Eigenpair]) {
    pairs.sort_by(|p, q| {
        q.lambda
            .re
            .total_cmp(&p.lambda.re)
            .then(p.lambda.im.abs().total_cmp(&q.lambda.im.abs()))
            .then_with(|| lex_cmp(p.coefficients().unwrap_or(&[]), q.coefficients().unwrap_or(&[])))
    });
}

/// Eigenpairs from left eigenvectors, sup-normalized over the training sample.
pub fn eig<M: FittedModel>(model: &M) -> Result<Vec<Eigenpair>> {
    let a = model.matrix();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KoopmanError::NonFinite("model matrix"));
    }
    let dict = model.dictionary();
    let ed = eigen_decompose(a)?;
    let psi = dict.design_matrix(model.samples())?.map(|v| Complex64::new(v, 0.0));
    let psi_scale = psi.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let n = ed.values.len();
    let scale = ed.values.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let imag_tol = 1e-12 * scale;

    // rows of the canonical left basis, cluster by cluster; lower half-plane
    // clusters are filled in as conjugates afterwards
    let mut rows: Vec<Option<(Complex64, Vec<Complex64>)>> = vec![None; n];
    let mut seen = vec![false; n];
    for i in 0..n {
        if seen[i] {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|&j| ed.cluster[j] == ed.cluster[i]).collect();
        for &j in &members {
            seen[j] = true;
        }
        let mean: Complex64 = members.iter().map(|&j| ed.values[j]).sum::<Complex64>() / members.len() as f64;
        if mean.im < -imag_tol {
            continue;
        }
        let w = DMatrix::from_fn(members.len(), n, |r, c| ed.left[(members[r], c)]);
        let rotated = if ed.defective { w } else { canonical_cluster_basis(&w, &psi) };
        for (r, &j) in members.iter().enumerate() {
            rows[j] = Some((ed.values[j], rotated.row(r).iter().cloned().collect()));
        }
    }

    let mut pairs = Vec::with_capacity(n);
    for (value, w) in rows.into_iter().flatten() {
        let pair = normalized_pair(value, w, &psi, psi_scale, model.dt(), dict.hash(), ed.defective);
        if value.im > imag_tol {
            let mut conj = pair.clone();
            conj.lambda = conj.lambda.conj();
            conj.lambda_discrete = conj.lambda_discrete.map(|z| z.conj());
            if let Eigenfunction::Coefficients { w, .. } = &mut conj.eigenfunction {
                for c in w.iter_mut() {
                    *c = c.conj();
                }
            }
            pairs.push(conj);
        }
        pairs.push(pair);
    }
    sort_eigenpairs(&mut pairs);
    Ok(pairs)
}

fn normalized_pair(
    value: Complex64,
    mut w: Vec<Complex64>,
    psi: &DMatrix<Complex64>,
    psi_scale: f64,
    dt: Option<f64>,
    hash: &str,
    defective: bool,
) -> Eigenpair {
    let mut sup = 0.0;
    let mut at = Complex64::new(0.0, 0.0);
    for k in 0..psi.nrows() {
        let phi: Complex64 = psi.row(k).iter().zip(&w).map(|(p, c)| p * c).sum();
        if phi.norm() > sup {
            sup = phi.norm();
            at = phi;
        }
    }
    let w_norm: f64 = w.iter().map(|c| c.norm()).sum();
    let vanishes = sup <= 1e-9 * w_norm * psi_scale;
    let normalization = if vanishes {
        let norm2 = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        for c in w.iter_mut() {
            *c /= norm2;
        }
        norm2
    } else {
        let phase = at / sup;
        let factor = phase.conj() / sup;
        for c in w.iter_mut() {
            *c *= factor;
        }
        sup
    };
    let (lambda, lambda_discrete, source) = match dt {
        Some(dt) => (continuous_rate(value, dt), Some(value), PairSource::Discrete),
        None => (value, None, PairSource::Generator),
    };
    Eigenpair {
        lambda,
        lambda_discrete,
        eigenfunction: Eigenfunction::Coefficients {
            w,
            dictionary_hash: hash.to_string(),
        },
        normalization,
        source,
        defective,
        vanishes_on_sample: vanishes,
    }
}

fn eval_function(e: &Eigenfunction, dict: Option<&Dictionary>, x: &[f64]) -> Result<Complex64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KoopmanError::NonFinite("eigenfunction argument"));
    }
    match e {
        Eigenfunction::Constant => Ok(Complex64::new(1.0, 0.0)),
        Eigenfunction::Oracle(o) => o.eval(x),
        Eigenfunction::Coefficients { w, dictionary_hash } => {
            let dict = dict.ok_or_else(|| KoopmanError::DictionaryMismatch("no dictionary supplied".into()))?;
            if dict.size() != w.len() || dict.hash() != dictionary_hash {
                return Err(KoopmanError::DictionaryMismatch(format!(
                    "pair expects {} entries / hash {}, got {} / {}",
                    w.len(),
                    &dictionary_hash[..dictionary_hash.len().min(12)],
                    dict.size(),
                    &dict.hash()[..12]
                )));
            }
            let psi = dict.eval(x)?;
            Ok(w.iter().zip(&psi.values).map(|(c, p)| c * p).sum())
        }
        Eigenfunction::Product { factors } => {
            let mut acc = Complex64::new(1.0, 0.0);
            for (f, power) in factors {
                acc *= eval_function(f, dict, x)?.powu(*power);
            }
            Ok(acc)
        }
    }
}

/// `phi(x)`; coefficient pairs need the dictionary they were fitted on.
pub fn eval_eigenfunction(pair: &Eigenpair, dict: Option<&Dictionary>, x: &[f64]) -> Result<Complex64> {
    eval_function(&pair.eigenfunction, dict, x)
}

fn dictionary_hashes(e: &Eigenfunction, out: &mut Vec<String>) -> bool {
    match e {
        Eigenfunction::Coefficients { dictionary_hash, .. } => {
            out.push(dictionary_hash.clone());
            false
        }
        Eigenfunction::Oracle(_) => true,
        Eigenfunction::Constant => false,
        Eigenfunction::Product { factors } => factors.iter().fold(false, |acc, (f, _)| dictionary_hashes(f, out) | acc),
    }
}

/// `(phi1^r phi2^s, r lambda1 + s lambda2)` as a pointwise product.
pub fn compose_eigenpairs(p1: &Eigenpair, p2: &Eigenpair, r: u32, s: u32) -> Result<Eigenpair> {
    if r == 0 && s == 0 {
        return Ok(Eigenpair::constant());
    }
    let mut hashes = Vec::new();
    let mut has_oracle = dictionary_hashes(&p1.eigenfunction, &mut hashes);
    has_oracle |= dictionary_hashes(&p2.eigenfunction, &mut hashes);
    hashes.dedup();
    if hashes.len() > 1 {
        return Err(KoopmanError::DictionaryMismatch("pairs were fitted on different dictionaries".into()));
    }
    if has_oracle && !hashes.is_empty() {
        return Err(KoopmanError::DictionaryMismatch(
            "cannot compose a closed-form pair with a fitted pair".into(),
        ));
    }
    let mut factors = Vec::new();
    if r > 0 {
        factors.push((p1.eigenfunction.clone(), r));
    }
    if s > 0 {
        factors.push((p2.eigenfunction.clone(), s));
    }
    let lambda_discrete = match (p1.lambda_discrete, p2.lambda_discrete) {
        (Some(a), Some(b)) => Some(a.powu(r) * b.powu(s)),
        _ => None,
    };
    Ok(Eigenpair {
        lambda: p1.lambda * r as f64 + p2.lambda * s as f64,
        lambda_discrete,
        eigenfunction: Eigenfunction::Product { factors },
        normalization: 1.0,
        source: PairSource::Composed,
        defective: p1.defective || p2.defective,
        vanishes_on_sample: false,
    })
}

/// Least-squares coefficients of a pair's eigenfunction on `dict` over
/// `samples`, with the relative residual of the fit.
pub fn project_onto_dictionary(
    pair: &Eigenpair,
    source_dict: Option<&Dictionary>,
    dict: &Dictionary,
    samples: &[Vec<f64>],
) -> Result<(Vec<Complex64>, f64)> {
    if samples.is_empty() {
        return Err(KoopmanError::Empty("projection samples"));
    }
    let psi = dict.design_matrix(samples)?;
    let mut targets = DMatrix::zeros(samples.len(), 2);
    for (k, x) in samples.iter().enumerate() {
        let v = eval_eigenfunction(pair, source_dict, x)?;
        targets[(k, 0)] = v.re;
        targets[(k, 1)] = v.im;
    }
    let coef = ridge_least_squares(&psi, &targets, default_ridge(&psi))?;
    let residual = relative_residual(&psi, &coef, &targets);
    let w = (0..dict.size()).map(|i| Complex64::new(coef[(i, 0)], coef[(i, 1)])).collect();
    Ok((w, residual))
}

/// Largest singular value ratio of the design, a cheap conditioning report.
pub fn design_condition(dict: &Dictionary, samples: &[Vec<f64>]) -> Result<f64> {
    let x = dict.design_matrix(samples)?;
    let s = SVD::new(x, false, false).singular_values;
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if min > 0.0 { max / min } else { f64::INFINITY })
}

/// Index of the constant entry, if the dictionary has one.
pub fn constant_index(dict: &Dictionary) -> Option<usize> {
    dict.position(&Observable::Constant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{flow, sample_snapshot_pairs, BoxRegion};

    fn monomials_without_constant(degree: u32) -> Dictionary {
        Dictionary::monomials(1, degree).unwrap().without_constant().unwrap()
    }

    fn exact_pairs(dt: f64, n: usize) -> SnapshotPairs {
        let x: Vec<Vec<f64>> = (0..n).map(|k| vec![-1.0 + 2.0 * k as f64 / (n - 1) as f64]).collect();
        let y = x.iter().map(|v| vec![v[0] * (-dt).exp()]).collect();
        SnapshotPairs::from_states(x, y, dt).unwrap()
    }

    #[test]
    fn edmd_scalar_decay() {
        let pairs = exact_pairs(0.1, 50);
        let m = fit_edmd(&pairs, &monomials_without_constant(1), None).unwrap();
        assert!((m.matrix[(0, 0)] - 0.9048374).abs() < 1e-6);
        let with_const = fit_edmd(&pairs, &Dictionary::monomials(1, 1).unwrap(), None).unwrap();
        assert!((with_const.matrix[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((with_const.matrix[(1, 1)] - (-0.1f64).exp()).abs() < 1e-6);
        assert!(with_const.matrix[(0, 1)].abs() < 1e-6 && with_const.matrix[(1, 0)].abs() < 1e-6);
        assert!(with_const.residual < 1e-6);
    }

    #[test]
    fn duplicated_pairs_give_same_matrix() {
        let pairs = exact_pairs(0.1, 20);
        let mut doubled = pairs.clone();
        doubled.x_states.extend(pairs.x_states.clone());
        doubled.y_states.extend(pairs.y_states.clone());
        let dict = Dictionary::monomials(1, 3).unwrap();
        let a = fit_edmd(&pairs, &dict, Some(0.0)).unwrap();
        let b = fit_edmd(&doubled, &dict, Some(0.0)).unwrap();
        assert!((a.matrix - b.matrix).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_without_ridge() {
        let pairs = SnapshotPairs::from_states(vec![vec![0.5]; 10], vec![vec![0.45]; 10], 0.1).unwrap();
        let err = fit_edmd(&pairs, &Dictionary::monomials(1, 2).unwrap(), Some(0.0)).unwrap_err();
        assert!(matches!(err, KoopmanError::RankDeficient { .. }));
        assert!(err.to_string().contains("positive ridge"));
    }

    #[test]
    fn generator_examples() {
        let spec = VectorFieldSpec::named("linear").unwrap();
        let samples: Vec<Vec<f64>> = (0..40).map(|k| vec![-1.0 + k as f64 / 20.0]).collect();
        let m = fit_generator_edmd(&samples, &spec, &monomials_without_constant(3), None).unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        assert!((&m.matrix - expected).amax() < 1e-8);

        let bistable = VectorFieldSpec::named("bistable").unwrap();
        let dict = Dictionary::monomials(1, 5).unwrap();
        let wide: Vec<Vec<f64>> = (0..=80).map(|k| vec![-2.0 + k as f64 / 20.0]).collect();
        let m = fit_generator_edmd(&wide, &bistable, &dict, None).unwrap();
        let row_x = m.matrix.row(1);
        assert!((row_x[1] - 1.0).abs() < 1e-8 && (row_x[3] + 1.0).abs() < 1e-8);
        assert!(row_x[0].abs() < 1e-8 && row_x[2].abs() < 1e-8);
        assert!(m.matrix.row(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn eig_diagonal_generator() {
        let spec = VectorFieldSpec::named("linear").unwrap();
        let samples: Vec<Vec<f64>> = (0..40).map(|k| vec![-1.0 + k as f64 / 20.0]).collect();
        let dict = monomials_without_constant(3);
        let m = fit_generator_edmd(&samples, &spec, &dict, None).unwrap();
        let pairs = eig(&m).unwrap();
        for (k, p) in pairs.iter().enumerate() {
            assert!((p.lambda.re + (k + 1) as f64).abs() < 1e-8);
            let w = p.coefficients().unwrap();
            // sup of x^n on [-1, 1] is 1, reached at x = -1 for odd n
            for (j, c) in w.iter().enumerate() {
                if j == k {
                    assert!((c.norm() - 1.0).abs() < 1e-8);
                } else {
                    assert!(c.norm() < 1e-8);
                }
            }
            let phi = eval_eigenfunction(p, Some(&dict), &[0.5]).unwrap();
            assert!((phi.norm() - 0.5f64.powi(k as i32 + 1)).abs() < 1e-8);
        }
    }

    #[test]
    fn eig_discrete_log_map() {
        let pairs = exact_pairs(0.1, 30);
        let m = fit_edmd(&pairs, &Dictionary::monomials(1, 1).unwrap(), None).unwrap();
        let eps = eig(&m).unwrap();
        assert!(eps[0].lambda.norm() < 1e-6);
        assert!((eps[1].lambda.re + 1.0).abs() < 1e-5);
        assert!(eps.iter().all(|p| p.source == PairSource::Discrete && p.lambda_discrete.is_some()));
    }

    #[test]
    fn conjugate_pairs_have_conjugate_coefficients() {
        let spec = VectorFieldSpec::named("harmonic").unwrap();
        let pairs = sample_snapshot_pairs(&spec, &BoxRegion::cube(2, 1.0), 200, 0.1, 3, 1e-12).unwrap();
        let m = fit_edmd(&pairs, &Dictionary::monomials(2, 2).unwrap(), None).unwrap();
        let eps = eig(&m).unwrap();
        for p in eps.iter().filter(|p| p.lambda.im > 1e-6) {
            let partner = eps
                .iter()
                .find(|q| (q.lambda - p.lambda.conj()).norm() < 1e-9 && q.lambda.im < 0.0)
                .expect("conjugate partner");
            for (a, b) in p.coefficients().unwrap().iter().zip(partner.coefficients().unwrap()) {
                assert!((a.conj() - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn finite_section_eigenrelation_and_evolution() {
        let spec = VectorFieldSpec::named("linear2d").unwrap();
        let pairs = sample_snapshot_pairs(&spec, &BoxRegion::cube(2, 1.0), 300, 0.1, 9, 1e-12).unwrap();
        let dict = Dictionary::monomials(2, 3).unwrap();
        let m = fit_edmd(&pairs, &dict, None).unwrap();
        let k = m.matrix.map(|v| Complex64::new(v, 0.0));
        for p in eig(&m).unwrap() {
            let w = nalgebra::DVector::from_vec(p.coefficients().unwrap().to_vec());
            let lhs = w.transpose() * &k;
            let rhs = w.transpose() * p.lambda_discrete.unwrap();
            assert!((lhs - rhs).norm() <= 1e-8 * w.norm());
            for x in pairs.x_states.iter().take(30) {
                let y = flow(&spec, x, 0.1, 1e-12).unwrap();
                let lhs = eval_eigenfunction(&p, Some(&dict), &y).unwrap();
                let rhs = (p.lambda * 0.1).exp() * eval_eigenfunction(&p, Some(&dict), x).unwrap();
                assert!((lhs - rhs).norm() <= 1e-6);
            }
        }
    }

    #[test]
    fn sup_normalization() {
        let spec = VectorFieldSpec::named("duffing").unwrap();
        let pairs = sample_snapshot_pairs(&spec, &BoxRegion::cube(2, 1.5), 300, 0.1, 4, 1e-10).unwrap();
        let dict = Dictionary::monomials(2, 3).unwrap();
        let m = fit_edmd(&pairs, &dict, None).unwrap();
        for p in eig(&m).unwrap().iter().filter(|p| !p.vanishes_on_sample) {
            let sup = pairs
                .x_states
                .iter()
                .map(|x| eval_eigenfunction(p, Some(&dict), x).unwrap().norm())
                .fold(0.0, f64::max);
            assert!((sup - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_requires_matching_dictionary() {
        let pairs = exact_pairs(0.1, 30);
        let dict = Dictionary::monomials(1, 1).unwrap();
        let m = fit_edmd(&pairs, &dict, None).unwrap();
        let p = &eig(&m).unwrap()[1];
        let other = Dictionary::monomials(1, 2).unwrap();
        assert!(matches!(
            eval_eigenfunction(p, Some(&other), &[0.5]),
            Err(KoopmanError::DictionaryMismatch(_))
        ));
        assert!(eval_eigenfunction(p, None, &[0.5]).is_err());
    }

    #[test]
    fn compose_examples() {
        let spec = VectorFieldSpec::named("linear").unwrap();
        let samples: Vec<Vec<f64>> = (0..40).map(|k| vec![-1.0 + k as f64 / 20.0]).collect();
        let dict = monomials_without_constant(3);
        let m = fit_generator_edmd(&samples, &spec, &dict, None).unwrap();
        let first = eig(&m).unwrap().remove(0);
        let sq = compose_eigenpairs(&first, &first, 2, 0).unwrap();
        assert!((sq.lambda.re + 2.0).abs() < 1e-8);
        let (w, res) = project_onto_dictionary(&sq, Some(&dict), &dict, &samples).unwrap();
        assert!(res < 1e-8);
        assert!((w[1].norm() - 1.0).abs() < 1e-6 && w[0].norm() < 1e-6 && w[2].norm() < 1e-6);

        let trivial = compose_eigenpairs(&first, &first, 0, 0).unwrap();
        assert_eq!(trivial.lambda, Complex64::new(0.0, 0.0));
        assert_eq!(eval_eigenfunction(&trivial, None, &[3.0]).unwrap().re, 1.0);

        let g = Eigenpair::from_oracle(AnalyticOracle::bistable_growth());
        let d = Eigenpair::from_oracle(AnalyticOracle::bistable_decay());
        let inv = compose_eigenpairs(&g, &d, 2, 1).unwrap();
        assert_eq!(inv.lambda, Complex64::new(0.0, 0.0));
        for x in [0.1, 0.5, -0.7, 0.95] {
            assert!((eval_eigenfunction(&inv, None, &[x]).unwrap().re - 1.0).abs() < 1e-12);
        }
        assert!(compose_eigenpairs(&g, &first, 1, 1).is_err());
    }

    #[test]
    fn discretize_examples() {
        let z = discretize_spectrum(Complex64::new(-1.0, 0.0), 0.1).unwrap();
        assert!((z.re - 0.9048374).abs() < 1e-7);
        assert_eq!(discretize_spectrum(Complex64::new(0.0, 0.0), 0.1).unwrap().norm(), 1.0);
        let z = discretize_spectrum(Complex64::new(1.0, 0.0), 0.1).unwrap();
        assert!((z.re - 1.1051709).abs() < 1e-7 && z.norm() > 1.0);
        assert!(discretize_spectrum(Complex64::new(1.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn holdout_residuals() {
        let spec = VectorFieldSpec::named("linear").unwrap();
        let region = BoxRegion::cube(1, 1.0);
        let train = sample_snapshot_pairs(&spec, &region, 50, 0.1, 1, 1e-12).unwrap();
        let holdout = sample_snapshot_pairs(&spec, &region, 50, 0.1, 2, 1e-12).unwrap();
        let mut m = fit_edmd(&train, &Dictionary::monomials(1, 3).unwrap(), None).unwrap();
        assert!(m.holdout_residual(&holdout).unwrap() <= 1e-6);
        m.matrix.fill(0.0);
        assert!((m.holdout_residual(&holdout).unwrap() - 1.0).abs() < 1e-12);
        let empty = SnapshotPairs::from_states(vec![], vec![], 0.1).unwrap();
        assert!(m.holdout_residual(&empty).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let pairs = exact_pairs(0.1, 10);
        let m = fit_edmd(&pairs, &Dictionary::monomials(1, 2).unwrap(), None).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: KoopmanModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }
}
