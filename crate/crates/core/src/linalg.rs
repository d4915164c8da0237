//! Dense kernels: ridge least squares and a non-symmetric eigendecomposition
//! that returns both right and left eigenvectors.

use nalgebra::{DMatrix, Schur, SVD};
use num_complex::Complex64;

use crate::error::{KoopmanError, Result};

/// Eigenvector matrices with condition number above this are treated as defective.
pub const DEFECTIVE_CONDITION: f64 = 1e12;

/// Relative distance under which eigenvalues are treated as one repeated eigenvalue.
const CLUSTER_TOL: f64 = 1e-7;

/// Relative singular-value level that still counts as a null direction of `A - mu I`.
const NULL_TOL: f64 = 1e-6;

/// Minimizer of `||Y - X B||_F^2 + ridge ||B||_F^2`.
///
/// Solved through the SVD of the design matrix with Tikhonov filter factors
/// `s / (s^2 + ridge)`, which is the regularized normal-equation solution
/// without forming `X^T X`. With `ridge == 0` a numerically rank-deficient
/// design is rejected.
pub fn ridge_least_squares(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if design.nrows() != targets.nrows() {
        return Err(KoopmanError::DimensionMismatch {
            expected: design.nrows(),
            actual: targets.nrows(),
            context: "ridge targets rows",
        });
    }
    if design.nrows() == 0 {
        return Err(KoopmanError::Empty("regression samples"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(KoopmanError::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let n_features = design.ncols();
    let svd = SVD::try_new(design.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| KoopmanError::Eigen("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = s_max * (design.nrows().max(n_features) as f64) * f64::EPSILON;
    let rank = s.iter().filter(|&&v| v > cutoff).count();
    if ridge == 0.0 && rank < n_features {
        return Err(KoopmanError::RankDeficient { rank, size: n_features });
    }
    // B = V diag(filter) U^T Y
    let mut uty = u.transpose() * targets;
    for (i, mut row) in uty.row_iter_mut().enumerate() {
        let si = s[i];
        let filter = if ridge == 0.0 {
            1.0 / si
        } else {
            si / (si * si + ridge)
        };
        row *= filter;
    }
    Ok(v_t.transpose() * uty)
}

/// Eigenvalues with right eigenvectors (columns of `right`) and left
/// eigenvectors (rows of `left`), normalized so that `left * right = I`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<Complex64>,
    pub right: DMatrix<Complex64>,
    pub left: DMatrix<Complex64>,
    /// Cluster id per eigenvalue; members of one cluster share a repeated eigenvalue.
    pub cluster: Vec<usize>,
    /// 2-norm condition number of the right eigenvector matrix.
    pub condition: f64,
    /// Set when the matrix is not (numerically) diagonalizable. In that case
    /// `right` holds the real Schur vectors and `left` their transpose.
    pub defective: bool,
}

impl EigenDecomposition {
    /// `||A - V diag(values) V^-1||_F / ||A||_F`.
    pub fn reconstruction_error(&self, a: &DMatrix<f64>) -> f64 {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.values.clone()));
        let rec = &self.right * d * &self.left;
        let ac = a.map(|v| Complex64::new(v, 0.0));
        let norm = a.norm().max(f64::MIN_POSITIVE);
        (rec - ac).norm() / norm
    }
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex64> {
    a.map(|v| Complex64::new(v, 0.0))
}

fn union_find_root(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups eigenvalues closer than `tol` (single linkage). Cluster ids are
/// assigned in order of first appearance.
fn cluster_values(values: &[Complex64], tol: f64) -> Vec<usize> {
    let n = values.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if (values[i] - values[j]).norm() <= tol {
                let ri = union_find_root(&mut parent, i);
                let rj = union_find_root(&mut parent, j);
                if ri != rj {
                    parent[rj.max(ri)] = ri.min(rj);
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut root_to_id = std::collections::BTreeMap::new();
    for i in 0..n {
        let r = union_find_root(&mut parent, i);
        let next = root_to_id.len();
        ids[i] = *root_to_id.entry(r).or_insert(next);
    }
    ids
}

/// Orthonormal basis of the `m`-dimensional approximate null space of
/// `a - mu I`, or `None` when fewer than `m` singular values are small.
fn null_space(a: &DMatrix<f64>, mu: Complex64, m: usize, tol: f64) -> Option<DMatrix<Complex64>> {
    let n = a.nrows();
    if mu.im == 0.0 {
        let shifted = a - DMatrix::<f64>::identity(n, n) * mu.re;
        let svd = SVD::try_new(shifted, false, true, f64::EPSILON, 0)?;
        if svd.singular_values[n - m] > tol {
            return None;
        }
        let v_t = svd.v_t?;
        let mut basis = DMatrix::<Complex64>::zeros(n, m);
        for k in 0..m {
            for i in 0..n {
                basis[(i, k)] = Complex64::new(v_t[(n - m + k, i)], 0.0);
            }
        }
        Some(basis)
    } else {
        let shifted = to_complex(a) - DMatrix::<Complex64>::identity(n, n) * mu;
        let svd = SVD::try_new(shifted, false, true, f64::EPSILON, 0)?;
        if svd.singular_values[n - m] > tol {
            return None;
        }
        let v_t = svd.v_t?;
        let mut basis = DMatrix::<Complex64>::zeros(n, m);
        for k in 0..m {
            for i in 0..n {
                basis[(i, k)] = v_t[(n - m + k, i)].conj();
            }
        }
        Some(basis)
    }
}

fn condition_number(v: &DMatrix<Complex64>) -> f64 {
    match SVD::try_new(v.clone(), false, false, f64::EPSILON, 0) {
        Some(svd) => {
            let s = &svd.singular_values;
            let max = s.iter().cloned().fold(0.0, f64::max);
            let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
            if min == 0.0 {
                f64::INFINITY
            } else {
                max / min
            }
        }
        None => f64::INFINITY,
    }
}

// The deflation test at machine epsilon can stall on spectra with exact
// multiplicities (monomial lifts of linear systems); relax it stepwise.
const SCHUR_EPS_LADDER: [f64; 4] = [f64::EPSILON, 16.0 * f64::EPSILON, 256.0 * f64::EPSILON, 4096.0 * f64::EPSILON];

fn real_schur(a: &DMatrix<f64>) -> Result<Schur<f64, nalgebra::Dyn>> {
    let n = a.nrows();
    SCHUR_EPS_LADDER
        .iter()
        .find_map(|&eps| Schur::try_new(a.clone(), eps, 10_000 * n))
        .ok_or_else(|| KoopmanError::Eigen("Schur iteration did not converge".into()))
}

/// Eigendecomposition of a real square matrix.
///
/// Eigenvalues come from the real Schur form. Each cluster of (numerically)
/// repeated eigenvalues receives an orthonormal basis of its eigenspace from
/// the null space of `A - mu I`; complex clusters in the lower half plane are
/// the exact conjugates of their upper partners. Left eigenvectors are the
/// rows of the inverse of the right eigenvector matrix.
pub fn eigen_decompose(a: &DMatrix<f64>) -> Result<EigenDecomposition> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(KoopmanError::DimensionMismatch {
            expected: n,
            actual: a.ncols(),
            context: "square matrix",
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(KoopmanError::NonFinite("matrix entries"));
    }
    if n == 0 {
        return Ok(EigenDecomposition {
            values: vec![],
            right: DMatrix::zeros(0, 0),
            left: DMatrix::zeros(0, 0),
            cluster: vec![],
            condition: 1.0,
            defective: false,
        });
    }
    let schur = real_schur(a)?;
    let raw: Vec<Complex64> = schur.complex_eigenvalues().iter().cloned().collect();
    let scale = raw.iter().map(|v| v.norm()).fold(1.0, f64::max).max(a.norm() / (n as f64).sqrt());
    let cluster_tol = CLUSTER_TOL * scale;
    let null_tol = NULL_TOL * scale;
    let cluster = cluster_values(&raw, cluster_tol);
    let n_clusters = cluster.iter().max().map_or(0, |m| m + 1);

    let members: Vec<Vec<usize>> = (0..n_clusters)
        .map(|c| (0..n).filter(|&i| cluster[i] == c).collect())
        .collect();
    let means: Vec<Complex64> = members
        .iter()
        .map(|idx| {
            let sum: Complex64 = idx.iter().map(|&i| raw[i]).sum();
            let mean = sum / idx.len() as f64;
            if mean.im.abs() <= cluster_tol {
                Complex64::new(mean.re, 0.0)
            } else {
                mean
            }
        })
        .collect();
    // mirror partner of every lower-half-plane cluster
    let partner: Vec<Option<usize>> = (0..n_clusters)
        .map(|c| {
            if means[c].im < 0.0 {
                (0..n_clusters).find(|&p| {
                    means[p].im > 0.0
                        && members[p].len() == members[c].len()
                        && (means[p] - means[c].conj()).norm() <= cluster_tol
                })
            } else {
                None
            }
        })
        .collect();

    let mut right = DMatrix::<Complex64>::zeros(n, n);
    let mut order = Vec::with_capacity(n);
    let mut col_cluster = Vec::with_capacity(n);
    let mut bases: Vec<Option<DMatrix<Complex64>>> = vec![None; n_clusters];
    let mut defective = false;
    for c in 0..n_clusters {
        if partner[c].is_some() {
            continue;
        }
        match null_space(a, means[c], members[c].len(), null_tol) {
            Some(basis) => bases[c] = Some(basis),
            None => {
                defective = true;
                break;
            }
        }
    }
    if !defective {
        for c in 0..n_clusters {
            if let Some(p) = partner[c] {
                bases[c] = bases[p].as_ref().map(|b| b.map(|z| z.conj()));
            }
        }
        for c in 0..n_clusters {
            let basis = bases[c].as_ref().expect("basis computed");
            for k in 0..basis.ncols() {
                let col = order.len();
                right.set_column(col, &basis.column(k));
                order.push(c);
                col_cluster.push(c);
            }
        }
    }

    let condition = if defective { f64::INFINITY } else { condition_number(&right) };
    let inverse = if defective || condition > DEFECTIVE_CONDITION {
        None
    } else {
        right.clone().try_inverse()
    };

    let Some(mut left) = inverse else {
        let (q, _t) = schur.unpack();
        return Ok(EigenDecomposition {
            values: raw,
            right: to_complex(&q),
            left: to_complex(&q.transpose()),
            cluster,
            condition,
            defective: true,
        });
    };

    // Exact symmetry: real clusters get real left vectors, mirrored clusters
    // get the conjugates of their partners' rows.
    for c in 0..n_clusters {
        if means[c].im == 0.0 {
            for (col, &cc) in col_cluster.iter().enumerate() {
                if cc == c {
                    for j in 0..n {
                        left[(col, j)].im = 0.0;
                    }
                }
            }
        }
    }
    for c in 0..n_clusters {
        if let Some(p) = partner[c] {
            let mine: Vec<usize> = (0..n).filter(|&i| col_cluster[i] == c).collect();
            let theirs: Vec<usize> = (0..n).filter(|&i| col_cluster[i] == p).collect();
            for (&m, &t) in mine.iter().zip(&theirs) {
                for j in 0..n {
                    left[(m, j)] = left[(t, j)].conj();
                }
            }
        }
    }

    let ac = to_complex(a);
    let mut values = Vec::with_capacity(n);
    for col in 0..n {
        let c = col_cluster[col];
        let v = right.column(col);
        let w = left.row(col);
        let rq = (w * &ac * v)[(0, 0)];
        values.push(if means[c].im == 0.0 { Complex64::new(rq.re, 0.0) } else { rq });
    }
    for c in 0..n_clusters {
        if let Some(p) = partner[c] {
            let mine: Vec<usize> = (0..n).filter(|&i| col_cluster[i] == c).collect();
            let theirs: Vec<usize> = (0..n).filter(|&i| col_cluster[i] == p).collect();
            for (&m, &t) in mine.iter().zip(&theirs) {
                values[m] = values[t].conj();
            }
        }
    }

    Ok(EigenDecomposition {
        values,
        right,
        left,
        cluster: col_cluster,
        condition,
        defective: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual_left(a: &DMatrix<f64>, dec: &EigenDecomposition) -> f64 {
        let ac = to_complex(a);
        let mut worst: f64 = 0.0;
        for i in 0..a.nrows() {
            let w = dec.left.row(i).into_owned();
            let r = &w * &ac - &w * dec.values[i];
            worst = worst.max(r.norm() / w.norm());
        }
        worst
    }

    #[test]
    fn ridge_zero_recovers_exact_solution() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, -2.0]);
        let y = &x * &b;
        let est = ridge_least_squares(&x, &y, 0.0).unwrap();
        assert!((est - b).norm() < 1e-12);
    }

    #[test]
    fn ridge_matches_normal_equations() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 2.0]);
        let gamma = 0.3;
        let est = ridge_least_squares(&x, &y, gamma).unwrap();
        let gram = x.transpose() * &x + DMatrix::identity(2, 2) * gamma;
        let direct = gram.try_inverse().unwrap() * x.transpose() * &y;
        assert!((est - direct).norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_without_ridge_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(
            ridge_least_squares(&x, &y, 0.0),
            Err(KoopmanError::RankDeficient { rank: 1, size: 2 })
        ));
        assert!(ridge_least_squares(&x, &y, 1e-8).is_ok());
    }

    #[test]
    fn diagonal_matrix_eigenvectors_are_axes() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        let dec = eigen_decompose(&a).unwrap();
        assert!(!dec.defective);
        assert!(residual_left(&a, &dec) < 1e-12);
        assert!(dec.reconstruction_error(&a) < 1e-12);
    }

    #[test]
    fn rotation_has_conjugate_pairs() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let dec = eigen_decompose(&a).unwrap();
        assert_eq!(dec.values.len(), 2);
        assert_eq!(dec.values[0], dec.values[1].conj());
        for j in 0..2 {
            assert_eq!(dec.left[(0, j)], dec.left[(1, j)].conj());
        }
        assert!(residual_left(&a, &dec) < 1e-12);
    }

    #[test]
    fn repeated_semisimple_eigenvalue() {
        // rotation acting on quadratic monomials has eigenvalues {0, 2i, -2i};
        // block-diagonal copies make every eigenvalue repeated
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let mut a = DMatrix::zeros(4, 4);
        a.view_mut((0, 0), (2, 2)).copy_from(&r);
        a.view_mut((2, 2), (2, 2)).copy_from(&r);
        let dec = eigen_decompose(&a).unwrap();
        assert!(!dec.defective);
        assert!(residual_left(&a, &dec) < 1e-10);
        assert!(dec.reconstruction_error(&a) < 1e-10);
    }

    #[test]
    fn jordan_block_is_flagged() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let dec = eigen_decompose(&a).unwrap();
        assert!(dec.defective);
    }

    #[test]
    fn general_nonsymmetric_matrix() {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.9, 0.2, -0.1, 0.0, //
                -0.3, 0.7, 0.4, 0.1, //
                0.05, -0.2, 0.5, 0.3, //
                0.0, 0.1, -0.4, 0.8,
            ],
        );
        let dec = eigen_decompose(&a).unwrap();
        assert!(!dec.defective);
        assert!(residual_left(&a, &dec) < 1e-10);
        assert!(dec.reconstruction_error(&a) < 1e-10);
    }
}
