//! Sample covariance estimation and spectral normalization.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Cohort;
use crate::error::{Error, Result};

/// Relative Rayleigh-quotient tolerance of the power iteration.
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;
/// Relative residual ‖Av − ρv‖/|ρ| that certifies a power-iteration estimate.
pub const POWER_RESIDUAL_TOL: f64 = 1e-9;
const POWER_SEED: u64 = 0x5eed_c0fa;

/// Sample covariance of a cohort (1/n convention) together with its mean.
///
/// The stored matrix is always the raw covariance divided by `spectral_norm`:
/// 1.0 for a raw estimate, the raw largest eigenvalue once normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    matrix: Array2<f64>,
    mean: Array1<f64>,
    spectral_norm: f64,
    normalized: bool,
}

impl CovarianceModel {
    /// Wraps an explicit matrix. The matrix must be square and symmetric.
    pub fn from_matrix(matrix: Array2<f64>, mean: Array1<f64>) -> Result<Self> {
        let m = matrix.nrows();
        if matrix.ncols() != m || mean.len() != m || m == 0 {
            return Err(Error::Shape(format!(
                "covariance {}x{} with mean of length {}",
                matrix.nrows(),
                matrix.ncols(),
                mean.len()
            )));
        }
        check_symmetric(matrix.view())?;
        Ok(CovarianceModel {
            matrix,
            mean,
            spectral_norm: 1.0,
            normalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn spectral_norm(&self) -> f64 {
        self.spectral_norm
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `C x` for a single vector.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let m = self.dim();
        let mut out = vec![0.0; m];
        for (i, row) in self.matrix.rows().into_iter().enumerate() {
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Relabels nodes: entry `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<CovarianceModel> {
        check_permutation(perm, self.dim())?;
        let m = self.dim();
        let matrix = Array2::from_shape_fn((m, m), |(i, j)| self.matrix[[perm[i], perm[j]]]);
        let mean = Array1::from_shape_fn(m, |i| self.mean[perm[i]]);
        Ok(CovarianceModel {
            matrix,
            mean,
            ..*self
        })
    }

    /// Dense CSV: `m` header-less rows, row-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.matrix.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn check_permutation(perm: &[usize], m: usize) -> Result<()> {
    if perm.len() != m {
        return Err(Error::Shape(format!("permutation of length {} for m={m}", perm.len())));
    }
    let mut seen = vec![false; m];
    for &p in perm {
        if p >= m || seen[p] {
            return Err(Error::Data(format!("invalid permutation entry {p}")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn check_symmetric(a: ArrayView2<f64>) -> Result<()> {
    let m = a.nrows();
    for i in 0..m {
        for j in 0..i {
            let (x, y) = (a[[i, j]], a[[j, i]]);
            if !x.is_finite() || (x - y).abs() > 1e-12 * x.abs().max(1.0) {
                return Err(Error::Data(format!("matrix not symmetric at ({i},{j})")));
            }
        }
        if !a[[i, i]].is_finite() {
            return Err(Error::Data(format!("non-finite diagonal entry {i}")));
        }
    }
    Ok(())
}

/// C = (1/n) Σ (xᵢ − x̄)(xᵢ − x̄)ᵀ over the cohort's feature vectors.
pub fn sample_covariance(cohort: &Cohort) -> Result<CovarianceModel> {
    let n = cohort.n();
    let m = cohort.m();
    if n < 2 {
        return Err(Error::Data(format!("covariance needs n >= 2 subjects, got {n}")));
    }
    let mut data = Array2::<f64>::zeros((n, m));
    for (i, s) in cohort.subjects().iter().enumerate() {
        for (j, &v) in s.features.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!("subject {}: non-finite feature {j}", s.id)));
            }
            data[[i, j]] = v;
        }
    }
    let mean = data.sum_axis(ndarray::Axis(0)) / n as f64;
    data -= &mean;
    let mut matrix = data.t().dot(&data) / n as f64;
    for i in 0..m {
        for j in 0..i {
            matrix[[i, j]] = matrix[[j, i]];
        }
    }
    Ok(CovarianceModel {
        matrix,
        mean,
        spectral_norm: 1.0,
        normalized: false,
    })
}

/// Divides the matrix by its largest eigenvalue.
pub fn normalize_spectral(cm: &CovarianceModel) -> Result<CovarianceModel> {
    if cm.matrix.iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical("cannot normalize a zero covariance matrix".into()));
    }
    let lambda = largest_eigenvalue(cm.matrix.view())?;
    if !(lambda > 0.0) {
        return Err(Error::Numerical(format!("largest eigenvalue {lambda} is not positive")));
    }
    Ok(CovarianceModel {
        matrix: &cm.matrix / lambda,
        mean: cm.mean.clone(),
        spectral_norm: cm.spectral_norm * lambda,
        normalized: true,
    })
}

/// Sample covariance followed by spectral normalization.
pub fn normalized_covariance(cohort: &Cohort) -> Result<CovarianceModel> {
    normalize_spectral(&sample_covariance(cohort)?)
}

/// Largest (algebraic) eigenvalue of a symmetric matrix.
///
/// Power iteration on `A + sI`. Since λmax ≥ max diagonal and λmin ≥ the Gershgorin lower
/// bound `L`, any `s > −(max diagonal + L)/2` makes λmax + s the dominant eigenvalue; the
/// smallest such shift keeps the convergence ratio away from 1. An estimate is accepted once
/// the Rayleigh quotient has settled and the residual is small. Near-degenerate spectra that
/// do not converge within the iteration budget fall back to a dense eigensolver.
pub fn largest_eigenvalue(a: ArrayView2<f64>) -> Result<f64> {
    let m = a.nrows();
    if a.ncols() != m || m == 0 {
        return Err(Error::Shape(format!("{}x{} is not a square matrix", a.nrows(), a.ncols())));
    }
    check_symmetric(a)?;
    match power_iteration(a) {
        Some(rho) => Ok(rho),
        None => dense_largest_eigenvalue(a),
    }
}

fn power_iteration(a: ArrayView2<f64>) -> Option<f64> {
    let m = a.nrows();
    let gershgorin_low = (0..m)
        .map(|i| {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| a[[i, j]].abs()).sum();
            a[[i, i]] - off
        })
        .fold(f64::INFINITY, f64::min);
    let diag_max = (0..m).map(|i| a[[i, i]]).fold(f64::NEG_INFINITY, f64::max);
    // the margin separates λmax + s from |λmin + s| when the bounds are tight
    let margin = 0.01 * (diag_max - gershgorin_low);
    let shift = (-(diag_max + gershgorin_low) / 2.0 + margin).max(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Array1<f64> = Array1::from_shape_fn(m, |_| rng.random_range(0.5..1.5));
    let mut restarted = false;
    let mut rho_prev = f64::NAN;
    let mut iter = 0;
    while iter < POWER_MAX_ITER {
        iter += 1;
        let norm = v.dot(&v).sqrt();
        v /= norm;
        let av = a.dot(&v);
        let rho = v.dot(&av);
        if !rho.is_finite() {
            return None;
        }
        let mut next = av;
        next.scaled_add(shift, &v);
        let next_norm = next.dot(&next).sqrt();
        if !(next_norm > f64::MIN_POSITIVE) {
            // start vector annihilated by the shifted matrix
            if restarted {
                return None;
            }
            restarted = true;
            v = Array1::from_shape_fn(m, |_| rng.random_range(-1.0..1.0));
            rho_prev = f64::NAN;
            continue;
        }
        if rho == 0.0 && rho_prev == 0.0 {
            return Some(0.0);
        }
        let scale = rho.abs().max(f64::MIN_POSITIVE);
        if (rho - rho_prev).abs() <= POWER_TOL * scale {
            // (A + sI)v − (ρ + s)v = Av − ρv
            let residual = &next - &(&v * (rho + shift));
            if residual.dot(&residual).sqrt() <= POWER_RESIDUAL_TOL * scale {
                return Some(rho);
            }
        }
        rho_prev = rho;
        v = next;
    }
    None
}

fn dense_largest_eigenvalue(a: ArrayView2<f64>) -> Result<f64> {
    let m = a.nrows();
    let dense = nalgebra::DMatrix::from_fn(m, m, |i, j| a[[i, j]]);
    let top = dense
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if top.is_finite() {
        Ok(top)
    } else {
        Err(Error::Numerical("eigenvalues of the covariance are not finite".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Group, Subject};
    use ndarray::array;

    fn cohort(rows: &[&[f64]]) -> Cohort {
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Subject {
                id: format!("s{i}"),
                age: 50.0,
                group: Group::Hc,
                cdr: None,
                features: r.to_vec(),
            })
            .collect();
        Cohort::new(rows[0].len(), "t", subjects).unwrap()
    }

    #[test]
    fn two_point_covariance() {
        let c = sample_covariance(&cohort(&[&[1.0, 1.0], &[-1.0, -1.0]])).unwrap();
        assert_eq!(c.mean().to_vec(), vec![0.0, 0.0]);
        assert_eq!(c.matrix(), &array![[1.0, 1.0], [1.0, 1.0]]);
        assert!(!c.is_normalized());
    }

    #[test]
    fn identical_samples_give_zero_matrix() {
        let c = sample_covariance(&cohort(&[&[2.0, 3.0, 4.0][..]; 4])).unwrap();
        assert!(c.matrix().iter().all(|&v| v == 0.0));
        assert!(matches!(normalize_spectral(&c), Err(Error::Numerical(_))));
    }

    #[test]
    fn too_few_subjects() {
        assert!(sample_covariance(&cohort(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn scaled_identity_and_rank_one() {
        let c = CovarianceModel::from_matrix(Array2::eye(3) * 2.0, Array1::zeros(3)).unwrap();
        let n = normalize_spectral(&c).unwrap();
        assert!((n.spectral_norm() - 2.0).abs() < 1e-12);
        assert!(n.matrix().iter().zip(Array2::<f64>::eye(3).iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let c = CovarianceModel::from_matrix(array![[1.0, 1.0], [1.0, 1.0]], Array1::zeros(2)).unwrap();
        let n = normalize_spectral(&c).unwrap();
        assert!((n.spectral_norm() - 2.0).abs() < 1e-10);
        assert!(n.matrix().iter().all(|v| (v - 0.5).abs() < 1e-10));
    }

    #[test]
    fn eigenvalue_small_cases() {
        let d = Array2::from_diag(&array![3.0, 1.0, 0.5]);
        assert!((largest_eigenvalue(d.view()).unwrap() - 3.0).abs() < 1e-9);
        let swap = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((largest_eigenvalue(swap.view()).unwrap() - 1.0).abs() < 1e-12);
        let neg = Array2::from_diag(&array![1.0, -5.0]);
        assert!((largest_eigenvalue(neg.view()).unwrap() - 1.0).abs() < 1e-10);
        assert!(largest_eigenvalue(array![[0.0, 1.0], [2.0, 0.0]].view()).is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let c = sample_covariance(&cohort(&[&[1.0, 2.0, 0.5], &[0.3, -1.0, 2.0], &[2.0, 0.1, 0.0], &[-1.0, 1.0, 1.0]]))
            .unwrap();
        let once = normalize_spectral(&c).unwrap();
        let twice = normalize_spectral(&once).unwrap();
        for (a, b) in once.matrix().iter().zip(twice.matrix().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((twice.spectral_norm() - once.spectral_norm()).abs() < 1e-8 * once.spectral_norm());
    }

    #[test]
    fn permutation_checks() {
        let c = CovarianceModel::from_matrix(Array2::eye(3), Array1::zeros(3)).unwrap();
        assert!(c.permuted(&[0, 0, 1]).is_err());
        assert!(c.permuted(&[0, 1]).is_err());
        assert_eq!(c.permuted(&[0, 1, 2]).unwrap(), c);
    }

    #[test]
    fn csv_export_has_m_rows() {
        let c = CovarianceModel::from_matrix(array![[1.0, 0.25], [0.25, 2.0]], Array1::zeros(2)).unwrap();
        assert_eq!(c.to_csv(), "1,0.25\n0.25,2\n");
    }

    fn rotated(eigenvalues: &[f64], seed: u64) -> Array2<f64> {
        let m = eigenvalues.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = nalgebra::DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let q = g.qr().q();
        let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues));
        let a = &q * d * q.transpose();
        Array2::from_shape_fn((m, m), |(i, j)| 0.5 * (a[(i, j)] + a[(j, i)]))
    }

    #[test]
    fn opposite_extremes_do_not_stall() {
        assert!((largest_eigenvalue(array![[1.0, 0.0], [0.0, -1.0]].view()).unwrap() - 1.0).abs() < 1e-12);
        let a = rotated(&[2.0, -2.0, 0.5, -1.0], 4);
        assert!((largest_eigenvalue(a.view()).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn near_degenerate_top_pair_is_resolved() {
        for gap in [1e-2, 1e-4, 1e-7] {
            let a = rotated(&[1.0, 1.0 - gap, 0.3, -0.2, 0.1, 0.0], 8);
            let l = largest_eigenvalue(a.view()).unwrap();
            assert!((l - 1.0).abs() < 1e-10, "gap {gap}: {l}");
        }
    }

    #[test]
    fn random_symmetric_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let a = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
            let a = &a + &a.t();
            let dense = nalgebra::DMatrix::from_fn(8, 8, |i, j| a[[i, j]]);
            let top = dense.symmetric_eigen().eigenvalues.max();
            assert!((largest_eigenvalue(a.view()).unwrap() - top).abs() <= 1e-8 * top.abs().max(1.0));
        }
    }
}
