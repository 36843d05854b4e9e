//! Dense symmetric eigendecomposition, eigen-truncation and a diagonally
//! preconditioned conjugate-gradient solver.
//!
//! These are the numerical kernels shared by the LD, summary-statistics and
//! Gibbs modules. Everything here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues at or below this are treated as exact zeros.
pub const EIGEN_CLAMP: f64 = 1e-8;

/// Largest tolerated `|a_ij - a_ji|` for a matrix to count as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Default relative residual tolerance for [`cg_solve`].
pub const DEFAULT_CG_TOL: f64 = 1e-8;

/// Eigensystem of a symmetric positive semidefinite matrix.
///
/// `values` are sorted non-increasing and column `k` of `vectors` is paired
/// with `values[k]`. After truncation `vectors` is `p x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// Ambient dimension `p`.
    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Number of eigenpairs held.
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.values[k];
        }
        &scaled * self.vectors.transpose()
    }

    /// Computes `V diag(values) V^T x` without forming the matrix.
    pub fn apply(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let mut coef = self.vectors.tr_mul(x);
        coef.component_mul_assign(&self.values);
        out.gemv(1.0, &self.vectors, &coef, 0.0);
    }
}

/// Eigendecomposition of a symmetric PSD matrix.
///
/// Eigenvalues below [`EIGEN_CLAMP`] are set to zero; anything more negative
/// than `-EIGEN_CLAMP` is rejected as not PSD.
pub fn sym_eigendecompose(a: &DMatrix<f64>) -> Result<SymEigen> {
    let p = a.nrows();
    if p == 0 || a.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "sym_eigendecompose (square, non-empty)",
            expected: p.max(1),
            found: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to sym_eigendecompose"));
    }
    let mut max_asymmetry = 0.0_f64;
    for j in 0..p {
        for i in (j + 1)..p {
            max_asymmetry = max_asymmetry.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asymmetry > SYMMETRY_TOL {
        return Err(Error::AsymmetricMatrix { max_asymmetry });
    }

    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let min = eig.eigenvalues[order[p - 1]];
    if min < -EIGEN_CLAMP {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }

    let values = DVector::from_iterator(
        p,
        order.iter().map(|&k| {
            let v = eig.eigenvalues[k];
            if v < EIGEN_CLAMP {
                0.0
            } else {
                v
            }
        }),
    );
    let vectors = eig.eigenvectors.select_columns(&order);
    Ok(SymEigen { values, vectors })
}

/// Keeps the leading `ceil((1 - drop_fraction) * p_nonzero)` eigenpairs with
/// positive eigenvalue. Exact-zero eigenpairs are always discarded.
pub fn truncate_eigen(eig: &SymEigen, drop_fraction: f64) -> Result<SymEigen> {
    check_drop_fraction(drop_fraction)?;
    let nonzero = eig.nonzero_count();
    let keep = kept_count(nonzero, drop_fraction);
    // values are sorted, so the positive ones lead
    let idx: Vec<usize> = (0..keep).collect();
    Ok(SymEigen {
        values: DVector::from_iterator(keep, idx.iter().map(|&k| eig.values[k])),
        vectors: eig.vectors.select_columns(&idx),
    })
}

pub(crate) fn check_drop_fraction(drop_fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::invalid(
            "drop_fraction",
            format!("{drop_fraction} is outside [0, 1)"),
        ));
    }
    Ok(())
}

fn kept_count(nonzero: usize, drop_fraction: f64) -> usize {
    // the slack absorbs products like 0.2 * 10 = 2.0000000000000004
    let exact = (1.0 - drop_fraction) * nonzero as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(nonzero)
}

/// Diagonal preconditioner `M`, stored as `M^{-1/2}`.
///
/// For the prior preconditioner `M = tau^-2 Lambda^-2` the entries are
/// simply `tau * lambda_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPreconditioner {
    inverse_sqrt_diag: DVector<f64>,
}

impl DiagonalPreconditioner {
    pub fn new(inverse_sqrt_diag: DVector<f64>) -> Result<Self> {
        if inverse_sqrt_diag.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid(
                "preconditioner",
                "entries must be finite and positive",
            ));
        }
        Ok(Self { inverse_sqrt_diag })
    }

    /// Jacobi-style preconditioner from the diagonal of `M` itself.
    pub fn from_diagonal(diag: &DVector<f64>) -> Result<Self> {
        Self::new(diag.map(|d| 1.0 / d.sqrt()))
    }

    pub fn identity(p: usize) -> Self {
        Self {
            inverse_sqrt_diag: DVector::from_element(p, 1.0),
        }
    }

    pub fn inverse_sqrt_diag(&self) -> &DVector<f64> {
        &self.inverse_sqrt_diag
    }

    pub fn len(&self) -> usize {
        self.inverse_sqrt_diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverse_sqrt_diag.is_empty()
    }

    /// `out = M^{-1} r`.
    fn solve_into(&self, r: &DVector<f64>, out: &mut DVector<f64>) {
        for ((o, &ri), &s) in out.iter_mut().zip(r.iter()).zip(self.inverse_sqrt_diag.iter()) {
            *o = s * s * ri;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// `||Phi x - b|| / ||b||`, recomputed from the operator.
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradient for `Phi x = b`.
///
/// `apply_phi(v, out)` must write `Phi v` into `out`. The loop stops on the
/// recursively updated residual; the true residual is then recomputed and the
/// iteration restarted from it if it misses `tol`.
pub fn cg_solve<F>(
    apply_phi: F,
    b: &DVector<f64>,
    precond: &DiagonalPreconditioner,
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution>
where
    F: Fn(&DVector<f64>, &mut DVector<f64>),
{
    let p = b.len();
    if precond.len() != p {
        return Err(Error::DimensionMismatch {
            context: "cg_solve preconditioner",
            expected: p,
            found: precond.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("cg tolerance", format!("{tol} must be > 0")));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cg right-hand side"));
    }

    let b_norm = b.norm();
    let mut x = DVector::zeros(p);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let target = tol * b_norm;

    let mut r = b.clone();
    let mut z = DVector::zeros(p);
    let mut q = DVector::zeros(p);
    precond.solve_into(&r, &mut z);
    let mut dir = z.clone();
    let mut rz = r.dot(&z);

    for iter in 1..=max_iter {
        apply_phi(&dir, &mut q);
        let curvature = dir.dot(&q);
        if !(curvature > 0.0) {
            return Err(if curvature.is_finite() {
                Error::NotPositiveDefinite
            } else {
                Error::NonFinite("cg operator output")
            });
        }
        let step = rz / curvature;
        x.axpy(step, &dir, 1.0);
        r.axpy(-step, &q, 1.0);

        if r.norm() <= target {
            apply_phi(&x, &mut q);
            let true_res = (b - &q).norm();
            if true_res <= target {
                return Ok(CgSolution {
                    x,
                    iterations: iter,
                    relative_residual: true_res / b_norm,
                });
            }
            // recursive residual drifted; restart from the true one
            r.copy_from(b);
            r -= &q;
            precond.solve_into(&r, &mut z);
            dir.copy_from(&z);
            rz = r.dot(&z);
            continue;
        }

        precond.solve_into(&r, &mut z);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        dir.axpy(1.0, &z, beta);
    }

    apply_phi(&x, &mut q);
    let residual_norm = (b - &q).norm();
    Err(Error::CgNotConverged {
        iterations: max_iter,
        residual_norm,
        relative_residual: residual_norm / b_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ar1(p: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    fn dense_apply(m: &DMatrix<f64>) -> impl Fn(&DVector<f64>, &mut DVector<f64>) + '_ {
        move |v, out| out.gemv(1.0, m, v, 0.0)
    }

    #[test]
    fn identity_eigensystem() {
        let eig = sym_eigendecompose(&DMatrix::identity(3, 3)).unwrap();
        assert!(eig.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let gram = eig.vectors.tr_mul(&eig.vectors);
        assert!(max_abs(&(gram - DMatrix::identity(3, 3))) < 1e-8);
    }

    #[test]
    fn rank_one_all_ones() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let eig = sym_eigendecompose(&a).unwrap();
        assert!((eig.values[0] - 2.0).abs() < 1e-12);
        assert_eq!(eig.values[1], 0.0);
        let v = eig.vectors.column(0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0].abs() - s).abs() < 1e-10 && (v[1].abs() - s).abs() < 1e-10);
        assert!(v[0] * v[1] > 0.0);
    }

    /// Smallest root of `det(A - x I)` by bisection, using LU determinants.
    fn smallest_eigenvalue_by_bisection(a: &DMatrix<f64>) -> f64 {
        let p = a.nrows();
        let det = |x: f64| (a - DMatrix::identity(p, p) * x).lu().determinant();
        // Gershgorin lower bound, then scan for the first sign change
        let lower = (0..p)
            .map(|i| a[(i, i)] - (0..p).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            - 1.0;
        let mut lo = lower;
        let step = 1e-3;
        let d_lo = det(lo);
        let mut hi = lo + step;
        while det(hi).signum() == d_lo.signum() {
            lo = hi;
            hi += step;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if det(mid).signum() == d_lo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ar1_reconstruction_and_smallest_root() {
        let a = ar1(5, 0.9);
        let eig = sym_eigendecompose(&a).unwrap();
        assert!(max_abs(&(eig.reconstruct() - &a)) < 1e-6);
        let gram = eig.vectors.tr_mul(&eig.vectors);
        assert!(max_abs(&(gram - DMatrix::identity(5, 5))) < 1e-8);
        let oracle = smallest_eigenvalue_by_bisection(&a);
        assert!((eig.values[4] - oracle).abs() < 1e-9, "{} vs {oracle}", eig.values[4]);
        assert!(eig.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_asymmetric_and_nonfinite() {
        let mut a = DMatrix::identity(3, 3);
        a[(0, 1)] = 1e-6;
        assert!(matches!(sym_eigendecompose(&a), Err(Error::AsymmetricMatrix { .. })));
        let mut b = DMatrix::identity(2, 2);
        b[(1, 1)] = f64::NAN;
        assert!(matches!(sym_eigendecompose(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            sym_eigendecompose(&a),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    fn with_values(values: &[f64]) -> SymEigen {
        let p = values.len();
        SymEigen {
            values: DVector::from_column_slice(values),
            vectors: DMatrix::identity(p, p),
        }
    }

    #[test]
    fn truncation_counts() {
        let full = with_values(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(truncate_eigen(&full, 0.0).unwrap(), full);
        let t = truncate_eigen(&with_values(&[4.0, 3.0, 0.0, 0.0]), 0.0).unwrap();
        assert_eq!(t.values.as_slice(), &[4.0, 3.0]);
        assert_eq!(t.vectors.shape(), (4, 2));
        let t = truncate_eigen(&full, 0.5).unwrap();
        assert_eq!(t.values.as_slice(), &[4.0, 3.0]);
        let ten: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        assert_eq!(truncate_eigen(&with_values(&ten), 0.8).unwrap().rank(), 2);
        assert!(truncate_eigen(&full, 1.0).is_err());
        assert!(truncate_eigen(&full, -0.1).is_err());
    }

    #[test]
    fn cg_identity_one_iteration() {
        let phi = DMatrix::<f64>::identity(4, 4);
        let b = DVector::from_column_slice(&[1.0, -2.0, 3.0, 0.5]);
        let sol = cg_solve(dense_apply(&phi), &b, &DiagonalPreconditioner::identity(4), 1e-8, 40).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.x - b).norm() < 1e-14);
    }

    #[test]
    fn cg_exact_diagonal_preconditioner() {
        let d = DVector::from_iterator(5, (1..=5).map(f64::from));
        let phi = DMatrix::from_diagonal(&d);
        let b = DVector::from_element(5, 1.0);
        let pre = DiagonalPreconditioner::from_diagonal(&d).unwrap();
        let sol = cg_solve(dense_apply(&phi), &b, &pre, 1e-8, 50).unwrap();
        assert!(sol.iterations <= 2);
        for (k, x) in sol.x.iter().enumerate() {
            assert!((x - 1.0 / (k + 1) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn cg_matches_cholesky_on_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::from_fn(20, 20, |_, _| rng.random::<f64>() - 0.5);
        let a = g.tr_mul(&g) + DMatrix::identity(20, 20);
        let b = DVector::from_fn(20, |_, _| rng.random::<f64>());
        let direct = a.clone().cholesky().unwrap().solve(&b);
        let sol = cg_solve(dense_apply(&a), &b, &DiagonalPreconditioner::identity(20), 1e-10, 200).unwrap();
        assert!((&sol.x - &direct).norm() / direct.norm() < 1e-6);
        let res = (&a * &sol.x - &b).norm() / b.norm();
        assert!(res <= 1e-10 && (res - sol.relative_residual).abs() < 1e-15);
    }

    #[test]
    fn cg_reports_residual_on_failure() {
        let a = ar1(30, 0.95);
        let b = DVector::from_element(30, 1.0);
        match cg_solve(dense_apply(&a), &b, &DiagonalPreconditioner::identity(30), 1e-12, 2) {
            Err(Error::CgNotConverged { iterations, relative_residual, .. }) => {
                assert_eq!(iterations, 2);
                assert!(relative_residual > 1e-12);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn cg_zero_rhs() {
        let a = ar1(3, 0.5);
        let sol = cg_solve(dense_apply(&a), &DVector::zeros(3), &DiagonalPreconditioner::identity(3), 1e-8, 10).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.x, DVector::zeros(3));
    }

    #[test]
    fn preconditioner_validation() {
        assert!(DiagonalPreconditioner::new(DVector::from_column_slice(&[1.0, 0.0])).is_err());
        assert!(DiagonalPreconditioner::new(DVector::from_column_slice(&[1.0, f64::INFINITY])).is_err());
    }

    #[test]
    fn apply_matches_reconstruction() {
        let a = ar1(6, 0.7);
        let eig = sym_eigendecompose(&a).unwrap();
        let x = DVector::from_iterator(6, (0..6).map(|i| (i as f64).sin()));
        let mut out = DVector::zeros(6);
        eig.apply(&x, &mut out);
        assert!((out - &a * &x).norm() < 1e-10);
    }
}
