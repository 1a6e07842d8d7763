//! Symmetric positive definite matrices and the matrix functions the
//! Bures–Wasserstein code needs.
//!
//! Square roots go through a symmetric eigendecomposition. A coupled
//! Newton–Schulz iteration is provided as a second route for benchmarking;
//! on well-conditioned inputs both agree to 1e-8.

use nalgebra::DMatrix;

use crate::error::{BcmError, Result};
use crate::linalg::{from_eigen, relative_asymmetry, sym_apply, sym_eigen, symmetrize};

/// Relative Frobenius asymmetry accepted on construction.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues below this fraction of the largest one are rejected.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Default condition-number cap for inverse square roots.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// A strictly positive definite symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry and strict positive definiteness. The stored matrix
    /// is the exact symmetric part of the input.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(BcmError::DimensionMismatch(format!(
                "SPD matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(BcmError::InvalidInput("SPD matrix has non-finite entries".into()));
        }
        let asym = relative_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(BcmError::NotSymmetric(asym));
        }
        let m = symmetrize(&m);
        let (values, _) = sym_eigen(&m);
        let smallest = values[0];
        let largest = values[values.len() - 1];
        if !(largest > 0.0) || smallest <= EIGEN_FLOOR * largest {
            return Err(BcmError::NotPositiveDefinite {
                eigenvalue: smallest,
                largest,
            });
        }
        Ok(SpdMatrix(m))
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(BcmError::DimensionMismatch(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(DMatrix::identity(dim, dim))
    }

    /// Panics if any entry is not strictly positive.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(
            diag.iter().all(|&v| v > 0.0 && v.is_finite()),
            "diagonal SPD entries must be positive"
        );
        SpdMatrix(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    /// Wraps a matrix known to be SPD by construction, symmetrizing it.
    pub(crate) fn from_trusted(m: DMatrix<f64>) -> Self {
        SpdMatrix(symmetrize(&m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        sym_eigen(&self.0).0.iter().copied().collect()
    }

    pub fn condition_number(&self) -> f64 {
        let ev = self.eigenvalues();
        ev[ev.len() - 1] / ev[0]
    }

    /// `Q S Qᵀ`, which stays SPD for any invertible `Q`.
    pub fn congruence(&self, q: &DMatrix<f64>) -> Result<Self> {
        if q.nrows() != self.dim() || q.ncols() != self.dim() {
            return Err(BcmError::DimensionMismatch("congruence by a non-matching matrix".into()));
        }
        Self::new(symmetrize(&(q * &self.0 * q.transpose())))
    }
}

impl AsRef<DMatrix<f64>> for SpdMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// The unique SPD square root.
pub fn sqrt_spd(s: &SpdMatrix) -> SpdMatrix {
    SpdMatrix::from_trusted(sym_apply(&s.0, f64::sqrt))
}

/// `S^{-1/2}` with the default condition-number cap.
pub fn inv_sqrt_spd(s: &SpdMatrix) -> Result<SpdMatrix> {
    inv_sqrt_spd_capped(s, DEFAULT_CONDITION_CAP)
}

pub fn inv_sqrt_spd_capped(s: &SpdMatrix, cap: f64) -> Result<SpdMatrix> {
    let (values, vectors) = sym_eigen(&s.0);
    let condition = values[values.len() - 1] / values[0];
    if condition > cap {
        return Err(BcmError::IllConditioned { condition, cap });
    }
    Ok(SpdMatrix::from_trusted(from_eigen(&values, &vectors, |v| {
        1.0 / v.sqrt()
    })))
}

/// Both `S^{1/2}` and `S^{-1/2}` from a single eigendecomposition.
pub(crate) fn sqrt_and_inv_sqrt(s: &SpdMatrix, cap: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (values, vectors) = sym_eigen(&s.0);
    let condition = values[values.len() - 1] / values[0];
    if condition > cap {
        return Err(BcmError::IllConditioned { condition, cap });
    }
    Ok((
        from_eigen(&values, &vectors, f64::sqrt),
        from_eigen(&values, &vectors, |v| 1.0 / v.sqrt()),
    ))
}

/// Square root of a symmetric positive semidefinite matrix; small negative
/// eigenvalues from rounding are clamped to zero.
pub(crate) fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, |v| v.max(0.0).sqrt())
}

/// Coupled Newton–Schulz iteration for `S^{1/2}`.
///
/// The input is scaled by its Frobenius norm so the iteration starts inside
/// its region of convergence. Stops when successive iterates differ by less
/// than `tol` in relative Frobenius norm.
pub fn sqrt_newton_schulz(s: &SpdMatrix, max_iters: usize, tol: f64) -> Result<SpdMatrix> {
    let d = s.dim();
    let scale = s.0.norm();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut y = &s.0 / scale;
    let mut z = eye.clone();
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        let y_next = &y * &t;
        z = &t * &z;
        change = (&y_next - &y).norm() / y_next.norm();
        y = y_next;
        if change < tol {
            return Ok(SpdMatrix::from_trusted(y * scale.sqrt()));
        }
    }
    Err(BcmError::NonConvergence {
        what: "Newton-Schulz square root",
        iterations: max_iters,
        residual: change,
    })
}

/// Squared Bures–Wasserstein distance between `N(0, S0)` and `N(0, S1)`:
/// `Tr S0 + Tr S1 − 2 Tr (S0^{1/2} S1 S0^{1/2})^{1/2}`, clamped at zero.
pub fn bures_w2_sq(s0: &SpdMatrix, s1: &SpdMatrix) -> Result<f64> {
    if s0.dim() != s1.dim() {
        return Err(BcmError::DimensionMismatch(format!(
            "Bures distance between dims {} and {}",
            s0.dim(),
            s1.dim()
        )));
    }
    let root = sqrt_spd(s0);
    let inner = symmetrize(&(&root.0 * &s1.0 * &root.0));
    let cross = sqrt_psd(&inner).trace();
    Ok((s0.trace() + s1.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let m: DMatrix<f64> = &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
        SpdMatrix::new(m).unwrap()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(SpdMatrix::new(m), Err(BcmError::NotSymmetric(_))));
    }

    #[test]
    fn rejects_indefinite_with_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match SpdMatrix::new(m) {
            Err(BcmError::NotPositiveDefinite { eigenvalue, largest }) => {
                assert!((eigenvalue + 1.0).abs() < 1e-12);
                assert!((largest - 3.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_near_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(matches!(
            SpdMatrix::new(m),
            Err(BcmError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i3 = SpdMatrix::identity(3);
        assert_eq!(sqrt_spd(&i3).as_matrix(), i3.as_matrix());
        let s = SpdMatrix::from_diagonal(&[4.0, 9.0]);
        let r = sqrt_spd(&s);
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert!((r.as_matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn sqrt_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [1, 2, 5, 10] {
            let s = random_spd(d, &mut rng);
            let b = sqrt_spd(&s);
            let back = b.as_matrix() * b.as_matrix();
            assert!(rel(&back, s.as_matrix()) < 1e-10);
            // commutes with S
            let comm = b.as_matrix() * s.as_matrix() - s.as_matrix() * b.as_matrix();
            assert!(comm.norm() < 1e-10 * s.as_matrix().norm());
            assert!(b.eigenvalues()[0] > 0.0);
        }
    }

    #[test]
    fn inv_sqrt_cases() {
        let i2 = SpdMatrix::identity(2);
        assert!((inv_sqrt_spd(&i2).unwrap().as_matrix() - i2.as_matrix()).norm() < 1e-15);
        let four = SpdMatrix::from_diagonal(&[4.0]);
        assert!((inv_sqrt_spd(&four).unwrap().as_matrix()[(0, 0)] - 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [2, 4, 8] {
            let s = random_spd(d, &mut rng);
            let b = inv_sqrt_spd(&s).unwrap();
            let prod = b.as_matrix() * s.as_matrix() * b.as_matrix();
            assert!((prod - DMatrix::identity(d, d)).norm() < 1e-9);
        }
    }

    #[test]
    fn inv_sqrt_condition_cap() {
        let s = SpdMatrix::from_diagonal(&[1.0, 1e-6]);
        assert!(matches!(
            inv_sqrt_spd_capped(&s, 1e3),
            Err(BcmError::IllConditioned { .. })
        ));
        assert!(inv_sqrt_spd_capped(&s, 1e7).is_ok());
    }

    #[test]
    fn newton_schulz_agrees_with_eigen() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 3, 6, 10] {
            let s = random_spd(d, &mut rng);
            let ns = sqrt_newton_schulz(&s, 100, 1e-15).unwrap();
            let eig = sqrt_spd(&s);
            assert!((ns.as_matrix() - eig.as_matrix()).norm() < 1e-8, "d={d}");
        }
    }

    #[test]
    fn bures_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_spd(4, &mut rng);
        assert!(bures_w2_sq(&s, &s).unwrap() < 1e-12);

        let a = SpdMatrix::from_diagonal(&[1.0]);
        let b = SpdMatrix::from_diagonal(&[4.0]);
        assert!((bures_w2_sq(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let a = SpdMatrix::from_diagonal(&[1.0, 4.0]);
        let b = SpdMatrix::from_diagonal(&[4.0, 1.0]);
        assert!((bures_w2_sq(&a, &b).unwrap() - 2.0).abs() < 1e-12);

        let c = SpdMatrix::identity(3);
        assert!(matches!(
            bures_w2_sq(&a, &c),
            Err(BcmError::DimensionMismatch(_))
        ));
    }
}
