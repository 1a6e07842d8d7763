//! Zero-mean Gaussians under the Bures–Wasserstein metric.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::bcm::{gram_gaussian, solve_simplex_qp, Coordinates, QpOptions};
use crate::error::{BcmError, Result};
use crate::linalg::symmetrize;
use crate::spd::{bures_w2_sq, sqrt_and_inv_sqrt, sqrt_psd, SpdMatrix, DEFAULT_CONDITION_CAP};

/// `N(0, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    pub cov: SpdMatrix,
}

impl GaussianMeasure {
    pub fn new(cov: SpdMatrix) -> Self {
        GaussianMeasure { cov }
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterResult {
    pub cov: SpdMatrix,
    /// Number of fixed-point updates applied.
    pub iterations: usize,
    /// `‖Σ λᵢ Cᵢ − I‖_F` at `cov`.
    pub residual: f64,
}

fn check_dims(s0: &SpdMatrix, s: &SpdMatrix) -> Result<()> {
    if s0.dim() != s.dim() {
        return Err(BcmError::DimensionMismatch(format!(
            "covariances of dims {} and {}",
            s0.dim(),
            s.dim()
        )));
    }
    Ok(())
}

/// Matrix of the optimal map `x ↦ C x` pushing `N(0, S0)` to `N(0, Si)`:
/// `C = S0^{-1/2} (S0^{1/2} Si S0^{1/2})^{1/2} S0^{-1/2}`.
pub fn transport_matrix(s0: &SpdMatrix, si: &SpdMatrix) -> Result<DMatrix<f64>> {
    check_dims(s0, si)?;
    let (root, inv_root) = sqrt_and_inv_sqrt(s0, DEFAULT_CONDITION_CAP)?;
    Ok(transport_from_roots(&root, &inv_root, si))
}

fn transport_from_roots(root: &DMatrix<f64>, inv_root: &DMatrix<f64>, si: &SpdMatrix) -> DMatrix<f64> {
    let middle = sqrt_psd(&symmetrize(&(root * si.as_matrix() * root)));
    symmetrize(&(inv_root * middle * inv_root))
}

/// `‖Σ λᵢ Cᵢ(S → Sᵢ) − I‖_F`.
pub fn barycenter_residual(lambda: &Coordinates, refs: &[SpdMatrix], s: &SpdMatrix) -> Result<f64> {
    let (root, inv_root) = sqrt_and_inv_sqrt(s, DEFAULT_CONDITION_CAP)?;
    let d = s.dim();
    let mut sum = DMatrix::<f64>::identity(d, d) * -1.0;
    for (l, si) in lambda.as_slice().iter().zip(refs) {
        check_dims(s, si)?;
        sum += transport_from_roots(&root, &inv_root, si) * *l;
    }
    Ok(sum.norm())
}

/// Bures–Wasserstein barycenter by the fixed-point iteration
/// `S ← S^{-1/2} (Σ λᵢ (S^{1/2} Sᵢ S^{1/2})^{1/2})² S^{-1/2}`
/// started from `Σ λᵢ Sᵢ`. Stops once the first-order residual is below `tol`.
pub fn gaussian_barycenter(
    lambda: &Coordinates,
    refs: &[SpdMatrix],
    tol: f64,
    max_iters: usize,
) -> Result<BarycenterResult> {
    if refs.is_empty() {
        return Err(BcmError::InvalidInput("no reference covariances".into()));
    }
    if lambda.len() != refs.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "{} coordinates for {} references",
            lambda.len(),
            refs.len()
        )));
    }
    let d = refs[0].dim();
    for s in refs {
        check_dims(&refs[0], s)?;
    }
    let mut mix = DMatrix::<f64>::zeros(d, d);
    for (l, s) in lambda.as_slice().iter().zip(refs) {
        mix += s.as_matrix() * *l;
    }
    let mut s = SpdMatrix::new(mix)?;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut residual = f64::INFINITY;
    for iteration in 0..=max_iters {
        let (root, inv_root) = sqrt_and_inv_sqrt(&s, DEFAULT_CONDITION_CAP)?;
        let mut sum = DMatrix::<f64>::zeros(d, d);
        for (l, si) in lambda.as_slice().iter().zip(refs) {
            if *l == 0.0 {
                continue;
            }
            sum += sqrt_psd(&symmetrize(&(&root * si.as_matrix() * &root))) * *l;
        }
        residual = (&inv_root * &sum * &inv_root - &eye).norm();
        if residual < tol {
            return Ok(BarycenterResult {
                cov: s,
                iterations: iteration,
                residual,
            });
        }
        if iteration == max_iters {
            break;
        }
        s = SpdMatrix::new(symmetrize(&(&inv_root * &sum * &sum * &inv_root)))?;
    }
    Err(BcmError::NonConvergence {
        what: "Gaussian barycenter",
        iterations: max_iters,
        residual,
    })
}

/// `G Gᵀ / d + 0.5 I` with `G` a standard Gaussian `d × d` matrix.
pub fn wishart_shifted<R: rand::Rng + ?Sized>(d: usize, rng: &mut R) -> SpdMatrix {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let m = &g * g.transpose() / d as f64 + DMatrix::<f64>::identity(d, d) * 0.5;
    SpdMatrix::new(symmetrize(&m)).expect("shifted Wishart draw is SPD")
}

/// Uniform draw from the simplex (flat Dirichlet).
pub fn uniform_simplex<R: rand::Rng + ?Sized>(p: usize, rng: &mut R) -> Coordinates {
    let draws: Vec<f64> = (0..p).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    let mut lambda: Vec<f64> = draws.iter().map(|v| v / sum).collect();
    let total: f64 = lambda.iter().sum();
    lambda[p - 1] += 1.0 - total;
    Coordinates::new(lambda).expect("normalized draw lies on the simplex")
}

/// `(1/n) Σ xₖ xₖᵀ` over `n` draws from `N(0, S)`.
pub fn empirical_covariance<R: rand::Rng + ?Sized>(s: &SpdMatrix, n: usize, rng: &mut R) -> Result<SpdMatrix> {
    let d = s.dim();
    let root = sqrt_psd(s.as_matrix());
    let z = DMatrix::<f64>::from_fn(d, n, |_, _| StandardNormal.sample(rng));
    let x = root * z;
    SpdMatrix::new(symmetrize(&(&x * x.transpose() / n as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceConfig {
    pub p: usize,
    pub d: usize,
    pub sample_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub barycenter_tol: f64,
    pub barycenter_max_iters: usize,
    pub qp: QpOptions,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            p: 6,
            d: 10,
            sample_sizes: vec![10, 30, 100, 300, 1000],
            trials: 50,
            seed: 0,
            barycenter_tol: 1e-10,
            barycenter_max_iters: 1000,
            qp: QpOptions::default(),
        }
    }
}

impl CovarianceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(BcmError::Config("trials must be positive".into()));
        }
        if self.p == 0 || self.d == 0 {
            return Err(BcmError::Config("p and d must be positive".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(BcmError::Config("sample sizes must be nonempty and positive".into()));
        }
        if !(self.barycenter_tol > 0.0) || self.barycenter_max_iters == 0 {
            return Err(BcmError::Config("barycenter tolerance and budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceRow {
    pub n: usize,
    pub trial: usize,
    pub w2_bcm: f64,
    pub w2_empirical: f64,
    pub lambda_err: f64,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One trial shares `λ*` and the references across every sample size.
fn covariance_trial(config: &CovarianceConfig, trial: usize) -> Result<Vec<CovarianceRow>> {
    let base = (trial as u64) << 16;
    let mut rng = stream_rng(config.seed, base);
    let lambda_star = uniform_simplex(config.p, &mut rng);
    let refs: Vec<SpdMatrix> = (0..config.p).map(|_| wishart_shifted(config.d, &mut rng)).collect();
    let truth = gaussian_barycenter(&lambda_star, &refs, config.barycenter_tol, config.barycenter_max_iters)?.cov;
    let mut rows = Vec::with_capacity(config.sample_sizes.len());
    for (j, &n) in config.sample_sizes.iter().enumerate() {
        let mut rng = stream_rng(config.seed, base | (j as u64 + 1));
        let empirical = empirical_covariance(&truth, n, &mut rng)?;
        let a = gram_gaussian(&empirical, &refs)?;
        let lambda_hat = match solve_simplex_qp(&a, None, &config.qp) {
            Ok(sol) => sol.lambda,
            Err(BcmError::QpNonConvergence { best, .. }) => best.lambda,
            Err(e) => return Err(e),
        };
        let estimate =
            gaussian_barycenter(&lambda_hat, &refs, config.barycenter_tol, config.barycenter_max_iters)?.cov;
        rows.push(CovarianceRow {
            n,
            trial,
            w2_bcm: bures_w2_sq(&truth, &estimate)?.sqrt(),
            w2_empirical: bures_w2_sq(&truth, &empirical)?.sqrt(),
            lambda_err: lambda_hat.max_abs_diff(lambda_star.as_slice()),
        });
    }
    Ok(rows)
}

/// Covariance estimation study: BCM projection of the empirical covariance
/// against the empirical covariance itself. Trials run in parallel; rows are
/// ordered by trial then sample size.
pub fn run_covariance_experiment(config: &CovarianceConfig) -> Result<Vec<CovarianceRow>> {
    config.validate()?;
    let per_trial: Vec<Result<Vec<CovarianceRow>>> = (0..config.trials)
        .into_par_iter()
        .map(|t| covariance_trial(config, t))
        .collect();
    let mut rows = Vec::new();
    for r in per_trial {
        rows.extend(r?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::tests::random_spd;

    #[test]
    fn transport_identity_and_scalar() {
        let s = SpdMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let c = transport_matrix(&s, &s).unwrap();
        assert!((c - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        let c = transport_matrix(&SpdMatrix::from_diagonal(&[4.0]), &SpdMatrix::from_diagonal(&[9.0])).unwrap();
        assert!((c[(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn transport_pushes_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s0 = random_spd(5, &mut rng);
        let s1 = random_spd(5, &mut rng);
        let c = transport_matrix(&s0, &s1).unwrap();
        assert!((&c - c.transpose()).norm() < 1e-12);
        let pushed = &c * s0.as_matrix() * &c;
        assert!((pushed - s1.as_matrix()).norm() / s1.as_matrix().norm() < 1e-9);
    }

    #[test]
    fn barycenter_of_equal_refs() {
        let s = SpdMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let r = gaussian_barycenter(&Coordinates::new(vec![0.3, 0.7]).unwrap(), &[s.clone(), s.clone()], 1e-10, 100)
            .unwrap();
        assert!(r.iterations <= 1);
        assert!((r.cov.as_matrix() - s.as_matrix()).norm() < 1e-12);
    }

    #[test]
    fn barycenter_closed_forms() {
        let half = Coordinates::uniform(2);
        let r = gaussian_barycenter(
            &half,
            &[SpdMatrix::from_diagonal(&[1.0]), SpdMatrix::from_diagonal(&[9.0])],
            1e-12,
            100,
        )
        .unwrap();
        assert!((r.cov.as_matrix()[(0, 0)] - 4.0).abs() < 1e-10);
        let r = gaussian_barycenter(
            &half,
            &[SpdMatrix::from_diagonal(&[1.0, 4.0]), SpdMatrix::from_diagonal(&[9.0, 16.0])],
            1e-12,
            100,
        )
        .unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        assert!((r.cov.as_matrix() - expected).norm() < 1e-10);
    }

    #[test]
    fn barycenter_residual_recomputes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs: Vec<_> = (0..3).map(|_| random_spd(4, &mut rng)).collect();
        let lambda = Coordinates::new(vec![0.2, 0.5, 0.3]).unwrap();
        let r = gaussian_barycenter(&lambda, &refs, 1e-10, 1000).unwrap();
        assert!(r.residual < 1e-10);
        let again = barycenter_residual(&lambda, &refs, &r.cov).unwrap();
        assert!((again - r.residual).abs() < 1e-12);
    }

    #[test]
    fn barycenter_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs: Vec<_> = (0..3).map(|_| random_spd(4, &mut rng)).collect();
        let lambda = Coordinates::new(vec![0.2, 0.5, 0.3]).unwrap();
        let err = gaussian_barycenter(&lambda, &refs, 1e-300, 2).unwrap_err();
        assert!(err.is_non_convergence());
    }

    #[test]
    fn gram_gaussian_scalar_case() {
        let s0 = SpdMatrix::from_diagonal(&[4.0]);
        let refs = [SpdMatrix::from_diagonal(&[1.0]), SpdMatrix::from_diagonal(&[9.0])];
        let a = gram_gaussian(&s0, &refs).unwrap();
        let expected = [1.0, -1.0, -1.0, 1.0];
        for (x, y) in a.as_matrix().transpose().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_truth_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let refs: Vec<_> = (0..3).map(|_| wishart_shifted(4, &mut rng)).collect();
        let a = gram_gaussian(&refs[0], &refs).unwrap();
        let sol = solve_simplex_qp(&a, None, &QpOptions::default()).unwrap();
        assert!(sol.lambda.max_abs_diff(&[1.0, 0.0, 0.0]) < 1e-8);
        assert!(sol.value < 1e-12);
    }

    #[test]
    fn experiment_rejects_empty_config() {
        let config = CovarianceConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(matches!(run_covariance_experiment(&config), Err(BcmError::Config(_))));
    }

    #[test]
    fn experiment_is_deterministic() {
        let config = CovarianceConfig {
            p: 3,
            d: 3,
            sample_sizes: vec![20, 50],
            trials: 3,
            seed: 9,
            ..Default::default()
        };
        let a = run_covariance_experiment(&config).unwrap();
        let b = run_covariance_experiment(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }
}
