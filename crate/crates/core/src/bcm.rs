//! Gram matrices of displacement maps and the simplex-constrained quadratic
//! program `min_{λ ∈ Δᵖ} λᵀAλ + cᵀλ`.
//!
//! `A_ij = ∫ ⟨T_i(x) − x, T_j(x) − x⟩ dμ₀(x)` is the squared norm of the
//! variance-functional gradient written as a quadratic form in λ. A zero
//! minimum means the query is a barycenter of the references, with the
//! minimizer as its coordinates.

use nalgebra::{DMatrix, DVector};

use crate::error::{BcmError, Result};
use crate::gaussian::transport_matrix;
use crate::linalg::{lambda_max, relative_asymmetry, sym_eigen, symmetrize};
use crate::spd::SpdMatrix;

/// Relative symmetry tolerance for [`GramMatrix`].
pub const GRAM_SYMMETRY_TOL: f64 = 1e-10;
/// Smallest eigenvalue must exceed `−PSD_TOL · λ_max`.
pub const PSD_TOL: f64 = 1e-8;
/// Null-space threshold, relative to the largest eigenvalue.
pub const NULL_SPACE_TOL: f64 = 1e-8;
/// Simplex membership tolerance for [`Coordinates`].
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Symmetric positive semidefinite `p × p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(DMatrix<f64>);

impl GramMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(BcmError::DimensionMismatch(format!(
                "Gram matrix must be square and nonempty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(BcmError::InvalidInput("Gram matrix has non-finite entries".into()));
        }
        let asym = relative_asymmetry(&m);
        if asym > GRAM_SYMMETRY_TOL {
            return Err(BcmError::NotSymmetric(asym));
        }
        let m = symmetrize(&m);
        let (values, _) = sym_eigen(&m);
        let smallest = values[0];
        let largest = values[values.len() - 1].max(0.0);
        if smallest < -PSD_TOL * largest || (largest == 0.0 && smallest < 0.0) {
            return Err(BcmError::NotPositiveDefinite {
                eigenvalue: smallest,
                largest,
            });
        }
        Ok(GramMatrix(m))
    }

    pub fn from_row_slice(p: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != p * p {
            return Err(BcmError::DimensionMismatch(format!(
                "expected {} entries for a {p}x{p} Gram matrix",
                p * p
            )));
        }
        Self::new(DMatrix::from_row_slice(p, p, entries))
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

    /// `λᵀAλ`.
    pub fn quadratic_form(&self, lambda: &[f64]) -> f64 {
        let v = DVector::from_column_slice(lambda);
        (v.transpose() * &self.0 * &v)[(0, 0)]
    }

    /// `sAs` for `s > 0`.
    pub fn scaled(&self, s: f64) -> Self {
        GramMatrix(&self.0 * s)
    }

    /// Rows and columns reordered so that entry `(i, j)` becomes `(perm[i], perm[j])`'s source.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let p = self.dim();
        GramMatrix(DMatrix::from_fn(p, p, |i, j| self.0[(perm[i], perm[j])]))
    }
}

/// A point of the probability simplex `Δᵖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinates(Vec<f64>);

impl Coordinates {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(BcmError::InvalidInput("coordinates must be nonempty".into()));
        }
        if lambda.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(BcmError::InvalidInput(format!(
                "coordinates must be finite and nonnegative: {lambda:?}"
            )));
        }
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(BcmError::InvalidInput(format!("coordinates sum to {sum}")));
        }
        Ok(Coordinates(lambda))
    }

    pub fn uniform(p: usize) -> Self {
        Coordinates(vec![1.0 / p as f64; p])
    }

    pub fn vertex(p: usize, i: usize) -> Self {
        let mut v = vec![0.0; p];
        v[i] = 1.0;
        Coordinates(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Coordinates {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub lambda: Coordinates,
    /// `λᵀAλ + cᵀλ` at `lambda`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Bound on the projected-gradient residual `‖λ − P(λ − ∇f/L)‖∞`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-12,
            max_iters: 200_000,
        }
    }
}

/// `Â_ij = Σ_k w_k ⟨T_i(x_k) − x_k, T_j(x_k) − x_k⟩` for maps already
/// evaluated at the points `x_k` (each map an `n × d` matrix).
///
/// Uniform weights give the held-out estimator over samples; the weights of
/// the query cloud give the point-cloud estimator.
pub fn gram_from_displacements(
    eval_points: &DMatrix<f64>,
    eval_weights: &[f64],
    displacement_maps: &[DMatrix<f64>],
) -> Result<GramMatrix> {
    let (n, d) = eval_points.shape();
    if eval_weights.len() != n {
        return Err(BcmError::DimensionMismatch(format!(
            "{} weights for {n} evaluation points",
            eval_weights.len()
        )));
    }
    let sum: f64 = eval_weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || eval_weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(BcmError::InvalidMeasure(format!(
            "evaluation weights must be a probability vector (sum {sum})"
        )));
    }
    if displacement_maps.is_empty() {
        return Err(BcmError::InvalidInput("no maps given".into()));
    }
    for (i, t) in displacement_maps.iter().enumerate() {
        if t.shape() != (n, d) {
            return Err(BcmError::DimensionMismatch(format!(
                "map {i} has shape {:?}, expected {:?}",
                t.shape(),
                (n, d)
            )));
        }
    }
    // D_i scaled by sqrt(w) row-wise, so A = Dᵀ D over the stacked columns
    let p = displacement_maps.len();
    let mut stacked = DMatrix::zeros(n * d, p);
    for (i, t) in displacement_maps.iter().enumerate() {
        for k in 0..n {
            let sw = eval_weights[k].sqrt();
            for c in 0..d {
                stacked[(k * d + c, i)] = sw * (t[(k, c)] - eval_points[(k, c)]);
            }
        }
    }
    GramMatrix::new(symmetrize(&(stacked.transpose() * &stacked)))
}

/// Exact Gram matrix for zero-mean Gaussians:
/// `A_ij = Tr((C_i − I)(C_j − I) S₀)` with `C_i` the linear transport maps.
pub fn gram_gaussian(s0: &SpdMatrix, refs: &[SpdMatrix]) -> Result<GramMatrix> {
    if refs.is_empty() {
        return Err(BcmError::InvalidInput("no reference covariances".into()));
    }
    let d = s0.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let disp: Vec<DMatrix<f64>> = refs
        .iter()
        .map(|s| transport_matrix(s0, s).map(|c| c - &eye))
        .collect::<Result<_>>()?;
    let p = refs.len();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let left = &disp[i] * s0.as_matrix();
        for j in i..p {
            // Tr(D_i S0 D_j) with D_j symmetric
            let v = left.component_mul(&disp[j].transpose()).sum();
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    GramMatrix::new(a)
}

/// Euclidean projection onto `Δᵖ` by the sorted-threshold rule.
pub fn project_simplex(v: &[f64]) -> Coordinates {
    Coordinates(project_simplex_raw(v))
}

pub(crate) fn project_simplex_raw(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // absorb rounding so the result sums to one
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for x in &mut out {
            *x /= sum;
        }
    }
    out
}

fn objective(a: &DMatrix<f64>, c: Option<&[f64]>, x: &[f64]) -> f64 {
    let p = x.len();
    let mut val = 0.0;
    for i in 0..p {
        let mut row = 0.0;
        for j in 0..p {
            row += a[(i, j)] * x[j];
        }
        val += x[i] * row;
    }
    if let Some(c) = c {
        val += c.iter().zip(x).map(|(ci, xi)| ci * xi).sum::<f64>();
    }
    val
}

fn gradient(a: &DMatrix<f64>, c: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let p = x.len();
    for i in 0..p {
        let mut g = 0.0;
        for j in 0..p {
            g += a[(i, j)] * x[j];
        }
        out[i] = 2.0 * g + c.map_or(0.0, |c| c[i]);
    }
}

/// Minimizes `λᵀAλ + cᵀλ` over the simplex by accelerated projected gradient
/// with step `1/(2 λ_max(A))`, starting from the uniform point and restarting
/// momentum whenever it points uphill.
///
/// Convergence is declared when the projected-gradient step falls below
/// `opts.tol` in the max norm. The iteration is invariant under scaling `A`
/// and `c` by the same positive factor.
pub fn solve_simplex_qp(a: &GramMatrix, c: Option<&[f64]>, opts: &QpOptions) -> Result<QpSolution> {
    let p = a.dim();
    if let Some(c) = c {
        if c.len() != p {
            return Err(BcmError::DimensionMismatch(format!(
                "linear term of length {} for a {p}x{p} problem",
                c.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BcmError::InvalidInput("linear term has non-finite entries".into()));
        }
    }
    let am = a.as_matrix();
    let finish = |x: Vec<f64>, iterations: usize, converged: bool| {
        let mut value = objective(am, c, &x);
        if c.is_none() {
            value = value.max(0.0);
        }
        QpSolution {
            lambda: Coordinates(x),
            value,
            iterations,
            converged,
        }
    };
    if p == 1 {
        return Ok(finish(vec![1.0], 0, true));
    }

    let lipschitz = 2.0 * lambda_max(am);
    if !(lipschitz > 0.0) {
        // purely linear objective: the best vertex, or the uniform point if flat
        let x = match c {
            Some(c) if c.iter().any(|&v| v != c[0]) => {
                let best = (0..p).fold(0, |b, i| if c[i] < c[b] { i } else { b });
                Coordinates::vertex(p, best).into_vec()
            }
            _ => Coordinates::uniform(p).into_vec(),
        };
        return Ok(finish(x, 0, true));
    }
    let step = 1.0 / lipschitz;

    let mut x = vec![1.0 / p as f64; p];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0; p];
    let mut trial = vec![0.0; p];
    let mut best = x.clone();
    let mut best_value = objective(am, c, &x);
    let mut residual = f64::INFINITY;

    for iteration in 0..opts.max_iters {
        // residual at the current iterate
        gradient(am, c, &x, &mut grad);
        for i in 0..p {
            trial[i] = x[i] - step * grad[i];
        }
        let projected = project_simplex_raw(&trial);
        residual = projected
            .iter()
            .zip(&x)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        if residual <= opts.tol {
            return Ok(finish(x, iteration, true));
        }

        gradient(am, c, &y, &mut grad);
        for i in 0..p {
            trial[i] = y[i] - step * grad[i];
        }
        let x_next = project_simplex_raw(&trial);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // gradient-based restart
        let uphill: f64 = (0..p).map(|i| (y[i] - x_next[i]) * (x_next[i] - x[i])).sum();
        if uphill > 0.0 {
            t = 1.0;
            y.clone_from(&x_next);
        } else {
            let beta = (t - 1.0) / t_next;
            for i in 0..p {
                y[i] = x_next[i] + beta * (x_next[i] - x[i]);
            }
            t = t_next;
        }
        x = x_next;
        let value = objective(am, c, &x);
        if value < best_value {
            best_value = value;
            best.clone_from(&x);
        }
    }
    Err(BcmError::QpNonConvergence {
        iterations: opts.max_iters,
        residual,
        best: Box::new(finish(best, opts.max_iters, false)),
    })
}

/// How the zero set of `λᵀAλ` meets the simplex.
#[derive(Debug, Clone, PartialEq)]
pub enum Multiplicity {
    /// No simplex point attains zero.
    NoExactSolution,
    /// Exactly one simplex point attains zero.
    Unique(Coordinates),
    /// A segment or face of minimizers. `witness` is its minimum-norm point;
    /// the columns of `null_basis` span the null space of `A`.
    InfinitelyMany {
        witness: Coordinates,
        null_basis: DMatrix<f64>,
    },
}

impl Multiplicity {
    pub fn label(&self) -> &'static str {
        match self {
            Multiplicity::NoExactSolution => "no-exact-solution",
            Multiplicity::Unique(_) => "unique",
            Multiplicity::InfinitelyMany { .. } => "infinitely-many",
        }
    }

    pub fn witness(&self) -> Option<&Coordinates> {
        match self {
            Multiplicity::NoExactSolution => None,
            Multiplicity::Unique(w) | Multiplicity::InfinitelyMany { witness: w, .. } => Some(w),
        }
    }
}

/// Orthonormal basis of the eigenspace with eigenvalues below `tol · λ_max`.
pub fn null_space(a: &GramMatrix, tol: f64) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen(a.as_matrix());
    let p = a.dim();
    let largest = values[p - 1].max(0.0);
    let cols: Vec<usize> = (0..p)
        .filter(|&i| largest == 0.0 || values[i] < tol * largest)
        .collect();
    let mut basis = DMatrix::zeros(p, cols.len());
    for (c, &i) in cols.iter().enumerate() {
        basis.set_column(c, &vectors.column(i));
    }
    basis
}

/// Classifies `E₀ ∩ Δᵖ`, where `E₀` is the null space of `A` at relative
/// threshold `tol`.
pub fn minimizer_multiplicity(a: &GramMatrix, tol: f64) -> Multiplicity {
    let p = a.dim();
    let basis = null_space(a, tol);
    let k = basis.ncols();
    if k == 0 {
        return Multiplicity::NoExactSolution;
    }
    const FEAS_TOL: f64 = 1e-8;
    if k == 1 {
        let v = basis.column(0);
        let sum = v.sum();
        if sum.abs() < FEAS_TOL {
            return Multiplicity::NoExactSolution;
        }
        let w: Vec<f64> = v.iter().map(|x| x / sum).collect();
        if w.iter().any(|&x| x < -FEAS_TOL) {
            return Multiplicity::NoExactSolution;
        }
        return Multiplicity::Unique(project_simplex(&w));
    }

    // distance from the simplex to E0: min over Δ of λᵀ(I − NNᵀ)λ
    let complement = DMatrix::<f64>::identity(p, p) - &basis * basis.transpose();
    let Some(dist_sq) = simplex_distance_sq(&complement) else {
        return Multiplicity::NoExactSolution;
    };
    if dist_sq.sqrt() > FEAS_TOL {
        return Multiplicity::NoExactSolution;
    }
    let witness = min_norm_point(&basis);

    // Directions of the affine slice E0 ∩ {Σλ = 1}: vectors of E0 orthogonal to 1.
    let ones = DVector::from_element(p, 1.0);
    let proj_ones = &basis * (basis.transpose() * &ones);
    let directions = orthonormal_complement_in(&basis, &proj_ones);
    if directions.ncols() == 0 {
        return Multiplicity::Unique(witness);
    }
    // The slice is a single point iff no nonzero direction keeps the zero
    // coordinates of the witness nonnegative.
    let zeros: Vec<usize> = (0..p).filter(|&i| witness[i] <= 1e-9).collect();
    if zeros.is_empty() {
        return Multiplicity::InfinitelyMany {
            witness,
            null_basis: basis,
        };
    }
    let restricted = DMatrix::from_fn(zeros.len(), directions.ncols(), |r, c| directions[(zeros[r], c)]);
    let rank = restricted.rank(1e-10);
    if rank < directions.ncols() {
        // a direction leaves the zero pattern untouched
        return Multiplicity::InfinitelyMany {
            witness,
            null_basis: basis,
        };
    }
    // does some d with d_Z ≥ 0, Σ d_Z = 1 lie in the image of the directions?
    let range = orthonormal_columns(&restricted);
    let z = zeros.len();
    let off_range = DMatrix::<f64>::identity(z, z) - &range * range.transpose();
    let movable = match simplex_distance_sq(&off_range) {
        Some(v) => v.sqrt() <= FEAS_TOL,
        None => false,
    };
    if movable {
        Multiplicity::InfinitelyMany {
            witness,
            null_basis: basis,
        }
    } else {
        Multiplicity::Unique(witness)
    }
}

/// `min_{λ∈Δ} λᵀPλ` for an orthogonal projector `P`.
fn simplex_distance_sq(projector: &DMatrix<f64>) -> Option<f64> {
    let g = GramMatrix(symmetrize(projector));
    let opts = QpOptions {
        tol: 1e-13,
        max_iters: 200_000,
    };
    match solve_simplex_qp(&g, None, &opts) {
        Ok(sol) => Some(sol.value),
        Err(BcmError::QpNonConvergence { best, .. }) => Some(best.value),
        Err(_) => None,
    }
}

/// Minimum-norm point of `span(basis) ∩ Δᵖ` by Dykstra's alternating
/// projections started at the origin.
fn min_norm_point(basis: &DMatrix<f64>) -> Coordinates {
    let p = basis.nrows();
    let proj = basis * basis.transpose();
    let mut x = DVector::<f64>::zeros(p);
    let mut corr_a = DVector::<f64>::zeros(p);
    let mut corr_b = DVector::<f64>::zeros(p);
    let mut simplex_point = x.clone();
    for _ in 0..200_000 {
        let y = &proj * (&x + &corr_a);
        corr_a = &x + &corr_a - &y;
        let z = DVector::from_vec(project_simplex_raw((&y + &corr_b).as_slice()));
        corr_b = &y + &corr_b - &z;
        let change = (&z - &simplex_point).amax();
        simplex_point = z.clone();
        x = z;
        if change < 1e-15 {
            break;
        }
    }
    Coordinates(simplex_point.iter().copied().collect())
}

/// Orthonormal basis of `{N z : ⟨N z, v⟩ = 0}` for orthonormal `N`.
fn orthonormal_complement_in(basis: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let k = basis.ncols();
    let coeff = basis.transpose() * v;
    let norm = coeff.norm();
    if norm < 1e-12 {
        return basis.clone();
    }
    let u = coeff / norm;
    let proj = DMatrix::<f64>::identity(k, k) - &u * u.transpose();
    let (values, vectors) = sym_eigen(&proj);
    let cols: Vec<usize> = (0..k).filter(|&i| values[i] > 0.5).collect();
    let z = DMatrix::from_fn(k, cols.len(), |r, c| vectors[(r, cols[c])]);
    basis * z
}

/// Orthonormal basis for the column space of `m`.
fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = m * m.transpose();
    let (values, vectors) = sym_eigen(&gram);
    let largest = values[values.len() - 1].max(0.0);
    let cols: Vec<usize> = (0..values.len())
        .filter(|&i| largest > 0.0 && values[i] > 1e-10 * largest)
        .collect();
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| vectors[(r, cols[c])])
}
