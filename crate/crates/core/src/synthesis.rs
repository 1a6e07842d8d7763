//! Barycenter synthesis: exact 1D quantile barycenters, and entropic
//! barycenters of grid measures by iterative Bregman projections.

use nalgebra::DMatrix;

use crate::bcm::Coordinates;
use crate::error::{BcmError, Result};
use crate::ot::{entropic_cost, sinkhorn, CostScale, PointCloud, SinkhornOptions};

/// Uniformly weighted sample on the line, sorted nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sorted1DSample(Vec<f64>);

impl Sorted1DSample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(BcmError::InvalidMeasure("empty sample".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BcmError::InvalidMeasure("sample has non-finite values".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(BcmError::InvalidMeasure("sample is not sorted".into()));
        }
        Ok(Sorted1DSample(values))
    }

    /// Sorts with a stable sort, so ties keep their input order.
    pub fn from_unsorted(mut values: Vec<f64>) -> Result<Self> {
        values.sort_by(f64::total_cmp);
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_point_cloud(&self) -> PointCloud {
        PointCloud::uniform(DMatrix::from_column_slice(self.len(), 1, &self.0))
            .expect("nonempty sample gives a valid cloud")
    }

    /// Exact squared W2 to another sample of the same size.
    pub fn w2_sq(&self, other: &Sorted1DSample) -> Result<f64> {
        check_counts(self, other)?;
        let n = self.len() as f64;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }
}

fn check_counts(a: &Sorted1DSample, b: &Sorted1DSample) -> Result<()> {
    if a.len() != b.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "samples of sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Image of each source point under the monotone rearrangement onto `dst`.
pub fn monotone_map_1d(src: &Sorted1DSample, dst: &Sorted1DSample) -> Result<Vec<f64>> {
    check_counts(src, dst)?;
    Ok(dst.0.clone())
}

/// Rank-wise convex combination of order statistics.
pub fn quantile_barycenter_1d(lambda: &Coordinates, refs: &[Sorted1DSample]) -> Result<Sorted1DSample> {
    if refs.is_empty() || lambda.len() != refs.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "{} coordinates for {} references",
            lambda.len(),
            refs.len()
        )));
    }
    for r in refs {
        check_counts(&refs[0], r)?;
    }
    let n = refs[0].len();
    let values = (0..n)
        .map(|k| lambda.as_slice().iter().zip(refs).map(|(l, r)| l * r.0[k]).sum())
        .collect();
    // a convex combination of nondecreasing sequences is nondecreasing
    Sorted1DSample::new(values)
}

/// Probability mass on an `H × W` pixel grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    height: usize,
    width: usize,
    mass: Vec<f64>,
}

pub const GRID_MASS_TOL: f64 = 1e-10;

impl GridMeasure {
    pub fn new(height: usize, width: usize, mass: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(BcmError::InvalidMeasure("grid must be nonempty".into()));
        }
        if mass.len() != height * width {
            return Err(BcmError::DimensionMismatch(format!(
                "{} values for a {height}x{width} grid",
                mass.len()
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(BcmError::InvalidMeasure("grid mass must be finite and nonnegative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > GRID_MASS_TOL {
            return Err(BcmError::InvalidMeasure(format!("grid mass sums to {total}")));
        }
        Ok(GridMeasure { height, width, mass })
    }

    pub fn from_unnormalized(height: usize, width: usize, mass: Vec<f64>) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(BcmError::InvalidMeasure("grid has zero total mass".into()));
        }
        Self::new(height, width, mass.into_iter().map(|m| m / total).collect())
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        GridMeasure {
            height,
            width,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(height: usize, width: usize, row: usize, col: usize) -> Self {
        let mut mass = vec![0.0; height * width];
        mass[row * width + col] = 1.0;
        GridMeasure { height, width, mass }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.width + col]
    }

    pub fn same_grid(&self, other: &GridMeasure) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn transposed(&self) -> Self {
        let mut mass = vec![0.0; self.mass.len()];
        for i in 0..self.height {
            for j in 0..self.width {
                mass[j * self.height + i] = self.get(i, j);
            }
        }
        GridMeasure {
            height: self.width,
            width: self.height,
            mass,
        }
    }

    pub fn l1_distance(&self, other: &GridMeasure) -> f64 {
        self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Row and column of the largest mass (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let k = (0..self.mass.len()).fold(0, |b, k| if self.mass[k] > self.mass[b] { k } else { b });
        (k / self.width, k % self.width)
    }

    /// Pixel `(i, j)` becomes the point `(i, j)` carrying its mass; empty
    /// pixels are dropped.
    pub fn to_point_cloud(&self) -> PointCloud {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for i in 0..self.height {
            for j in 0..self.width {
                let m = self.get(i, j);
                if m > 0.0 {
                    rows.push(vec![i as f64, j as f64]);
                    weights.push(m);
                }
            }
        }
        PointCloud::from_rows(&rows, weights).expect("grid mass is a probability vector")
    }

    /// `Σ λᵢ mᵢ` on a common grid.
    pub fn mixture(lambda: &Coordinates, grids: &[GridMeasure]) -> Result<GridMeasure> {
        check_grids(grids)?;
        if lambda.len() != grids.len() {
            return Err(BcmError::DimensionMismatch(format!(
                "{} coordinates for {} grids",
                lambda.len(),
                grids.len()
            )));
        }
        let mut mass = vec![0.0; grids[0].mass.len()];
        for (l, g) in lambda.as_slice().iter().zip(grids) {
            for (m, v) in mass.iter_mut().zip(&g.mass) {
                *m += l * v;
            }
        }
        GridMeasure::from_unnormalized(grids[0].height, grids[0].width, mass)
    }
}

fn check_grids(grids: &[GridMeasure]) -> Result<()> {
    let Some(first) = grids.first() else {
        return Err(BcmError::InvalidInput("no grid measures given".into()));
    };
    if grids.iter().any(|g| !g.same_grid(first)) {
        return Err(BcmError::DimensionMismatch("grid measures on different grids".into()));
    }
    Ok(())
}

/// How the Gibbs kernel `exp(−‖x − y‖²/ε)` is applied on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKernel {
    /// Full `HW × HW` kernel.
    Dense,
    /// Rows then columns, using `‖x − y‖² = (i − k)² + (j − l)²`.
    Separable,
}

impl GridKernel {
    pub fn name(self) -> &'static str {
        match self {
            GridKernel::Dense => "dense",
            GridKernel::Separable => "separable",
        }
    }
}

/// Log-domain kernel application `out_x = LSE_y(−C_xy/ε + ψ_y)`.
struct LogKernel {
    height: usize,
    width: usize,
    kind: Kernel,
}

enum Kernel {
    Dense(Vec<f64>),
    Separable { rows: Vec<f64>, cols: Vec<f64> },
}

fn lse_into(logits: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl LogKernel {
    fn new(height: usize, width: usize, epsilon: f64, kind: GridKernel) -> Self {
        let line = |n: usize| {
            let mut k = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    let d = a as f64 - b as f64;
                    k[a * n + b] = -d * d / epsilon;
                }
            }
            k
        };
        let kind = match kind {
            GridKernel::Dense => {
                let n = height * width;
                let mut k = vec![0.0; n * n];
                for x in 0..n {
                    let (i, j) = ((x / width) as f64, (x % width) as f64);
                    for y in 0..n {
                        let (a, b) = ((y / width) as f64, (y % width) as f64);
                        k[x * n + y] = -((i - a).powi(2) + (j - b).powi(2)) / epsilon;
                    }
                }
                Kernel::Dense(k)
            }
            GridKernel::Separable => Kernel::Separable {
                rows: line(height),
                cols: line(width),
            },
        };
        LogKernel { height, width, kind }
    }

    fn apply(&self, psi: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        match &self.kind {
            Kernel::Dense(k) => {
                let n = h * w;
                for x in 0..n {
                    let row = &k[x * n..(x + 1) * n];
                    out[x] = lse_into(row.iter().zip(psi).map(|(a, b)| a + b));
                }
            }
            Kernel::Separable { rows, cols } => {
                let mut tmp = vec![0.0; h * w];
                for r in 0..h {
                    let line = &psi[r * w..(r + 1) * w];
                    for j in 0..w {
                        let kc = &cols[j * w..(j + 1) * w];
                        tmp[r * w + j] = lse_into(kc.iter().zip(line).map(|(a, b)| a + b));
                    }
                }
                for i in 0..h {
                    let kr = &rows[i * h..(i + 1) * h];
                    for j in 0..w {
                        out[i * w + j] = lse_into((0..h).map(|r| kr[r] + tmp[r * w + j]));
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbpOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Bound on the ℓ1 change between successive barycenter iterates.
    pub tol: f64,
    pub kernel: GridKernel,
}

impl IbpOptions {
    pub fn new(epsilon: f64) -> Self {
        IbpOptions {
            epsilon,
            max_iters: 5000,
            tol: 1e-7,
            kernel: GridKernel::Dense,
        }
    }

    pub fn with_kernel(mut self, kernel: GridKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbpResult {
    pub barycenter: GridMeasure,
    pub iterations: usize,
    pub residual: f64,
}

/// Entropic barycenter of grid measures by iterative Bregman projections,
/// run in the log domain so small `ε` does not underflow.
pub fn ibp_barycenter(lambda: &Coordinates, refs: &[GridMeasure], opts: &IbpOptions) -> Result<IbpResult> {
    check_grids(refs)?;
    if lambda.len() != refs.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "{} coordinates for {} references",
            lambda.len(),
            refs.len()
        )));
    }
    if !(opts.epsilon > 0.0) || !opts.epsilon.is_finite() {
        return Err(BcmError::InvalidInput(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    if refs.iter().any(|r| r.mass.iter().all(|&m| m == 0.0)) {
        return Err(BcmError::InvalidMeasure("reference with zero mass".into()));
    }
    let (h, w) = (refs[0].height, refs[0].width);
    let n = h * w;
    let kernel = LogKernel::new(h, w, opts.epsilon, opts.kernel);
    let log_a: Vec<Vec<f64>> = refs.iter().map(|r| r.mass.iter().map(|m| m.ln()).collect()).collect();
    let active: Vec<usize> = (0..refs.len()).filter(|&i| lambda[i] > 0.0).collect();

    let mut psi = vec![vec![0.0; n]; refs.len()];
    let mut phi = vec![0.0; n];
    let mut conv = vec![0.0; n];
    let mut wks = vec![vec![0.0; n]; refs.len()];
    let mut log_b = vec![0.0; n];
    let mut b_prev: Option<Vec<f64>> = None;
    let mut residual = f64::INFINITY;

    for iteration in 1..=opts.max_iters {
        log_b.iter_mut().for_each(|v| *v = 0.0);
        for &i in &active {
            kernel.apply(&psi[i], &mut conv);
            for x in 0..n {
                phi[x] = if log_a[i][x] == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    log_a[i][x] - conv[x]
                };
            }
            kernel.apply(&phi, &mut wks[i]);
            for x in 0..n {
                log_b[x] += lambda[i] * wks[i][x];
            }
        }
        for &i in &active {
            for x in 0..n {
                psi[i][x] = if log_b[x] == f64::NEG_INFINITY {
                    0.0
                } else {
                    log_b[x] - wks[i][x]
                };
            }
        }
        let b: Vec<f64> = log_b.iter().map(|v| v.exp()).collect();
        if let Some(prev) = &b_prev {
            residual = b.iter().zip(prev).map(|(x, y)| (x - y).abs()).sum();
            if residual < opts.tol {
                return Ok(IbpResult {
                    barycenter: GridMeasure::from_unnormalized(h, w, b)?,
                    iterations: iteration,
                    residual,
                });
            }
        }
        b_prev = Some(b);
    }
    Err(BcmError::NonConvergence {
        what: "iterative Bregman projections",
        iterations: opts.max_iters,
        residual,
    })
}

/// Plan cost `⟨π, C⟩` of the entropic coupling between two measures on the
/// same grid, with unit pixel spacing and unhalved squared distances. Empty
/// pixels are dropped before solving.
pub fn grid_entropic_cost(a: &GridMeasure, b: &GridMeasure, opts: &SinkhornOptions) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(BcmError::DimensionMismatch("grid measures on different grids".into()));
    }
    let opts = opts.with_cost(CostScale::Full);
    let sol = sinkhorn(&a.to_point_cloud(), &b.to_point_cloud(), &opts)?;
    entropic_cost(&sol.plan, &sol.cost)
}
