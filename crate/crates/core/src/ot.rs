//! Entropic optimal transport between weighted point clouds.
//!
//! Potentials follow the convention `π_jk = p_j q_k exp((f_j + g_k − M_jk)/ε)`.
//! At a fixed point both normalization identities hold:
//! `Σ_k q_k exp((f(x) + g_k − c(x, Y_k))/ε) = 1` for every `x`, and the
//! symmetric identity for every `y`. The constant gauge `(f + κ, g − κ)` is
//! fixed by requiring `⟨p, f⟩ = ⟨q, g⟩`.
//!
//! The default solver runs Sinkhorn in the log domain with absorption: the
//! inner loop is a scaling iteration on a kernel that has the current
//! potentials folded in, and scalings are absorbed back into the potentials
//! (with an exact log-sum-exp update) whenever they grow large or underflow.

use nalgebra::DMatrix;

use crate::error::{BcmError, Result};
use crate::linalg::log_sum_exp;

/// Weight-sum tolerance for [`PointCloud`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Scalings beyond `exp(±ABSORB_LOG)` are folded back into the potentials.
const ABSORB_LOG: f64 = 69.0;

/// Which squared-distance convention a cost matrix (and the potentials solved
/// against it) uses: `½‖x − y‖²` or `‖x − y‖²`. Mixing the two silently
/// rescales ε by a factor of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostScale {
    Half,
    Full,
}

impl CostScale {
    pub fn factor(self) -> f64 {
        match self {
            CostScale::Half => 0.5,
            CostScale::Full => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostScale::Half => "half",
            CostScale::Full => "full",
        }
    }
}

/// Weighted finite support in `R^d`: an `n × d` point matrix and a
/// probability vector over its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Weights must be nonnegative and sum to one within [`WEIGHT_SUM_TOL`].
    pub fn new(points: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::validate_shape(&points, &weights)?;
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(BcmError::InvalidMeasure(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(PointCloud { points, weights })
    }

    /// Rescales nonnegative weights to sum to one.
    pub fn from_unnormalized(points: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::validate_shape(&points, &weights)?;
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(BcmError::InvalidMeasure("total weight is zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / sum).collect();
        Ok(PointCloud { points, weights })
    }

    pub fn uniform(points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::from_unnormalized(points, vec![1.0; n])
    }

    /// Points given row-major as `n` rows of length `d`.
    pub fn from_rows(rows: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(BcmError::DimensionMismatch("ragged point rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_unnormalized(DMatrix::from_row_slice(rows.len(), d, &flat), weights)
    }

    fn validate_shape(points: &DMatrix<f64>, weights: &[f64]) -> Result<()> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(BcmError::InvalidMeasure("point cloud must be nonempty".into()));
        }
        if weights.len() != points.nrows() {
            return Err(BcmError::DimensionMismatch(format!(
                "{} weights for {} points",
                weights.len(),
                points.nrows()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(BcmError::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(BcmError::InvalidMeasure("points must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// Every point shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Result<Self> {
        if t.len() != self.dim() {
            return Err(BcmError::DimensionMismatch("translation vector".into()));
        }
        let mut points = self.points.clone();
        for mut row in points.row_iter_mut() {
            for (v, s) in row.iter_mut().zip(t) {
                *v += s;
            }
        }
        Ok(PointCloud {
            points,
            weights: self.weights.clone(),
        })
    }

    /// Weighted mean point.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (i, w) in self.weights.iter().enumerate() {
            for (k, mk) in m.iter_mut().enumerate() {
                *mk += w * self.points[(i, k)];
            }
        }
        m
    }
}

/// Entropic dual pair, tagged with the ε and cost convention it solves.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub epsilon: f64,
    pub cost: CostScale,
}

/// Entropic coupling with the marginals it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub matrix: DMatrix<f64>,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
}

impl TransportPlan {
    /// `‖π·1 − p‖₁`.
    pub fn row_residual(&self) -> f64 {
        self.matrix
            .row_iter()
            .zip(&self.source_weights)
            .map(|(r, p)| (r.sum() - p).abs())
            .sum()
    }

    /// `‖πᵀ·1 − q‖₁`.
    pub fn col_residual(&self) -> f64 {
        self.matrix
            .column_iter()
            .zip(&self.target_weights)
            .map(|(c, q)| (c.sum() - q).abs())
            .sum()
    }

    pub fn marginal_residual(&self) -> f64 {
        self.row_residual().max(self.col_residual())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Bound on the larger of the two marginal ℓ1 residuals.
    pub tol: f64,
    pub cost: CostScale,
    /// Warm-start from a geometric schedule of larger `ε` values.
    pub epsilon_scaling: bool,
}

impl SinkhornOptions {
    pub fn new(epsilon: f64) -> Self {
        SinkhornOptions {
            epsilon,
            max_iters: 10_000,
            tol: 1e-7,
            cost: CostScale::Full,
            epsilon_scaling: true,
        }
    }

    pub fn with_epsilon_scaling(mut self, on: bool) -> Self {
        self.epsilon_scaling = on;
        self
    }

    pub fn with_cost(mut self, cost: CostScale) -> Self {
        self.cost = cost;
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

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(BcmError::InvalidInput(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(BcmError::InvalidInput("tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub potentials: DualPotentials,
    pub plan: TransportPlan,
    /// The cost matrix the plan was solved against, in `potentials.cost` convention.
    pub cost: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Pairwise squared distances `c·‖a_j − b_k‖²` with `c` set by `scale`.
pub fn squared_cost_matrix(a: &PointCloud, b: &PointCloud, scale: CostScale) -> Result<DMatrix<f64>> {
    let rows = cost_rows(a.points(), b.points(), scale)?;
    Ok(DMatrix::from_row_slice(a.len(), b.len(), &rows))
}

/// Row-major cost matrix.
fn cost_rows(x: &DMatrix<f64>, y: &DMatrix<f64>, scale: CostScale) -> Result<Vec<f64>> {
    if x.ncols() != y.ncols() {
        return Err(BcmError::DimensionMismatch(format!(
            "point clouds in R^{} and R^{}",
            x.ncols(),
            y.ncols()
        )));
    }
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());
    let factor = scale.factor();
    let mut out = vec![0.0; n * m];
    for j in 0..n {
        for k in 0..m {
            let mut s = 0.0;
            for t in 0..d {
                let diff = x[(j, t)] - y[(k, t)];
                s += diff * diff;
            }
            out[j * m + k] = factor * s;
        }
    }
    Ok(out)
}

/// Entropic transport between two point clouds using the stabilized
/// log-domain solver.
pub fn sinkhorn(a: &PointCloud, b: &PointCloud, opts: &SinkhornOptions) -> Result<SinkhornSolution> {
    let cost = squared_cost_matrix(a, b, opts.cost)?;
    sinkhorn_with_cost(a.weights(), b.weights(), &cost, opts)
}

/// Like [`sinkhorn`] but stops after exactly `iterations` dual updates
/// (each a source then a target update), converged or not.
pub fn sinkhorn_partial(
    a: &PointCloud,
    b: &PointCloud,
    opts: &SinkhornOptions,
    iterations: usize,
) -> Result<SinkhornSolution> {
    opts.validate()?;
    let cost = squared_cost_matrix(a, b, opts.cost)?;
    solve_log(a.weights(), b.weights(), &cost, opts, Stop::After(iterations.max(1)))
}

/// Stabilized log-domain Sinkhorn on an explicit cost matrix.
pub fn sinkhorn_with_cost(
    p: &[f64],
    q: &[f64],
    cost: &DMatrix<f64>,
    opts: &SinkhornOptions,
) -> Result<SinkhornSolution> {
    opts.validate()?;
    check_marginals(p, q, cost)?;
    solve_log(p, q, cost, opts, Stop::Converge)
}

/// Plain exponential-scaling Sinkhorn. Only usable when `exp(−M/ε)` does not
/// underflow; kept as a cross-check for the log-domain solver at large ε.
pub fn sinkhorn_scaling(a: &PointCloud, b: &PointCloud, opts: &SinkhornOptions) -> Result<SinkhornSolution> {
    opts.validate()?;
    let cost = squared_cost_matrix(a, b, opts.cost)?;
    let (p, q) = (a.weights(), b.weights());
    let (n, m) = (p.len(), q.len());
    let eps = opts.epsilon;
    let kernel: Vec<f64> = (0..n * m).map(|i| (-cost[(i / m, i % m)] / eps).exp()).collect();
    for j in 0..n {
        if p[j] > 0.0 && kernel[j * m..(j + 1) * m].iter().zip(q).all(|(k, qk)| k * qk == 0.0) {
            return Err(BcmError::KernelUnderflow { epsilon: eps });
        }
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut iterations = 0;
    let residual = loop {
        // after the v update, columns are exact; rows measure convergence
        let mut row_res = 0.0;
        for j in 0..n {
            let s: f64 = (0..m).map(|k| kernel[j * m + k] * q[k] * v[k]).sum();
            row_res += (p[j] * u[j] * s - p[j]).abs();
        }
        if iterations > 0 && row_res < opts.tol {
            break row_res;
        }
        if iterations >= opts.max_iters {
            return Err(BcmError::NonConvergence {
                what: "Sinkhorn (scaling)",
                iterations,
                residual: row_res,
            });
        }
        iterations += 1;
        for j in 0..n {
            let s: f64 = (0..m).map(|k| kernel[j * m + k] * q[k] * v[k]).sum();
            u[j] = if p[j] > 0.0 { 1.0 / s } else { 1.0 };
        }
        for k in 0..m {
            let t: f64 = (0..n).map(|j| kernel[j * m + k] * p[j] * u[j]).sum();
            v[k] = if q[k] > 0.0 { 1.0 / t } else { 1.0 };
        }
        if u.iter().chain(&v).any(|x| !x.is_finite() || *x == 0.0) {
            return Err(BcmError::KernelUnderflow { epsilon: eps });
        }
    };
    let f: Vec<f64> = u.iter().map(|x| eps * x.ln()).collect();
    let g: Vec<f64> = v.iter().map(|x| eps * x.ln()).collect();
    finish(p, q, &cost, opts, f, g, iterations, residual)
}

fn check_marginals(p: &[f64], q: &[f64], cost: &DMatrix<f64>) -> Result<()> {
    if cost.nrows() != p.len() || cost.ncols() != q.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "cost {}x{} against marginals of length {} and {}",
            cost.nrows(),
            cost.ncols(),
            p.len(),
            q.len()
        )));
    }
    for w in [p, q] {
        if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) {
            return Err(BcmError::InvalidMeasure("marginals must be nonempty and nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BcmError::InvalidMeasure(format!("marginal sums to {sum}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Stop {
    Converge,
    After(usize),
}

/// Row-major view of the active (positive-weight) sub-problem.
struct Active {
    rows: Vec<usize>,
    cols: Vec<usize>,
    cost: Vec<f64>,
    log_p: Vec<f64>,
    log_q: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

impl Active {
    fn new(p: &[f64], q: &[f64], cost: &DMatrix<f64>) -> Self {
        let rows: Vec<usize> = (0..p.len()).filter(|&j| p[j] > 0.0).collect();
        let cols: Vec<usize> = (0..q.len()).filter(|&k| q[k] > 0.0).collect();
        let mut c = Vec::with_capacity(rows.len() * cols.len());
        for &j in &rows {
            for &k in &cols {
                c.push(cost[(j, k)]);
            }
        }
        let p: Vec<f64> = rows.iter().map(|&j| p[j]).collect();
        let q: Vec<f64> = cols.iter().map(|&k| q[k]).collect();
        Active {
            log_p: p.iter().map(|x| x.ln()).collect(),
            log_q: q.iter().map(|x| x.ln()).collect(),
            rows,
            cols,
            cost: c,
            p,
            q,
        }
    }

    fn n(&self) -> usize {
        self.rows.len()
    }

    fn m(&self) -> usize {
        self.cols.len()
    }

    /// `f_j = −ε log Σ_k q_k exp((g_k − M_jk)/ε)`.
    fn update_f(&self, g: &[f64], eps: f64, f: &mut [f64]) {
        let m = self.m();
        for (j, fj) in f.iter_mut().enumerate() {
            let row = &self.cost[j * m..(j + 1) * m];
            let lse = log_sum_exp((0..m).map(|k| self.log_q[k] + (g[k] - row[k]) / eps));
            *fj = -eps * lse;
        }
    }

    /// `g_k = −ε log Σ_j p_j exp((f_j − M_jk)/ε)`.
    fn update_g(&self, f: &[f64], eps: f64, g: &mut [f64]) {
        let m = self.m();
        let n = self.n();
        for (k, gk) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..n).map(|j| self.log_p[j] + (f[j] - self.cost[j * m + k]) / eps));
            *gk = -eps * lse;
        }
    }

    fn kernel(&self, f: &[f64], g: &[f64], eps: f64, out: &mut [f64]) {
        let m = self.m();
        for (j, fj) in f.iter().enumerate() {
            let row = &self.cost[j * m..(j + 1) * m];
            let dst = &mut out[j * m..(j + 1) * m];
            for k in 0..m {
                dst[k] = ((fj + g[k] - row[k]) / eps).exp();
            }
        }
    }
}

fn all_scalings_ok(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite() && *v > 0.0)
}

fn needs_absorb(x: &[f64]) -> bool {
    x.iter().any(|v| v.ln().abs() > ABSORB_LOG)
}

/// Intermediate annealing stages stop at this row residual.
const STAGE_TOL: f64 = 1e-3;
const STAGE_FACTOR: f64 = 0.5;

fn solve_log(p: &[f64], q: &[f64], cost: &DMatrix<f64>, opts: &SinkhornOptions, stop: Stop) -> Result<SinkhornSolution> {
    let eps = opts.epsilon;
    let act = Active::new(p, q, cost);
    let (n, m) = (act.n(), act.m());
    if n == 0 || m == 0 {
        return Err(BcmError::InvalidMeasure("a marginal has no positive weight".into()));
    }
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut iterations = 0usize;

    if let (Stop::Converge, true) = (stop, opts.epsilon_scaling) {
        let (lo, hi) = act
            .cost
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        let mut stage = (hi - lo) * STAGE_FACTOR;
        while stage > eps && iterations < opts.max_iters {
            let budget = (opts.max_iters - iterations).min((opts.max_iters / 10).max(100));
            iterations += match run(&act, stage, STAGE_TOL, budget, Stop::Converge, &mut f, &mut g, iterations == 0) {
                Ok((used, _)) => used,
                Err(BcmError::NonConvergence { iterations, .. }) => iterations,
                Err(e) => return Err(e),
            };
            stage *= STAGE_FACTOR;
        }
    }

    let residual = match stop {
        Stop::After(_) => {
            let (used, residual) = run(&act, eps, opts.tol, usize::MAX, stop, &mut f, &mut g, true)?;
            iterations += used;
            residual
        }
        Stop::Converge => {
            let mut residual = f64::INFINITY;
            let mut cold = iterations == 0;
            let mut phase = 0;
            loop {
                let remaining = opts.max_iters.saturating_sub(iterations);
                if remaining == 0 {
                    return Err(BcmError::NonConvergence {
                        what: "Sinkhorn",
                        iterations: opts.max_iters,
                        residual,
                    });
                }
                // plain iterations first, then Newton polishing, then plain iterations for the rest
                let outcome = match phase {
                    0 => run(&act, eps, opts.tol, remaining.min(NEWTON_AFTER), stop, &mut f, &mut g, cold),
                    1 => newton_polish(&act, eps, opts.tol, remaining.min(NEWTON_STEPS), &mut f, &mut g),
                    _ => run(&act, eps, opts.tol, remaining, stop, &mut f, &mut g, false),
                };
                cold = false;
                match outcome {
                    Ok((used, res)) => {
                        iterations += used;
                        break res;
                    }
                    Err(BcmError::NonConvergence {
                        iterations: used,
                        residual: res,
                        ..
                    }) => {
                        iterations += used;
                        residual = res;
                        if phase == 2 {
                            return Err(BcmError::NonConvergence {
                                what: "Sinkhorn",
                                iterations,
                                residual,
                            });
                        }
                        phase += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    };

    // scatter back, filling zero-weight points by c-transform
    let mut f_full = vec![f64::NAN; p.len()];
    let mut g_full = vec![f64::NAN; q.len()];
    for (i, &j) in act.rows.iter().enumerate() {
        f_full[j] = f[i];
    }
    for (i, &k) in act.cols.iter().enumerate() {
        g_full[k] = g[i];
    }
    finish(p, q, cost, opts, f_full, g_full, iterations, residual)
}

/// Plain iterations tried before switching to Newton steps.
const NEWTON_AFTER: usize = 300;
const NEWTON_STEPS: usize = 50;

/// Row sums of the plan for `f` and `g`, with `g` exact for `f`.
fn row_sums(act: &Active, eps: f64, f: &[f64], g: &[f64], plan: &mut [f64], r: &mut [f64]) {
    let m = act.m();
    for (j, rj) in r.iter_mut().enumerate() {
        let row = &act.cost[j * m..(j + 1) * m];
        let dst = &mut plan[j * m..(j + 1) * m];
        let mut sum = 0.0;
        for k in 0..m {
            dst[k] = (act.log_p[j] + act.log_q[k] + (f[j] + g[k] - row[k]) / eps).exp();
            sum += dst[k];
        }
        *rj = sum;
    }
}

/// Newton steps on the semi-dual in `f` (with `g` its exact c-transform).
///
/// The Hessian is `−(diag(r) − π diag(1/q) πᵀ)/ε`; the Newton system is
/// solved matrix-free by conjugate gradients and steps are halved until the
/// row residual decreases. Near-permutation plans, where plain iterations
/// contract very slowly, converge in a handful of steps.
fn newton_polish(act: &Active, eps: f64, tol: f64, max_steps: usize, f: &mut [f64], g: &mut [f64]) -> Result<(usize, f64)> {
    let (n, m) = (act.n(), act.m());
    let mut plan = vec![0.0; n * m];
    let mut r = vec![0.0; n];
    act.update_g(f, eps, g);
    row_sums(act, eps, f, g, &mut plan, &mut r);
    let residual_of = |r: &[f64]| -> f64 { r.iter().zip(&act.p).map(|(a, b)| (a - b).abs()).sum() };
    let mut residual = residual_of(&r);
    let mut trial_f = vec![0.0; n];
    let mut trial_g = vec![0.0; m];
    let mut trial_plan = vec![0.0; n * m];
    let mut trial_r = vec![0.0; n];
    for step in 1..=max_steps {
        if residual < tol {
            return Ok((step - 1, residual));
        }
        let rhs: Vec<f64> = (0..n).map(|j| eps * (act.p[j] - r[j])).collect();
        let delta = conjugate_gradient(&rhs, 4 * (n + m) + 10, |v, out| {
            let mut w = vec![0.0; m];
            for j in 0..n {
                let row = &plan[j * m..(j + 1) * m];
                for k in 0..m {
                    w[k] += row[k] * v[j];
                }
            }
            for (k, wk) in w.iter_mut().enumerate() {
                *wk /= act.q[k];
            }
            for j in 0..n {
                let row = &plan[j * m..(j + 1) * m];
                out[j] = r[j] * v[j] - row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for j in 0..n {
                trial_f[j] = f[j] + t * delta[j];
            }
            act.update_g(&trial_f, eps, &mut trial_g);
            row_sums(act, eps, &trial_f, &trial_g, &mut trial_plan, &mut trial_r);
            let res = residual_of(&trial_r);
            if res < residual {
                f.copy_from_slice(&trial_f);
                g.copy_from_slice(&trial_g);
                std::mem::swap(&mut plan, &mut trial_plan);
                std::mem::swap(&mut r, &mut trial_r);
                residual = res;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(BcmError::NonConvergence {
                what: "Sinkhorn",
                iterations: step,
                residual,
            });
        }
    }
    if residual < tol {
        return Ok((max_steps, residual));
    }
    Err(BcmError::NonConvergence {
        what: "Sinkhorn",
        iterations: max_steps,
        residual,
    })
}

/// Conjugate gradients for a symmetric positive semidefinite operator with
/// `rhs` in its range.
fn conjugate_gradient(rhs: &[f64], max_iters: usize, apply: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut d = r.clone();
    let mut ad = vec![0.0; n];
    let norm0: f64 = r.iter().map(|v| v * v).sum();
    let mut rr = norm0;
    for _ in 0..max_iters {
        if rr <= 1e-30 * norm0 || rr == 0.0 {
            break;
        }
        apply(&d, &mut ad);
        let dad: f64 = d.iter().zip(&ad).map(|(a, b)| a * b).sum();
        if !(dad > 0.0) {
            break;
        }
        let alpha = rr / dad;
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * ad[i];
        }
        let rr_next: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_next / rr;
        for i in 0..n {
            d[i] = r[i] + beta * d[i];
        }
        rr = rr_next;
    }
    x
}

/// Stabilized scaling iterations at a fixed `ε`, starting from exact
/// updates of the given potentials (which count as the first iteration).
/// Returns the iterations used and the final row residual; the potentials
/// are updated in place.
#[allow(clippy::too_many_arguments)]
fn run(
    act: &Active,
    eps: f64,
    tol: f64,
    max_iters: usize,
    stop: Stop,
    f: &mut [f64],
    g: &mut [f64],
    cold: bool,
) -> Result<(usize, f64)> {
    let (n, m) = (act.n(), act.m());
    if cold {
        g.fill(0.0);
    }
    act.update_f(g, eps, f);
    act.update_g(f, eps, g);
    let mut kernel = vec![0.0; n * m];
    act.kernel(f, g, eps, &mut kernel);
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; m];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; m];
    let mut qb = vec![0.0; m];
    let mut pa = vec![0.0; n];
    let mut iterations = 1usize;

    let residual = loop {
        for k in 0..m {
            qb[k] = act.q[k] * b[k];
        }
        for j in 0..n {
            let row = &kernel[j * m..(j + 1) * m];
            s[j] = row.iter().zip(&qb).map(|(x, y)| x * y).sum();
        }
        let row_res: f64 = (0..n).map(|j| act.p[j] * (a[j] * s[j] - 1.0).abs()).sum();
        let row_res = if row_res.is_finite() { row_res } else { f64::INFINITY };
        match stop {
            Stop::Converge if row_res < tol => break row_res,
            Stop::After(k) if iterations >= k => break row_res,
            _ => {}
        }
        if let Stop::Converge = stop {
            if iterations >= max_iters {
                for j in 0..n {
                    f[j] += eps * a[j].ln();
                }
                for k in 0..m {
                    g[k] += eps * b[k].ln();
                }
                return Err(BcmError::NonConvergence {
                    what: "Sinkhorn",
                    iterations,
                    residual: row_res,
                });
            }
        }
        iterations += 1;

        for j in 0..n {
            a[j] = 1.0 / s[j];
        }
        if !all_scalings_ok(&a) {
            for k in 0..m {
                g[k] += eps * b[k].ln();
                b[k] = 1.0;
            }
            act.update_f(g, eps, f);
            a.fill(1.0);
            act.kernel(f, g, eps, &mut kernel);
        }

        for j in 0..n {
            pa[j] = act.p[j] * a[j];
        }
        t.fill(0.0);
        for j in 0..n {
            let row = &kernel[j * m..(j + 1) * m];
            let w = pa[j];
            for (tk, x) in t.iter_mut().zip(row) {
                *tk += x * w;
            }
        }
        for k in 0..m {
            b[k] = 1.0 / t[k];
        }
        if !all_scalings_ok(&b) {
            for j in 0..n {
                f[j] += eps * a[j].ln();
                a[j] = 1.0;
            }
            act.update_g(f, eps, g);
            b.fill(1.0);
            act.kernel(f, g, eps, &mut kernel);
        } else if needs_absorb(&a) || needs_absorb(&b) {
            for j in 0..n {
                f[j] += eps * a[j].ln();
                a[j] = 1.0;
            }
            for k in 0..m {
                g[k] += eps * b[k].ln();
                b[k] = 1.0;
            }
            act.kernel(f, g, eps, &mut kernel);
        }
    };

    for j in 0..n {
        f[j] += eps * a[j].ln();
    }
    for k in 0..m {
        g[k] += eps * b[k].ln();
    }
    Ok((iterations, residual))
}

/// Gauge-fixes the potentials, fills in zero-weight points and builds the plan.
#[allow(clippy::too_many_arguments)]
fn finish(
    p: &[f64],
    q: &[f64],
    cost: &DMatrix<f64>,
    opts: &SinkhornOptions,
    mut f: Vec<f64>,
    mut g: Vec<f64>,
    iterations: usize,
    residual: f64,
) -> Result<SinkhornSolution> {
    let eps = opts.epsilon;
    let (n, m) = (p.len(), q.len());
    let pf: f64 = (0..n).filter(|&j| p[j] > 0.0).map(|j| p[j] * f[j]).sum();
    let qg: f64 = (0..m).filter(|&k| q[k] > 0.0).map(|k| q[k] * g[k]).sum();
    let kappa = 0.5 * (pf - qg);
    for j in 0..n {
        if p[j] > 0.0 {
            f[j] -= kappa;
        }
    }
    for k in 0..m {
        if q[k] > 0.0 {
            g[k] += kappa;
        }
    }
    for j in 0..n {
        if p[j] == 0.0 {
            f[j] = -eps
                * log_sum_exp(
                    (0..m)
                        .filter(|&k| q[k] > 0.0)
                        .map(|k| q[k].ln() + (g[k] - cost[(j, k)]) / eps),
                );
        }
    }
    for k in 0..m {
        if q[k] == 0.0 {
            g[k] = -eps
                * log_sum_exp(
                    (0..n)
                        .filter(|&j| p[j] > 0.0)
                        .map(|j| p[j].ln() + (f[j] - cost[(j, k)]) / eps),
                );
        }
    }
    let matrix = DMatrix::from_fn(n, m, |j, k| {
        if p[j] > 0.0 && q[k] > 0.0 {
            p[j] * q[k] * ((f[j] + g[k] - cost[(j, k)]) / eps).exp()
        } else {
            0.0
        }
    });
    let plan = TransportPlan {
        matrix,
        source_weights: p.to_vec(),
        target_weights: q.to_vec(),
    };
    let residual = residual.max(plan.col_residual());
    Ok(SinkhornSolution {
        potentials: DualPotentials {
            f,
            g,
            epsilon: eps,
            cost: opts.cost,
        },
        plan,
        cost: cost.clone(),
        iterations,
        residual,
    })
}

/// The entropic map estimate at `x`: a softmax-weighted average of the
/// target points with logits `(g_k − c(x, Y_k))/ε + log q_k`, where `c` is the
/// cost convention the potentials were solved with.
pub fn entropic_map(x: &[f64], potentials: &DualPotentials, targets: &PointCloud) -> Result<Vec<f64>> {
    if x.len() != targets.dim() {
        return Err(BcmError::DimensionMismatch(format!(
            "point in R^{} against targets in R^{}",
            x.len(),
            targets.dim()
        )));
    }
    if potentials.g.len() != targets.len() {
        return Err(BcmError::DimensionMismatch(
            "potentials were not computed against these targets".into(),
        ));
    }
    let y = targets.points();
    let q = targets.weights();
    let factor = potentials.cost.factor();
    let eps = potentials.epsilon;
    let logits: Vec<f64> = (0..targets.len())
        .map(|k| {
            if q[k] == 0.0 {
                return f64::NEG_INFINITY;
            }
            let dist: f64 = x
                .iter()
                .enumerate()
                .map(|(t, xt)| (xt - y[(k, t)]).powi(2))
                .sum();
            q[k].ln() + (potentials.g[k] - factor * dist) / eps
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; x.len()];
    let mut total = 0.0;
    for (k, l) in logits.iter().enumerate() {
        let w = (l - max).exp();
        if w == 0.0 {
            continue;
        }
        total += w;
        for (t, o) in out.iter_mut().enumerate() {
            *o += w * y[(k, t)];
        }
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

/// [`entropic_map`] applied to every row of `xs`.
pub fn entropic_map_rows(xs: &DMatrix<f64>, potentials: &DualPotentials, targets: &PointCloud) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(xs.nrows(), xs.ncols());
    for i in 0..xs.nrows() {
        let x: Vec<f64> = xs.row(i).iter().copied().collect();
        let y = entropic_map(&x, potentials, targets)?;
        for (t, v) in y.into_iter().enumerate() {
            out[(i, t)] = v;
        }
    }
    Ok(out)
}

/// `diag(1/p) π Y`: row `j` is the conditional mean of the targets given
/// source point `j`. Rows with zero source weight and zero plan mass map to
/// the target mean.
pub fn barycentric_projection(
    plan: &TransportPlan,
    source_weights: &[f64],
    targets: &PointCloud,
) -> Result<DMatrix<f64>> {
    let pi = &plan.matrix;
    if pi.nrows() != source_weights.len() || pi.ncols() != targets.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "plan {}x{} against {} source weights and {} targets",
            pi.nrows(),
            pi.ncols(),
            source_weights.len(),
            targets.len()
        )));
    }
    let y = targets.points();
    let d = targets.dim();
    let target_mean = targets.mean();
    let mut out = DMatrix::zeros(pi.nrows(), d);
    for j in 0..pi.nrows() {
        let row_mass = pi.row(j).sum();
        let pj = source_weights[j];
        if pj <= 0.0 {
            if row_mass > 0.0 {
                return Err(BcmError::InvalidMeasure(format!(
                    "source point {j} has zero weight but plan mass {row_mass:e}"
                )));
            }
            for t in 0..d {
                out[(j, t)] = target_mean[t];
            }
            continue;
        }
        for k in 0..pi.ncols() {
            let w = pi[(j, k)];
            if w != 0.0 {
                for t in 0..d {
                    out[(j, t)] += w * y[(k, t)];
                }
            }
        }
        for t in 0..d {
            out[(j, t)] /= pj;
        }
    }
    Ok(out)
}

/// `⟨π, M⟩`, the plan cost used as a W2² surrogate.
pub fn entropic_cost(plan: &TransportPlan, cost: &DMatrix<f64>) -> Result<f64> {
    if plan.matrix.shape() != cost.shape() {
        return Err(BcmError::DimensionMismatch(format!(
            "plan {:?} against cost {:?}",
            plan.matrix.shape(),
            cost.shape()
        )));
    }
    Ok(plan.matrix.component_mul(cost).sum())
}
