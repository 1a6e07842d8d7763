//! End-to-end coordinate estimation from samples.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bcm::{gram_from_displacements, solve_simplex_qp, GramMatrix, QpOptions, QpSolution};
use crate::error::{BcmError, Result};
use crate::ot::{barycentric_projection, entropic_map_rows, sinkhorn, CostScale, PointCloud, SinkhornOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub sinkhorn: SinkhornOptions,
    pub qp: QpOptions,
}

impl EstimateOptions {
    pub fn new(epsilon: f64) -> Self {
        EstimateOptions {
            sinkhorn: SinkhornOptions::new(epsilon),
            qp: QpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub gram: GramMatrix,
    pub solution: QpSolution,
    /// Estimated map images, one `n × d` matrix per reference.
    pub maps: Vec<DMatrix<f64>>,
    /// Sinkhorn iterations per reference.
    pub sinkhorn_iterations: Vec<usize>,
}

fn check_refs(query_dim: usize, refs: &[PointCloud]) -> Result<()> {
    if refs.is_empty() {
        return Err(BcmError::InvalidInput("no reference measures".into()));
    }
    if let Some(r) = refs.iter().find(|r| r.dim() != query_dim) {
        return Err(BcmError::DimensionMismatch(format!(
            "reference in R^{} against query in R^{query_dim}",
            r.dim()
        )));
    }
    Ok(())
}

fn finish(
    points: &DMatrix<f64>,
    weights: &[f64],
    solved: Vec<Result<(DMatrix<f64>, usize)>>,
    qp: &QpOptions,
) -> Result<Estimate> {
    let (maps, sinkhorn_iterations): (Vec<_>, Vec<_>) = solved.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let gram = gram_from_displacements(points, weights, &maps)?;
    let solution = solve_simplex_qp(&gram, None, qp)?;
    Ok(Estimate {
        gram,
        solution,
        maps,
        sinkhorn_iterations,
    })
}

/// Estimates coordinates of a weighted point cloud: entropic plans with the
/// unhalved squared cost, barycentric projections as maps, and a Gram matrix
/// weighted by the query weights. References are solved in parallel.
pub fn estimate_point_clouds(query: &PointCloud, refs: &[PointCloud], opts: &EstimateOptions) -> Result<Estimate> {
    check_refs(query.dim(), refs)?;
    let sk = opts.sinkhorn.with_cost(CostScale::Full);
    let solved: Vec<Result<(DMatrix<f64>, usize)>> = refs
        .par_iter()
        .map(|r| {
            let sol = sinkhorn(query, r, &sk)?;
            Ok((barycentric_projection(&sol.plan, query.weights(), r)?, sol.iterations))
        })
        .collect();
    finish(query.points(), query.weights(), solved, &opts.qp)
}

/// Estimates coordinates from i.i.d. samples: potentials are fitted on
/// `fit` with the halved squared cost, the entropic map is evaluated on the
/// held-out rows of `eval`, and the Gram matrix averages over them uniformly.
pub fn estimate_from_samples(
    fit: &PointCloud,
    eval: &DMatrix<f64>,
    refs: &[PointCloud],
    opts: &EstimateOptions,
) -> Result<Estimate> {
    check_refs(fit.dim(), refs)?;
    if eval.nrows() == 0 || eval.ncols() != fit.dim() {
        return Err(BcmError::DimensionMismatch(format!(
            "held-out points {}x{} against dimension {}",
            eval.nrows(),
            eval.ncols(),
            fit.dim()
        )));
    }
    let sk = opts.sinkhorn.with_cost(CostScale::Half);
    let solved: Vec<Result<(DMatrix<f64>, usize)>> = refs
        .par_iter()
        .map(|r| {
            let sol = sinkhorn(fit, r, &sk)?;
            Ok((entropic_map_rows(eval, &sol.potentials, r)?, sol.iterations))
        })
        .collect();
    let weights = vec![1.0 / eval.nrows() as f64; eval.nrows()];
    finish(eval, &weights, solved, &opts.qp)
}

/// Coordinates from known maps evaluated at weighted points.
pub fn estimate_with_maps(
    points: &DMatrix<f64>,
    weights: &[f64],
    maps: Vec<DMatrix<f64>>,
    qp: &QpOptions,
) -> Result<Estimate> {
    let n = maps.len();
    finish(points, weights, maps.into_iter().map(|m| Ok((m, 0))).collect(), qp).map(|mut e| {
        e.sinkhorn_iterations = vec![0; n];
        e
    })
}
