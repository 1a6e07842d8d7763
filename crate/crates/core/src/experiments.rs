//! Inpainting, convergence and classification studies.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bcm::{gram_gaussian, solve_simplex_qp, Coordinates, QpOptions, QpSolution};
use crate::classify::{Classifier, LabeledCloud, Method};
use crate::error::{BcmError, Result};
use crate::estimate::{estimate_from_samples, estimate_point_clouds, EstimateOptions};
use crate::gaussian::{gaussian_barycenter, stream_rng, uniform_simplex, wishart_shifted};
use crate::measures::{
    corrupt_noise, corrupt_noise_expected, corrupt_occlude, image_to_measure, linear_recovery_with, RawImage, Rect,
    SyntheticDigits,
};
use crate::ot::{PointCloud, SinkhornOptions};
use crate::spd::SpdMatrix;
use crate::synthesis::{
    grid_entropic_cost, ibp_barycenter, quantile_barycenter_1d, GridKernel, GridMeasure, IbpOptions, Sorted1DSample,
};

fn qp_lambda(result: Result<QpSolution>) -> Result<Coordinates> {
    match result {
        Ok(sol) => Ok(sol.lambda),
        Err(BcmError::QpNonConvergence { best, .. }) => Ok(best.lambda),
        Err(e) => Err(e),
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// `(1 − α)μ + αζ` with white noise `ζ`.
    Noise { alpha: f64 },
    /// Central square of the given side removed.
    Occlude { size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Synthetic(SyntheticDigits),
    /// Images of one digit class, sampled without replacement per run.
    Images(Vec<RawImage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintConfig {
    pub source: ImageSource,
    pub corruption: Corruption,
    pub p: usize,
    pub runs: usize,
    pub seed: u64,
    /// Regularization for coordinate estimation.
    pub epsilon: f64,
    pub ibp: IbpOptions,
    /// Regularization of the scoring cost.
    pub score_epsilon: f64,
    /// Use the query image itself as the first reference.
    pub query_in_refs: bool,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            source: ImageSource::Synthetic(SyntheticDigits::default()),
            corruption: Corruption::Occlude { size: 8 },
            p: 10,
            runs: 50,
            seed: 0,
            epsilon: 10.0,
            ibp: IbpOptions::new(1.0).with_kernel(GridKernel::Separable),
            score_epsilon: 0.1,
            query_in_refs: false,
        }
    }
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.runs == 0 {
            return Err(BcmError::Config("p and runs must be positive".into()));
        }
        if !(self.epsilon > 0.0) || !(self.score_epsilon > 0.0) || !(self.ibp.epsilon > 0.0) {
            return Err(BcmError::Config("regularization parameters must be positive".into()));
        }
        match self.corruption {
            Corruption::Noise { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(BcmError::Config("noise level must lie in [0, 1]".into()))
            }
            Corruption::Occlude { size: 0 } => return Err(BcmError::Config("occlusion size must be positive".into())),
            _ => {}
        }
        if let ImageSource::Images(images) = &self.source {
            let needed = if self.query_in_refs { self.p } else { self.p + 1 };
            if images.len() < needed {
                return Err(BcmError::Config(format!(
                    "{} images available, {needed} needed per run",
                    images.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRun {
    pub run: usize,
    pub original: GridMeasure,
    pub corrupted: GridMeasure,
    pub bcm: GridMeasure,
    pub linear: GridMeasure,
    pub lambda_bcm: Coordinates,
    pub lambda_linear: Coordinates,
    pub w2_bcm: f64,
    pub w2_linear: f64,
}

/// Query first, then the references.
fn run_images(config: &InpaintConfig, run: usize) -> Vec<RawImage> {
    let count = if config.query_in_refs { config.p } else { config.p + 1 };
    let mut rng = stream_rng(config.seed, run as u64);
    let mut images = match &config.source {
        ImageSource::Synthetic(gen) => (0..count).map(|_| gen.four(&mut rng)).collect(),
        ImageSource::Images(all) => sample(&mut rng, all.len(), count)
            .into_iter()
            .map(|i| all[i].clone())
            .collect::<Vec<_>>(),
    };
    if config.query_in_refs {
        images.insert(0, images[0].clone());
    }
    images
}

fn corrupt_pair(config: &InpaintConfig, run: usize, query: &GridMeasure, refs: &[GridMeasure]) -> Result<(GridMeasure, Vec<GridMeasure>)> {
    match config.corruption {
        Corruption::Noise { alpha } => {
            let noise_seed = stream_rng(config.seed, (1 << 32) | run as u64).random::<u64>();
            Ok((
                corrupt_noise(query, alpha, noise_seed)?,
                refs.iter().map(|r| corrupt_noise_expected(r, alpha)).collect::<Result<_>>()?,
            ))
        }
        Corruption::Occlude { size } => {
            let block = Rect::central(query.height(), query.width(), size);
            Ok((
                corrupt_occlude(query, block)?,
                refs.iter().map(|r| corrupt_occlude(r, block)).collect::<Result<_>>()?,
            ))
        }
    }
}

/// One corrupted query: coordinates from the corrupted measures, the
/// barycenter rebuilt from the clean references, and the linear baseline.
pub fn inpaint_run(config: &InpaintConfig, run: usize) -> Result<InpaintRun> {
    let images = run_images(config, run);
    let measures: Vec<GridMeasure> = images.iter().map(image_to_measure).collect::<Result<_>>()?;
    let (original, refs) = (measures[0].clone(), &measures[1..]);
    let (corrupted, corrupted_refs) = corrupt_pair(config, run, &original, refs)?;

    let ref_clouds: Vec<PointCloud> = corrupted_refs.iter().map(GridMeasure::to_point_cloud).collect();
    let opts = EstimateOptions::new(config.epsilon);
    let est = estimate_point_clouds(&corrupted.to_point_cloud(), &ref_clouds, &opts)?;
    let lambda_bcm = est.solution.lambda;
    let bcm = ibp_barycenter(&lambda_bcm, refs, &config.ibp)?.barycenter;

    let lin = linear_recovery_with(&corrupted, &corrupted_refs, refs)?;

    let score = SinkhornOptions::new(config.score_epsilon);
    Ok(InpaintRun {
        run,
        w2_bcm: grid_entropic_cost(&original, &bcm, &score)?,
        w2_linear: grid_entropic_cost(&original, &lin.reconstruction, &score)?,
        original,
        corrupted,
        bcm,
        linear: lin.reconstruction,
        lambda_bcm,
        lambda_linear: lin.solution.lambda,
    })
}

/// Runs in parallel, returned in run order.
pub fn run_inpaint_experiment(config: &InpaintConfig) -> Result<Vec<InpaintRun>> {
    config.validate()?;
    (0..config.runs)
        .into_par_iter()
        .map(|r| inpaint_run(config, r))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub d: usize,
    pub p: usize,
    pub sample_sizes: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
    /// `ε_n = epsilon0 · (n / 100)^(−exponent)`.
    pub epsilon0: f64,
    pub exponent: f64,
    /// Skip sampling and evaluate the closed form.
    pub exact: bool,
    pub sinkhorn_max_iters: usize,
    pub qp: QpOptions,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            d: 2,
            p: 3,
            sample_sizes: vec![100, 400, 1600],
            seeds: 10,
            seed: 0,
            epsilon0: 0.5,
            exponent: 0.25,
            exact: false,
            sinkhorn_max_iters: 20_000,
            qp: QpOptions::default(),
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 || self.seeds == 0 {
            return Err(BcmError::Config("d, p and seeds must be positive".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(BcmError::Config("sample sizes must be nonempty and positive".into()));
        }
        if !(self.epsilon0 > 0.0) || !self.exponent.is_finite() {
            return Err(BcmError::Config("epsilon schedule must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, n: usize) -> f64 {
        self.epsilon0 * (n as f64 / 100.0).powf(-self.exponent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub seed: usize,
    pub epsilon: f64,
    pub max_entry_err: f64,
    pub lambda_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    pub n: usize,
    pub epsilon: f64,
    pub median_entry_err: f64,
    pub median_lambda_err: f64,
}

/// Planted Gaussian family shared by every seed and sample size.
pub struct GaussianFamily {
    pub refs: Vec<SpdMatrix>,
    pub lambda: Coordinates,
    pub query: SpdMatrix,
    pub gram: DMatrix<f64>,
}

pub fn gaussian_family(config: &ConvergenceConfig) -> Result<GaussianFamily> {
    let mut rng = stream_rng(config.seed, 0);
    let lambda = uniform_simplex(config.p, &mut rng);
    let refs: Vec<SpdMatrix> = (0..config.p).map(|_| wishart_shifted(config.d, &mut rng)).collect();
    let query = gaussian_barycenter(&lambda, &refs, 1e-12, 10_000)?.cov;
    let gram = gram_gaussian(&query, &refs)?.into_inner();
    Ok(GaussianFamily {
        refs,
        lambda,
        query,
        gram,
    })
}

fn gaussian_samples<R: Rng + ?Sized>(s: &SpdMatrix, n: usize, rng: &mut R) -> DMatrix<f64> {
    let root = crate::spd::sqrt_spd(s);
    let z = DMatrix::<f64>::from_fn(n, s.dim(), |_, _| StandardNormal.sample(rng));
    z * root.as_matrix()
}

fn convergence_cell(config: &ConvergenceConfig, fam: &GaussianFamily, j: usize, seed: usize) -> Result<ConvergenceRow> {
    let n = config.sample_sizes[j];
    let epsilon = config.epsilon_at(n);
    let (gram, lambda) = if config.exact {
        let a = gram_gaussian(&fam.query, &fam.refs)?;
        let lambda = qp_lambda(solve_simplex_qp(&a, None, &config.qp))?;
        (a.into_inner(), lambda)
    } else {
        let mut rng = stream_rng(config.seed, ((seed as u64 + 1) << 16) | j as u64);
        let fit = PointCloud::uniform(gaussian_samples(&fam.query, n, &mut rng))?;
        let eval = gaussian_samples(&fam.query, n, &mut rng);
        let refs: Vec<PointCloud> = fam
            .refs
            .iter()
            .map(|s| PointCloud::uniform(gaussian_samples(s, n, &mut rng)))
            .collect::<Result<_>>()?;
        let mut opts = EstimateOptions::new(epsilon);
        opts.sinkhorn = opts.sinkhorn.with_max_iters(config.sinkhorn_max_iters);
        opts.qp = config.qp;
        let est = estimate_from_samples(&fit, &eval, &refs, &opts)?;
        let lambda = est.solution.lambda.clone();
        (est.gram.into_inner(), lambda)
    };
    let max_entry_err = (&gram - &fam.gram).abs().max();
    let lambda_err = lambda
        .as_slice()
        .iter()
        .zip(fam.lambda.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(ConvergenceRow {
        n,
        seed,
        epsilon,
        max_entry_err,
        lambda_err,
    })
}

/// Entrywise Gram error against the closed form, per sample size and seed.
pub fn run_convergence_experiment(config: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    config.validate()?;
    let fam = gaussian_family(config)?;
    let cells: Vec<(usize, usize)> = (0..config.sample_sizes.len())
        .flat_map(|j| (0..config.seeds).map(move |s| (j, s)))
        .collect();
    cells
        .into_par_iter()
        .map(|(j, s)| convergence_cell(config, &fam, j, s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Medians over seeds, in sample-size order.
pub fn summarize_convergence(config: &ConvergenceConfig, rows: &[ConvergenceRow]) -> Vec<ConvergenceSummary> {
    config
        .sample_sizes
        .iter()
        .map(|&n| {
            let mut e: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.max_entry_err).collect();
            let mut l: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.lambda_err).collect();
            ConvergenceSummary {
                n,
                epsilon: config.epsilon_at(n),
                median_entry_err: median(&mut e),
                median_lambda_err: median(&mut l),
            }
        })
        .collect()
}

/// Where test queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// Documents not used as references.
    HeldOut,
    /// The references themselves.
    References,
    /// Random barycenters of each topic's references; needs one-dimensional
    /// uniform clouds of equal size.
    Barycentric,
}

impl QuerySource {
    pub fn name(self) -> &'static str {
        match self {
            QuerySource::HeldOut => "held-out",
            QuerySource::References => "references",
            QuerySource::Barycentric => "barycentric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [QuerySource::HeldOut, QuerySource::References, QuerySource::Barycentric]
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| BcmError::Config(format!("unknown query source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyConfig {
    pub ks: Vec<usize>,
    pub repeats: usize,
    /// Test queries per topic; ignored when testing on the references.
    pub test_per_topic: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub methods: Vec<Method>,
    pub queries: QuerySource,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            ks: vec![1, 3, 5],
            repeats: 5,
            test_per_topic: 10,
            seed: 0,
            epsilon: 1.0,
            methods: Method::ALL.to_vec(),
            queries: QuerySource::HeldOut,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub method: Method,
    pub k: usize,
    pub accuracy: f64,
    pub tested: usize,
}

fn group_by_topic(docs: &[LabeledCloud]) -> BTreeMap<&str, Vec<&LabeledCloud>> {
    let mut map: BTreeMap<&str, Vec<&LabeledCloud>> = BTreeMap::new();
    for d in docs {
        map.entry(d.label.as_str()).or_default().push(d);
    }
    map
}

fn sorted_1d(c: &PointCloud) -> Result<Sorted1DSample> {
    let n = c.len() as f64;
    if c.dim() != 1 || c.weights().iter().any(|w| (w * n - 1.0).abs() > 1e-9) {
        return Err(BcmError::Config("barycentric queries need one-dimensional uniform clouds".into()));
    }
    Sorted1DSample::from_unsorted(c.points().column(0).iter().copied().collect())
}

fn barycentric_queries<R: Rng + ?Sized>(
    topic: &str,
    refs: &[&LabeledCloud],
    count: usize,
    rng: &mut R,
) -> Result<Vec<LabeledCloud>> {
    let samples = refs.iter().map(|r| sorted_1d(&r.cloud)).collect::<Result<Vec<_>>>()?;
    (0..count)
        .map(|_| {
            let lambda = uniform_simplex(samples.len(), rng);
            Ok(LabeledCloud {
                cloud: quantile_barycenter_1d(&lambda, &samples)?.to_point_cloud(),
                label: topic.to_string(),
            })
        })
        .collect()
}

/// Per repeat, each topic is shuffled and its references are the first `k`
/// documents. Held-out queries follow the largest `k`, so every `k` is
/// scored on the same documents.
pub fn run_classify_experiment(config: &ClassifyConfig, docs: &[LabeledCloud]) -> Result<Vec<AccuracyRow>> {
    if config.ks.is_empty() || config.ks.contains(&0) || config.repeats == 0 || config.methods.is_empty() {
        return Err(BcmError::Config("ks, repeats and methods must be nonempty and positive".into()));
    }
    let topics = group_by_topic(docs);
    if topics.len() < 2 {
        return Err(BcmError::Config("at least two topics are needed".into()));
    }
    let k_max = *config.ks.iter().max().expect("nonempty");
    let need = match config.queries {
        QuerySource::HeldOut => k_max + config.test_per_topic,
        _ => k_max,
    };
    if let Some((t, d)) = topics.iter().find(|(_, d)| d.len() < need) {
        return Err(BcmError::Config(format!("topic `{t}` has {} documents, {need} needed", d.len())));
    }
    if config.queries != QuerySource::References && config.test_per_topic == 0 {
        return Err(BcmError::Config("test_per_topic must be positive".into()));
    }
    let classifier = Classifier::new(config.epsilon)?;
    let mut correct: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for rep in 0..config.repeats {
        let mut rng = stream_rng(config.seed, rep as u64);
        let shuffled: Vec<(&str, Vec<&LabeledCloud>)> = topics
            .iter()
            .map(|(t, d)| {
                let order = sample(&mut rng, d.len(), d.len());
                (*t, order.into_iter().map(|i| d[i]).collect())
            })
            .collect();
        for &k in &config.ks {
            let refs: Vec<LabeledCloud> = shuffled.iter().flat_map(|(_, d)| d[..k].iter().map(|&c| c.clone())).collect();
            let tests: Vec<LabeledCloud> = match config.queries {
                QuerySource::References => refs.clone(),
                QuerySource::HeldOut => shuffled
                    .iter()
                    .flat_map(|(_, d)| d[k_max..k_max + config.test_per_topic].iter().map(|&c| c.clone()))
                    .collect(),
                QuerySource::Barycentric => {
                    let mut rng = stream_rng(config.seed, (1 << 32) | ((rep as u64) << 16) | k as u64);
                    let mut out = Vec::new();
                    for (t, d) in &shuffled {
                        out.extend(barycentric_queries(t, &d[..k], config.test_per_topic, &mut rng)?);
                    }
                    out
                }
            };
            for (mi, &method) in config.methods.iter().enumerate() {
                let hits: Vec<Result<bool>> = tests
                    .par_iter()
                    .map(|q| Ok(classifier.classify(&q.cloud, &refs, method)? == q.label))
                    .collect();
                let entry = correct.entry((mi, k)).or_default();
                for h in hits {
                    entry.0 += h? as usize;
                    entry.1 += 1;
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (mi, &method) in config.methods.iter().enumerate() {
        for &k in &config.ks {
            let (hit, total) = correct[&(mi, k)];
            rows.push(AccuracyRow {
                method,
                k,
                accuracy: hit as f64 / total as f64,
                tested: total,
            });
        }
    }
    Ok(rows)
}
