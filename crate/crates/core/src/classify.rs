//! Topic prediction for measures against labeled reference measures.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::DMatrix;
use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bcm::{gram_from_displacements, solve_simplex_qp, QpOptions, QpSolution};
use crate::error::{BcmError, Result};
use crate::ot::{barycentric_projection, entropic_cost, sinkhorn, CostScale, PointCloud, SinkhornOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Topic of the nearest reference.
    NN1,
    /// Topic with the smallest mean distance to the query.
    MinAvgDist,
    /// Topic whose references best reproduce the query as a barycenter.
    MinBaryLoss,
    /// Topic receiving the most coordinate mass when all references are used.
    MaxCoord,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NN1, Method::MinAvgDist, Method::MinBaryLoss, Method::MaxCoord];

    pub fn name(self) -> &'static str {
        match self {
            Method::NN1 => "nn1",
            Method::MinAvgDist => "min-avg-dist",
            Method::MinBaryLoss => "min-bary-loss",
            Method::MaxCoord => "max-coord",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BcmError::Config(format!("unknown method `{s}`")))
    }
}

/// Stable content hash of a point cloud.
pub fn cloud_hash(c: &PointCloud) -> u64 {
    let mut h = DefaultHasher::new();
    c.points().shape().hash(&mut h);
    for v in c.points().iter().chain(c.weights()) {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Plan cost and barycentric projection from one query to one reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTransport {
    pub cost: f64,
    pub map: DMatrix<f64>,
}

type PairKey = (u64, u64, u64);

/// Transport results keyed by `(query hash, reference hash, ε)`, shared
/// across predictions and threads.
#[derive(Debug, Default)]
pub struct TransportCache {
    entries: RwLock<HashMap<PairKey, Arc<PairTransport>>>,
}

impl TransportCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        query: &PointCloud,
        query_hash: u64,
        reference: &PointCloud,
        opts: &SinkhornOptions,
    ) -> Result<Arc<PairTransport>> {
        let key = (query_hash, cloud_hash(reference), opts.epsilon.to_bits());
        if let Some(hit) = self.entries.read().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let sol = sinkhorn(query, reference, opts)?;
        let pair = Arc::new(PairTransport {
            cost: entropic_cost(&sol.plan, &sol.cost)?,
            map: barycentric_projection(&sol.plan, query.weights(), reference)?,
        });
        // the result is a pure function of the key, so whichever writer lands first is kept
        Ok(Arc::clone(self.entries.write().entry(key).or_insert(pair)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    /// Per-topic score: distance or loss for the minimizing methods,
    /// coordinate mass for [`Method::MaxCoord`].
    pub scores: BTreeMap<String, f64>,
}

pub struct Classifier {
    sinkhorn: SinkhornOptions,
    qp: QpOptions,
    cache: TransportCache,
}

impl Classifier {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(BcmError::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Classifier {
            sinkhorn: SinkhornOptions::new(epsilon).with_cost(CostScale::Full),
            qp: QpOptions::default(),
            cache: TransportCache::new(),
        })
    }

    pub fn with_sinkhorn(mut self, opts: SinkhornOptions) -> Self {
        self.sinkhorn = opts.with_cost(CostScale::Full);
        self
    }

    pub fn cache(&self) -> &TransportCache {
        &self.cache
    }

    pub fn epsilon(&self) -> f64 {
        self.sinkhorn.epsilon
    }

    fn transports(&self, query: &PointCloud, refs: &[LabeledCloud]) -> Result<Vec<Arc<PairTransport>>> {
        let qh = cloud_hash(query);
        refs.par_iter()
            .map(|r| self.cache.get_or_compute(query, qh, &r.cloud, &self.sinkhorn))
            .collect()
    }

    fn coordinates(&self, query: &PointCloud, pairs: &[&PairTransport]) -> Result<QpSolution> {
        let maps: Vec<DMatrix<f64>> = pairs.iter().map(|p| p.map.clone()).collect();
        let gram = gram_from_displacements(query.points(), query.weights(), &maps)?;
        match solve_simplex_qp(&gram, None, &self.qp) {
            Ok(sol) => Ok(sol),
            Err(BcmError::QpNonConvergence { best, .. }) => Ok(*best),
            Err(e) => Err(e),
        }
    }

    pub fn predict(&self, query: &PointCloud, refs: &[LabeledCloud], method: Method) -> Result<Prediction> {
        if refs.is_empty() {
            return Err(BcmError::InvalidInput("no reference measures".into()));
        }
        let pairs = self.transports(query, refs)?;
        let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in refs.iter().enumerate() {
            by_topic.entry(r.label.as_str()).or_default().push(i);
        }
        let mut scores = BTreeMap::new();
        match method {
            Method::NN1 => {
                for (topic, idx) in &by_topic {
                    let best = idx.iter().map(|&i| pairs[i].cost).fold(f64::INFINITY, f64::min);
                    scores.insert(topic.to_string(), best);
                }
            }
            Method::MinAvgDist => {
                for (topic, idx) in &by_topic {
                    let mean = idx.iter().map(|&i| pairs[i].cost).sum::<f64>() / idx.len() as f64;
                    scores.insert(topic.to_string(), mean);
                }
            }
            Method::MinBaryLoss => {
                for (topic, idx) in &by_topic {
                    let chosen: Vec<&PairTransport> = idx.iter().map(|&i| pairs[i].as_ref()).collect();
                    scores.insert(topic.to_string(), self.coordinates(query, &chosen)?.value);
                }
            }
            Method::MaxCoord => {
                let all: Vec<&PairTransport> = pairs.iter().map(Arc::as_ref).collect();
                let sol = self.coordinates(query, &all)?;
                for (topic, idx) in &by_topic {
                    let mass = idx.iter().map(|&i| sol.lambda[i]).sum();
                    scores.insert(topic.to_string(), mass);
                }
            }
        }
        // BTreeMap iteration is in topic order, so strict comparisons keep the smallest topic on ties
        let maximize = method == Method::MaxCoord;
        let mut best: Option<(&String, f64)> = None;
        for (topic, &s) in &scores {
            let better = match best {
                None => true,
                Some((_, b)) => (maximize && s > b) || (!maximize && s < b),
            };
            if better {
                best = Some((topic, s));
            }
        }
        let label = best.expect("at least one topic").0.clone();
        Ok(Prediction { label, scores })
    }

    pub fn classify(&self, query: &PointCloud, refs: &[LabeledCloud], method: Method) -> Result<String> {
        Ok(self.predict(query, refs, method)?.label)
    }
}

/// One-shot prediction without a persistent cache.
pub fn classify(query: &PointCloud, refs: &[LabeledCloud], method: Method, epsilon: f64) -> Result<String> {
    Classifier::new(epsilon)?.classify(query, refs, method)
}

/// A base shape on the line, given by its quantiles at `(k + 1/2)/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Gaussian,
    /// Equal mixture of two unit-variance Gaussians at `±separation/2`.
    Bimodal { separation: f64 },
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Gaussian => "gaussian",
            Shape::Bimodal { .. } => "bimodal",
        }
    }

    fn cdf(self, x: f64) -> f64 {
        match self {
            Shape::Gaussian => normal_cdf(x),
            Shape::Bimodal { separation } => 0.5 * (normal_cdf(x - separation / 2.0) + normal_cdf(x + separation / 2.0)),
        }
    }

    /// Standardized quantiles (mean zero, unit variance of the shape).
    pub fn quantiles(self, n: usize) -> Vec<f64> {
        let scale = match self {
            Shape::Gaussian => 1.0,
            Shape::Bimodal { separation } => (1.0 + separation * separation / 4.0).sqrt(),
        };
        (0..n)
            .map(|k| {
                let u = (k as f64 + 0.5) / n as f64;
                let (mut lo, mut hi) = (-50.0, 50.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi) / scale
            })
            .collect()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, Numerical Recipes `erfcc` (relative error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub topics: Vec<(String, Shape)>,
    pub docs_per_topic: usize,
    pub points_per_doc: usize,
    /// Locations are uniform on `[-location_range, location_range]`.
    pub location_range: f64,
    /// Scales are uniform on `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            topics: vec![
                ("a".into(), Shape::Gaussian),
                ("b".into(), Shape::Bimodal { separation: 4.0 }),
            ],
            docs_per_topic: 20,
            points_per_doc: 24,
            location_range: 2.0,
            scale_min: 0.5,
            scale_max: 1.5,
        }
    }
}

/// Location-scale copy `a + b·q` of a shape's quantiles as a 1D cloud.
pub fn location_scale_cloud(quantiles: &[f64], location: f64, scale: f64) -> PointCloud {
    let values: Vec<f64> = quantiles.iter().map(|q| location + scale * q).collect();
    PointCloud::uniform(DMatrix::from_column_slice(values.len(), 1, &values)).expect("nonempty cloud")
}

/// Documents drawn as random location-scale copies of each topic's shape.
/// Each topic is a compatible family in one dimension.
pub fn synthetic_corpus(config: &CorpusConfig, seed: u64) -> Vec<LabeledCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (label, shape) in &config.topics {
        let q = shape.quantiles(config.points_per_doc);
        for _ in 0..config.docs_per_topic {
            let loc = config.location_range * (2.0 * rng.random::<f64>() - 1.0);
            let scale = config.scale_min + (config.scale_max - config.scale_min) * rng.random::<f64>();
            out.push(LabeledCloud {
                cloud: location_scale_cloud(&q, loc, scale),
                label: label.clone(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(values: &[f64], label: &str) -> LabeledCloud {
        LabeledCloud {
            cloud: PointCloud::uniform(DMatrix::from_column_slice(values.len(), 1, values)).unwrap(),
            label: label.into(),
        }
    }

    #[test]
    fn single_topic_for_all_methods() {
        let refs = [labeled(&[0.0, 1.0], "x"), labeled(&[2.0, 3.0], "x")];
        let q = labeled(&[5.0, 9.0], "?").cloud;
        for m in Method::ALL {
            assert_eq!(classify(&q, &refs, m, 1.0).unwrap(), "x");
        }
    }

    #[test]
    fn self_match_wins_nn1() {
        let refs = [labeled(&[0.0, 1.0, 2.0], "b"), labeled(&[5.0, 6.0, 8.0], "a")];
        assert_eq!(classify(&refs[0].cloud, &refs, Method::NN1, 0.1).unwrap(), "b");
        assert_eq!(classify(&refs[1].cloud, &refs, Method::NN1, 0.1).unwrap(), "a");
    }

    #[test]
    fn ties_go_to_smallest_topic() {
        let refs = [labeled(&[1.0], "zeta"), labeled(&[-1.0], "alpha")];
        let q = labeled(&[0.0], "?").cloud;
        assert_eq!(classify(&q, &refs, Method::NN1, 1.0).unwrap(), "alpha");
    }

    #[test]
    fn barycentric_query_goes_to_its_topic() {
        let a = Shape::Gaussian.quantiles(20);
        let b = Shape::Bimodal { separation: 4.0 }.quantiles(20);
        let refs = vec![
            LabeledCloud { cloud: location_scale_cloud(&a, -2.0, 0.6), label: "a".into() },
            LabeledCloud { cloud: location_scale_cloud(&a, 0.0, 1.4), label: "a".into() },
            LabeledCloud { cloud: location_scale_cloud(&a, 2.0, 1.0), label: "a".into() },
            LabeledCloud { cloud: location_scale_cloud(&b, -1.0, 0.5), label: "b".into() },
            LabeledCloud { cloud: location_scale_cloud(&b, 0.5, 0.7), label: "b".into() },
            LabeledCloud { cloud: location_scale_cloud(&b, 1.5, 0.6), label: "b".into() },
        ];
        // λ = (0.2, 0.3, 0.5) over topic a: location 0.6, scale 1.04
        let q = location_scale_cloud(&a, 0.6, 1.04);
        let c = Classifier::new(0.05).unwrap();
        let loss = c.predict(&q, &refs, Method::MinBaryLoss).unwrap();
        assert_eq!(loss.label, "a");
        assert!(loss.scores["a"] < 0.2 * loss.scores["b"], "{:?}", loss.scores);
        let coord = c.predict(&q, &refs, Method::MaxCoord).unwrap();
        assert_eq!(coord.label, "a");
        assert!((coord.scores.values().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cache_reuses_transports() {
        let refs = [labeled(&[0.0, 1.0], "a"), labeled(&[2.0, 3.0], "b")];
        let q = labeled(&[0.5, 1.5], "?").cloud;
        let c = Classifier::new(0.5).unwrap();
        c.classify(&q, &refs, Method::NN1).unwrap();
        assert_eq!(c.cache().len(), 2);
        c.classify(&q, &refs, Method::MaxCoord).unwrap();
        assert_eq!(c.cache().len(), 2);
    }

    #[test]
    fn empty_refs_rejected() {
        let q = labeled(&[0.0], "?").cloud;
        assert!(classify(&q, &[], Method::NN1, 1.0).is_err());
        assert!(Classifier::new(0.0).is_err());
    }

    #[test]
    fn quantiles_standardized() {
        for shape in [Shape::Gaussian, Shape::Bimodal { separation: 3.0 }] {
            let q = shape.quantiles(2000);
            let mean = q.iter().sum::<f64>() / 2000.0;
            let var = q.iter().map(|v| v * v).sum::<f64>() / 2000.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 0.01, "{var}");
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("knn").is_err());
    }
}
