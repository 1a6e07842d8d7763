//! Command implementations behind the `bcm` binary.
//!
//! Every command reads a flat configuration, writes CSV artifacts into the
//! output directory and prefixes each file with a metadata block echoing
//! the resolved parameters. Wall-clock timings go to stderr only, so
//! re-running a command reproduces its files byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::bcm::{minimizer_multiplicity, Coordinates, QpOptions, NULL_SPACE_TOL};
use crate::classify::{synthetic_corpus, CorpusConfig, LabeledCloud, Method};
use crate::config::Config;
use crate::error::{BcmError, Result};
use crate::estimate::{estimate_point_clouds, estimate_with_maps, Estimate, EstimateOptions};
use crate::experiments::{
    run_classify_experiment, run_convergence_experiment, run_inpaint_experiment, summarize_convergence,
    ClassifyConfig, ConvergenceConfig, Corruption, ImageSource, InpaintConfig, QuerySource,
};
use crate::formats::{
    format_coords, format_gram, format_grid, format_point_cloud, format_spd, parse_labels, read_coords, read_grid,
    read_point_cloud, read_spd, write_with_metadata, Metadata,
};
use crate::gaussian::{gaussian_barycenter, run_covariance_experiment, CovarianceConfig};
use crate::measures::{load_mnist_digit, mnist_dir_from_env, SyntheticDigits};
use crate::ot::{PointCloud, SinkhornOptions};
use crate::synthesis::{
    ibp_barycenter, monotone_map_1d, quantile_barycenter_1d, GridKernel, IbpOptions, Sorted1DSample,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    EstimateCoords,
    Covariance,
    Inpaint,
    Synthesize,
    Convergence,
    Classify,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::EstimateCoords,
        Command::Covariance,
        Command::Inpaint,
        Command::Synthesize,
        Command::Convergence,
        Command::Classify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateCoords => "estimate-coords",
            Command::Covariance => "covariance",
            Command::Inpaint => "inpaint",
            Command::Synthesize => "synthesize",
            Command::Convergence => "convergence",
            Command::Classify => "classify",
        }
    }
}

impl FromStr for Command {
    type Err = BcmError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| BcmError::Config(format!("unknown command `{s}`")))
    }
}

/// Options shared by every command. `seed` and `epsilon` override the
/// configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical non-convergence, 1 otherwise.
pub fn exit_code(err: &BcmError) -> i32 {
    match err {
        BcmError::Config(_) => 2,
        e if e.is_non_convergence() => 3,
        _ => 1,
    }
}

/// Runs `command` and returns the files written, in order.
pub fn run(command: Command, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let mut config = match &opts.config {
        Some(path) => Config::from_file(path)?,
        None => Config::empty(std::env::current_dir()?),
    };
    if let Some(seed) = opts.seed {
        config.set("seed", seed);
    }
    if let Some(eps) = opts.epsilon {
        let key = if command == Command::Convergence { "epsilon0" } else { "epsilon" };
        config.set(key, eps);
    }
    let mut out = Output::new(command, &opts.out);
    if matches!(command, Command::EstimateCoords | Command::Synthesize) {
        // deterministic commands accept a seed and echo it
        if let Some(seed) = config.raw("seed") {
            out.param("seed", seed.to_string());
        }
    }
    match command {
        Command::EstimateCoords => estimate_coords(&config, &mut out)?,
        Command::Covariance => covariance(&config, &mut out)?,
        Command::Inpaint => inpaint(&config, &mut out)?,
        Command::Synthesize => synthesize(&config, &mut out)?,
        Command::Convergence => convergence(&config, &mut out)?,
        Command::Classify => classify(&config, &mut out)?,
    }
    Ok(out.written)
}

struct Output {
    dir: PathBuf,
    meta: Metadata,
    written: Vec<PathBuf>,
    started: Instant,
}

impl Output {
    fn new(command: Command, dir: &Path) -> Self {
        let mut meta = Metadata::new();
        meta.push("tool", "bcm").push("version", VERSION).push("command", command.name());
        Output {
            dir: dir.to_path_buf(),
            meta,
            written: Vec::new(),
            started: Instant::now(),
        }
    }

    fn param(&mut self, key: &str, value: impl ToString) {
        self.meta.push(key, value);
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        self.write_with(name, &Metadata::new(), body)
    }

    fn write_with(&mut self, name: &str, extra: &Metadata, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut meta = self.meta.clone();
        for (k, v) in extra.entries() {
            meta.push(k.clone(), v);
        }
        write_with_metadata(&path, &meta, body)?;
        self.written.push(path);
        Ok(())
    }

    fn timing(&self, what: &str) {
        eprintln!("{what}: {:.3}s", self.started.elapsed().as_secs_f64());
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn qp_options(config: &Config, out: &mut Output) -> Result<QpOptions> {
    let d = QpOptions::default();
    let qp = QpOptions {
        tol: config.get("qp_tol", d.tol)?,
        max_iters: config.get("qp_max_iters", d.max_iters)?,
    };
    out.param("qp_tol", qp.tol);
    out.param("qp_max_iters", qp.max_iters);
    Ok(qp)
}

fn sinkhorn_options(config: &Config, out: &mut Output, epsilon: f64) -> Result<SinkhornOptions> {
    let d = SinkhornOptions::new(epsilon);
    let opts = d
        .with_max_iters(config.get("sinkhorn_max_iters", d.max_iters)?)
        .with_tol(config.get("sinkhorn_tol", d.tol)?);
    out.param("epsilon", epsilon);
    out.param("sinkhorn_max_iters", opts.max_iters);
    out.param("sinkhorn_tol", opts.tol);
    Ok(opts)
}

fn ibp_options(config: &Config, out: &mut Output, epsilon_key: &str, default_eps: f64, kernel: GridKernel) -> Result<IbpOptions> {
    let eps: f64 = config.get(epsilon_key, default_eps)?;
    let d = IbpOptions::new(eps);
    let kernel = match config.raw("ibp_kernel") {
        None => kernel,
        Some("dense") => GridKernel::Dense,
        Some("separable") => GridKernel::Separable,
        Some(k) => return Err(BcmError::Config(format!("`ibp_kernel`: unknown kernel `{k}`"))),
    };
    let opts = d
        .with_kernel(kernel)
        .with_tol(config.get("ibp_tol", d.tol)?)
        .with_max_iters(config.get("ibp_max_iters", d.max_iters)?);
    out.param(epsilon_key, opts.epsilon);
    out.param("ibp_kernel", opts.kernel.name());
    out.param("ibp_tol", opts.tol);
    out.param("ibp_max_iters", opts.max_iters);
    Ok(opts)
}

fn paths_param(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn estimate_exact_1d(query: &PointCloud, refs: &[PointCloud], qp: &QpOptions) -> Result<Estimate> {
    let sorted = |c: &PointCloud| -> Result<Sorted1DSample> {
        if c.dim() != 1 {
            return Err(BcmError::DimensionMismatch("exact 1D maps need one-dimensional clouds".into()));
        }
        let n = c.len() as f64;
        if c.weights().iter().any(|w| (w * n - 1.0).abs() > 1e-9) {
            return Err(BcmError::InvalidInput("exact 1D maps need uniform weights".into()));
        }
        Sorted1DSample::from_unsorted(c.points().column(0).iter().copied().collect())
    };
    let q = sorted(query)?;
    let maps = refs
        .iter()
        .map(|r| {
            let targets = monotone_map_1d(&q, &sorted(r)?)?;
            Ok(DMatrix::from_column_slice(targets.len(), 1, &targets))
        })
        .collect::<Result<Vec<_>>>()?;
    let points = DMatrix::from_column_slice(q.len(), 1, q.values());
    estimate_with_maps(&points, &vec![1.0 / q.len() as f64; q.len()], maps, qp)
}

fn estimate_coords(config: &Config, out: &mut Output) -> Result<()> {
    let query_path = config.require_path("query")?;
    let ref_paths = config.get_paths("refs")?;
    if ref_paths.is_empty() {
        return Err(BcmError::Config("`refs` must list at least one file".into()));
    }
    let method: String = config.get("method", "entropic".to_string())?;
    out.param("query", query_path.display());
    out.param("refs", paths_param(&ref_paths));
    out.param("method", &method);
    let qp = qp_options(config, out)?;
    let query = read_point_cloud(&query_path)?;
    let refs = ref_paths.iter().map(read_point_cloud).collect::<Result<Vec<_>>>()?;
    let est = match method.as_str() {
        "entropic" => {
            let eps: f64 = config.require("epsilon")?;
            let sinkhorn = sinkhorn_options(config, out, eps)?;
            config.reject_unused()?;
            estimate_point_clouds(&query, &refs, &EstimateOptions { sinkhorn, qp })?
        }
        "exact1d" => {
            config.reject_unused()?;
            estimate_exact_1d(&query, &refs, &qp)?
        }
        m => return Err(BcmError::Config(format!("`method`: unknown method `{m}`"))),
    };
    let mult = minimizer_multiplicity(&est.gram, NULL_SPACE_TOL);
    out.write("coords.csv", &format_coords(&est.solution.lambda))?;
    out.write("gram.csv", &format_gram(&est.gram))?;
    let mut report = String::new();
    writeln!(report, "key,value").expect("string write");
    writeln!(report, "objective,{}", est.solution.value).expect("string write");
    writeln!(report, "qp_iterations,{}", est.solution.iterations).expect("string write");
    writeln!(report, "qp_converged,{}", est.solution.converged).expect("string write");
    writeln!(report, "multiplicity,{}", mult.label()).expect("string write");
    if let Some(w) = mult.witness() {
        writeln!(report, "witness,{}", join(w.as_slice())).expect("string write");
    }
    writeln!(report, "sinkhorn_iterations,{}", join(&est.sinkhorn_iterations)).expect("string write");
    out.write("report.csv", &report)?;
    out.timing("estimate-coords");
    Ok(())
}

fn covariance(config: &Config, out: &mut Output) -> Result<()> {
    let d = CovarianceConfig::default();
    let cfg = CovarianceConfig {
        p: config.get("p", d.p)?,
        d: config.get("d", d.d)?,
        sample_sizes: config.get_list("sample_sizes", d.sample_sizes)?,
        trials: config.get("trials", d.trials)?,
        seed: config.get("seed", d.seed)?,
        barycenter_tol: config.get("barycenter_tol", d.barycenter_tol)?,
        barycenter_max_iters: config.get("barycenter_max_iters", d.barycenter_max_iters)?,
        qp: QpOptions::default(),
    };
    for (k, v) in [
        ("p", cfg.p.to_string()),
        ("d", cfg.d.to_string()),
        ("sample_sizes", join(&cfg.sample_sizes)),
        ("trials", cfg.trials.to_string()),
        ("seed", cfg.seed.to_string()),
        ("barycenter_tol", cfg.barycenter_tol.to_string()),
        ("barycenter_max_iters", cfg.barycenter_max_iters.to_string()),
    ] {
        out.param(k, v);
    }
    let cfg = CovarianceConfig {
        qp: qp_options(config, out)?,
        ..cfg
    };
    config.reject_unused()?;
    cfg.validate()?;
    let rows = run_covariance_experiment(&cfg)?;
    let mut body = String::from("n,trial,w2_bcm,w2_empirical,lambda_err\n");
    for r in &rows {
        writeln!(body, "{},{},{},{},{}", r.n, r.trial, r.w2_bcm, r.w2_empirical, r.lambda_err).expect("string write");
    }
    out.write("covariance.csv", &body)?;
    let mut summary = String::from("n,bcm_q25,bcm_median,bcm_q75,empirical_q25,empirical_median,empirical_q75\n");
    for &n in &cfg.sample_sizes {
        let mut b: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.w2_bcm).collect();
        let mut e: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.w2_empirical).collect();
        let (b, e) = (quartiles(&mut b), quartiles(&mut e));
        writeln!(summary, "{n},{},{},{},{},{},{}", b[0], b[1], b[2], e[0], e[1], e[2]).expect("string write");
    }
    out.write("covariance_summary.csv", &summary)?;
    out.timing("covariance");
    Ok(())
}

/// Lower quartile, median and upper quartile by linear interpolation.
pub fn quartiles(values: &mut [f64]) -> [f64; 3] {
    values.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let n = values.len();
        if n == 0 {
            return f64::NAN;
        }
        let pos = q * (n - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
    };
    [at(0.25), at(0.5), at(0.75)]
}

fn inpaint(config: &Config, out: &mut Output) -> Result<()> {
    let d = InpaintConfig::default();
    let source_name: String = config.get("source", "synthetic".to_string())?;
    let source = match source_name.as_str() {
        "synthetic" => ImageSource::Synthetic(SyntheticDigits::default()),
        "mnist" => {
            let dir = match config.get_path("mnist_dir")? {
                Some(dir) => dir,
                None => mnist_dir_from_env()
                    .ok_or_else(|| BcmError::Config("MNIST requested but no data directory found".into()))?,
            };
            let digit: u8 = config.get("digit", 4)?;
            out.param("mnist_dir", dir.display());
            out.param("digit", digit);
            let images = load_mnist_digit(&dir, digit).map_err(|e| BcmError::Config(format!("loading MNIST: {e}")))?;
            ImageSource::Images(images)
        }
        s => return Err(BcmError::Config(format!("`source`: unknown source `{s}`"))),
    };
    out.param("source", &source_name);
    let corruption_name: String = config.get("corruption", "occlude".to_string())?;
    let corruption = match corruption_name.as_str() {
        "occlude" => Corruption::Occlude {
            size: config.get("occlusion_size", 8)?,
        },
        "noise" => Corruption::Noise {
            alpha: config.require("alpha")?,
        },
        c => return Err(BcmError::Config(format!("`corruption`: unknown model `{c}`"))),
    };
    out.param("corruption", &corruption_name);
    match corruption {
        Corruption::Occlude { size } => out.param("occlusion_size", size),
        Corruption::Noise { alpha } => out.param("alpha", alpha),
    }
    let cfg = InpaintConfig {
        source,
        corruption,
        p: config.get("p", d.p)?,
        runs: config.get("runs", d.runs)?,
        seed: config.get("seed", d.seed)?,
        epsilon: config.get("epsilon", d.epsilon)?,
        ibp: ibp_options(config, out, "ibp_epsilon", d.ibp.epsilon, d.ibp.kernel)?,
        score_epsilon: config.get("score_epsilon", d.score_epsilon)?,
        query_in_refs: config.get_bool("query_in_refs", d.query_in_refs)?,
    };
    let write_grids = config.get_bool("write_grids", true)?;
    for (k, v) in [
        ("p", cfg.p.to_string()),
        ("runs", cfg.runs.to_string()),
        ("seed", cfg.seed.to_string()),
        ("epsilon", cfg.epsilon.to_string()),
        ("score_epsilon", cfg.score_epsilon.to_string()),
        ("score", "entropic transport cost on the grid".to_string()),
        ("query_in_refs", cfg.query_in_refs.to_string()),
        ("write_grids", write_grids.to_string()),
    ] {
        out.param(k, v);
    }
    config.reject_unused()?;
    cfg.validate()?;
    let runs = run_inpaint_experiment(&cfg)?;
    let mut body = String::from("run,w2_bcm,w2_linear\n");
    let mut coords = String::from("run,method");
    for i in 0..cfg.p {
        write!(coords, ",lambda_{}", i + 1).expect("string write");
    }
    coords.push('\n');
    for r in &runs {
        writeln!(body, "{},{},{}", r.run, r.w2_bcm, r.w2_linear).expect("string write");
        writeln!(coords, "{},bcm,{}", r.run, join(r.lambda_bcm.as_slice())).expect("string write");
        writeln!(coords, "{},linear,{}", r.run, join(r.lambda_linear.as_slice())).expect("string write");
    }
    out.write("inpaint.csv", &body)?;
    out.write("inpaint_coords.csv", &coords)?;
    let n = runs.len() as f64;
    let wins = runs.iter().filter(|r| r.w2_bcm <= r.w2_linear).count();
    let summary = format!(
        "runs,mean_w2_bcm,mean_w2_linear,bcm_not_worse\n{},{},{},{}\n",
        runs.len(),
        runs.iter().map(|r| r.w2_bcm).sum::<f64>() / n,
        runs.iter().map(|r| r.w2_linear).sum::<f64>() / n,
        wins as f64 / n
    );
    out.write("inpaint_summary.csv", &summary)?;
    if write_grids {
        for r in &runs {
            for (kind, g) in [("original", &r.original), ("corrupted", &r.corrupted), ("bcm", &r.bcm), ("linear", &r.linear)] {
                let mut extra = Metadata::new();
                extra.push("run", r.run).push("grid", kind);
                out.write_with(&format!("grids/run_{:03}_{kind}.csv", r.run), &extra, &format_grid(g))?;
            }
        }
    }
    out.timing("inpaint");
    Ok(())
}

fn synthesize(config: &Config, out: &mut Output) -> Result<()> {
    let kind: String = config.require("kind")?;
    let coords_path = config.require_path("coords")?;
    let ref_paths = config.get_paths("refs")?;
    if ref_paths.is_empty() {
        return Err(BcmError::Config("`refs` must list at least one file".into()));
    }
    out.param("kind", &kind);
    out.param("coords", coords_path.display());
    out.param("refs", paths_param(&ref_paths));
    let lambda: Coordinates = read_coords(&coords_path)?;
    if lambda.len() != ref_paths.len() {
        return Err(BcmError::DimensionMismatch(format!(
            "{} coordinates for {} references",
            lambda.len(),
            ref_paths.len()
        )));
    }
    match kind.as_str() {
        "gaussian" => {
            let tol: f64 = config.get("tol", 1e-10)?;
            let max_iters: usize = config.get("max_iters", 1000)?;
            out.param("tol", tol);
            out.param("max_iters", max_iters);
            config.reject_unused()?;
            let refs = ref_paths.iter().map(read_spd).collect::<Result<Vec<_>>>()?;
            let res = gaussian_barycenter(&lambda, &refs, tol, max_iters)?;
            let mut extra = Metadata::new();
            extra.push("iterations", res.iterations).push("residual", res.residual);
            out.write_with("barycenter.csv", &extra, &format_spd(&res.cov))?;
        }
        "grid" => {
            let opts = ibp_options(config, out, "epsilon", 1.0, GridKernel::Dense)?;
            config.reject_unused()?;
            let refs = ref_paths.iter().map(read_grid).collect::<Result<Vec<_>>>()?;
            let res = ibp_barycenter(&lambda, &refs, &opts)?;
            let mut extra = Metadata::new();
            extra.push("iterations", res.iterations).push("residual", res.residual);
            out.write_with("barycenter.csv", &extra, &format_grid(&res.barycenter))?;
        }
        "quantile" => {
            config.reject_unused()?;
            let refs = ref_paths
                .iter()
                .map(|p| {
                    let c = read_point_cloud(p)?;
                    if c.dim() != 1 {
                        return Err(BcmError::DimensionMismatch("quantile synthesis needs 1D clouds".into()));
                    }
                    Sorted1DSample::from_unsorted(c.points().column(0).iter().copied().collect())
                })
                .collect::<Result<Vec<_>>>()?;
            let bary = quantile_barycenter_1d(&lambda, &refs)?;
            out.write("barycenter.csv", &format_point_cloud(&bary.to_point_cloud()))?;
        }
        k => return Err(BcmError::Config(format!("`kind`: unknown kind `{k}`"))),
    }
    out.timing("synthesize");
    Ok(())
}

fn convergence(config: &Config, out: &mut Output) -> Result<()> {
    let d = ConvergenceConfig::default();
    let cfg = ConvergenceConfig {
        d: config.get("d", d.d)?,
        p: config.get("p", d.p)?,
        sample_sizes: config.get_list("sample_sizes", d.sample_sizes)?,
        seeds: config.get("seeds", d.seeds)?,
        seed: config.get("seed", d.seed)?,
        epsilon0: config.get("epsilon0", d.epsilon0)?,
        exponent: config.get("exponent", d.exponent)?,
        exact: config.get_bool("exact", d.exact)?,
        sinkhorn_max_iters: config.get("sinkhorn_max_iters", d.sinkhorn_max_iters)?,
        qp: QpOptions::default(),
    };
    for (k, v) in [
        ("d", cfg.d.to_string()),
        ("p", cfg.p.to_string()),
        ("sample_sizes", join(&cfg.sample_sizes)),
        ("seeds", cfg.seeds.to_string()),
        ("seed", cfg.seed.to_string()),
        ("epsilon0", cfg.epsilon0.to_string()),
        ("exponent", cfg.exponent.to_string()),
        ("epsilon_schedule", "epsilon0 * (n / 100)^(-exponent)".to_string()),
        ("exact", cfg.exact.to_string()),
        ("sinkhorn_max_iters", cfg.sinkhorn_max_iters.to_string()),
    ] {
        out.param(k, v);
    }
    let cfg = ConvergenceConfig {
        qp: qp_options(config, out)?,
        ..cfg
    };
    config.reject_unused()?;
    let rows = run_convergence_experiment(&cfg)?;
    let mut body = String::from("n,seed,epsilon,max_entry_err,lambda_err\n");
    for r in &rows {
        writeln!(body, "{},{},{},{},{}", r.n, r.seed, r.epsilon, r.max_entry_err, r.lambda_err).expect("string write");
    }
    out.write("convergence.csv", &body)?;
    let mut summary = String::from("n,epsilon,median_entry_err,median_lambda_err\n");
    for s in summarize_convergence(&cfg, &rows) {
        writeln!(summary, "{},{},{},{}", s.n, s.epsilon, s.median_entry_err, s.median_lambda_err).expect("string write");
    }
    out.write("convergence_summary.csv", &summary)?;
    out.timing("convergence");
    Ok(())
}

/// Documents listed in a `filename,topic` file, paths relative to it.
pub fn load_labeled_dir(labels: &Path) -> Result<Vec<LabeledCloud>> {
    let text = fs::read_to_string(labels)?;
    let base = labels.parent().unwrap_or(Path::new(""));
    parse_labels(&text)?
        .into_iter()
        .map(|(file, label)| {
            Ok(LabeledCloud {
                cloud: read_point_cloud(base.join(file))?,
                label,
            })
        })
        .collect()
}

fn classify(config: &Config, out: &mut Output) -> Result<()> {
    let d = ClassifyConfig::default();
    let epsilons: Vec<f64> = config.get_list("epsilon", Vec::new())?;
    if epsilons.is_empty() {
        return Err(BcmError::Config("`epsilon` is required for classification".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(BcmError::Config("`epsilon` values must be positive".into()));
    }
    let dataset: String = config.get("dataset", "synthetic".to_string())?;
    let seed: u64 = config.get("seed", d.seed)?;
    let docs = if dataset == "synthetic" {
        let cd = CorpusConfig::default();
        let corpus = CorpusConfig {
            docs_per_topic: config.get("docs_per_topic", cd.docs_per_topic)?,
            points_per_doc: config.get("points_per_doc", cd.points_per_doc)?,
            ..cd
        };
        out.param("dataset", "synthetic");
        out.param("docs_per_topic", corpus.docs_per_topic);
        out.param("points_per_doc", corpus.points_per_doc);
        synthetic_corpus(&corpus, seed)
    } else {
        let labels = config.resolve(&dataset);
        out.param("dataset", labels.display());
        load_labeled_dir(&labels)?
    };
    let method_names: Vec<String> = config.get_list("methods", Method::ALL.iter().map(|m| m.name().to_string()).collect())?;
    let methods = method_names.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
    let base = ClassifyConfig {
        ks: config.get_list("ks", d.ks)?,
        repeats: config.get("repeats", d.repeats)?,
        test_per_topic: config.get("test_per_topic", d.test_per_topic)?,
        seed,
        epsilon: epsilons[0],
        methods,
        queries: QuerySource::parse(&config.get("queries", d.queries.name().to_string())?)?,
    };
    for (k, v) in [
        ("epsilon", join(&epsilons)),
        ("ks", join(&base.ks)),
        ("repeats", base.repeats.to_string()),
        ("test_per_topic", base.test_per_topic.to_string()),
        ("seed", seed.to_string()),
        ("methods", method_names.join(",")),
        ("queries", base.queries.name().to_string()),
    ] {
        out.param(k, v);
    }
    config.reject_unused()?;
    let mut body = String::from("epsilon,method,k,accuracy,tested\n");
    for &eps in &epsilons {
        let cfg = ClassifyConfig {
            epsilon: eps,
            ..base.clone()
        };
        for r in run_classify_experiment(&cfg, &docs)? {
            writeln!(body, "{eps},{},{},{},{}", r.method.name(), r.k, r.accuracy, r.tested).expect("string write");
        }
    }
    out.write("classify.csv", &body)?;
    out.timing("classify");
    Ok(())
}
