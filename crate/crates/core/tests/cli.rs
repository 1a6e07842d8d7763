use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use bcm::bcm::Coordinates;
use bcm::classify::{synthetic_corpus, Classifier, CorpusConfig, Method};
use bcm::formats::{format_point_cloud, parse_coords, Metadata};
use bcm::ot::PointCloud;
use bcm::synthesis::{quantile_barycenter_1d, Sorted1DSample};

fn bcm(args: &[&str], dir: &Path, conf: &str) -> (Output, PathBuf) {
    let conf_path = dir.join("run.conf");
    fs::write(&conf_path, conf).unwrap();
    let out = dir.join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_bcm"))
        .args(args)
        .arg("--config")
        .arg(&conf_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    (output, out)
}

fn ok(output: &Output) {
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}

/// Data rows of a CSV file with the metadata block and header removed.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# tool = bcm"), "{} lacks metadata", path.display());
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn cloud_2d(rng: &mut ChaCha8Rng, n: usize, shift: [f64; 2]) -> PointCloud {
    let pts = DMatrix::from_fn(n, 2, |_, c| {
        let z: f64 = StandardNormal.sample(rng);
        shift[c] + z
    });
    PointCloud::uniform(pts).unwrap()
}

#[test]
fn estimate_coords_self_query_picks_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, shift) in [("r1.csv", [0.0, 0.0]), ("r2.csv", [5.0, 0.0]), ("r3.csv", [0.0, 5.0])] {
        fs::write(dir.path().join(name), format_point_cloud(&cloud_2d(&mut rng, 20, shift))).unwrap();
    }
    let (o, out) = bcm(
        &["estimate-coords"],
        dir.path(),
        "query = r1.csv\nrefs = r1.csv, r2.csv, r3.csv\nepsilon = 0.1\nsinkhorn_max_iters = 100000\n",
    );
    ok(&o);
    let lambda = parse_coords(&fs::read_to_string(out.join("coords.csv")).unwrap()).unwrap();
    assert!(lambda.max_abs_diff(&[1.0, 0.0, 0.0]) < 0.05, "{lambda:?}");
    let report = rows(&out.join("report.csv"));
    assert!(report.iter().any(|r| r[0] == "multiplicity"));
    assert!(rows(&out.join("gram.csv")).len() == 3);
}

#[test]
fn estimate_coords_single_reference() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    fs::write(dir.path().join("q.csv"), format_point_cloud(&cloud_2d(&mut rng, 8, [0.0, 0.0]))).unwrap();
    fs::write(dir.path().join("r.csv"), format_point_cloud(&cloud_2d(&mut rng, 9, [2.0, 1.0]))).unwrap();
    let (o, out) = bcm(&["estimate-coords"], dir.path(), "query = q.csv\nrefs = r.csv\nepsilon = 1\n");
    ok(&o);
    let lambda = parse_coords(&fs::read_to_string(out.join("coords.csv")).unwrap()).unwrap();
    assert_eq!(lambda.as_slice(), &[1.0]);
}

#[test]
fn estimate_coords_exact_1d_recovers_planted_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let refs: Vec<Sorted1DSample> = (0..3)
        .map(|i| {
            let v: Vec<f64> = (0..100)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    4.0 * i as f64 + (1.0 + i as f64) * z.powi(if i == 2 { 3 } else { 1 })
                })
                .collect();
            Sorted1DSample::from_unsorted(v).unwrap()
        })
        .collect();
    let planted = Coordinates::new(vec![0.2, 0.3, 0.5]).unwrap();
    let query = quantile_barycenter_1d(&planted, &refs).unwrap();
    fs::write(dir.path().join("q.csv"), format_point_cloud(&query.to_point_cloud())).unwrap();
    for (i, r) in refs.iter().enumerate() {
        fs::write(dir.path().join(format!("r{i}.csv")), format_point_cloud(&r.to_point_cloud())).unwrap();
    }
    let (o, out) = bcm(&["estimate-coords"], dir.path(), "query = q.csv\nrefs = r0.csv, r1.csv, r2.csv\nmethod = exact1d\n");
    ok(&o);
    let lambda = parse_coords(&fs::read_to_string(out.join("coords.csv")).unwrap()).unwrap();
    assert!(lambda.max_abs_diff(planted.as_slice()) < 1e-4, "{lambda:?}");
}

#[test]
fn covariance_consistency_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = bcm(
        &["covariance", "--seed", "9"],
        dir.path(),
        "trials = 1\nd = 2\np = 2\nsample_sizes = 1000000\n",
    );
    ok(&o);
    let r = rows(&out.join("covariance.csv"));
    let lambda_err: f64 = r[0][4].parse().unwrap();
    assert!(lambda_err < 0.05, "{lambda_err}");

    let (o, _) = bcm(&["covariance"], dir.path(), "trials = 0\n");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inpaint_uncorrupted_member_is_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = bcm(
        &["inpaint", "--seed", "2"],
        dir.path(),
        "corruption = noise\nalpha = 0\nquery_in_refs = true\np = 3\nruns = 1\nepsilon = 1\nibp_epsilon = 0.1\n",
    );
    ok(&o);
    let r = rows(&out.join("inpaint.csv"));
    let w2: f64 = r[0][1].parse().unwrap();
    assert!(w2 < 0.05, "{w2}");
    for kind in ["original", "corrupted", "bcm", "linear"] {
        let meta = Metadata::parse(&fs::read_to_string(out.join(format!("grids/run_000_{kind}.csv"))).unwrap());
        assert_eq!(meta.get("grid"), Some(kind));
        assert_eq!(meta.get("source"), Some("synthetic"));
    }
}

#[test]
fn convergence_exact_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = bcm(&["convergence"], dir.path(), "exact = true\nseeds = 2\n");
    ok(&o);
    for r in rows(&out.join("convergence.csv")) {
        let e: f64 = r[3].parse().unwrap();
        assert!(e < 1e-10);
    }
    let (o, _) = bcm(&["convergence"], dir.path(), "sample_sizes = 0\n");
    assert_eq!(o.status.code(), Some(2));
}

fn accuracy(out: &Path, method: &str, k: &str) -> f64 {
    rows(&out.join("classify.csv"))
        .into_iter()
        .find(|r| r[1] == method && r[2] == k)
        .unwrap()[3]
        .parse()
        .unwrap()
}

#[test]
fn classify_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = bcm(
        &["classify", "--seed", "1"],
        dir.path(),
        "epsilon = 0.1\nks = 3\nrepeats = 3\ntest_per_topic = 6\nqueries = barycentric\nmethods = nn1, min-bary-loss\n",
    );
    ok(&o);
    assert!(accuracy(&out, "min-bary-loss", "3") >= accuracy(&out, "nn1", "3"));

    let (o, out) = bcm(
        &["classify", "--seed", "1"],
        dir.path(),
        "epsilon = 0.5\nks = 2\nrepeats = 2\nqueries = references\nmethods = nn1\n",
    );
    ok(&o);
    assert_eq!(accuracy(&out, "nn1", "2"), 1.0);

    let (o, _) = bcm(&["classify"], dir.path(), "ks = 1\n");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_reference_average_equals_nearest_neighbor() {
    let docs = synthetic_corpus(&CorpusConfig::default(), 8);
    let refs: Vec<_> = docs.iter().step_by(20).cloned().collect();
    let c = Classifier::new(0.5).unwrap();
    for q in docs.iter().skip(1).step_by(3) {
        assert_eq!(
            c.classify(&q.cloud, &refs, Method::NN1).unwrap(),
            c.classify(&q.cloud, &refs, Method::MinAvgDist).unwrap()
        );
    }
}

#[test]
fn synthesize_gaussian_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "spd,1\n1\n").unwrap();
    fs::write(dir.path().join("b.csv"), "spd,1\n9\n").unwrap();
    fs::write(dir.path().join("l.csv"), "coords,2\n0.5,0.5\n").unwrap();
    let (o, out) = bcm(&["synthesize"], dir.path(), "kind = gaussian\ncoords = l.csv\nrefs = a.csv, b.csv\n");
    ok(&o);
    let r = rows(&out.join("barycenter.csv"));
    let s: f64 = r[0][0].parse().unwrap();
    assert!((s - 4.0).abs() < 1e-10);

    let (o, _) = bcm(&["synthesize"], dir.path(), "kind = torus\ncoords = l.csv\nrefs = a.csv, b.csv\n");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_convergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    fs::write(dir.path().join("q.csv"), format_point_cloud(&cloud_2d(&mut rng, 10, [0.0, 0.0]))).unwrap();
    fs::write(dir.path().join("r.csv"), format_point_cloud(&cloud_2d(&mut rng, 10, [3.0, 0.0]))).unwrap();
    let (o, _) = bcm(
        &["estimate-coords"],
        dir.path(),
        "query = q.csv\nrefs = r.csv, q.csv\nepsilon = 0.01\nsinkhorn_max_iters = 2\n",
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
