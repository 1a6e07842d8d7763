//! Images as measures, corruption models, the Euclidean recovery baseline and
//! the IDX container used by MNIST.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bcm::{solve_simplex_qp, GramMatrix, QpOptions, QpSolution};
use crate::error::{BcmError, Result};
use crate::synthesis::GridMeasure;

/// Grayscale image with 8-bit intensities, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(BcmError::DimensionMismatch(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(RawImage { height, width, pixels })
    }

    /// Checks that every value lies in `[0, 255]`.
    pub fn from_values(height: usize, width: usize, values: &[i64]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| BcmError::InvalidInput(format!("pixel value {v} outside [0, 255]"))))
            .collect::<Result<Vec<u8>>>()?;
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Normalizes intensities to a probability grid.
pub fn image_to_measure(img: &RawImage) -> Result<GridMeasure> {
    if img.pixels.iter().all(|&p| p == 0) {
        return Err(BcmError::InvalidMeasure("image has no nonzero pixels".into()));
    }
    GridMeasure::from_unnormalized(img.height, img.width, img.pixels.iter().map(|&p| p as f64).collect())
}

/// Normalized i.i.d. `Unif[0, 1)` noise grid, drawn row-major from a
/// generator seeded with `seed`.
pub fn white_noise(height: usize, width: usize, seed: u64) -> GridMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>()).collect();
    GridMeasure::from_unnormalized(height, width, raw).expect("uniform draws have positive mass")
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BcmError::InvalidInput(format!("noise level {alpha} outside [0, 1]")));
    }
    Ok(())
}

fn blend(m: &GridMeasure, alpha: f64, noise: &GridMeasure) -> Result<GridMeasure> {
    let mass = m
        .mass()
        .iter()
        .zip(noise.mass())
        .map(|(a, z)| (1.0 - alpha) * a + alpha * z)
        .collect();
    GridMeasure::new(m.height(), m.width(), mass)
}

/// `(1 − α) m + α ζ` with `ζ` from [`white_noise`].
pub fn corrupt_noise(m: &GridMeasure, alpha: f64, seed: u64) -> Result<GridMeasure> {
    check_alpha(alpha)?;
    blend(m, alpha, &white_noise(m.height(), m.width(), seed))
}

/// `(1 − α) m + α u` with `u` uniform: the expected noisy version of `m`.
pub fn corrupt_noise_expected(m: &GridMeasure, alpha: f64) -> Result<GridMeasure> {
    check_alpha(alpha)?;
    blend(m, alpha, &GridMeasure::uniform(m.height(), m.width()))
}

/// Axis-aligned block of pixels `[row, row + height) × [col, col + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    /// The centered `size × size` block.
    pub fn central(grid_height: usize, grid_width: usize, size: usize) -> Self {
        Rect {
            row: grid_height.saturating_sub(size) / 2,
            col: grid_width.saturating_sub(size) / 2,
            height: size.min(grid_height),
            width: size.min(grid_width),
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }
}

/// Zeroes `block` and renormalizes the remaining mass.
pub fn corrupt_occlude(m: &GridMeasure, block: Rect) -> Result<GridMeasure> {
    if block.row + block.height > m.height() || block.col + block.width > m.width() {
        return Err(BcmError::InvalidInput(format!(
            "occlusion {block:?} exceeds the {}x{} grid",
            m.height(),
            m.width()
        )));
    }
    let mut removed = 0.0;
    let mut mass = m.mass().to_vec();
    for i in block.row..block.row + block.height {
        for j in block.col..block.col + block.width {
            removed += mass[i * m.width() + j];
            mass[i * m.width() + j] = 0.0;
        }
    }
    if removed == 0.0 {
        return Ok(m.clone());
    }
    if mass.iter().all(|&v| v == 0.0) {
        return Err(BcmError::InvalidMeasure("occlusion removes all mass".into()));
    }
    GridMeasure::from_unnormalized(m.height(), m.width(), mass)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRecovery {
    pub solution: QpSolution,
    pub reconstruction: GridMeasure,
    /// `‖Σ λᵢ m̃ᵢ − m̃₀‖²` over the flattened grids.
    pub residual: f64,
}

/// Euclidean projection of `corrupted` onto the convex hull of `refs`,
/// reconstructing with the same references.
pub fn linear_recovery(corrupted: &GridMeasure, refs: &[GridMeasure]) -> Result<LinearRecovery> {
    linear_recovery_with(corrupted, refs, refs)
}

/// Coordinates from projecting onto the hull of `analysis_refs`; the
/// reconstruction mixes `synthesis_refs` with those coordinates.
pub fn linear_recovery_with(
    corrupted: &GridMeasure,
    analysis_refs: &[GridMeasure],
    synthesis_refs: &[GridMeasure],
) -> Result<LinearRecovery> {
    if analysis_refs.is_empty() || analysis_refs.len() != synthesis_refs.len() {
        return Err(BcmError::InvalidInput(format!(
            "{} analysis and {} synthesis references",
            analysis_refs.len(),
            synthesis_refs.len()
        )));
    }
    if analysis_refs.iter().any(|r| !r.same_grid(corrupted)) {
        return Err(BcmError::DimensionMismatch("references on a different grid".into()));
    }
    let p = analysis_refs.len();
    let n = corrupted.mass().len();
    let r = DMatrix::from_fn(n, p, |x, i| analysis_refs[i].mass()[x]);
    let q = r.transpose() * &r;
    let target = nalgebra::DVector::from_column_slice(corrupted.mass());
    let c: Vec<f64> = (r.transpose() * &target).iter().map(|v| -2.0 * v).collect();
    let gram = GramMatrix::new((&q + q.transpose()) * 0.5)?;
    let solution = solve_simplex_qp(&gram, Some(&c), &QpOptions::default())?;
    let residual = (solution.value + target.norm_squared()).max(0.0);
    let reconstruction = GridMeasure::mixture(&solution.lambda, synthesis_refs)?;
    Ok(LinearRecovery {
        solution,
        reconstruction,
        residual,
    })
}

/// `‖Σ λᵢ mᵢ − m₀‖²` over flattened grids.
pub fn euclidean_residual(lambda: &[f64], corrupted: &GridMeasure, refs: &[GridMeasure]) -> f64 {
    corrupted
        .mass()
        .iter()
        .enumerate()
        .map(|(x, t)| {
            let v: f64 = lambda.iter().zip(refs).map(|(l, r)| l * r.mass()[x]).sum();
            (v - t) * (v - t)
        })
        .sum()
}

/// Unsigned-byte IDX container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxDataset {
    dims: Vec<u32>,
    payload: Vec<u8>,
}

pub const IDX_UNSIGNED_BYTE: u8 = 0x08;

impl IdxDataset {
    pub fn new(dims: Vec<u32>, payload: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 255 {
            return Err(BcmError::Idx(format!("unsupported number of dimensions {}", dims.len())));
        }
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if expected != Some(payload.len()) {
            return Err(BcmError::Idx(format!(
                "payload of {} bytes does not match dims {dims:?}",
                payload.len()
            )));
        }
        Ok(IdxDataset { dims, payload })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn magic(&self) -> [u8; 4] {
        [0, 0, IDX_UNSIGNED_BYTE, self.dims.len() as u8]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(BcmError::Idx("truncated header".into()));
        }
        if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UNSIGNED_BYTE {
            return Err(BcmError::Idx(format!("bad magic {:02x?}", &bytes[..4])));
        }
        let ndims = bytes[3] as usize;
        if ndims == 0 {
            return Err(BcmError::Idx("bad magic: zero dimensions".into()));
        }
        let header = 4 + 4 * ndims;
        if bytes.len() < header {
            return Err(BcmError::Idx("truncated header".into()));
        }
        let dims: Vec<u32> = (0..ndims)
            .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("four bytes")))
            .collect();
        let payload = &bytes[header..];
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        match expected {
            Some(e) if e > payload.len() => Err(BcmError::Idx(format!(
                "truncated payload: {} of {e} bytes",
                payload.len()
            ))),
            Some(e) if e == payload.len() => Ok(IdxDataset {
                dims,
                payload: payload.to_vec(),
            }),
            _ => Err(BcmError::Idx(format!(
                "dimension mismatch: dims {dims:?} against {} payload bytes",
                payload.len()
            ))),
        }
    }

    /// Splits a three-dimensional dataset into images.
    pub fn images(&self) -> Result<Vec<RawImage>> {
        let [n, h, w] = self.dims[..] else {
            return Err(BcmError::Idx(format!("expected 3 dims for images, got {}", self.dims.len())));
        };
        let size = (h * w) as usize;
        (0..n as usize)
            .map(|k| RawImage::new(h as usize, w as usize, self.payload[k * size..(k + 1) * size].to_vec()))
            .collect()
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxDataset> {
    IdxDataset::from_bytes(&fs::read(path)?)
}

pub fn write_idx(dataset: &IdxDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    Ok(())
}

/// Environment variable naming a directory with the MNIST training files.
pub const MNIST_DIR_VAR: &str = "BCM_MNIST_DIR";
pub const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "train-labels-idx1-ubyte";

/// Training images carrying `digit`, in file order, when the files are
/// present under `dir`.
pub fn load_mnist_digit(dir: impl AsRef<Path>, digit: u8) -> Result<Vec<RawImage>> {
    let dir = dir.as_ref();
    let images = read_idx(dir.join(MNIST_IMAGES))?.images()?;
    let labels = read_idx(dir.join(MNIST_LABELS))?;
    if labels.dims().len() != 1 || labels.payload().len() != images.len() {
        return Err(BcmError::Idx("label file does not match image file".into()));
    }
    Ok(images
        .into_iter()
        .zip(labels.payload())
        .filter(|(_, &l)| l == digit)
        .map(|(img, _)| img)
        .collect())
}

/// The MNIST directory from the environment, if it holds both files.
pub fn mnist_dir_from_env() -> Option<std::path::PathBuf> {
    let dir = std::path::PathBuf::from(std::env::var_os(MNIST_DIR_VAR)?);
    (dir.join(MNIST_IMAGES).is_file() && dir.join(MNIST_LABELS).is_file()).then_some(dir)
}

/// Digit-like images drawn as strokes of anisotropic Gaussian ink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDigits {
    pub height: usize,
    pub width: usize,
    /// Standard deviation of endpoint jitter, in pixels.
    pub jitter: f64,
    /// Intensities below this are set to zero.
    pub floor: u8,
}

impl Default for SyntheticDigits {
    fn default() -> Self {
        SyntheticDigits {
            height: 28,
            width: 28,
            jitter: 1.2,
            floor: 24,
        }
    }
}

impl SyntheticDigits {
    /// A "four": a slanted left stroke, a crossbar and a long right stroke.
    pub fn four<R: Rng + ?Sized>(&self, rng: &mut R) -> RawImage {
        let (h, w) = (self.height as f64, self.width as f64);
        let mut jitter = |y: f64, x: f64| {
            let dy: f64 = StandardNormal.sample(rng);
            let dx: f64 = StandardNormal.sample(rng);
            (y * h + self.jitter * dy, x * w + self.jitter * dx)
        };
        let top_left = jitter(0.20, 0.32);
        let corner = jitter(0.56, 0.26);
        let bar_end = jitter(0.56, 0.76);
        let right_top = jitter(0.18, 0.62);
        let right_bottom = jitter(0.84, 0.60);
        let strokes = [(top_left, corner), (corner, bar_end), (right_top, right_bottom)];
        let along: f64 = 0.9 + 0.3 * rng.random::<f64>();
        let across: f64 = 0.9 + 0.5 * rng.random::<f64>();
        let mut pixels = vec![0u8; self.height * self.width];
        for i in 0..self.height {
            for j in 0..self.width {
                let v = strokes
                    .iter()
                    .map(|&(a, b)| stroke_ink((i as f64, j as f64), a, b, along, across))
                    .fold(0.0, f64::max);
                let q = (255.0 * v).round() as u8;
                pixels[i * self.width + j] = if q < self.floor { 0 } else { q };
            }
        }
        RawImage::new(self.height, self.width, pixels).expect("generator sizes agree")
    }

    /// `count` fours from a generator seeded with `seed`.
    pub fn fours(&self, count: usize, seed: u64) -> Vec<RawImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.four(&mut rng)).collect()
    }
}

/// Ink at `x` from a segment `a → b`: Gaussian falloff with separate widths
/// past the endpoints and across the stroke.
fn stroke_ink(x: (f64, f64), a: (f64, f64), b: (f64, f64), along: f64, across: f64) -> f64 {
    let d = (b.0 - a.0, b.1 - a.1);
    let len_sq = d.0 * d.0 + d.1 * d.1;
    let rel = (x.0 - a.0, x.1 - a.1);
    let t = if len_sq > 0.0 { (rel.0 * d.0 + rel.1 * d.1) / len_sq } else { 0.0 };
    let len = len_sq.sqrt();
    let overshoot = if t < 0.0 { -t * len } else if t > 1.0 { (t - 1.0) * len } else { 0.0 };
    let tc = t.clamp(0.0, 1.0);
    let foot = (a.0 + tc * d.0, a.1 + tc * d.1);
    let perp_sq = (x.0 - foot.0).powi(2) + (x.1 - foot.1).powi(2) - overshoot * overshoot;
    (-overshoot * overshoot / (2.0 * along * along) - perp_sq.max(0.0) / (2.0 * across * across)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_measure_examples() {
        let mut px = vec![0u8; 9];
        px[4] = 200;
        let m = image_to_measure(&RawImage::new(3, 3, px).unwrap()).unwrap();
        assert_eq!(m.get(1, 1), 1.0);
        let m = image_to_measure(&RawImage::new(2, 3, vec![7; 6]).unwrap()).unwrap();
        assert!(m.mass().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(image_to_measure(&RawImage::new(2, 2, vec![0; 4]).unwrap()).is_err());
        assert!(RawImage::from_values(1, 2, &[0, 256]).is_err());
    }

    #[test]
    fn image_measure_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<u8> = (0..20).map(|_| rng.random()).collect();
        let total: f64 = px.iter().map(|&p| p as f64).sum();
        let m = image_to_measure(&RawImage::new(4, 5, px.clone()).unwrap()).unwrap();
        for (v, p) in m.mass().iter().zip(&px) {
            assert!((v - *p as f64 / total).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_examples() {
        let m = GridMeasure::one_hot(4, 4, 1, 2);
        assert_eq!(corrupt_noise(&m, 0.0, 1).unwrap(), m);
        let z = white_noise(4, 4, 1);
        assert_eq!(corrupt_noise(&m, 1.0, 1).unwrap(), z);
        let half = corrupt_noise(&m, 0.5, 1).unwrap();
        for ((h, a), b) in half.mass().iter().zip(m.mass()).zip(z.mass()) {
            assert!((h - (0.5 * a + 0.5 * b)).abs() < 1e-12);
        }
        assert_eq!(corrupt_noise(&m, 0.3, 9).unwrap(), corrupt_noise(&m, 0.3, 9).unwrap());
        assert!(corrupt_noise(&m, 1.5, 1).is_err());
    }

    #[test]
    fn occlusion_examples() {
        let u = GridMeasure::uniform(28, 28);
        let block = Rect::central(28, 28, 8);
        assert_eq!((block.row, block.col), (10, 10));
        let o = corrupt_occlude(&u, block).unwrap();
        for i in 0..28 {
            for j in 0..28 {
                let expected = if block.contains(i, j) { 0.0 } else { 1.0 / 720.0 };
                assert!((o.get(i, j) - expected).abs() < 1e-15);
            }
        }
        assert_eq!(corrupt_occlude(&o, block).unwrap(), o);
        let corner = GridMeasure::one_hot(28, 28, 0, 0);
        assert_eq!(corrupt_occlude(&corner, block).unwrap(), corner);
        let centre = GridMeasure::one_hot(28, 28, 14, 14);
        assert!(corrupt_occlude(&centre, block).is_err());
    }

    #[test]
    fn linear_recovery_exact_cases() {
        let refs = [
            GridMeasure::one_hot(2, 2, 0, 0),
            GridMeasure::one_hot(2, 2, 1, 1),
            GridMeasure::uniform(2, 2),
        ];
        let r = linear_recovery(&refs[0], &refs).unwrap();
        assert!(r.solution.lambda.max_abs_diff(&[1.0, 0.0, 0.0]) < 1e-8);
        let avg = GridMeasure::mixture(&crate::bcm::Coordinates::uniform(2), &refs[..2]).unwrap();
        let r = linear_recovery(&avg, &refs[..2]).unwrap();
        assert!(r.solution.lambda.max_abs_diff(&[0.5, 0.5]) < 1e-8);
    }

    #[test]
    fn linear_recovery_beats_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut grid = || {
            let raw: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            GridMeasure::from_unnormalized(4, 4, raw).unwrap()
        };
        let refs = [grid(), grid(), grid()];
        let target = grid();
        let r = linear_recovery(&target, &refs).unwrap();
        let got = euclidean_residual(r.solution.lambda.as_slice(), &target, &refs);
        assert!((got - r.residual).abs() < 1e-12);
        for a in 0..=100 {
            for b in 0..=(100 - a) {
                let l = [a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0];
                assert!(got <= euclidean_residual(&l, &target, &refs) + 1e-15);
            }
        }
    }

    #[test]
    fn idx_layout_and_round_trip() {
        let ds = IdxDataset::new(vec![1, 2, 2], vec![0; 4]).unwrap();
        assert_eq!(
            ds.to_bytes(),
            vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let payload: Vec<u8> = (0..60).map(|_| rng.random()).collect();
        let ds = IdxDataset::new(vec![3, 4, 5], payload).unwrap();
        assert_eq!(IdxDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        let labels = IdxDataset::from_bytes(&[0, 0, 8, 1, 0, 0, 0, 2, 4, 7]).unwrap();
        assert_eq!(labels.dims(), &[2]);
    }

    #[test]
    fn idx_errors() {
        assert!(IdxDataset::from_bytes(&[0, 0, 9, 1, 0, 0, 0, 1, 0]).is_err());
        assert!(IdxDataset::from_bytes(&[0, 0, 8, 1, 0, 0, 0, 3, 0]).is_err());
        assert!(IdxDataset::from_bytes(&[0, 0, 8, 2, 0, 0]).is_err());
        assert!(IdxDataset::from_bytes(&[0, 0, 8, 1, 0, 0, 0, 1, 0, 0]).is_err());
        assert!(IdxDataset::new(vec![2, 2], vec![0; 3]).is_err());
    }

    #[test]
    fn synthetic_fours_reproducible() {
        let gen = SyntheticDigits::default();
        let a = gen.fours(3, 5);
        assert_eq!(a, gen.fours(3, 5));
        assert_ne!(a[0], a[1]);
        for img in &a {
            let lit = img.pixels().iter().filter(|&&p| p > 0).count();
            assert!(lit > 40 && lit < 400, "{lit} lit pixels");
        }
    }
}
