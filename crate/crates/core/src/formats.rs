//! Text formats. Every file is CSV with a one-line header naming the kind
//! and shape; lines starting with `#` carry metadata and are skipped on
//! read. Floats are written in shortest round-trip form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::bcm::{Coordinates, GramMatrix};
use crate::error::{BcmError, Result};
use crate::ot::PointCloud;
use crate::spd::SpdMatrix;
use crate::synthesis::GridMeasure;

/// Weight sums within this distance of one are renormalized on read.
pub const WEIGHT_SUM_SLACK: f64 = 1e-6;

/// Ordered `# key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata(Vec<(String, String)>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.0
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
    }

    /// Reads back the `# key = value` lines of a file body.
    pub fn parse(text: &str) -> Self {
        Metadata(
            text.lines()
                .filter_map(|l| l.strip_prefix('#'))
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }
}

/// Writes `meta` followed by `body`.
pub fn write_with_metadata(path: impl AsRef<Path>, meta: &Metadata, body: &str) -> Result<()> {
    fs::write(path, format!("{}{body}", meta.render()))?;
    Ok(())
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (k, v) in values.into_iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a string");
    }
    s
}

struct Lines<'a> {
    format: &'static str,
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
}

impl<'a> Lines<'a> {
    fn new(format: &'static str, text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(k, l)| (k + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Lines {
            format,
            inner: it.peekable(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .ok_or_else(|| BcmError::parse(self.format, 0, "unexpected end of input"))
    }

    fn header(&mut self, shape_len: usize) -> Result<Vec<usize>> {
        let (line, text) = self.next_line()?;
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields[0] != self.format || fields.len() != shape_len + 1 {
            return Err(BcmError::parse(
                self.format,
                line,
                format!("expected header `{}` with {shape_len} sizes, got `{text}`", self.format),
            ));
        }
        fields[1..]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| BcmError::parse(self.format, line, format!("bad size `{f}`")))
            })
            .collect()
    }

    fn row(&mut self, len: usize) -> Result<(usize, Vec<f64>)> {
        let (line, text) = self.next_line()?;
        let values: Vec<f64> = text
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| BcmError::parse(self.format, line, format!("bad number `{}`", f.trim())))
            })
            .collect::<Result<_>>()?;
        if values.len() != len {
            return Err(BcmError::parse(
                self.format,
                line,
                format!("expected {len} values, got {}", values.len()),
            ));
        }
        Ok((line, values))
    }

    fn end(&mut self) -> Result<()> {
        match self.inner.next() {
            None => Ok(()),
            Some((line, _)) => Err(BcmError::parse(self.format, line, "unexpected trailing rows")),
        }
    }

    fn square(&mut self) -> Result<DMatrix<f64>> {
        let n = self.header(1)?[0];
        let mut entries = Vec::with_capacity(n * n);
        for _ in 0..n {
            entries.extend(self.row(n)?.1);
        }
        self.end()?;
        Ok(DMatrix::from_row_slice(n, n, &entries))
    }
}

fn square_body(kind: &str, m: &DMatrix<f64>) -> String {
    let mut s = format!("{kind},{}\n", m.nrows());
    for i in 0..m.nrows() {
        s.push_str(&join(m.row(i).iter().copied()));
        s.push('\n');
    }
    s
}

pub fn format_spd(s: &SpdMatrix) -> String {
    square_body("spd", s.as_matrix())
}

pub fn parse_spd(text: &str) -> Result<SpdMatrix> {
    SpdMatrix::new(Lines::new("spd", text).square()?)
}

pub fn format_gram(a: &GramMatrix) -> String {
    square_body("gram", a.as_matrix())
}

pub fn parse_gram(text: &str) -> Result<GramMatrix> {
    GramMatrix::new(Lines::new("gram", text).square()?)
}

pub fn format_coords(c: &Coordinates) -> String {
    format!("coords,{}\n{}\n", c.len(), join(c.as_slice().iter().copied()))
}

pub fn parse_coords(text: &str) -> Result<Coordinates> {
    let mut lines = Lines::new("coords", text);
    let p = lines.header(1)?[0];
    let (_, values) = lines.row(p)?;
    lines.end()?;
    Coordinates::new(values)
}

pub fn format_point_cloud(c: &PointCloud) -> String {
    let mut s = format!("pointcloud,{},{}\n", c.len(), c.dim());
    for i in 0..c.len() {
        s.push_str(&join(std::iter::once(c.weights()[i]).chain(c.points().row(i).iter().copied())));
        s.push('\n');
    }
    s
}

/// Weights summing to within [`WEIGHT_SUM_SLACK`] of one are renormalized;
/// anything further off is rejected.
pub fn parse_point_cloud(text: &str) -> Result<PointCloud> {
    let mut lines = Lines::new("pointcloud", text);
    let shape = lines.header(2)?;
    let (n, d) = (shape[0], shape[1]);
    let mut rows = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let (_, values) = lines.row(d + 1)?;
        weights.push(values[0]);
        rows.push(values[1..].to_vec());
    }
    lines.end()?;
    let total: f64 = weights.iter().sum();
    if !((total - 1.0).abs() <= WEIGHT_SUM_SLACK) {
        return Err(BcmError::InvalidMeasure(format!("point cloud weights sum to {total}")));
    }
    let weights = weights.into_iter().map(|w| w / total).collect();
    PointCloud::from_rows(&rows, weights)
}

pub fn format_grid(g: &GridMeasure) -> String {
    let mut s = format!("grid,{},{}\n", g.height(), g.width());
    for row in g.mass().chunks(g.width()) {
        s.push_str(&join(row.iter().copied()));
        s.push('\n');
    }
    s
}

pub fn parse_grid(text: &str) -> Result<GridMeasure> {
    let mut lines = Lines::new("grid", text);
    let shape = lines.header(2)?;
    let (h, w) = (shape[0], shape[1]);
    let mut mass = Vec::with_capacity(h * w);
    for _ in 0..h {
        mass.extend(lines.row(w)?.1);
    }
    lines.end()?;
    GridMeasure::new(h, w, mass)
}

/// `filename,topic` rows; a first row reading `filename,topic` is a header.
pub fn parse_labels(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((file, topic)) = line.split_once(',') else {
            return Err(BcmError::parse("labels", k + 1, "expected `filename,topic`"));
        };
        let (file, topic) = (file.trim(), topic.trim());
        if out.is_empty() && file == "filename" && topic == "topic" {
            continue;
        }
        if file.is_empty() || topic.is_empty() {
            return Err(BcmError::parse("labels", k + 1, "empty filename or topic"));
        }
        out.push((file.to_string(), topic.to_string()));
    }
    Ok(out)
}

pub fn read_spd(path: impl AsRef<Path>) -> Result<SpdMatrix> {
    parse_spd(&fs::read_to_string(path)?)
}

pub fn read_gram(path: impl AsRef<Path>) -> Result<GramMatrix> {
    parse_gram(&fs::read_to_string(path)?)
}

pub fn read_coords(path: impl AsRef<Path>) -> Result<Coordinates> {
    parse_coords(&fs::read_to_string(path)?)
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_point_cloud(&fs::read_to_string(path)?)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<GridMeasure> {
    parse_grid(&fs::read_to_string(path)?)
}
