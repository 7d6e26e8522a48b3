//! The finite dataset defining the empirical data distribution.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! offset  size   field
//! 0       4      magic "NNSE"
//! 4       4      u32 version = 1
//! 8       8      u64 N
//! 16      8      u64 d
//! 24      4*N*d  f32 row-major entries
//! ```
//!
//! Entries are stored as 32-bit floats and widened to 64 bits on load. The CSV
//! alternative is headerless, one point per line, comma-separated.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::sq_norm;
use crate::rng::{self, Stream};

pub const MAGIC: &[u8; 4] = b"NNSE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    points: Vec<f64>,
    sq_norms: Vec<f64>,
    n: usize,
    dim: usize,
}

impl DatasetStore {
    /// Builds a store from a row-major `n x dim` matrix.
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("dimension must be at least 1".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{} values do not form a non-empty matrix with {dim} columns",
                points.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite entry at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        let n = points.len() / dim;
        let sq_norms = points.chunks_exact(dim).map(sq_norm).collect();
        Ok(Self {
            points,
            sq_norms,
            n,
            dim,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Data(format!("row {i} has a different length")));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn sq_norms(&self) -> &[f64] {
        &self.sq_norms
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Coordinate-wise average of all points.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= self.n as f64);
        m
    }

    /// Largest pairwise Euclidean distance. O(N^2 d).
    pub fn diameter(&self) -> f64 {
        let best = crate::par::map(self.n, |i| {
            let a = self.row(i);
            (i + 1..self.n)
                .map(|j| crate::math::sq_dist(a, self.row(j)))
                .fold(0.0, f64::max)
        });
        best.into_iter().fold(0.0, f64::max).sqrt()
    }

    /// Per-coordinate `(min, max)`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for r in self.rows() {
            for (bj, &v) in b.iter_mut().zip(r) {
                bj.0 = bj.0.min(v);
                bj.1 = bj.1.max(v);
            }
        }
        b
    }

    /// Binary encoding (see module docs).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.points.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &v in &self.points {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::format_at(0, "empty input"));
        }
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format_at(0, "bad magic, expected \"NNSE\""));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::format_at(
                bytes.len() as u64,
                format!("truncated header, need {HEADER_LEN} bytes"),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::format_at(
                4,
                format!("unsupported version {version}"),
            ));
        }
        let n = u64_at(8);
        let d = u64_at(16);
        if n == 0 {
            return Err(Error::format_at(8, "N must be at least 1"));
        }
        if d == 0 {
            return Err(Error::format_at(16, "d must be at least 1"));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .and_then(|c| c.checked_add(HEADER_LEN as u64))
            .ok_or_else(|| Error::format_at(8, "N * d overflows"))?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(Error::format_at(
                actual,
                format!("truncated payload, expected {expected} bytes"),
            ));
        }
        if actual > expected {
            return Err(Error::format_at(expected, "trailing bytes after payload"));
        }
        let points: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(points, d as usize)
    }

    /// Reads a headerless CSV matrix.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut points = Vec::new();
        let mut dim = 0usize;
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = parse_csv_row(line).map_err(|m| Error::format_line(lineno as u64 + 1, m))?;
            if dim == 0 {
                dim = row.len();
            } else if row.len() != dim {
                return Err(Error::format_line(
                    lineno as u64 + 1,
                    format!("expected {dim} columns, found {}", row.len()),
                ));
            }
            points.extend(row);
        }
        if points.is_empty() {
            return Err(Error::format_line(0, "no rows"));
        }
        Self::new(points, dim)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for r in self.rows() {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Loads the binary format, or CSV when the file does not start with the
    /// magic bytes and has a `.csv` extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv && !bytes.starts_with(MAGIC) {
            if bytes.is_empty() {
                return Err(Error::format_line(0, "empty input"));
            }
            return Self::read_csv(bytes.as_slice());
        }
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Hex SHA-256 of the binary encoding.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn parse_csv_row(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<f64>()
                .map_err(|_| format!("cannot parse {f:?} as a number"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    #[serde(alias = "gmm")]
    GaussianMixture,
    #[serde(alias = "uniform")]
    UniformHypercube,
    #[serde(alias = "moons")]
    TwoMoons,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gmm" | "gaussian-mixture" => Ok(Self::GaussianMixture),
            "uniform" | "uniform-hypercube" => Ok(Self::UniformHypercube),
            "moons" | "two-moons" => Ok(Self::TwoMoons),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n: usize,
    pub dim: usize,
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_component_std")]
    pub component_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_components() -> usize {
    4
}

fn default_component_std() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn gmm(n: usize, dim: usize, components: usize, component_std: f64, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::GaussianMixture,
            n,
            dim,
            components,
            component_std,
            seed,
        }
    }

    pub fn uniform(n: usize, dim: usize, seed: u64) -> Self {
        Self {
            kind: SyntheticKind::UniformHypercube,
            n,
            dim,
            components: 1,
            component_std: default_component_std(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::Config("n and dim must be at least 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("components must be at least 1".into()));
        }
        if !(self.component_std > 0.0 && self.component_std.is_finite()) {
            return Err(Error::Config("component_std must be positive".into()));
        }
        if self.kind == SyntheticKind::TwoMoons && self.dim != 2 {
            return Err(Error::Config("two-moons requires dim = 2".into()));
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset. Values are rounded to `f32` so the
/// in-memory store equals what [`DatasetStore::save`] writes.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetStore> {
    generate_labeled(spec).map(|(d, _)| d)
}

/// Like [`generate`], also returning each point's component (GMM), moon
/// (two-moons) or 0 (hypercube).
pub fn generate_labeled(spec: &SyntheticSpec) -> Result<(DatasetStore, Vec<usize>)> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.dim);
    let mut points = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let round = |v: f64| (v as f32) as f64;
    match spec.kind {
        SyntheticKind::GaussianMixture => {
            let means = component_means(spec);
            let mut r = rng::stream(spec.seed, &[1]);
            for _ in 0..n {
                let c = rng::index(&mut r, spec.components);
                labels.push(c);
                for j in 0..d {
                    let v = means[c * d + j] + spec.component_std * rng::normal(&mut r);
                    points.push(round(v));
                }
            }
        }
        SyntheticKind::UniformHypercube => {
            let mut r = rng::stream(spec.seed, &[2]);
            for _ in 0..n * d {
                points.push(round(rng::uniform(&mut r)));
            }
            labels.resize(n, 0);
        }
        SyntheticKind::TwoMoons => {
            let mut r = rng::stream(spec.seed, &[3]);
            for i in 0..n {
                let moon = i % 2;
                let theta = std::f64::consts::PI * rng::uniform(&mut r);
                let (x, y) = if moon == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                points.push(round(x + spec.component_std * rng::normal(&mut r)));
                points.push(round(y + spec.component_std * rng::normal(&mut r)));
                labels.push(moon);
            }
        }
    }
    Ok((DatasetStore::new(points, d)?, labels))
}

/// Component means for a GMM spec, uniform in `[-1, 1]^d`.
pub fn component_means(spec: &SyntheticSpec) -> Vec<f64> {
    let mut r: Stream = rng::stream(spec.seed, &[0]);
    (0..spec.components * spec.dim)
        .map(|_| 2.0 * rng::uniform(&mut r) - 1.0)
        .collect()
}
