//! Labelled feature pools: on-disk tables and synthetic Gaussian clusters.
//!
//! Two table formats are supported.
//!
//! Text (`FT1`): a header line `FT1 <dim>` followed by one record per line,
//! `sample_id<TAB>class_label<TAB>v1 v2 ... vD`. Values are written with the
//! shortest representation that round-trips exactly.
//!
//! Binary (`FTB1`): magic `FTB1`, little-endian `u32` dim, `u64` record count,
//! then per record a `u16` length + UTF-8 id, a `u16` length + UTF-8 label and
//! `dim` little-endian `f64` values.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::FeatureVec;
use crate::rng::Rng;

pub const TEXT_MAGIC: &str = "FT1";
pub const BINARY_MAGIC: &[u8; 4] = b"FTB1";

/// Environment variable naming the search root for relative pool paths.
pub const DATA_DIR_ENV: &str = "OSFSL_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub sample_id: String,
    pub class_label: String,
    pub feature: FeatureVec,
}

/// A labelled pool of equal-dimension feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    records: Vec<Record>,
    /// Distinct labels in first-appearance order.
    classes: Vec<String>,
    /// Record indices per entry of `classes`.
    by_class: Vec<Vec<usize>>,
}

impl FeatureSet {
    pub fn new(dim: usize, records: Vec<Record>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::FeatureSet("dimension must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(records.len());
        let mut class_pos: HashMap<&str, usize> = HashMap::new();
        let mut classes = Vec::new();
        let mut by_class: Vec<Vec<usize>> = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.feature.dim() != dim {
                return Err(Error::FeatureSet(format!(
                    "record {} ({}) has dimension {}, expected {dim}",
                    i + 1,
                    rec.sample_id,
                    rec.feature.dim()
                )));
            }
            if !ids.insert(rec.sample_id.as_str()) {
                return Err(Error::FeatureSet(format!(
                    "record {}: duplicate sample_id `{}`",
                    i + 1,
                    rec.sample_id
                )));
            }
            let pos = *class_pos.entry(&rec.class_label).or_insert_with(|| {
                classes.push(rec.class_label.clone());
                by_class.push(Vec::new());
                classes.len() - 1
            });
            by_class[pos].push(i);
        }
        if classes.len() < 2 {
            return Err(Error::FeatureSet(format!(
                "need at least 2 classes, found {}",
                classes.len()
            )));
        }
        Ok(FeatureSet {
            dim,
            records,
            classes,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Record indices belonging to the class at `class_pos` in [`classes`](Self::classes).
    pub fn class_members(&self, class_pos: usize) -> &[usize] {
        &self.by_class[class_pos]
    }

    /// Keeps only records whose label satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(&str) -> bool) -> Result<FeatureSet> {
        let records = self
            .records
            .iter()
            .filter(|r| keep(&r.class_label))
            .cloned()
            .collect();
        FeatureSet::new(self.dim, records)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Binary,
}

/// Resolves a relative path against `$OSFSL_DATA_DIR` when it is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn table_err(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::Table {
        path: path.to_path_buf(),
        row,
        reason: reason.into(),
    }
}

/// Loads a table in either format, detected from the leading bytes.
pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = resolve_path(path.as_ref());
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&path, &bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| table_err(&path, 0, format!("not UTF-8 text: {e}")))?;
        parse_text(&path, text)
    }
}

fn parse_text(path: &Path, text: &str) -> Result<FeatureSet> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| table_err(path, 1, "empty file"))?;
    let dim = match header.split_whitespace().collect::<Vec<_>>()[..] {
        [TEXT_MAGIC, d] => d
            .parse::<usize>()
            .map_err(|e| table_err(path, 1, format!("bad dimension `{d}`: {e}")))?,
        _ => {
            return Err(table_err(
                path,
                1,
                format!("expected `{TEXT_MAGIC} <dim>` header"),
            ))
        }
    };
    if dim == 0 {
        return Err(table_err(path, 1, "dimension must be positive"));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(label), Some(values)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(table_err(path, row, "expected three tab-separated fields"));
        };
        let values = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| table_err(path, row, format!("bad value `{v}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(table_err(
                path,
                row,
                format!(
                    "dimension mismatch: {} values, header says {dim}",
                    values.len()
                ),
            ));
        }
        if !seen.insert(id.to_string()) {
            return Err(table_err(path, row, format!("duplicate sample_id `{id}`")));
        }
        let feature = FeatureVec::new(values).map_err(|e| table_err(path, row, e.to_string()))?;
        records.push(Record {
            sample_id: id.to_string(),
            class_label: label.to_string(),
            feature,
        });
    }
    FeatureSet::new(dim, records).map_err(|e| table_err(path, 0, e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn string(&mut self) -> Option<std::result::Result<&'a str, std::str::Utf8Error>> {
        let n = self.u16()? as usize;
        self.take(n).map(std::str::from_utf8)
    }
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 4 };
    let truncated = |row| table_err(path, row, "truncated binary table");
    let dim = cur
        .take(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| truncated(0))?;
    let count = cur
        .take(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(0))?;
    if dim == 0 {
        return Err(table_err(path, 0, "dimension must be positive"));
    }

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut seen = HashSet::new();
    for row in 1..=count as usize {
        let id = cur
            .string()
            .ok_or_else(|| truncated(row))?
            .map_err(|e| table_err(path, row, format!("sample_id is not UTF-8: {e}")))?;
        let label = cur
            .string()
            .ok_or_else(|| truncated(row))?
            .map_err(|e| table_err(path, row, format!("class_label is not UTF-8: {e}")))?;
        let raw = cur.take(dim * 8).ok_or_else(|| truncated(row))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(id) {
            return Err(table_err(path, row, format!("duplicate sample_id `{id}`")));
        }
        let feature = FeatureVec::new(values).map_err(|e| table_err(path, row, e.to_string()))?;
        records.push(Record {
            sample_id: id.to_string(),
            class_label: label.to_string(),
            feature,
        });
    }
    if cur.pos != bytes.len() {
        return Err(table_err(
            path,
            count as usize,
            "trailing bytes after last record",
        ));
    }
    FeatureSet::new(dim, records).map_err(|e| table_err(path, 0, e.to_string()))
}

pub fn write_feature_table(
    fs: &FeatureSet,
    path: impl AsRef<Path>,
    format: TableFormat,
) -> Result<()> {
    let path = resolve_path(path.as_ref());
    let bytes = match format {
        TableFormat::Text => encode_text(fs)?,
        TableFormat::Binary => encode_binary(fs)?,
    };
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    out.write_all(&bytes).map_err(io_err(&path))?;
    out.flush().map_err(io_err(&path))
}

fn encode_text(fs: &FeatureSet) -> Result<Vec<u8>> {
    use std::fmt::Write as _;
    let mut s = String::new();
    writeln!(s, "{TEXT_MAGIC} {}", fs.dim).unwrap();
    for (i, rec) in fs.records.iter().enumerate() {
        for field in [&rec.sample_id, &rec.class_label] {
            if field.is_empty() || field.contains(['\t', '\n', '\r']) {
                return Err(Error::FeatureSet(format!(
                    "record {}: `{field}` cannot be stored in a text table",
                    i + 1
                )));
            }
        }
        write!(s, "{}\t{}\t", rec.sample_id, rec.class_label).unwrap();
        for (k, v) in rec.feature.iter().enumerate() {
            if k > 0 {
                s.push(' ');
            }
            write!(s, "{v:?}").unwrap();
        }
        s.push('\n');
    }
    Ok(s.into_bytes())
}

fn encode_binary(fs: &FeatureSet) -> Result<Vec<u8>> {
    let dim = u32::try_from(fs.dim)
        .map_err(|_| Error::FeatureSet("dimension does not fit in u32".into()))?;
    let mut out = Vec::with_capacity(16 + fs.records.len() * (fs.dim * 8 + 16));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(fs.records.len() as u64).to_le_bytes());
    for (i, rec) in fs.records.iter().enumerate() {
        for field in [&rec.sample_id, &rec.class_label] {
            let len = u16::try_from(field.len()).map_err(|_| {
                Error::FeatureSet(format!("record {}: field longer than 65535 bytes", i + 1))
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(field.as_bytes());
        }
        for v in rec.feature.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parameters of a synthetic Gaussian-cluster pool.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub within_class_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            samples_per_class: 60,
            dim: 16,
            center_scale: 6.0,
            within_class_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("num_classes", "must be at least 2"));
        }
        if self.samples_per_class < 1 {
            return Err(Error::param("samples_per_class", "must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::param("dim", "must be at least 2"));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::param("center_scale", "must be positive and finite"));
        }
        if !(self.within_class_sigma > 0.0 && self.within_class_sigma.is_finite()) {
            return Err(Error::param(
                "within_class_sigma",
                "must be positive and finite",
            ));
        }
        Ok(())
    }
}

/// Draws a pool of isotropic Gaussian clusters.
///
/// Draw order: all class centers first (class-major, then coordinate), each
/// coordinate uniform in `[-center_scale, center_scale)`; then samples
/// class-major, each coordinate `center + sigma * N(0, 1)`. Sample `s` of
/// class `c` gets id `c{c}-s{s}` and label `class{c}`.
pub fn synth_gaussian_features(spec: &SyntheticSpec) -> Result<FeatureSet> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| rng.uniform_range(-spec.center_scale, spec.center_scale))
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let values = center
                .iter()
                .map(|m| m + spec.within_class_sigma * rng.standard_normal())
                .collect();
            records.push(Record {
                sample_id: format!("c{c}-s{s}"),
                class_label: format!("class{c}"),
                feature: FeatureVec::new(values)?,
            });
        }
    }
    FeatureSet::new(spec.dim, records)
}
