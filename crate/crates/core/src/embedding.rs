//! Labeled embedding containers and the FRD1 on-disk format.
//!
//! FRD1 layout (all integers and floats little-endian):
//!
//! ```text
//! b"FRD1" | dim: u32 | count: u64 | count x (label: u8, dim x f32) | meta_len: u32 | meta: UTF-8 JSON object
//! ```
//!
//! Vectors are held as `f64` in memory and rounded to `f32` on write, so the
//! round trip is exact for any set whose components are `f32`-representable.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRD1_MAGIC: [u8; 4] = *b"FRD1";
const HEADER_LEN: u64 = 16;

/// Category code attached to every record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(u8);

impl Label {
    pub const REAL: Label = Label(0);
    pub const OUTLIER: Label = Label(254);
    pub const UNLABELED: Label = Label(255);
    pub const MAX_FAKE_ID: u8 = 250;

    pub fn new(code: u8) -> Result<Label> {
        match code {
            0..=250 | 254 | 255 => Ok(Label(code)),
            _ => Err(Error::Validation(format!("label code {code} is reserved"))),
        }
    }

    pub fn fake(id: u8) -> Result<Label> {
        if (1..=Self::MAX_FAKE_ID).contains(&id) {
            Ok(Label(id))
        } else {
            Err(Error::Validation(format!(
                "fake type id {id} outside 1..=250"
            )))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_real(self) -> bool {
        self.0 == 0
    }

    pub fn is_fake(self) -> bool {
        (1..=Self::MAX_FAKE_ID).contains(&self.0)
    }

    pub fn is_outlier(self) -> bool {
        self.0 == 254
    }

    /// Parses a CSV label cell: a numeric code or one of `real`, `fake`,
    /// `outlier`, `unlabeled`.
    pub fn parse_token(token: &str) -> Result<Label> {
        let t = token.trim();
        match t.to_ascii_lowercase().as_str() {
            "real" => return Ok(Label::REAL),
            "fake" => return Ok(Label(1)),
            "outlier" => return Ok(Label::OUTLIER),
            "unlabeled" => return Ok(Label::UNLABELED),
            _ => {}
        }
        t.parse::<u8>()
            .map_err(|_| Error::Validation(format!("unknown label token {t:?}")))
            .and_then(Label::new)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "real"),
            254 => write!(f, "outlier"),
            255 => write!(f, "unlabeled"),
            id => write!(f, "fake{id}"),
        }
    }
}

/// Labeled `dim`-dimensional vectors plus advisory string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    labels: Vec<Label>,
    values: Vec<f64>,
    meta: BTreeMap<String, String>,
}

impl EmbeddingSet {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("dim must be at least 1".into()));
        }
        if dim > u32::MAX as usize {
            return Err(Error::Validation(format!("dim {dim} exceeds u32")));
        }
        Ok(EmbeddingSet {
            dim,
            labels: Vec::new(),
            values: Vec::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, label: Label, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Validation(format!(
                "record {} has {} components, expected {}",
                self.labels.len(),
                vector.len(),
                self.dim
            )));
        }
        // values are held at storage precision so a set equals its FRD1 image
        if let Some(j) = vector.iter().position(|&v| !(v as f32).is_finite()) {
            return Err(Error::Validation(format!(
                "record {} component {j} is not finite as f32",
                self.labels.len()
            )));
        }
        self.labels.push(label);
        self.values.extend(vector.iter().map(|&v| v as f32 as f64));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dvector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.vector(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &[f64])> + '_ {
        self.labels
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim))
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    /// Sorted distinct labels present in the set.
    pub fn distinct_labels(&self) -> Vec<Label> {
        let mut out = self.labels.clone();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// All vectors whose label satisfies `keep`, in record order.
    pub fn vectors_where(&self, keep: impl Fn(Label) -> bool) -> Vec<DVector<f64>> {
        self.iter()
            .filter(|(l, _)| keep(*l))
            .map(|(_, v)| DVector::from_column_slice(v))
            .collect()
    }
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|source| Error::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Serializes `set` as FRD1 and returns the number of bytes written.
pub fn write_frd1<W: Write>(set: &EmbeddingSet, destination: W) -> Result<u64> {
    let mut w = CountingWriter {
        inner: destination,
        written: 0,
    };
    w.put(&FRD1_MAGIC)?;
    w.put(&(set.dim as u32).to_le_bytes())?;
    w.put(&(set.len() as u64).to_le_bytes())?;
    let mut record = Vec::with_capacity(1 + 4 * set.dim);
    for (label, v) in set.iter() {
        record.clear();
        record.push(label.code());
        for &x in v {
            record.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.put(&record)?;
    }
    let meta = serde_json::to_string(&set.meta)?;
    w.put(&(meta.len() as u32).to_le_bytes())?;
    w.put(meta.as_bytes())?;
    w.inner.flush().map_err(|source| Error::Io {
        offset: w.written,
        source,
    })?;
    Ok(w.written)
}

/// Parses an FRD1 stream, validating every record.
pub fn read_frd1<R: Read>(mut source: R) -> Result<EmbeddingSet> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|source| Error::Io { offset: 0, source })?;
    parse_frd1(&bytes)
}

pub fn parse_frd1(bytes: &[u8]) -> Result<EmbeddingSet> {
    let actual = bytes.len() as u64;
    if actual < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual,
        });
    }
    if bytes[..4] != FRD1_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"FRD1\"",
            &bytes[..4]
        )));
    }
    if actual < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual,
        });
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let record_len = 1 + 4 * dim as u64;
    let body_end = count
        .checked_mul(record_len)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("record count {count} overflows")))?;
    if actual < body_end + 4 {
        return Err(Error::Truncated {
            expected: body_end + 4,
            actual,
        });
    }
    let mut set = EmbeddingSet::new(dim)?;
    set.labels.reserve(count as usize);
    set.values.reserve(count as usize * dim);
    let mut off = HEADER_LEN as usize;
    for i in 0..count {
        let label = Label::new(bytes[off]).map_err(|_| {
            Error::Validation(format!("record {i} has reserved label {}", bytes[off]))
        })?;
        off += 1;
        for j in 0..dim {
            let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Validation(format!(
                    "record {i} component {j} is not finite"
                )));
            }
            set.values.push(x as f64);
            off += 4;
        }
        set.labels.push(label);
    }
    let meta_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as u64;
    off += 4;
    let expected = body_end + 4 + meta_len;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after meta block",
            actual - expected
        )));
    }
    let meta_text = std::str::from_utf8(&bytes[off..])
        .map_err(|e| Error::Format(format!("meta block is not UTF-8: {e}")))?;
    set.meta = parse_meta(meta_text)?;
    Ok(set)
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("meta block is not JSON: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Error::Format("meta block is not a JSON object".into()));
    };
    Ok(map
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect())
}

/// Reads a header row plus numeric rows; every column except `label_column`
/// becomes a vector component, in header order.
pub fn import_csv<R: Read>(source: R, label_column: &str) -> Result<EmbeddingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("no column named {label_column:?}"),
        })?;
    let mut set = EmbeddingSet::new(headers.len() - 1)?;
    let mut vector = Vec::with_capacity(set.dim);
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
        }
        vector.clear();
        let mut label = Label::UNLABELED;
        for (j, cell) in row.iter().enumerate() {
            if j == label_idx {
                label = Label::parse_token(cell).map_err(|e| match e {
                    Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
                    other => other,
                })?;
            } else {
                let x: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {:?} is not numeric: {cell:?}", &headers[j]),
                })?;
                vector.push(x);
            }
        }
        set.push(label, &vector).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            other => other,
        })?;
    }
    Ok(set)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { offset: 0, source },
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}
