//! Embedding matrices and the `.lgem` binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LGEM" | version u32 (=1) | n_records u64 | dim u32 | flags u32
//! id block:     n_records x (u32 byte length, UTF-8 bytes)
//! scope block:  present iff flags bit 1
//!               u32 label count, labels as (u32 length, UTF-8 bytes),
//!               n_records x u32 label index
//! vector block: n_records x dim f32, row-major
//! crc32 u32 over every preceding byte
//! ```
//!
//! Flag bit 0 marks the matrix as L2-normalized. Unknown flag bits are rejected.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"LGEM";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_NORMALIZED: u32 = 1;
const FLAG_SCOPES: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_NORMALIZED | FLAG_SCOPES;

/// Fixed-size prefix: magic, version, n_records, dim, flags.
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

/// Rows flagged as normalized must have an L2 norm within this distance of 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected \"LGEM\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("unknown flag bits {0:#x}")]
    UnknownFlags(u32),
    #[error("truncated payload in {section}: expected at least {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(u64),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid UTF-8 in {section} entry {index}")]
    InvalidUtf8 { section: &'static str, index: u64 },
    #[error("scope label index {index} out of range for record {row} ({labels} labels)")]
    ScopeIndex { row: usize, index: u32, labels: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("expected {expected} {what}, found {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("record {id:?} has zero norm")]
    ZeroRow { id: String },
    #[error("record {id:?} is flagged normalized but has norm {norm}")]
    NotUnitNorm { id: String, norm: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Dictionary-coded scope column: a unique label table plus one index per record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeLabels {
    labels: Vec<String>,
    index: Vec<u32>,
}

impl ScopeLabels {
    /// Builds the dictionary in order of first appearance.
    pub fn from_labels<S: AsRef<str>>(per_record: &[S]) -> Self {
        let mut lookup: HashMap<&str, u32> = HashMap::new();
        let mut labels = Vec::new();
        let mut index = Vec::with_capacity(per_record.len());
        for label in per_record {
            let label = label.as_ref();
            let next = labels.len() as u32;
            let code = *lookup.entry(label).or_insert_with(|| {
                labels.push(label.to_owned());
                next
            });
            index.push(code);
        }
        Self { labels, index }
    }

    pub fn from_parts(labels: Vec<String>, index: Vec<u32>) -> Result<Self, StoreError> {
        for (row, &code) in index.iter().enumerate() {
            if code as usize >= labels.len() {
                return Err(StoreError::ScopeIndex {
                    row,
                    index: code,
                    labels: labels.len(),
                });
            }
        }
        Ok(Self { labels, index })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn codes(&self) -> &[u32] {
        &self.index
    }

    pub fn label_of(&self, row: usize) -> &str {
        &self.labels[self.index[row] as usize]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// N x F float32 feature store with unique record ids and optional scope labels.
///
/// Immutable once constructed; every constructor validates the invariants
/// (unique ids, finite entries, unit rows when flagged normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<String>,
    scopes: Option<ScopeLabels>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(
        ids: Vec<String>,
        dim: usize,
        vectors: Vec<f32>,
        scopes: Option<ScopeLabels>,
        normalized: bool,
    ) -> Result<Self, StoreError> {
        let matrix = Self {
            dim,
            vectors,
            ids,
            scopes,
            normalized,
        };
        matrix.validate()?;
        Ok(matrix)
    }

    /// Convenience constructor from per-row vectors.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(StoreError::LengthMismatch {
                    what: "row entries",
                    expected: dim,
                    actual: row.len(),
                });
            }
            vectors.extend_from_slice(row);
        }
        Self::new(ids, dim.max(1), vectors, None, false)
    }

    pub fn with_scopes(mut self, scopes: ScopeLabels) -> Result<Self, StoreError> {
        self.scopes = Some(scopes);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let n = self.ids.len();
        if self.vectors.len() != n * self.dim {
            return Err(StoreError::LengthMismatch {
                what: "vector entries",
                expected: n * self.dim,
                actual: self.vectors.len(),
            });
        }
        if let Some(scopes) = &self.scopes {
            if scopes.len() != n {
                return Err(StoreError::LengthMismatch {
                    what: "scope labels",
                    expected: n,
                    actual: scopes.len(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        for (pos, v) in self.vectors.iter().enumerate() {
            if !v.is_finite() {
                return Err(StoreError::NonFinite {
                    row: pos / self.dim,
                    col: pos % self.dim,
                });
            }
        }
        if self.normalized {
            for row in 0..n {
                let norm = row_norm(self.row(row));
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NotUnitNorm {
                        id: self.ids[row].clone(),
                        norm,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn scopes(&self) -> Option<&ScopeLabels> {
        self.scopes.as_ref()
    }

    pub fn scope_of(&self, row: usize) -> Option<&str> {
        self.scopes.as_ref().map(|s| s.label_of(row))
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Row lookup by id.
    pub fn id_index(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(row, id)| (id.as_str(), row))
            .collect()
    }

    /// Copies the given rows (in order) into a new matrix, keeping flags and scopes.
    pub fn select_rows(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
        }
        let scopes = self.scopes.as_ref().map(|s| {
            let per_row: Vec<&str> = rows.iter().map(|&r| s.label_of(r)).collect();
            ScopeLabels::from_labels(&per_row)
        });
        EmbeddingMatrix {
            dim: self.dim,
            vectors,
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            scopes,
            normalized: self.normalized,
        }
    }
}

/// L2 norm with float64 accumulation.
pub fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Rescales every row to unit L2 norm. Ids and scopes are carried over.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix, StoreError> {
    let mut vectors = Vec::with_capacity(matrix.vectors.len());
    for row in 0..matrix.len() {
        let values = matrix.row(row);
        let norm = row_norm(values);
        if norm == 0.0 {
            return Err(StoreError::ZeroRow {
                id: matrix.ids[row].clone(),
            });
        }
        vectors.extend(values.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        dim: matrix.dim,
        vectors,
        ids: matrix.ids.clone(),
        scopes: matrix.scopes.clone(),
        normalized: true,
    })
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Serializes `matrix` to the `.lgem` layout.
pub fn encode_store(matrix: &EmbeddingMatrix) -> Result<Vec<u8>, StoreError> {
    matrix.validate()?;
    let mut flags = 0;
    if matrix.normalized {
        flags |= FLAG_NORMALIZED;
    }
    if matrix.scopes.is_some() {
        flags |= FLAG_SCOPES;
    }
    let id_bytes: usize = matrix.ids.iter().map(|id| 4 + id.len()).sum();
    let mut buf =
        Vec::with_capacity(HEADER_LEN + id_bytes + matrix.vectors.len() * 4 + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    for id in &matrix.ids {
        put_str(&mut buf, id);
    }
    if let Some(scopes) = &matrix.scopes {
        buf.extend_from_slice(&(scopes.labels.len() as u32).to_le_bytes());
        for label in &scopes.labels {
            put_str(&mut buf, label);
        }
        for code in &scopes.index {
            buf.extend_from_slice(&code.to_le_bytes());
        }
    }
    for v in &matrix.vectors {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn write_store<W: Write>(matrix: &EmbeddingMatrix, mut destination: W) -> Result<(), StoreError> {
    let bytes = encode_store(matrix)?;
    destination.write_all(&bytes)?;
    destination.flush()?;
    Ok(())
}

pub fn read_store<R: Read>(mut source: R) -> Result<EmbeddingMatrix, StoreError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_store(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: u64, section: &'static str) -> Result<&'a [u8], StoreError> {
        let available = (self.bytes.len() - self.pos) as u64;
        if len > available {
            return Err(StoreError::Truncated {
                section,
                expected: (self.pos as u64).saturating_add(len),
                actual: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + len as usize];
        self.pos += len as usize;
        Ok(out)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, StoreError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64, StoreError> {
        let b = self.take(8, section)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, section: &'static str, index: u64) -> Result<String, StoreError> {
        let len = self.u32(section)?;
        let raw = self.take(u64::from(len), section)?;
        String::from_utf8(raw.to_vec()).map_err(|_| StoreError::InvalidUtf8 { section, index })
    }
}

/// Parses and validates a complete `.lgem` image.
pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "header")?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let n_records = cur.u64("header")?;
    let dim = cur.u32("header")?;
    let flags = cur.u32("header")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(StoreError::UnknownFlags(flags & !KNOWN_FLAGS));
    }
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    // Every id costs at least its 4-byte length prefix; reject absurd counts
    // before allocating.
    let remaining = (bytes.len() - cur.pos) as u64;
    if n_records.saturating_mul(4) > remaining {
        return Err(StoreError::Truncated {
            section: "id block",
            expected: (cur.pos as u64).saturating_add(n_records.saturating_mul(4)),
            actual: bytes.len() as u64,
        });
    }
    let n = n_records as usize;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n_records {
        ids.push(cur.string("id block", i)?);
    }
    let scopes = if flags & FLAG_SCOPES != 0 {
        let count = cur.u32("scope block")?;
        let mut labels = Vec::new();
        for i in 0..count {
            labels.push(cur.string("scope block", u64::from(i))?);
        }
        let raw = cur.take(n_records * 4, "scope block")?;
        let index = raw
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Some((labels, index))
    } else {
        None
    };
    let vector_bytes = n_records
        .checked_mul(u64::from(dim))
        .and_then(|v| v.checked_mul(4))
        .unwrap_or(u64::MAX);
    let expected_total = (cur.pos as u64).saturating_add(vector_bytes).saturating_add(4);
    if expected_total > bytes.len() as u64 {
        return Err(StoreError::Truncated {
            section: "vector block",
            expected: expected_total,
            actual: bytes.len() as u64,
        });
    }
    let raw = cur.take(vector_bytes, "vector block")?;
    let body_end = cur.pos;
    let stored = cur.u32("checksum")?;
    if cur.pos != bytes.len() {
        return Err(StoreError::TrailingBytes((bytes.len() - cur.pos) as u64));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(StoreError::ChecksumMismatch { stored, computed });
    }
    let vectors = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let scopes = match scopes {
        Some((labels, index)) => Some(ScopeLabels::from_parts(labels, index)?),
        None => None,
    };
    EmbeddingMatrix::new(ids, dim as usize, vectors, scopes, flags & FLAG_NORMALIZED != 0)
}
