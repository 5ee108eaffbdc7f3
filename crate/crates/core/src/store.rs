//! Embedding matrices and their row metadata.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "EMB1" | u32 version = 1 | u64 count | u32 dim | u8 dtype (0 = f32) | 7 x 0u8
//! count * dim f32, row-major
//! ```
//!
//! The metadata sidecar is UTF-8 JSON lines, one object per row with keys
//! `row_index`, `tile_id`, `slide_id`, `source` and an optional `extra`
//! string map.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: u64 = 28;
const DTYPE_F32: u8 = 0;

/// Rows whose norm is this close to 1 count as unit vectors.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0}, only f32 (0) is accepted")]
    UnsupportedDtype(u8),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("non-finite value in row {row}")]
    NonFiniteValue { row: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("data length {len} is not a multiple of dim {dim}")]
    ShapeMismatch { len: usize, dim: usize },
    #[error("expected {expected} metadata records, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate row_index {row_index} on line {line}")]
    DuplicateRowIndex { row_index: usize, line: usize },
    #[error("file not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn open(path: &Path) -> Result<File, StoreError> {
    File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => StoreError::NotFound(path.display().to_string()),
        _ => StoreError::Io(e),
    })
}

/// Dense row-major f32 matrix. Immutable once built, so it can be shared
/// across worker threads freely.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Build from a row-major buffer. Every value must be finite.
    pub fn from_vec(dim: usize, data: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(StoreError::ShapeMismatch {
                len: data.len(),
                dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue { row: pos / dim });
        }
        Ok(EmbeddingMatrix {
            count: data.len() / dim,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn empty(dim: usize) -> Result<Self, StoreError> {
        Self::from_vec(dim, Vec::new())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Divide every row by its L2 norm. Fails on the first all-zero row and
    /// leaves the matrix untouched in that case.
    pub fn normalize(mut self) -> Result<Self, StoreError> {
        if let Some(row) = self.rows().position(|r| l2_norm(r) == 0.0) {
            return Err(StoreError::ZeroNormRow { row });
        }
        for r in self.data.chunks_exact_mut(self.dim) {
            normalize_row(r);
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

fn normalize_row(row: &mut [f32]) {
    let n = l2_norm(row);
    for v in row.iter_mut() {
        *v = (*v as f64 / n) as f32;
    }
}

/// Load an embedding file, streaming one row at a time.
pub fn load_embeddings(path: &Path, normalize: bool) -> Result<EmbeddingMatrix, StoreError> {
    let file = open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    if file_len < 4 {
        return Err(StoreError::BadMagic { expected: "EMB1" });
    }
    r.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(StoreError::BadMagic { expected: "EMB1" });
    }
    if file_len < EMBEDDING_HEADER_LEN {
        return Err(StoreError::TruncatedFile {
            expected: EMBEDDING_HEADER_LEN,
            found: file_len,
        });
    }
    let version = binio::read_u32(&mut r)?;
    if version != EMBEDDING_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = binio::read_u64(&mut r)?;
    let dim = binio::read_u32(&mut r)? as usize;
    let dtype = binio::read_u8(&mut r)?;
    let _pad: [u8; 7] = binio::read_array(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(StoreError::UnsupportedDtype(dtype));
    }
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }

    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(EMBEDDING_HEADER_LEN))
        .unwrap_or(u64::MAX);
    if file_len < expected {
        return Err(StoreError::TruncatedFile {
            expected,
            found: file_len,
        });
    }
    if file_len > expected {
        return Err(StoreError::TrailingBytes {
            expected,
            found: file_len,
        });
    }

    let count = count as usize;
    let mut data = Vec::with_capacity(count * dim);
    let mut raw = vec![0u8; dim * 4];
    let mut row = vec![0f32; dim];
    for i in 0..count {
        r.read_exact(&mut raw)?;
        for (v, b) in row.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue { row: i });
        }
        if normalize {
            if l2_norm(&row) == 0.0 {
                return Err(StoreError::ZeroNormRow { row: i });
            }
            normalize_row(&mut row);
        }
        data.extend_from_slice(&row);
    }

    Ok(EmbeddingMatrix {
        count,
        dim,
        data,
        normalized: normalize,
    })
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    binio::write_u32(&mut w, EMBEDDING_VERSION)?;
    binio::write_u64(&mut w, m.count as u64)?;
    binio::write_u32(&mut w, m.dim as u32)?;
    binio::write_u8(&mut w, DTYPE_F32)?;
    w.write_all(&[0u8; 7])?;
    for row in m.rows() {
        binio::write_f32s(&mut w, row)?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance of one embedding row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMetadata {
    pub row_index: usize,
    pub tile_id: String,
    pub slide_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// Load a JSON-lines sidecar and return the records in row order.
/// Blank lines are ignored; line numbers in errors are 1-based.
pub fn load_metadata(path: &Path, expected_count: usize) -> Result<Vec<RowMetadata>, StoreError> {
    let r = BufReader::new(open(path)?);
    let mut slots: Vec<Option<RowMetadata>> = vec![None; expected_count];
    let mut found = 0usize;
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RowMetadata =
            serde_json::from_str(&line).map_err(|e| StoreError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        found += 1;
        if rec.row_index >= expected_count {
            // Either the sidecar is longer than the matrix or the index is
            // garbage; a count mismatch is the more useful report.
            if found > expected_count {
                continue;
            }
            return Err(StoreError::MalformedRecord {
                line: line_no,
                reason: format!(
                    "row_index {} out of range for {} rows",
                    rec.row_index, expected_count
                ),
            });
        }
        let slot = &mut slots[rec.row_index];
        if slot.is_some() {
            return Err(StoreError::DuplicateRowIndex {
                row_index: rec.row_index,
                line: line_no,
            });
        }
        *slot = Some(rec);
    }
    if found != expected_count {
        return Err(StoreError::CountMismatch {
            expected: expected_count,
            found,
        });
    }
    Ok(slots.into_iter().map(|s| s.unwrap()).collect())
}

pub fn write_metadata(path: &Path, records: &[RowMetadata]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(m: &EmbeddingMatrix) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.emb");
        write_embeddings(&p, m).unwrap();
        (dir, p)
    }

    #[test]
    fn empty_matrix_loads() {
        let m = EmbeddingMatrix::empty(16).unwrap();
        let (_d, p) = write_tmp(&m);
        let got = load_embeddings(&p, true).unwrap();
        assert_eq!(got.count(), 0);
        assert_eq!(got.dim(), 16);
    }

    #[test]
    fn normalizes_three_four_five() {
        let m = EmbeddingMatrix::from_vec(2, vec![3.0, 4.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let (_d, p) = write_tmp(&m);
        let got = load_embeddings(&p, true).unwrap();
        assert!(got.is_normalized());
        assert_eq!(got.row(0), &[0.6f32, 0.8]);
        for r in got.rows() {
            assert!((l2_norm(r) - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn truncated_payload() {
        let m = EmbeddingMatrix::from_vec(2, (0..10).map(|v| v as f32 + 1.0).collect()).unwrap();
        let (_d, p) = write_tmp(&m);
        let bytes = std::fs::read(&p).unwrap();
        // drop the fifth row
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_embeddings(&p, false),
            Err(StoreError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"NOPE0000000000000000000000000000").unwrap();
        assert!(matches!(load_embeddings(&p, false), Err(StoreError::BadMagic { .. })));

        let m = EmbeddingMatrix::from_vec(1, vec![1.0]).unwrap();
        write_embeddings(&p, &m).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[20] = 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_embeddings(&p, false), Err(StoreError::UnsupportedDtype(1))));
    }

    #[test]
    fn non_finite_and_zero_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let m = EmbeddingMatrix::from_vec(2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        write_embeddings(&p, &m).unwrap();
        assert!(load_embeddings(&p, false).is_ok());
        assert!(matches!(
            load_embeddings(&p, true),
            Err(StoreError::ZeroNormRow { row: 1 })
        ));

        let mut bytes = std::fs::read(&p).unwrap();
        let off = EMBEDDING_HEADER_LEN as usize + 8;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_embeddings(&p, false),
            Err(StoreError::NonFiniteValue { row: 1 })
        ));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_embeddings(Path::new("/nonexistent/e.emb"), false),
            Err(StoreError::NotFound(_))
        ));
    }

    proptest! {
        #[test]
        fn raw_round_trip_is_byte_identical(
            dim in 1usize..6,
            vals in proptest::collection::vec(-1e6f32..1e6, 0..60),
        ) {
            let n = vals.len() / dim * dim;
            let m = EmbeddingMatrix::from_vec(dim, vals[..n].to_vec()).unwrap();
            let (dir, p) = write_tmp(&m);
            let bytes = std::fs::read(&p).unwrap();
            let loaded = load_embeddings(&p, false).unwrap();
            for i in 0..loaded.count() {
                let off = EMBEDDING_HEADER_LEN as usize + i * dim * 4;
                let expect: Vec<f32> = bytes[off..off + dim * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                prop_assert_eq!(loaded.row(i), &expect[..]);
            }
            let p2 = dir.path().join("again.emb");
            write_embeddings(&p2, &loaded).unwrap();
            prop_assert_eq!(std::fs::read(&p2).unwrap(), bytes);
        }
    }

    fn meta_line(i: usize) -> String {
        format!(r#"{{"row_index":{i},"tile_id":"t{i}","slide_id":"s","source":"TCGA"}}"#)
    }

    #[test]
    fn metadata_ok_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let body = format!(
            "{}\n{}\n{}\n",
            meta_line(2),
            meta_line(0),
            r#"{"row_index":1,"tile_id":"t1","slide_id":"s","source":"GTEx","extra":{"site":"lung"}}"#
        );
        std::fs::write(&p, body).unwrap();
        let recs = load_metadata(&p, 3).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().enumerate().all(|(i, r)| r.row_index == i));
        assert_eq!(recs[1].extra["site"], "lung");
    }

    #[test]
    fn metadata_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, format!("{}\n{}\n", meta_line(0), meta_line(1))).unwrap();
        assert!(matches!(
            load_metadata(&p, 3),
            Err(StoreError::CountMismatch { expected: 3, found: 2 })
        ));

        std::fs::write(&p, format!("{}\n{}\n{}\n", meta_line(0), meta_line(1), meta_line(1))).unwrap();
        assert!(matches!(
            load_metadata(&p, 3),
            Err(StoreError::DuplicateRowIndex { row_index: 1, line: 3 })
        ));

        std::fs::write(&p, format!("{}\nnot json\n", meta_line(0))).unwrap();
        assert!(matches!(
            load_metadata(&p, 2),
            Err(StoreError::MalformedRecord { line: 2, .. })
        ));
    }
}
