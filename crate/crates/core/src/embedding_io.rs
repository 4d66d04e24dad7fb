//! Binary embedding storage (EMB1) and dataset manifests.
//!
//! EMB1 layout, all integers little-endian:
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `MVEM`               |
//! | 4..8   | version `u32` = 1          |
//! | 8..12  | rows `u32`                 |
//! | 12..16 | cols `u32`                 |
//! | 16..20 | dtype `u32` (1 = `f32`)    |
//! | 20..24 | reserved `u32` = 0         |
//! | 24..   | `rows * cols` `f32` values, row-major |
//!
//! Files hold raw encoder output. Rows are normalized when a dataset or bank
//! is loaded, never when written.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::norm;

pub const MAGIC: [u8; 4] = *b"MVEM";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Rows closer than this to unit norm count as normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;
/// Rows with a norm below this cannot be normalized.
pub const ZERO_NORM_EPS: f64 = 1e-8;
/// Rows already this close to unit norm are left bit-for-bit untouched by
/// [`normalize_rows`], which makes normalization idempotent.
const RENORMALIZE_SLACK: f64 = 1e-6;

/// Dense row-major `f32` matrix of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::ZeroColumns);
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::LengthMismatch {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalized: false,
        })
    }

    pub fn empty(cols: usize) -> Result<Self> {
        Self::new(0, cols, Vec::new())
    }

    /// Builds a matrix from equally sized rows. `cols` is required so that an
    /// empty row list still has a dimension.
    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.cols..(index + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    /// True once the matrix went through [`normalize_rows`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Indices of rows whose norm is further than `tolerance` from 1.
    pub fn non_unit_rows(&self, tolerance: f64) -> Vec<usize> {
        self.iter_rows()
            .enumerate()
            .filter(|(_, row)| {
                let n = norm(row);
                !n.is_finite() || (n - 1.0).abs() > tolerance
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Copies a contiguous block of rows into a new matrix, keeping the flag.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Self> {
        let end = start.checked_add(count).filter(|&end| end <= self.rows);
        let Some(end) = end else {
            return Err(Error::BankSchema(format!(
                "row range {start}+{count} exceeds {} rows",
                self.rows
            )));
        };
        let mut out = Self::new(
            count,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )?;
        out.normalized = self.normalized;
        Ok(out)
    }

    /// Stacks matrices vertically. All inputs must share `cols`.
    pub fn concat(cols: usize, parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    found: part.cols,
                });
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Self::new(rows, cols, data)
    }
}

/// Divides every row by its Euclidean norm (accumulated in `f64`).
pub fn normalize_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for (i, row) in matrix.iter_rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRow(i));
        }
        let n = norm(row);
        if n < ZERO_NORM_EPS {
            return Err(Error::ZeroNormRow(i));
        }
        if (n - 1.0).abs() <= RENORMALIZE_SLACK {
            data.extend_from_slice(row);
        } else {
            data.extend(row.iter().map(|&v| (v as f64 / n) as f32));
        }
    }
    Ok(EmbeddingMatrix {
        rows: matrix.rows,
        cols: matrix.cols,
        data,
        normalized: true,
    })
}

fn to_u32(value: usize, what: &'static str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::MalformedHeader {
        offset: 0,
        reason: what,
    })
}

/// Serializes `matrix` as EMB1.
pub fn write_embeddings<W: Write>(matrix: &EmbeddingMatrix, mut sink: W) -> Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&to_u32(matrix.rows, "row count exceeds u32")?.to_le_bytes());
    header[12..16].copy_from_slice(&to_u32(matrix.cols, "column count exceeds u32")?.to_le_bytes());
    header[16..20].copy_from_slice(&DTYPE_F32.to_le_bytes());
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(matrix.data.len() * 4);
    for v in &matrix.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok(())
}

/// Reads as many bytes as the source yields, up to `buf.len()`.
fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte field"))
}

/// Parses an EMB1 stream. The result is not normalized.
pub fn read_embeddings<R: Read>(mut source: R) -> Result<EmbeddingMatrix> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut header)?;
    if got < 4 {
        return Err(Error::TruncatedHeader { offset: got as u64 });
    }
    if header[0..4] != MAGIC {
        let offset = header[0..4].iter().zip(MAGIC).position(|(a, b)| *a != b).unwrap_or(0);
        return Err(Error::BadMagic {
            offset: offset as u64,
        });
    }
    if got < HEADER_LEN {
        return Err(Error::TruncatedHeader { offset: got as u64 });
    }
    let version = le_u32(&header, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { offset: 4, version });
    }
    let rows = le_u32(&header, 8) as u64;
    let cols = le_u32(&header, 12) as u64;
    if cols == 0 {
        return Err(Error::MalformedHeader {
            offset: 12,
            reason: "column count must be at least 1",
        });
    }
    let dtype = le_u32(&header, 16);
    if dtype != DTYPE_F32 {
        return Err(Error::DtypeMismatch { offset: 16, dtype });
    }
    if le_u32(&header, 20) != 0 {
        return Err(Error::MalformedHeader {
            offset: 20,
            reason: "reserved field must be zero",
        });
    }

    let expected = rows * cols * 4;
    let mut payload = Vec::new();
    (&mut source).take(expected).read_to_end(&mut payload)?;
    if (payload.len() as u64) < expected {
        return Err(Error::TruncatedPayload {
            offset: HEADER_LEN as u64 + payload.len() as u64,
            expected,
        });
    }
    let mut probe = [0u8; 1];
    if read_up_to(&mut source, &mut probe)? != 0 {
        return Err(Error::TrailingData {
            offset: HEADER_LEN as u64 + expected,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    EmbeddingMatrix::new(rows as usize, cols as usize, data)
}

pub fn write_embeddings_file(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(matrix, BufWriter::new(file))
}

pub fn read_embeddings_file(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file))
}

/// Camera arrangement the views of a shape were rendered with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewConfig {
    Circular,
    Spherical,
    Random,
    Other,
}

/// One 3D shape: its views as rows of the dataset's embedding matrix, in
/// rendering order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub view_rows: Vec<usize>,
    pub view_config: ViewConfig,
}

/// JSON description of a dataset. Class order defines label indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub classes: Vec<String>,
    pub dim: usize,
    pub embedding_file: PathBuf,
    pub shapes: Vec<ShapeRecord>,
}

impl DatasetManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ManifestSchema(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Checks the manifest on its own and against the embedding matrix it
    /// references.
    pub fn validate(&self, views: &EmbeddingMatrix) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::ManifestSchema("classes must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for class in &self.classes {
            if !seen.insert(class.as_str()) {
                return Err(Error::DuplicateClass(class.clone()));
            }
        }
        if self.dim == 0 {
            return Err(Error::ManifestSchema("dim must be at least 1".into()));
        }
        if views.cols() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: views.cols(),
            });
        }
        let mut ids = HashSet::new();
        for shape in &self.shapes {
            if !ids.insert(shape.shape_id.as_str()) {
                return Err(Error::DuplicateShapeId(shape.shape_id.clone()));
            }
            if shape.view_rows.is_empty() {
                return Err(Error::EmptyViewList(shape.shape_id.clone()));
            }
            let mut rows = HashSet::new();
            for &row in &shape.view_rows {
                if row >= views.rows() {
                    return Err(Error::IndexOutOfRange {
                        shape_id: shape.shape_id.clone(),
                        row,
                        rows: views.rows(),
                    });
                }
                if !rows.insert(row) {
                    return Err(Error::DuplicateViewRow {
                        shape_id: shape.shape_id.clone(),
                        row,
                    });
                }
            }
            if let Some(label) = &shape.label {
                if self.class_index(label).is_none() {
                    return Err(Error::UnknownLabel {
                        shape_id: shape.shape_id.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A validated manifest together with its row-normalized view embeddings.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: EmbeddingMatrix,
    labels: Vec<Option<usize>>,
}

impl Dataset {
    /// Validates and normalizes. `views` may be raw or already normalized.
    pub fn new(manifest: DatasetManifest, views: EmbeddingMatrix) -> Result<Self> {
        manifest.validate(&views)?;
        let views = normalize_rows(&views)?;
        let labels = manifest
            .shapes
            .iter()
            .map(|s| s.label.as_deref().and_then(|l| manifest.class_index(l)))
            .collect();
        Ok(Self {
            manifest,
            views,
            labels,
        })
    }

    pub fn shapes(&self) -> &[ShapeRecord] {
        &self.manifest.shapes
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    /// Label index of the `i`-th shape, if it has one.
    pub fn label_index(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Writes the manifest to `manifest_path` and the embeddings next to it
    /// under the manifest's `embedding_file`.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        write_embeddings_file(&self.views, &dir.join(&self.manifest.embedding_file))?;
        std::fs::write(manifest_path, self.manifest.to_json()?)
            .map_err(|e| Error::io(manifest_path, e))
    }
}

/// Loads a manifest and the EMB1 file it references (resolved relative to the
/// manifest's directory), cross-validates them and normalizes the views.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::from_json(&text)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let views = read_embeddings_file(&dir.join(&manifest.embedding_file))?;
    Dataset::new(manifest, views)
}
