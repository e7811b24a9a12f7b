//! Named embedding matrices and their on-disk bundle format.
//!
//! A bundle is a directory holding `manifest.json` (shape, names, flags) and
//! `data.bin` (row-major little-endian `f32` values).

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::norm_f64;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
/// Allowed deviation of a row norm from 1 when a bundle claims to be normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("size mismatch: expected {expected} bytes of data, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("bundle must hold at least one row")]
    Empty,
    #[error("{names} names for {rows} rows")]
    NameCount { names: usize, rows: usize },
    #[error("empty name at row {0}")]
    EmptyName(usize),
    #[error("duplicate name {0:?}")]
    DuplicateName(String),
    #[error("norm violation: row {row} has norm {norm}")]
    NormViolation { row: usize, norm: f64 },
    #[error("zero-norm row {0}")]
    ZeroNorm(usize),
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dim: usize,
    count: usize,
    normalized: bool,
    dtype: String,
    names: Vec<String>,
}

/// Row-major `count × dim` matrix of `f32` values with one unique name per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    dim: usize,
    names: Vec<String>,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingBundle {
    /// Builds a bundle and checks every invariant, including row norms when
    /// `normalized` is set.
    pub fn new(
        dim: usize,
        names: Vec<String>,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, TensorIoError> {
        if dim == 0 {
            return Err(TensorIoError::ZeroDim);
        }
        if data.len() % dim != 0 {
            return Err(TensorIoError::SizeMismatch {
                expected: names.len() * dim * 4,
                found: data.len() * 4,
            });
        }
        let rows = data.len() / dim;
        if rows == 0 {
            return Err(TensorIoError::Empty);
        }
        if names.len() != rows {
            return Err(TensorIoError::NameCount {
                names: names.len(),
                rows,
            });
        }
        let mut seen = HashSet::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(TensorIoError::EmptyName(i));
            }
            if !seen.insert(name.as_str()) {
                return Err(TensorIoError::DuplicateName(name.clone()));
            }
        }
        let bundle = Self {
            dim,
            names,
            data,
            normalized,
        };
        for row in 0..bundle.count() {
            if bundle.row(row).iter().any(|v| !v.is_finite()) {
                return Err(TensorIoError::NonFinite(row));
            }
            if normalized {
                let norm = norm_f64(bundle.row(row));
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(TensorIoError::NormViolation { row, norm });
                }
            }
        }
        Ok(bundle)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// The whole matrix, row-major.
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Raw little-endian bytes as written to `data.bin`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Reads a bundle directory.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle, TensorIoError> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TensorIoError::Manifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
    let bad = |reason: String| TensorIoError::Manifest {
        path: manifest_path.clone(),
        reason,
    };
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE {
        return Err(bad(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.names.len() != manifest.count {
        return Err(bad(format!(
            "count is {} but {} names are listed",
            manifest.count,
            manifest.names.len()
        )));
    }
    if manifest.dim == 0 {
        return Err(TensorIoError::ZeroDim);
    }

    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let expected = manifest
        .count
        .checked_mul(manifest.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad("count × dim overflows".into()))?;
    if bytes.len() != expected {
        return Err(TensorIoError::SizeMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingBundle::new(manifest.dim, manifest.names, data, manifest.normalized)
}

/// Writes a bundle directory, creating it if needed.
pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dim: bundle.dim,
        count: bundle.count(),
        normalized: bundle.normalized,
        dtype: DTYPE.to_string(),
        names: bundle.names.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, bundle.to_le_bytes()).map_err(io_err(&data_path))?;
    Ok(())
}

/// Divides every row by its `f64` L2 norm and marks the bundle normalized.
pub fn normalize_rows(bundle: &EmbeddingBundle) -> Result<EmbeddingBundle, TensorIoError> {
    let mut data = Vec::with_capacity(bundle.data.len());
    for (i, row) in bundle.rows().enumerate() {
        let norm = norm_f64(row);
        if norm == 0.0 {
            return Err(TensorIoError::ZeroNorm(i));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingBundle::new(bundle.dim, bundle.names.clone(), data, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn save_then_load_single_value() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(1, names(1), vec![0.5], false).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        assert_eq!(load_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn two_row_bundle_loads() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(3, names(2), vec![1., 0., 0., 0., 0.6, 0.8], true).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.count(), 2);
        assert!(loaded.is_normalized());
    }

    #[test]
    fn declared_count_larger_than_data_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(2, names(2), vec![1., 2., 3., 4.], false).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let manifest = Manifest {
            version: 1,
            dim: 2,
            count: 3,
            normalized: false,
            dtype: DTYPE.into(),
            names: names(3),
        };
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn normalized_flag_with_long_row_is_norm_violation() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(3, names(1), vec![1., 1., 0.], false).unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            text.replace("\"normalized\": false", "\"normalized\": true"),
        )
        .unwrap();
        match load_bundle(dir.path()).unwrap_err() {
            TensorIoError::NormViolation { row, norm } => {
                assert_eq!(row, 0);
                assert!((norm - 2f64.sqrt()).abs() < 1e-12);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(TensorIoError::Io { .. })
        ));
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(TensorIoError::Manifest { .. })
        ));
        let bad_dtype = r#"{"version":1,"dim":1,"count":1,"normalized":false,"dtype":"f16","names":["a"]}"#;
        fs::write(dir.path().join(MANIFEST_FILE), bad_dtype).unwrap();
        fs::write(dir.path().join(DATA_FILE), [0u8; 4]).unwrap();
        assert!(load_bundle(dir.path()).unwrap_err().to_string().contains("dtype"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = EmbeddingBundle::new(1, vec!["a".into(), "a".into()], vec![1., 2.], false)
            .unwrap_err();
        assert!(matches!(err, TensorIoError::DuplicateName(_)));
    }

    #[test]
    fn save_to_unwritable_location_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let b = EmbeddingBundle::new(1, names(1), vec![0.5], false).unwrap();
        assert!(save_bundle(&b, blocker.join("bundle")).is_err());
    }

    #[test]
    fn normalize_three_four() {
        let b = EmbeddingBundle::new(2, names(1), vec![3., 4.], false).unwrap();
        let n = normalize_rows(&b).unwrap();
        assert_eq!(n.row(0), &[0.6f32, 0.8]);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_unit_row_unchanged() {
        let b = EmbeddingBundle::new(2, names(1), vec![1., 0.], false).unwrap();
        assert_eq!(normalize_rows(&b).unwrap().row(0), &[1.0f32, 0.0]);
    }

    #[test]
    fn normalize_zero_row_names_index() {
        let b = EmbeddingBundle::new(2, names(2), vec![1., 0., 0., 0.], false).unwrap();
        let err = normalize_rows(&b).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm row 1");
    }

    fn arb_bundle() -> impl Strategy<Value = EmbeddingBundle> {
        (1usize..6, 1usize..9).prop_flat_map(|(rows, dim)| {
            prop::collection::vec(-10.0f32..10.0, rows * dim).prop_map(move |data| {
                EmbeddingBundle::new(dim, names(rows), data, false).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(b in arb_bundle()) {
            let dir = tempfile::tempdir().unwrap();
            save_bundle(&b, dir.path()).unwrap();
            let loaded = load_bundle(dir.path()).unwrap();
            prop_assert_eq!(loaded.to_le_bytes(), b.to_le_bytes());
            prop_assert_eq!(loaded, b);
        }

        #[test]
        fn normalize_is_idempotent_and_direction_preserving(b in arb_bundle()) {
            prop_assume!(b.rows().all(|r| norm_f64(r) > 1e-3));
            let once = normalize_rows(&b).unwrap();
            let twice = normalize_rows(&once).unwrap();
            for (x, y) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-7);
            }
            for (orig, unit) in b.rows().zip(once.rows()) {
                let cos = crate::scalar::dot_f64(orig, unit) / (norm_f64(orig) * norm_f64(unit));
                prop_assert!(cos >= 1.0 - 1e-7);
            }
        }
    }
}
