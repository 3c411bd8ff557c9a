//! Matrix files and run manifests.
//!
//! A matrix is stored as headerless CSV, one row per line, every value in
//! scientific notation with 17 significant digits. A sidecar
//! `<stem>.meta.json` records `{"rows", "cols", "role", "seed"}`; when the
//! sidecar exists, readers reject files whose shape disagrees with it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::RngSeed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<RngSeed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_shape: Option<Vec<usize>>,
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.meta.json"))
}

pub fn format_value(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|x| format_value(*x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str, origin: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|field| {
                let field = field.trim();
                field.parse::<f64>().map_err(|_| {
                    Error::parse(origin, format!("line {}: '{field}' is not a number", lineno + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    origin,
                    format!("line {} has {} fields, expected {}", lineno + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, meta: &MatrixMeta) -> Result<()> {
    if (meta.rows, meta.cols) != m.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metadata says {}x{} but the matrix is {}x{}",
            meta.rows,
            meta.cols,
            m.nrows(),
            m.ncols()
        )));
    }
    write_text(path, &matrix_to_csv(m))?;
    write_json(&meta_path(path), meta)
}

/// Convenience wrapper building the sidecar from the matrix itself.
pub fn save_matrix(path: &Path, m: &DMatrix<f64>, role: &str, seed: Option<RngSeed>) -> Result<()> {
    let meta = MatrixMeta {
        rows: m.nrows(),
        cols: m.ncols(),
        role: role.to_string(),
        seed,
        target_shape: None,
    };
    write_matrix(path, m, &meta)
}

pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, Option<MatrixMeta>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_csv(&text, path)?;
    let sidecar = meta_path(path);
    let meta = if sidecar.exists() {
        let meta: MatrixMeta = read_json(&sidecar)?;
        // a matrix with no columns is written as blank lines
        if meta.cols == 0 && m.is_empty() {
            m = DMatrix::zeros(meta.rows, 0);
        }
        if (meta.rows, meta.cols) != m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: manifest declares {}x{} but the file holds {}x{}",
                path.display(),
                meta.rows,
                meta.cols,
                m.nrows(),
                m.ncols()
            )));
        }
        Some(meta)
    } else {
        None
    };
    Ok((m, meta))
}

/// Reads an N×1 column (or a single row) as a vector.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let (m, _) = read_matrix(path)?;
    match m.shape() {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, _) => Ok(m.row(0).transpose()),
        (r, c) => Err(Error::ShapeMismatch(format!(
            "{}: expected a single column, got {r}x{c}",
            path.display()
        ))),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HASH_ALGORITHM: &str = "fnv1a-64";

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub input_hashes: BTreeMap<String, String>,
    pub seed: RngSeed,
    pub artifact_version: String,
    pub hash_algorithm: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: RngSeed) -> Self {
        RunManifest {
            command: command.into(),
            parameters: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            hash_algorithm: HASH_ALGORITHM.to_string(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        let hash = hash_file(path)?;
        self.input_hashes.insert(path.display().to_string(), hash);
        Ok(self)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Recomputes every input hash and reports the files that changed.
    pub fn stale_inputs(&self) -> Result<Vec<String>> {
        let mut stale = Vec::new();
        for (file, hash) in &self.input_hashes {
            if &hash_file(Path::new(file))? != hash {
                stale.push(file.clone());
            }
        }
        Ok(stale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::sample_gaussian;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn matrix_file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let m = sample_gaussian(5, 3, RngSeed(1)).unwrap().into_inner();
        save_matrix(&path, &m, "latent", Some(RngSeed(1))).unwrap();
        let (back, meta) = read_matrix(&path).unwrap();
        assert_eq!(back, m);
        let meta = meta.unwrap();
        assert_eq!((meta.rows, meta.cols, meta.role.as_str()), (5, 3, "latent"));
        let sidecar: serde_json::Value = read_json(&meta_path(&path)).unwrap();
        assert_eq!(sidecar["seed"], 1);
    }

    #[test]
    fn values_carry_seventeen_digits() {
        let text = matrix_to_csv(&DMatrix::from_row_slice(1, 2, &[0.1, -3.0]));
        assert_eq!(text, "1.0000000000000001e-1,-3.0000000000000000e0\n");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_matrix(&path, &DMatrix::zeros(2, 2), "x", None).unwrap();
        write_text(&path, "1,2\n3,4\n5,6\n").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ragged_and_garbage_rejected() {
        let p = Path::new("x.csv");
        assert!(parse_csv("1,2\n3\n", p).is_err());
        assert!(parse_csv("1,abc\n", p).is_err());
        assert_eq!(parse_csv("1, 2\n\n3,4\n", p).unwrap().shape(), (2, 2));
    }

    #[test]
    fn manifest_detects_changed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.csv");
        write_text(&input, "1\n").unwrap();
        let m = RunManifest::new("test", RngSeed(3)).param("k", 3).input(&input).unwrap();
        m.write_to(dir.path()).unwrap();
        let back: RunManifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_inputs().unwrap().is_empty());
        write_text(&input, "2\n").unwrap();
        assert_eq!(back.stale_inputs().unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO | proptest::num::f64::SUBNORMAL, 12)) {
            let m = DMatrix::from_row_slice(3, 4, &values);
            let back = parse_csv(&matrix_to_csv(&m), Path::new("p")).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
