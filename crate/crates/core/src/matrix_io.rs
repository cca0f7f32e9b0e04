//! Matrix CSV export/import and a content-addressed on-disk cache.
//!
//! A matrix file is a `# rows=R cols=C` comment line followed by `R` CSV rows.
//! Metadata travels in a sidecar JSON file next to it.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::design::DesignDistribution;
use crate::error::{Error, Result};

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 12 + 32);
    out.push_str(&format!("# rows={} cols={}\n", m.nrows(), m.ncols()));
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    let body = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path)?;
    let declared = text.lines().next().and_then(parse_header);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for record in rdr.records() {
        let record = record?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::SchemaError(format!("ragged matrix row {rows} in {}", path.display())));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::SchemaError(format!("non-numeric entry {field:?} in {}", path.display())))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if let Some((r, c)) = declared {
        if (r, c) != (rows, cols) {
            return Err(Error::shape(format!("{r}x{c}"), format!("{rows}x{cols}")));
        }
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let line = line.strip_prefix('#')?;
    let mut rows = None;
    let mut cols = None;
    for part in line.split_whitespace() {
        if let Some(v) = part.strip_prefix("rows=") {
            rows = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("cols=") {
            cols = v.parse().ok();
        }
    }
    Some((rows?, cols?))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes `m` as CSV plus `<path>.json` holding `meta`.
pub fn write_with_metadata<T: Serialize>(path: &Path, m: &DMatrix<f64>, meta: &T) -> Result<()> {
    write_matrix_csv(path, m)?;
    fs::write(sidecar(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn read_with_metadata<T: DeserializeOwned>(path: &Path) -> Result<(DMatrix<f64>, T)> {
    let m = read_matrix_csv(path)?;
    let meta = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    Ok((m, meta))
}

/// Incremental SHA-256 over the inputs that determine a cached result.
#[derive(Clone)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new(tag: &str) -> Self {
        let mut f = Fingerprint(Sha256::new());
        f.str(tag);
        f
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.usize(s.len());
        self.0.update(s.as_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.0.update((v as u64).to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.usize(values.len());
        for v in values {
            self.0.update(v.to_le_bytes());
        }
        self
    }

    pub fn usizes(&mut self, values: &[usize]) -> &mut Self {
        self.usize(values.len());
        for &v in values {
            self.usize(v);
        }
        self
    }

    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        self.usize(m.nrows()).usize(m.ncols()).f64s(m.as_slice())
    }

    pub fn distribution(&mut self, dist: &DesignDistribution) -> Result<&mut Self> {
        match dist {
            DesignDistribution::Exact { n_units, k_arms, support } => {
                self.str("exact").usize(*n_units).usize(*k_arms).usize(support.len());
                for (assignment, weight) in support {
                    self.usizes(&assignment.arm_of).f64s(&[*weight]);
                }
            }
            DesignDistribution::Sampled { design, seed, draws } => {
                self.str("sampled")
                    .str(&serde_json::to_string(design)?)
                    .usize(*seed as usize)
                    .usize(*draws);
            }
        }
        Ok(self)
    }

    pub fn finish(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

/// Mean, optional standard errors and metadata of a cached matrix.
pub type CacheEntry<T> = (DMatrix<f64>, Option<DMatrix<f64>>, T);

/// Directory of cached matrices keyed by [`Fingerprint`].
#[derive(Debug, Clone)]
pub struct MatrixCache {
    dir: PathBuf,
}

impl MatrixCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(MatrixCache { dir })
    }

    fn path(&self, key: &str, suffix: &str) -> PathBuf {
        self.dir.join(format!("{key}{suffix}.csv"))
    }

    /// Cached mean and optional standard errors, if present.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<CacheEntry<T>>> {
        let mean_path = self.path(key, "");
        if !mean_path.exists() {
            return Ok(None);
        }
        let (mean, meta) = read_with_metadata(&mean_path)?;
        let se_path = self.path(key, ".se");
        let se = if se_path.exists() { Some(read_matrix_csv(&se_path)?) } else { None };
        Ok(Some((mean, se, meta)))
    }

    pub fn put<T: Serialize>(&self, key: &str, mean: &DMatrix<f64>, se: Option<&DMatrix<f64>>, meta: &T) -> Result<()> {
        if let Some(se) = se {
            write_matrix_csv(&self.path(key, ".se"), se)?;
        }
        // mean last: its presence marks a complete entry
        write_with_metadata(&self.path(key, ""), mean, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 3, &[1.0 / 3.0, -2.5e-300, 0.0, 7.0, f64::MIN_POSITIVE, 1e17]);
        write_with_metadata(&path, &m, &serde_json::json!({"kn": 3})).unwrap();
        let (back, meta): (DMatrix<f64>, serde_json::Value) = read_with_metadata(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta["kn"], 3);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "# rows=3 cols=1\n1\n2\n").unwrap();
        assert!(matches!(read_matrix_csv(&path), Err(Error::ShapeMismatch { .. })));
        fs::write(&path, "1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&path).is_err());
    }

    #[test]
    fn fingerprint_separates_inputs() {
        let a = Fingerprint::new("x").f64s(&[1.0, 2.0]).finish();
        let b = Fingerprint::new("x").f64s(&[1.0]).f64s(&[2.0]).finish();
        assert_ne!(a, b);
        assert_eq!(a, Fingerprint::new("x").f64s(&[1.0, 2.0]).finish());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = MatrixCache::new(dir.path().join("c")).unwrap();
        assert!(cache.get::<serde_json::Value>("k").unwrap().is_none());
        let m = DMatrix::identity(2, 2);
        cache.put("k", &m, Some(&m), &serde_json::json!({})).unwrap();
        let (mean, se, _) = cache.get::<serde_json::Value>("k").unwrap().unwrap();
        assert_eq!(mean, m);
        assert_eq!(se.unwrap(), m);
    }
}
