//! Downloads and caches the public benchmark datasets.
//!
//! Each dataset lives in `<cache>/<name>/` as the raw archive, a converted
//! CSV, a `schema.toml` and a `sha256` record of the raw bytes. The first
//! successful download records the checksum; later downloads must match it,
//! as must a checksum pinned by the caller.

use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Column, FeatureSchema};
use crate::error::{Error, Result};

/// Overrides the default cache directory.
pub const CACHE_ENV: &str = "MATI_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Abalone,
    BikeSharing,
}

impl DatasetId {
    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Abalone => "abalone",
            DatasetId::BikeSharing => "bike-sharing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "abalone" => Ok(DatasetId::Abalone),
            "bike-sharing" | "bike_sharing" | "bike" => Ok(DatasetId::BikeSharing),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected abalone or bike-sharing)"
            ))),
        }
    }

    pub fn urls(self) -> &'static [&'static str] {
        match self {
            DatasetId::Abalone => &[
                "https://archive.ics.uci.edu/static/public/1/abalone.zip",
                "https://archive.ics.uci.edu/ml/machine-learning-databases/abalone/abalone.data",
            ],
            DatasetId::BikeSharing => &["https://archive.ics.uci.edu/static/public/275/bike+sharing+dataset.zip"],
        }
    }

    /// Row count of the converted CSV.
    pub fn expected_rows(self) -> usize {
        match self {
            DatasetId::Abalone => 4177,
            DatasetId::BikeSharing => 17379,
        }
    }

    pub fn schema(self) -> FeatureSchema {
        let (columns, target) = match self {
            DatasetId::Abalone => (
                vec![
                    Column::categorical("sex"),
                    Column::numeric("length"),
                    Column::numeric("diameter"),
                    Column::numeric("height"),
                    Column::numeric("whole_weight"),
                    Column::numeric("shucked_weight"),
                    Column::numeric("viscera_weight"),
                    Column::numeric("shell_weight"),
                ],
                "rings",
            ),
            DatasetId::BikeSharing => (
                vec![
                    Column::categorical("season"),
                    Column::numeric("yr"),
                    Column::numeric("mnth"),
                    Column::numeric("hr"),
                    Column::numeric("holiday"),
                    Column::numeric("weekday"),
                    Column::numeric("workingday"),
                    Column::categorical("weathersit"),
                    Column::numeric("temp"),
                    Column::numeric("atemp"),
                    Column::numeric("hum"),
                    Column::numeric("windspeed"),
                ],
                "cnt",
            ),
        };
        FeatureSchema {
            columns,
            target: target.into(),
        }
    }
}

pub trait Downloader {
    fn get(&self, url: &str) -> Result<Vec<u8>>;
}

pub struct HttpDownloader;

impl Downloader for HttpDownloader {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let mut resp = ureq::get(url).call().map_err(|e| Error::Download(format!("{url}: {e}")))?;
        resp.body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Error::Download(format!("{url}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedDataset {
    pub csv: PathBuf,
    pub schema: PathBuf,
    pub sha256: String,
    pub cached: bool,
}

pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    home.join(".cache").join("mati")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Returns the converted dataset, downloading it only when the cache is
/// missing or inconsistent.
pub fn fetch_data(
    id: DatasetId,
    cache_dir: &Path,
    downloader: &dyn Downloader,
    pinned_sha256: Option<&str>,
) -> Result<FetchedDataset> {
    let dir = cache_dir.join(id.name());
    let raw_path = dir.join("raw");
    let record_path = dir.join("sha256");
    let out = FetchedDataset {
        csv: dir.join(format!("{}.csv", id.name())),
        schema: dir.join("schema.toml"),
        sha256: String::new(),
        cached: true,
    };
    let recorded = std::fs::read_to_string(&record_path).ok().map(|s| s.trim().to_string());
    let expected = pinned_sha256.map(str::to_string).or(recorded.clone());

    if let (Some(rec), true, true) = (&recorded, out.csv.exists(), out.schema.exists()) {
        if let Ok(raw) = std::fs::read(&raw_path) {
            let actual = sha256_hex(&raw);
            if &actual == rec && expected.as_deref().is_none_or(|e| e == actual) {
                return Ok(FetchedDataset { sha256: actual, ..out });
            }
        }
    }

    let mut last_err = None;
    let mut raw = None;
    for url in id.urls() {
        match downloader.get(url) {
            Ok(bytes) => {
                raw = Some(bytes);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let raw = match raw {
        Some(r) => r,
        None => return Err(last_err.unwrap_or_else(|| Error::Download("no source URL".into()))),
    };
    let actual = sha256_hex(&raw);
    if let Some(e) = &expected {
        if *e != actual {
            return Err(Error::Checksum {
                name: id.name().into(),
                expected: e.clone(),
                actual,
            });
        }
    }
    let csv_text = convert(id, &raw)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&raw_path, &raw)?;
    std::fs::write(&out.csv, csv_text)?;
    std::fs::write(&out.schema, toml::to_string(&id.schema())?)?;
    std::fs::write(&record_path, format!("{actual}\n"))?;
    Ok(FetchedDataset {
        sha256: actual,
        cached: false,
        ..out
    })
}

fn zip_member(raw: &[u8], name: &str) -> Result<Option<String>> {
    let mut archive = match zip::ZipArchive::new(Cursor::new(raw)) {
        Ok(a) => a,
        Err(_) => return Ok(None),
    };
    let mut file = archive
        .by_name(name)
        .map_err(|e| Error::Download(format!("archive has no `{name}`: {e}")))?;
    let mut s = String::new();
    file.read_to_string(&mut s)?;
    Ok(Some(s))
}

fn convert(id: DatasetId, raw: &[u8]) -> Result<String> {
    let bad = |msg: String| Error::Download(format!("{}: {msg}", id.name()));
    match id {
        DatasetId::Abalone => {
            let text = match zip_member(raw, "abalone.data")? {
                Some(t) => t,
                None => String::from_utf8(raw.to_vec()).map_err(|e| bad(e.to_string()))?,
            };
            let mut out = String::from(
                "sex,length,diameter,height,whole_weight,shucked_weight,viscera_weight,shell_weight,rings\n",
            );
            let mut rows = 0;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                if line.split(',').count() != 9 {
                    return Err(bad(format!("line {} does not have 9 fields", i + 1)));
                }
                out.push_str(line);
                out.push('\n');
                rows += 1;
            }
            if rows != id.expected_rows() {
                return Err(bad(format!("expected {} rows, found {rows}", id.expected_rows())));
            }
            Ok(out)
        }
        DatasetId::BikeSharing => {
            let text = zip_member(raw, "hour.csv")?.ok_or_else(|| bad("download is not a zip archive".into()))?;
            let rows = text.lines().skip(1).filter(|l| !l.trim().is_empty()).count();
            if rows != id.expected_rows() {
                return Err(bad(format!("expected {} rows, found {rows}", id.expected_rows())));
            }
            Ok(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Fake {
        body: Vec<u8>,
        calls: Cell<usize>,
    }

    impl Downloader for Fake {
        fn get(&self, _url: &str) -> Result<Vec<u8>> {
            self.calls.set(self.calls.get() + 1);
            Ok(self.body.clone())
        }
    }

    fn abalone_like() -> Vec<u8> {
        let mut s = String::new();
        for i in 0..4177 {
            s.push_str(&format!("M,0.4,0.3,0.1,0.5,0.2,0.1,0.15,{}\n", 1 + i % 29));
        }
        s.into_bytes()
    }

    #[test]
    fn second_call_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let fake = Fake { body: abalone_like(), calls: Cell::new(0) };
        let first = fetch_data(DatasetId::Abalone, dir.path(), &fake, None).unwrap();
        assert!(!first.cached);
        let ds = crate::data::load_csv(&first.csv, &DatasetId::Abalone.schema()).unwrap();
        assert_eq!(ds.n_rows(), 4177);
        let second = fetch_data(DatasetId::Abalone, dir.path(), &fake, None).unwrap();
        assert!(second.cached);
        assert_eq!(fake.calls.get(), 1);
        let schema: FeatureSchema = toml::from_str(&std::fs::read_to_string(&second.schema).unwrap()).unwrap();
        assert_eq!(schema, DatasetId::Abalone.schema());
    }

    #[test]
    fn corrupted_download_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let good = Fake { body: abalone_like(), calls: Cell::new(0) };
        let first = fetch_data(DatasetId::Abalone, dir.path(), &good, None).unwrap();
        // damage the cache so a re-download happens, then serve altered bytes
        std::fs::write(dir.path().join("abalone").join("raw"), b"x").unwrap();
        let mut body = abalone_like();
        body[0] = b'F';
        let bad = Fake { body, calls: Cell::new(0) };
        let err = fetch_data(DatasetId::Abalone, dir.path(), &bad, None).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        let pinned = fetch_data(DatasetId::Abalone, tempfile::tempdir().unwrap().path(), &good, Some("00"));
        assert!(matches!(pinned, Err(Error::Checksum { .. })));
        assert_eq!(first.sha256.len(), 64);
    }

    #[test]
    fn wrong_row_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let fake = Fake { body: b"M,1,1,1,1,1,1,1,5\n".to_vec(), calls: Cell::new(0) };
        assert!(fetch_data(DatasetId::Abalone, dir.path(), &fake, None).is_err());
        assert!(!dir.path().join("abalone").join("sha256").exists());
    }
}
