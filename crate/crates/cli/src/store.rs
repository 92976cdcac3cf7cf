//! Artifact bundle: policy files, curves, manifest with content hashes,
//! report export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use didor_core::eval::{EvalReport, CSV_HEADER};
use didor_core::net::GaussianPolicy;
use didor_core::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(path: &Path, text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

pub fn save_policy(policy: &GaussianPolicy, path: &Path) -> Result<()> {
    fs::write(path, policy.to_json())?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    let text = fs::read_to_string(path)?;
    GaussianPolicy::from_json(&text).map_err(|e| match e {
        Error::Json(j) => parse_error(path, &text, &j),
        other => other,
    })
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            out.push(serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?);
        }
        offset += line.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: String,
    pub task: String,
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    /// Master seed of every derived stage stream.
    pub stage_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub complete: bool,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Single-writer handle on a bundle directory.
#[derive(Debug)]
pub struct Bundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Bundle {
    pub fn create(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let b = Self { dir: dir.to_path_buf(), manifest };
        b.write_manifest()?;
        Ok(b)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        let manifest = serde_json::from_str(&text).map_err(|e| parse_error(&path, &text, &e))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `bytes` to `name` and records its hash, replacing any previous entry.
    pub fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let entry = Artifact { path: name.to_string(), sha256: sha256_hex(bytes) };
        match self.manifest.artifacts.iter_mut().find(|a| a.path == name) {
            Some(a) => *a = entry,
            None => self.manifest.artifacts.push(entry),
        }
        self.write_manifest()
    }

    pub fn put_policy(&mut self, name: &str, policy: &GaussianPolicy) -> Result<()> {
        self.put(name, policy.to_json().as_bytes())
    }

    pub fn put_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.put(name, s.as_bytes())
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.put(name, s.as_bytes())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        fs::write(self.path(MANIFEST), s)?;
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        self.manifest.complete = true;
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }

    /// Reads an artifact after checking its hash against the manifest.
    pub fn read_verified(&self, name: &str) -> Result<Vec<u8>> {
        let path = self.path(name);
        let entry = self
            .manifest
            .artifacts
            .iter()
            .find(|a| a.path == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{name} is not listed in the manifest")))?;
        let bytes = fs::read(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(Error::Integrity { path, expected: entry.sha256.clone(), actual });
        }
        Ok(bytes)
    }

    pub fn load_policy(&self, name: &str) -> Result<GaussianPolicy> {
        let bytes = self.read_verified(name)?;
        let text = String::from_utf8_lossy(&bytes);
        GaussianPolicy::from_json(&text).map_err(|e| match e {
            Error::Json(j) => parse_error(&self.path(name), &text, &j),
            other => other,
        })
    }

    /// Checks every listed artifact.
    pub fn verify(&self) -> Result<usize> {
        for a in &self.manifest.artifacts {
            self.read_verified(&a.path)?;
        }
        Ok(self.manifest.artifacts.len())
    }

    /// Eval reports stored under `eval/`, sorted by file name.
    pub fn reports(&self) -> Result<Vec<(String, EvalReport)>> {
        let mut names: Vec<&str> = self
            .manifest
            .artifacts
            .iter()
            .map(|a| a.path.as_str())
            .filter(|p| p.starts_with("eval/") && p.ends_with(".report.json"))
            .collect();
        names.sort_unstable();
        names
            .into_iter()
            .map(|n| {
                let bytes = self.read_verified(n)?;
                let text = String::from_utf8_lossy(&bytes);
                let r = serde_json::from_str(&text).map_err(|e| parse_error(&self.path(n), &text, &e))?;
                Ok((n.to_string(), r))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

/// Panel of a report file name `eval/<method>.<panel>.report.json`.
fn panel_of(name: &str) -> &str {
    name.trim_end_matches(".report.json").rsplit('.').next().unwrap_or("")
}

/// Writes one export file per panel into `out_dir` and returns their paths.
pub fn export_reports(reports: &[(String, EvalReport)], format: ExportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("bundle contains no eval reports".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut panels: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for (name, r) in reports {
        panels.entry(panel_of(name)).or_default().push(r);
    }
    let mut written = Vec::new();
    for (panel, rs) in panels {
        let (file, body) = match format {
            ExportFormat::Csv => {
                let mut s = format!("{CSV_HEADER}\n");
                for r in &rs {
                    r.csv_rows(&mut s);
                }
                (format!("{panel}.csv"), s)
            }
            ExportFormat::Jsonl => (format!("{panel}.jsonl"), rs.iter().map(|r| r.to_jsonl()).collect()),
        };
        let path = out_dir.join(file);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use didor_core::seed::Seeds;

    #[test]
    fn truncated_policy_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = GaussianPolicy::new(5, 1, &[4], &mut Seeds::new(0).rng("p", 0));
        let path = dir.path().join("p.json");
        let text = p.to_json();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        match load_policy(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert!(offset > 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            method: "didor".into(),
            task: "cartpole".into(),
            config_hash: String::new(),
            code_version: String::new(),
            master_seed: 0,
            stage_seeds: BTreeMap::new(),
            artifacts: vec![],
            complete: false,
            started_unix: 0,
            finished_unix: None,
            timings: BTreeMap::new(),
        };
        let mut b = Bundle::create(dir.path(), m).unwrap();
        b.put("a.txt", b"hello").unwrap();
        assert_eq!(b.verify().unwrap(), 1);
        fs::write(dir.path().join("a.txt"), b"hellO").unwrap();
        assert!(matches!(Bundle::open(dir.path()).unwrap().verify(), Err(Error::Integrity { .. })));
    }

    #[test]
    fn empty_export_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_reports(&[], ExportFormat::Csv, dir.path()).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn offsets_count_bytes() {
        assert_eq!(byte_offset("ab\ncd", 2, 1), 3);
    }
}
