//! CSV tables and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Locale-free float text that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Writes a header row and data rows with `,` separators.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub software_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub stages: Vec<StageTiming>,
    pub files: Vec<FileEntry>,
}

/// Each command writes `manifest_<command>.json`, so runs sharing a directory keep their records.
pub fn manifest_name(command: &str) -> String {
    format!("manifest_{command}.json")
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Collects stage timings and output files while a command runs.
#[derive(Debug)]
pub struct RunRecorder {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn new(dir: &Path, command: &str, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunRecorder {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash,
                software_version: env!("CARGO_PKG_VERSION").to_string(),
                started_unix: unix_now(),
                finished_unix: 0.0,
                stages: Vec::new(),
                files: Vec::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        log::info!("stage {name}");
        let r = f(self);
        let seconds = t.elapsed().as_secs_f64();
        log::info!("stage {name} took {seconds:.2}s");
        self.manifest.stages.push(StageTiming {
            name: name.to_string(),
            seconds,
        });
        r
    }

    /// Records a file that now exists on disk.
    pub fn file(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.dir)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| path.display().to_string());
        let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        let sha256 = sha256_file(path)?;
        self.manifest.files.retain(|f| f.path != rel);
        self.manifest.files.push(FileEntry { path: rel, bytes, sha256 });
        Ok(())
    }

    /// Writes `name` as CSV in the output directory and records it.
    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<PathBuf>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let p = self.path(name);
        write_csv(&p, header, rows)?;
        self.file(&p)?;
        Ok(p)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_unix = unix_now();
        let p = self.dir.join(manifest_name(&self.manifest.command));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(self.manifest)
    }
}

/// Re-hashes every file listed in `manifest_<command>.json`; returns the paths whose checksum changed.
pub fn verify_manifest(dir: &Path, command: &str) -> Result<Vec<String>> {
    let p = dir.join(manifest_name(command));
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", p.display())))?;
    let mut bad = Vec::new();
    for f in &m.files {
        let path = if Path::new(&f.path).is_absolute() {
            PathBuf::from(&f.path)
        } else {
            dir.join(&f.path)
        };
        match sha256_file(&path) {
            Ok(h) if h == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}
