use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::run::ResultBundle;
use crate::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct ManifestFile {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub version: &'a str,
    pub experiment: String,
    pub seed: u64,
    pub workers: usize,
    pub paths: usize,
    pub wall_clock_seconds: f64,
    pub flags: &'a [String],
    pub files: Vec<ManifestFile>,
    pub config: &'a ExperimentConfig,
}

pub const MANIFEST: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(path.display().to_string(), e.to_string())
}

/// Writes every table and document of `bundle` into `dir`, followed by
/// `manifest.json`. Returns the paths written.
pub fn emit_tables(bundle: &ResultBundle, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    let mut written = Vec::new();
    let docs = bundle
        .tables
        .iter()
        .map(|t| (t.name.clone(), t.to_csv()))
        .chain(
            bundle
                .documents
                .iter()
                .map(|(n, d)| (n.clone(), d.clone().into_bytes())),
        );
    for (name, bytes) in docs {
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(ManifestFile {
            name,
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        written.push(path);
    }
    let manifest = Manifest {
        version: bundle.version,
        experiment: bundle
            .config
            .experiment
            .map(|e| e.to_string())
            .unwrap_or_default(),
        seed: bundle.seed,
        workers: bundle.config.workers,
        paths: bundle.paths,
        wall_clock_seconds: bundle.wall_clock_seconds,
        flags: &bundle.flags,
        files,
        config: &bundle.config,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}
