// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command run manifests.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to SHA-256 (directories hash their sorted file listing).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
}

pub struct ManifestBuilder {
    command: String,
    start: Instant,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file_into(path: &Path, h: &mut Sha256) -> io::Result<()> {
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

/// SHA-256 of a file, or of every file under a directory in sorted order
/// (relative path and contents).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            hash_file_into(&f, &mut h).with_context(|| format!("hashing {}", f.display()))?;
        }
    } else {
        hash_file_into(path, &mut h).with_context(|| format!("hashing {}", path.display()))?;
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            start: Instant::now(),
            config: serde_json::Value::Null,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = hash_path(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Record a non-file input (e.g. a built-in fixture) by name.
    pub fn input_named(&mut self, name: &str, digest: &str) {
        self.inputs.insert(name.to_string(), digest.to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn outputs(&mut self, paths: &[PathBuf]) {
        for p in paths {
            self.output(p);
        }
    }

    /// Write `manifest.<command>.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("manifest.{}.json", self.command));
        self.outputs.sort();
        self.outputs.dedup();
        let versions = BTreeMap::from([
            ("dlens".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            (
                "report_version".to_string(),
                dlens::analysis::REPORT_VERSION.to_string(),
            ),
            (
                "svd_sign_convention".to_string(),
                dlens::decomposition::SIGN_CONVENTION.to_string(),
            ),
        ]);
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            versions,
            threads: rayon::current_num_threads(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&m)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
