//! Per-command manifests and the output-directory lock.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};

pub const LOCK_FILE: &str = ".fxnet.lock";

/// Held while a command writes into the output directory.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Inputs and outputs of one command, hashed. Paths are stored relative to
/// the output directory when they live inside it.
#[derive(Debug)]
pub struct Manifest {
    command: String,
    root: PathBuf,
    config: Value,
    config_hash: String,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut config = Map::new();
        for line in cfg.to_kv().lines() {
            if let Some((k, v)) = line.split_once('=') {
                config.insert(k.to_string(), Value::String(v.to_string()));
            }
        }
        Self {
            command: command.to_string(),
            root: cfg.out.clone(),
            config: Value::Object(config),
            config_hash: cfg.hash(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn entry(&self, path: &Path) -> Result<Value> {
        let shown = path.strip_prefix(&self.root).unwrap_or(path);
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            let mut h = Sha256::new();
            for f in &files {
                h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
                h.update(fs::read(f)?);
            }
            return Ok(json!({"path": shown.display().to_string(), "sha256": hex(&h.finalize())}));
        }
        Ok(json!({"path": shown.display().to_string(), "sha256": file_sha256(path)?}))
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let e = self.entry(path)?;
        self.inputs.push(e);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let e = self.entry(path)?;
        self.outputs.push(e);
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.config_hash,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        })
    }

    /// Writes `<command>.manifest.json` into the output directory.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&self.to_json())? + "\n";
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_records_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        let f = dir.path().join("a.txt");
        fs::write(&f, "abc").unwrap();
        let mut m = Manifest::new("demo", &cfg);
        m.output(&f).unwrap();
        let v = m.to_json();
        assert_eq!(v["outputs"][0]["path"], "a.txt");
        assert_eq!(
            v["outputs"][0]["sha256"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(v["config"]["seed"], "0");
        assert!(m.write().unwrap().ends_with("demo.manifest.json"));
    }
}
