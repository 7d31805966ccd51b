//! Run manifests: the resolved configuration of a command together with
//! digests of everything it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every setting of the command, defaults included.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// Input path (as given) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Outputs that legitimately differ between runs, such as timings.
    pub volatile_outputs: Vec<String>,
    /// Wall time per phase in seconds.
    pub phases: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Output digests that differ from `other`, including files present in
    /// only one of the two.
    pub fn output_differences(&self, other: &RunManifest) -> Vec<String> {
        let mut keys: Vec<&String> = self.outputs.keys().chain(other.outputs.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| self.outputs.get(*k) != other.outputs.get(*k))
            .cloned()
            .collect()
    }

    /// Inputs whose current digest no longer matches the recorded one.
    pub fn changed_inputs(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(path, digest)| sha256_file(Path::new(path)).ok().as_ref() != Some(*digest))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

/// Collects digests while a command runs.
#[derive(Debug, Default)]
pub struct Recorder {
    pub seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    volatile: Vec<PathBuf>,
    pub phases: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    pub fn outputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.outputs.extend(paths);
    }

    pub fn volatile(&mut self, path: PathBuf) {
        self.volatile.push(path);
    }

    pub fn phase(&mut self, name: &str, started: std::time::Instant) {
        *self.phases.entry(name.into()).or_default() += started.elapsed().as_secs_f64();
    }

    pub fn finish(self, command: &str, config: serde_json::Value, run_dir: &Path) -> Result<RunManifest> {
        let rel = |p: &Path| -> String {
            p.strip_prefix(run_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        };
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.to_string_lossy().into_owned(), sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in &self.outputs {
            outputs.insert(rel(p), sha256_file(p)?);
        }
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: self.seeds,
            inputs,
            outputs,
            volatile_outputs: self.volatile.iter().map(|p| rel(p)).collect(),
            phases: self.phases,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_and_differences() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        write_atomic(&a, b"abc").unwrap();
        assert_eq!(
            sha256_file(&a).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let mut r = Recorder::default();
        r.output(a.clone());
        r.seed("edit", 3);
        let m = r.finish("edit", serde_json::json!({"x": 1}), dir.path()).unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["a.txt"]);
        let path = m.save(dir.path()).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(m.output_differences(&back).is_empty());
        let mut other = m.clone();
        other.outputs.insert("b.txt".into(), "00".into());
        assert_eq!(m.output_differences(&other), ["b.txt"]);
    }
}
