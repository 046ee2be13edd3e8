//! Per-run output directories and their JSON manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "BNNPS_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {} for its digest", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A fresh directory `<root>/<timestamp>-seed<seed>-<command>` plus its
/// manifest. The manifest is written when the run starts and rewritten with
/// output digests when it finishes.
pub struct RunDir {
    pub path: PathBuf,
    manifest: Map<String, Value>,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: u64) -> Result<Self> {
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{stamp}-seed{seed}-{command}");
        fs::create_dir_all(root).with_context(|| format!("creating output root {}", root.display()))?;
        let mut path = root.join(&base);
        let mut n = 1;
        // never reuse a directory
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    n += 1;
                    path = root.join(format!("{base}-{n}"));
                }
                Err(e) => return Err(e).with_context(|| format!("creating run directory {}", path.display())),
            }
        }
        let mut manifest = Map::new();
        manifest.insert("command".into(), json!(command));
        manifest.insert("seed".into(), json!(seed));
        manifest.insert("code_version".into(), json!(env!("CARGO_PKG_VERSION")));
        manifest.insert("started".into(), json!(Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)));
        manifest.insert("status".into(), json!("running"));
        Ok(Self { path, manifest, outputs: Vec::new() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Full config snapshot, in config-file syntax.
    pub fn config(&mut self, text: &str) -> &mut Self {
        self.manifest.insert("config".into(), json!(text));
        self
    }

    pub fn arg(&mut self, key: &str, value: Value) -> &mut Self {
        let args = self.manifest.entry("args").or_insert_with(|| json!({}));
        args.as_object_mut().expect("args is an object").insert(key.into(), value);
        self
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let digest = sha256_file(path)?;
        let inputs = self.manifest.entry("inputs").or_insert_with(|| json!({}));
        inputs.as_object_mut().expect("inputs is an object").insert(path.display().to_string(), json!(digest));
        Ok(self)
    }

    /// Writes the manifest; call before producing outputs.
    pub fn begin(&self) -> Result<()> {
        self.write_manifest()
    }

    /// Marks `path` as an output whose digest goes into the final manifest.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let mut outs = Map::new();
        for p in &self.outputs {
            outs.insert(p.display().to_string(), json!(sha256_file(p)?));
        }
        self.manifest.insert("outputs".into(), Value::Object(outs));
        self.manifest.insert("finished".into(), json!(Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)));
        self.manifest.insert("status".into(), json!("complete"));
        self.write_manifest()?;
        Ok(self.path)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.path.join(MANIFEST);
        let mut f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directories_are_never_reused() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "x", 1).unwrap();
        let b = RunDir::create(root.path(), "x", 1).unwrap();
        assert_ne!(a.path, b.path);
    }

    #[test]
    fn manifest_precedes_outputs_and_records_digests() {
        let root = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(root.path(), "gen-data", 7).unwrap();
        run.config("[experiment]\nseed = 7\n").arg("n", json!(3));
        run.begin().unwrap();
        let m: Value = serde_json::from_str(&fs::read_to_string(run.file(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m["status"], "running");
        let out = run.file("data.csv");
        fs::write(&out, "abc").unwrap();
        run.output(&out);
        let dir = run.finish().unwrap();
        let m: Value = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m["status"], "complete");
        assert_eq!(
            m["outputs"][out.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(m["args"]["n"], 3);
    }
}
