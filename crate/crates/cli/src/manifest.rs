//! Run manifests: what was run, on which bytes, with which seeds.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA: &str = "anatomy/manifest/v1";

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub subcommand: String,
    pub version: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub duration_seconds: f64,
    /// Final metrics, for runs that produce a directory rather than one report.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA,
            subcommand: subcommand.into(),
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
            threads: thread_count(),
            duration_seconds: 0.0,
            results: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        let (sha256, bytes) = digest_file(path)?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256, bytes });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, elapsed: Duration, path: &Path) -> io::Result<()> {
        self.duration_seconds = elapsed.as_secs_f64();
        crate::json::write(path, &self)
    }
}

/// Hex SHA-256 of a file's bytes, streamed.
pub fn digest_file(path: &Path) -> io::Result<(String, u64)> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    let hex = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, total))
}

/// `report.json` -> `report.manifest.json`, next to the report.
pub fn sidecar(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn thread_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, b"abc").unwrap();
        let (hex, n) = digest_file(&p).unwrap();
        assert_eq!(n, 3);
        assert_eq!(hex, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(sidecar(Path::new("out/r.json")), PathBuf::from("out/r.manifest.json"));
        assert_eq!(sidecar(Path::new("spectrum")), PathBuf::from("spectrum.manifest.json"));
    }
}
