//! Run directories, manifests and atomic output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use bidomain_core::{BidomainOperator, Conductivity, ConductivitySpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// sha256 over grid shape, both conductivity fields and the eigenvalues.
pub fn fingerprint(op: &BidomainOperator, spec: &ConductivitySpec) -> String {
    let mut h = Sha256::new();
    for w in op.fingerprint_words() {
        h.update(w.to_le_bytes());
    }
    for c in [&spec.sigma_i, &spec.sigma_e] {
        match c {
            Conductivity::Scalar(v) => {
                h.update([0u8]);
                v.iter().for_each(|x| h.update(x.to_le_bytes()));
            }
            Conductivity::Tensor(v) => {
                h.update([1u8]);
                v.iter().flatten().for_each(|x| h.update(x.to_le_bytes()));
            }
        }
    }
    h.update(spec.ellipticity_bounds.0.to_le_bytes());
    h.update(spec.ellipticity_bounds.1.to_le_bytes());
    hex::encode(h.finalize())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: serde_json::Value,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: Option<usize>,
    pub operator_fingerprint: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub outputs: Vec<OutputFile>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Manifest {
    pub fn start(command: serde_json::Value, config: serde_json::Value, seed: u64, fingerprint: String) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command,
            config,
            seed,
            threads: None,
            operator_fingerprint: fingerprint,
            started: now(),
            finished: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, status: &str) {
        self.finished = Some(now());
        self.status = status.into();
    }

    pub fn read(path: &Path) -> Result<Self, Box<dyn std::error::Error>> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text).map_err(|e| format!("manifest {}: {e}", path.display()))?)
    }
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// `<parent>/<UTC timestamp>-seed<seed>`, with a numeric suffix on collision.
    pub fn create(parent: &Path, seed: u64) -> std::io::Result<Self> {
        fs::create_dir_all(parent)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = format!("{stamp}-seed{seed}");
        for i in 0.. {
            let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
            let path = parent.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.path)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(self.path.join(name)).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn write_output(&mut self, manifest: &mut Manifest, name: &str, body: &str) -> std::io::Result<()> {
        self.write_atomic(name, body.as_bytes())?;
        manifest.outputs.push(OutputFile { file: name.into(), sha256: sha256_hex(body.as_bytes()) });
        Ok(())
    }

    pub fn write_manifest(&mut self, manifest: &Manifest) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)? + "\n";
        self.write_atomic("manifest.json", text.as_bytes())
    }
}
