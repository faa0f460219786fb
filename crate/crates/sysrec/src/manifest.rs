//! Run manifests: the resolved invocation plus provenance of every file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::{Invocation, Outcome};
use crate::error::{format_err, io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    /// Hex SHA-256 of the contents; absent when the file could not be read.
    pub sha256: Option<String>,
}

impl FileDigest {
    pub fn of(path: &Path) -> Self {
        Self {
            path: path.to_path_buf(),
            sha256: fs::read(path).ok().map(|b| format!("{:x}", Sha256::digest(&b))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Absent when the arguments could not be resolved.
    pub invocation: Option<Invocation>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_seconds: f64,
    /// `"ok"`, `"failed"` (a validation did not pass) or `"error"`.
    pub exit_status: String,
    pub error: Option<String>,
}

/// Generate writes `<out>.manifest.json`; other commands `<out>/manifest.json`.
pub fn manifest_path(inv: &Invocation) -> PathBuf {
    path_for(inv.name(), inv.out())
}

fn path_for(command: &str, out: &Path) -> PathBuf {
    if command == "generate" {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    } else {
        out.join("manifest.json")
    }
}

impl RunManifest {
    pub fn new(inv: &Invocation, result: &anyhow::Result<Outcome>, wall_seconds: f64) -> Self {
        let (inputs, outputs, exit_status, error) = match result {
            Ok(o) => (
                o.inputs.iter().map(|p| FileDigest::of(p)).collect(),
                o.outputs.iter().map(|p| FileDigest::of(p)).collect(),
                if o.ok { "ok" } else { "failed" }.to_string(),
                None,
            ),
            Err(e) => (vec![], vec![], "error".to_string(), Some(format!("{e:#}"))),
        };
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: inv.name().into(),
            invocation: Some(inv.clone()),
            seed: inv.seed(),
            threads: inv.threads(),
            inputs,
            outputs,
            wall_seconds,
            exit_status,
            error,
        }
    }

    pub fn unresolved(command: &str, _out: &Path, error: &anyhow::Error) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            invocation: None,
            seed: None,
            threads: 1,
            inputs: vec![],
            outputs: vec![],
            wall_seconds: 0.0,
            exit_status: "error".into(),
            error: Some(format!("{error:#}")),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| format_err(path, e))?;
        text.push('\n');
        crate::io::write_text(path, &text)
    }

    pub fn write_for(&self, command: &str, out: &Path) -> Result<()> {
        self.write(&path_for(command, out))
    }

    pub fn read(path: &Path) -> anyhow::Result<RerunnableManifest> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
        let invocation = m
            .invocation
            .ok_or_else(|| anyhow::anyhow!("{}: manifest records no resolved invocation", path.display()))?;
        Ok(RerunnableManifest { invocation })
    }
}

/// The part of a manifest needed to run it again.
pub struct RerunnableManifest {
    pub invocation: Invocation,
}
