use std::path::Path;

use serde::Serialize;

use crate::config::{DataIdentity, RunConfig};
use crate::error::{CliError, Result};

pub fn build_id() -> String {
    format!("dmsc-{}+{}", env!("CARGO_PKG_VERSION"), env!("DMSC_GIT_REV"))
}

/// Peak resident set size in KiB from the kernel's accounting, when
/// available. Approximate: includes allocator slack and the binary.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub total_s: f64,
    pub train_s: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub build_id: String,
    pub seed: u64,
    pub variant: String,
    pub config: RunConfig,
    pub data: Option<DataIdentity>,
    pub timings: Timings,
    /// Approximate peak resident memory, KiB.
    pub peak_rss_kib_approx: Option<u64>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|source| CliError::Output { path: path.into(), source })
    }
}
