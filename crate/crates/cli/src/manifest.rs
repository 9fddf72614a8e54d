//! Run manifests written next to every output.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;
use viscosurr_core::store::write_json;

use crate::Failure;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    /// Every setting that influenced the outputs, defaults included.
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
}

pub struct Recorder {
    command: &'static str,
    started_unix_s: f64,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Recorder { command, started_unix_s, start: Instant::now() }
    }

    pub fn finish(
        self,
        path: &Path,
        config: Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<(), Failure> {
        let m = RunManifest {
            tool: "viscosurr",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config,
            seed,
            threads: rayon::current_num_threads(),
            inputs,
            outputs,
            started_unix_s: self.started_unix_s,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        };
        write_json(path, &m).map_err(Failure::from)
    }
}

/// `<file>.manifest.json`.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
