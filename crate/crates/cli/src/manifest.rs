//! Run manifests and warning capture.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stylepo::seed::sha256_hex;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// One command execution. Appended as a line to `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub elapsed_seconds: f64,
    pub warnings: Vec<String>,
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| io_err(path, err)))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            out.extend(files_under(&e)?);
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(out)
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(stylepo::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Hashes a file, or every file below a directory.
pub fn artifacts(path: &Path) -> Result<Vec<Artifact>, CliError> {
    files_under(path)?
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
            Ok(Artifact {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Collects inputs and outputs while a command runs.
pub struct Recorder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<Artifact>,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        WARNINGS.lock().expect("warning log").clear();
        Recorder {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.extend(artifacts(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes the outputs and appends the manifest line to the run directory.
    pub fn finish(self, run_dir: &Path) -> Result<RunManifest, CliError> {
        let mut outputs = Vec::new();
        for p in &self.outputs {
            outputs.extend(artifacts(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            elapsed_seconds: self.start.elapsed().as_secs_f64(),
            warnings: WARNINGS.lock().expect("warning log").clone(),
        };
        let path = run_dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let line = serde_json::to_string(&manifest).map_err(stylepo::Error::from)?;
        writeln!(f, "{line}").map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}

static WARNINGS: Mutex<Vec<String>> = Mutex::new(Vec::new());

/// Forwards to `env_logger` and keeps every warning for the manifest.
struct CapturingLogger {
    inner: env_logger::Logger,
}

impl log::Log for CapturingLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn || self.inner.enabled(metadata)
    }

    fn log(&self, record: &log::Record) {
        if record.level() <= log::Level::Warn {
            WARNINGS.lock().expect("warning log").push(record.args().to_string());
        }
        if self.inner.enabled(record.metadata()) {
            self.inner.log(record);
        }
    }

    fn flush(&self) {
        self.inner.flush();
    }
}

pub fn init_logging() {
    let inner = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).build();
    let max = inner.filter().max(log::LevelFilter::Warn);
    if log::set_boxed_logger(Box::new(CapturingLogger { inner })).is_ok() {
        log::set_max_level(max);
    }
}
