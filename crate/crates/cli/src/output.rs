use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::{EXIT_FAILED, EXIT_INVALID};

pub const SCHEMA: &str = "hierperc/1";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] hierperc_core::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use hierperc_core::Error as E;
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Core(
                E::InvalidParam(_)
                | E::ScaleCap { .. }
                | E::VertexOutOfRange { .. }
                | E::TimeOutOfRange { .. }
                | E::RegimeMismatch(_)
                | E::GroundSetTooLarge(_)
                | E::Diagonal,
            ) => EXIT_INVALID,
            _ => EXIT_FAILED,
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

/// Where a command writes its CSV body and JSON sidecar.
pub struct Output {
    dir: Option<PathBuf>,
    command: &'static str,
}

impl Output {
    pub fn new(out: &str, command: &'static str) -> Result<Self, CliError> {
        if out == "-" {
            return Ok(Self { dir: None, command });
        }
        let dir = PathBuf::from(out);
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: Some(dir), command })
    }

    /// Directory used for the sidecar and the critical-point cache.
    pub fn dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn csv_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.csv", self.command)))
    }

    pub fn write_csv<T: Serialize>(&self, rows: &[T]) -> Result<(), CliError> {
        let sink: Box<dyn Write> = match self.csv_path() {
            Some(p) => Box::new(fs::File::create(&p).map_err(io_err)?),
            None => Box::new(std::io::stdout()),
        };
        let mut w = csv::Writer::from_writer(sink);
        for r in rows {
            w.serialize(r).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn write_sidecar(&self, sidecar: &Sidecar) -> Result<(), CliError> {
        let path = self.dir().join(format!("{}.json", self.command));
        let text = serde_json::to_string_pretty(sidecar).map_err(io_err)?;
        fs::write(&path, text + "\n").map_err(io_err)
    }
}

#[derive(Debug, Serialize)]
pub struct Sidecar {
    pub schema: &'static str,
    pub command: &'static str,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_time_s: f64,
    pub config: serde_json::Value,
    pub beta: Option<BetaInfo>,
    pub result: serde_json::Value,
}

pub fn artifact_version() -> String {
    match option_env!("HIERPERC_GIT_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// The coupling a run used and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaInfo {
    pub value: f64,
    /// `given`, `cache` or `bisection`.
    pub source: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedBracket {
    pub lower: f64,
    pub upper: f64,
    pub estimate: f64,
    pub converged: bool,
}

pub const CACHE_FILE: &str = "betac-cache.json";

pub fn cache_key(d: u32, l: u64, alpha: f64, tolerance: f64) -> String {
    format!("d={d},L={l},alpha={alpha},tolerance={tolerance}")
}

pub fn read_cache(dir: &std::path::Path) -> BTreeMap<String, CachedBracket> {
    fs::read_to_string(dir.join(CACHE_FILE)).ok().and_then(|t| serde_json::from_str(&t).ok()).unwrap_or_default()
}

pub fn write_cache(dir: &std::path::Path, key: String, entry: CachedBracket) -> Result<(), CliError> {
    let mut cache = read_cache(dir);
    cache.insert(key, entry);
    let text = serde_json::to_string_pretty(&cache).map_err(io_err)?;
    fs::write(dir.join(CACHE_FILE), text + "\n").map_err(io_err)
}
