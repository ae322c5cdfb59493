use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to reproduce one output file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub output: String,
    pub wall_time_s: f64,
    /// Scalar summaries of the run (mass, minimum value, ...).
    pub summary: serde_json::Value,
    pub warnings: Vec<String>,
}

/// Collects warnings and summaries while a subcommand runs.
pub struct Run {
    started: Instant,
    pub subcommand: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub warnings: Vec<String>,
}

impl Run {
    pub fn new<P: Serialize>(subcommand: &str, parameters: &P) -> Self {
        Run {
            started: Instant::now(),
            subcommand: subcommand.to_string(),
            parameters: serde_json::to_value(parameters).unwrap_or(serde_json::Value::Null),
            seed: None,
            summary: serde_json::Map::new(),
            warnings: Vec::new(),
        }
    }

    pub fn note<V: Serialize>(&mut self, key: &str, value: V) {
        if let Ok(v) = serde_json::to_value(value) {
            self.summary.insert(key.to_string(), v);
        }
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    fn manifest(&self, output: &Path) -> RunManifest {
        RunManifest {
            tool: "mdist",
            tool_version: TOOL_VERSION,
            command_line: std::env::args().collect(),
            subcommand: self.subcommand.clone(),
            parameters: self.parameters.clone(),
            seed: self.seed,
            threads: rayon::current_num_threads(),
            output: output.display().to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            summary: serde_json::Value::Object(self.summary.clone()),
            warnings: self.warnings.clone(),
        }
    }

    /// Writes `body` to `path` and the manifest next to it, both atomically.
    pub fn finish_file<F>(&self, path: &Path, body: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
    {
        write_atomic(path, body)?;
        let manifest = self.manifest(path);
        write_atomic(&manifest_path(path), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)
        })
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes through a temporary file in the target directory, then renames,
/// so a failed run never leaves a partial file behind.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        body(&mut buf).with_context(|| format!("writing {}", path.display()))?;
        buf.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
