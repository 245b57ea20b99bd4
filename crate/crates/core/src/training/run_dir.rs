use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{save_checkpoint, Checkpoint, EpochRecord, EvalReport};
use crate::error::{Error, Result};

/// Paths inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunFiles {
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub steps: PathBuf,
    pub report: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        RunFiles {
            config: d.join("config.toml"),
            checkpoint: d.join("checkpoint"),
            history: d.join("history.csv"),
            steps: d.join("steps.csv"),
            report: d.join("report.json"),
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        message: e.to_string(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the config echo, checkpoint, per-epoch and per-step CSVs and the
/// final report.
pub fn write_run_dir(
    dir: impl AsRef<Path>,
    config_echo: &str,
    ckpt: &Checkpoint,
    report: &EvalReport,
) -> Result<RunFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = RunFiles::new(dir);
    fs::write(&files.config, config_echo).map_err(|e| Error::io(&files.config, e))?;
    save_checkpoint(ckpt, &files.checkpoint)?;
    write_csv(&files.history, &ckpt.history.epochs)?;
    write_csv(&files.steps, &ckpt.history.steps)?;
    let body = serde_json::to_string_pretty(report)? + "\n";
    fs::write(&files.report, body).map_err(|e| Error::io(&files.report, e))?;
    Ok(files)
}

/// Parses a `history.csv` written by [`write_run_dir`].
pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<EpochRecord>, _>>()
        .map_err(|e| csv_err(path, e))
}
