//! Training runs and their run directories.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use xeroalign_core::data::{Corpus, Split};
use xeroalign_core::training::{evaluate, train, write_run_dir, EvalReport, TrainConfig};

use crate::config::{Cell, DataSource, RunConfig};
use crate::{CliError, CliResult};

/// The split a finished run is scored on: test when present, else dev.
pub fn report_split(corpus: &Corpus) -> Split {
    if corpus.has_split(Split::Test) {
        Split::Test
    } else {
        Split::Dev
    }
}

/// Trains, evaluates and writes a run directory.
pub fn run_to_dir(config: &TrainConfig, data: &DataSource, corpus: &Corpus, dir: &Path) -> CliResult<EvalReport> {
    let ckpt = train(config, corpus)?;
    let report = evaluate(&ckpt.model, corpus, report_split(corpus))?;
    let echo = RunConfig {
        data: data.clone(),
        train: config.clone(),
    };
    let echo = toml::to_string(&echo).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_run_dir(dir, &echo, &ckpt, &report)?;
    Ok(report)
}

/// Outcome of one matrix or grid cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub cell: Cell,
    pub dir: PathBuf,
    pub result: Result<EvalReport, String>,
}

/// Runs cells on `jobs` worker threads. A failing cell does not stop the
/// others; results come back in input order.
pub fn run_cells(cells: Vec<Cell>, data: &DataSource, corpus: &Corpus, root: &Path, jobs: usize) -> CliResult<Vec<CellOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|cell| {
                let dir = root.join("runs").join(cell.dir_name());
                let result = run_to_dir(&cell.config, data, corpus, &dir).map_err(|e| e.to_string());
                if let Err(e) = &result {
                    eprintln!("cell {} failed: {e}", cell.dir_name());
                }
                CellOutcome { cell, dir, result }
            })
            .collect()
    }))
}
