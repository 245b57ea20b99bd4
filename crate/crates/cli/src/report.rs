//! Plots and summaries for finished run directories.

use std::path::{Path, PathBuf};

use serde::Serialize;
use xeroalign_core::training::{read_history_csv, EpochRecord, EvalReport, RunFiles};

use crate::svg::{line_plot, Series};
use crate::{write_file, CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub epochs: usize,
    pub final_task_loss: Option<f64>,
    pub final_align_loss: Option<f64>,
    pub best_dev_intent_accuracy: Option<f64>,
    pub test: EvalReport,
}

/// Run directories under `root`: `root` itself if it holds a run, else its
/// `runs/` subdirectory or its direct children.
pub fn find_runs(root: &Path) -> CliResult<Vec<PathBuf>> {
    let is_run = |p: &Path| p.join("history.csv").exists() || p.join("report.json").exists();
    if is_run(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let base = if root.join("runs").is_dir() { root.join("runs") } else { root.to_path_buf() };
    let entries = std::fs::read_dir(&base).map_err(|e| CliError::io(&base, e))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn series(name: &str, h: &[EpochRecord], f: impl Fn(&EpochRecord) -> Option<f64>) -> Option<Series> {
    let points: Vec<(f64, f64)> = h.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect();
    (!points.is_empty()).then(|| Series {
        name: name.into(),
        points,
    })
}

/// Writes the three plots and `summary.json` for one run. Returns the
/// names of required files that were missing.
pub fn report_run(dir: &Path) -> CliResult<Vec<String>> {
    let files = RunFiles::new(dir);
    let mut missing = Vec::new();
    for p in [&files.history, &files.report] {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Ok(missing);
    }
    let history = read_history_csv(&files.history)?;
    let text = std::fs::read_to_string(&files.report).map_err(|e| CliError::io(&files.report, e))?;
    let test: EvalReport = serde_json::from_str(&text)?;

    let losses: Vec<Series> = [
        series("task", &history, |r| Some(r.task_loss)),
        series("align", &history, |r| Some(r.align_loss)),
        series("total", &history, |r| Some(r.total_loss)),
    ]
    .into_iter()
    .flatten()
    .collect();
    let acc: Vec<Series> = [
        series("dev intent accuracy", &history, |r| r.dev_intent_accuracy),
        series("dev slot F1", &history, |r| r.dev_slot_f1),
    ]
    .into_iter()
    .flatten()
    .collect();
    let align: Vec<Series> = series("dev CLS MSE", &history, |r| r.dev_align_mse).into_iter().collect();

    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_file(&dir.join("losses.svg"), line_plot(&format!("{name}: losses"), "epoch", "loss", &losses))?;
    write_file(&dir.join("accuracy.svg"), line_plot(&format!("{name}: dev scores"), "epoch", "score", &acc))?;
    write_file(&dir.join("alignment.svg"), line_plot(&format!("{name}: CLS distance"), "epoch", "mse", &align))?;

    let summary = RunSummary {
        run: name,
        epochs: history.len(),
        final_task_loss: history.last().map(|r| r.task_loss),
        final_align_loss: history.last().map(|r| r.align_loss),
        best_dev_intent_accuracy: history.iter().filter_map(|r| r.dev_intent_accuracy).reduce(f64::max),
        test,
    };
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(Vec::new())
}
