//! The one-language alignment grid: rows are the zero-shot baseline and one
//! single-language alignment run per target, columns are languages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::Stat;
use crate::runner::CellOutcome;
use crate::{write_file, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    /// Test intent accuracy per language, source included.
    pub cells: BTreeMap<String, Stat>,
    /// Mean over target-language columns.
    pub average: Option<f64>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub source_language: String,
    pub targets: Vec<String>,
    pub rows: Vec<GridRow>,
}

pub fn aggregate(outcomes: &[CellOutcome], source: &str, targets: &[String]) -> GridTable {
    let mut labels: Vec<String> = Vec::new();
    for o in outcomes {
        if !labels.contains(&o.cell.label) {
            labels.push(o.cell.label.clone());
        }
    }
    let rows = labels
        .into_iter()
        .map(|label| {
            let group: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.cell.label == label).collect();
            let failed_seeds = group.iter().filter(|o| o.result.is_err()).map(|o| o.cell.seed).collect();
            let reports: Vec<_> = group.iter().filter_map(|o| o.result.as_ref().ok()).collect();
            let mut cells = BTreeMap::new();
            if !reports.is_empty() {
                let src: Vec<f64> = reports.iter().map(|r| r.source.intent_accuracy).collect();
                cells.insert(source.to_string(), Stat::of(&src));
                for t in targets {
                    let v: Vec<f64> = reports
                        .iter()
                        .filter_map(|r| r.languages.get(t))
                        .map(|s| s.intent_accuracy)
                        .collect();
                    if !v.is_empty() {
                        cells.insert(t.clone(), Stat::of(&v));
                    }
                }
            }
            let tv: Vec<f64> = targets.iter().filter_map(|t| cells.get(t)).map(|s| s.mean).collect();
            let average = (!tv.is_empty()).then(|| tv.iter().sum::<f64>() / tv.len() as f64);
            GridRow {
                label,
                cells,
                average,
                failed_seeds,
            }
        })
        .collect();
    GridTable {
        source_language: source.to_string(),
        targets: targets.to_vec(),
        rows,
    }
}

pub fn render_text(t: &GridTable) -> String {
    let mut cols = vec![t.source_language.clone()];
    cols.extend(t.targets.iter().cloned());
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "row");
    for c in &cols {
        let _ = write!(out, " {c:>8}");
    }
    let _ = writeln!(out, " {:>8}", "avg");
    for r in &t.rows {
        let _ = write!(out, "{:<14}", r.label);
        for c in &cols {
            match r.cells.get(c) {
                Some(s) => {
                    let _ = write!(out, " {:>8.1}", 100.0 * s.mean);
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        match r.average {
            Some(a) => {
                let _ = writeln!(out, " {:>8.1}", 100.0 * a);
            }
            None => {
                let _ = writeln!(out, " {:>8}", "-");
            }
        }
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    row: &'a str,
    language: &'a str,
    intent_accuracy_mean: f64,
    intent_accuracy_std: f64,
    n: usize,
}

pub fn write_grid(t: &GridTable, out_dir: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &t.rows {
        for (lang, s) in &r.cells {
            w.serialize(CsvRow {
                row: &r.label,
                language: lang,
                intent_accuracy_mean: s.mean,
                intent_accuracy_std: s.std,
                n: s.n,
            })?;
        }
    }
    let body = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join("grid.csv"), body)?;
    write_file(&out_dir.join("grid.json"), serde_json::to_string_pretty(t)? + "\n")?;
    write_file(&out_dir.join("grid.txt"), render_text(t))
}
