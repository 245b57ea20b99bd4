//! Aggregation of matrix cells into results tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xeroalign_core::training::{EvalReport, Mode};

use crate::runner::CellOutcome;
use crate::{write_file, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub intent_accuracy: Stat,
    pub slot_f1: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub preset: String,
    pub label: String,
    pub mode: Mode,
    pub align_languages: Vec<String>,
    pub seeds: Vec<u64>,
    pub failed: Vec<FailedRun>,
    pub languages: BTreeMap<String, MetricCell>,
    /// Means are the mean of the language means; deviations are over
    /// per-seed averages. Absent when every seed failed.
    pub average: Option<MetricCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub languages: Vec<String>,
    pub rows: Vec<TableRow>,
    /// `(xeroalign - zero_shot) / zero_shot` of average intent accuracy, per
    /// preset, when both rows exist.
    pub relative_improvement: BTreeMap<String, f64>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Groups outcomes by (preset, label) in first-appearance order.
pub fn aggregate(outcomes: &[CellOutcome]) -> ResultsTable {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&CellOutcome>> = BTreeMap::new();
    for o in outcomes {
        let key = (o.cell.preset.name().to_string(), o.cell.label.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(o);
    }
    let mut languages: Vec<String> = Vec::new();
    for o in outcomes {
        if let Ok(r) = &o.result {
            for l in r.languages.keys() {
                if !languages.contains(l) {
                    languages.push(l.clone());
                }
            }
        }
    }
    let mut rows = Vec::new();
    for key in order {
        let group = &groups[&key];
        let first = &group[0].cell;
        let ok: Vec<(u64, &EvalReport)> = group
            .iter()
            .filter_map(|o| o.result.as_ref().ok().map(|r| (o.cell.seed, r)))
            .collect();
        let failed = group
            .iter()
            .filter_map(|o| {
                o.result.as_ref().err().map(|e| FailedRun {
                    seed: o.cell.seed,
                    error: e.clone(),
                })
            })
            .collect();
        let mut cells = BTreeMap::new();
        for l in &languages {
            let acc: Vec<f64> = ok.iter().filter_map(|(_, r)| r.languages.get(l)).map(|s| s.intent_accuracy).collect();
            let f1: Vec<f64> = ok.iter().filter_map(|(_, r)| r.languages.get(l)).map(|s| s.slot_f1).collect();
            if !acc.is_empty() {
                cells.insert(
                    l.clone(),
                    MetricCell {
                        intent_accuracy: Stat::of(&acc),
                        slot_f1: Stat::of(&f1),
                    },
                );
            }
        }
        let average = (!cells.is_empty()).then(|| {
            let per_seed_acc: Vec<f64> = ok.iter().map(|(_, r)| r.average.intent_accuracy).collect();
            let per_seed_f1: Vec<f64> = ok.iter().map(|(_, r)| r.average.slot_f1).collect();
            MetricCell {
                intent_accuracy: Stat {
                    mean: mean(cells.values().map(|c| c.intent_accuracy.mean)),
                    ..Stat::of(&per_seed_acc)
                },
                slot_f1: Stat {
                    mean: mean(cells.values().map(|c| c.slot_f1.mean)),
                    ..Stat::of(&per_seed_f1)
                },
            }
        });
        rows.push(TableRow {
            preset: key.0.clone(),
            label: key.1.clone(),
            mode: first.config.mode,
            align_languages: first.config.align_languages.clone(),
            seeds: ok.iter().map(|(s, _)| *s).collect(),
            failed,
            languages: cells,
            average,
        });
    }
    let mut relative_improvement = BTreeMap::new();
    let presets: Vec<String> = rows.iter().map(|r| r.preset.clone()).collect();
    for p in presets {
        let find = |m: Mode| {
            rows.iter()
                .find(|r| r.preset == p && r.mode == m && r.align_languages.is_empty())
                .and_then(|r| r.average)
        };
        if let (Some(x), Some(z)) = (find(Mode::XeroAlign), find(Mode::ZeroShot)) {
            let base = z.intent_accuracy.mean;
            if base > 0.0 {
                relative_improvement.insert(p, (x.intent_accuracy.mean - base) / base);
            }
        }
    }
    ResultsTable {
        languages,
        rows,
        relative_improvement,
    }
}

fn cell_text(c: Option<&MetricCell>) -> String {
    match c {
        Some(c) => format!("{:.1} / {:.1}", 100.0 * c.intent_accuracy.mean, 100.0 * c.slot_f1.mean),
        None => "failed".into(),
    }
}

/// Fixed-width table with "accuracy / F1" cells in percent.
pub fn render_text(t: &ResultsTable) -> String {
    let mut header = vec!["config".to_string()];
    header.extend(t.languages.iter().cloned());
    header.push("average".into());
    let mut body: Vec<Vec<String>> = Vec::new();
    for r in &t.rows {
        let mut line = vec![format!("{}/{}", r.preset, r.label)];
        for l in &t.languages {
            line.push(cell_text(r.languages.get(l)));
        }
        line.push(cell_text(r.average.as_ref()));
        body.push(line);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|l| l[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt = |cols: &[String]| -> String {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", fmt(&header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for l in &body {
        let _ = writeln!(out, "{}", fmt(l));
    }
    for (p, v) in &t.relative_improvement {
        let _ = writeln!(out, "\nrelative improvement of xeroalign over zero_shot ({p}): {:+.1}%", 100.0 * v);
    }
    out
}

#[derive(Serialize)]
struct CsvRow<'a> {
    preset: &'a str,
    label: &'a str,
    mode: &'a str,
    language: &'a str,
    intent_accuracy_mean: f64,
    intent_accuracy_std: f64,
    slot_f1_mean: f64,
    slot_f1_std: f64,
    n: usize,
}

pub fn write_table(t: &ResultsTable, out_dir: &Path, stem: &str) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &t.rows {
        let entries = r
            .languages
            .iter()
            .map(|(l, c)| (l.as_str(), c))
            .chain(r.average.as_ref().map(|c| ("average", c)));
        for (lang, c) in entries {
            w.serialize(CsvRow {
                preset: &r.preset,
                label: &r.label,
                mode: r.mode.name(),
                language: lang,
                intent_accuracy_mean: c.intent_accuracy.mean,
                intent_accuracy_std: c.intent_accuracy.std,
                slot_f1_mean: c.slot_f1.mean,
                slot_f1_std: c.slot_f1.std,
                n: c.intent_accuracy.n,
            })?;
        }
    }
    let csv = w.into_inner().map_err(|e| crate::CliError::Runtime(e.to_string()))?;
    write_file(&out_dir.join(format!("{stem}.csv")), csv)?;
    write_file(&out_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(t)? + "\n")?;
    write_file(&out_dir.join(format!("{stem}.txt")), render_text(t))
}
