use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, ParallelExample};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetRecord {
    tokens: Vec<String>,
    language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    pair_id: String,
    source: Example,
    target: TargetRecord,
}

/// Reads one parallel pair per line. Blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<ParallelExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: PairRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !ids.insert(rec.pair_id.clone()) {
            return Err(parse_err(format!("duplicate pair_id `{}`", rec.pair_id)));
        }
        let labels = match (rec.target.intent, rec.target.slots) {
            (Some(intent), slots) => Some((intent, slots)),
            (None, None) => None,
            (None, Some(_)) => {
                return Err(parse_err("target slots given without a target intent".into()))
            }
        };
        out.push(ParallelExample::new(
            rec.pair_id,
            rec.source,
            rec.target.tokens,
            rec.target.language,
            labels,
        )?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[ParallelExample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ex in examples {
        let gold = ex.raw_target_gold();
        let rec = PairRecord {
            pair_id: ex.pair_id().to_string(),
            source: ex.source().clone(),
            target: TargetRecord {
                tokens: ex.target_tokens().to_vec(),
                language: ex.target_language().to_string(),
                intent: gold.map(|g| g.intent.clone()),
                slots: gold.and_then(|g| g.slots.clone()),
            },
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
