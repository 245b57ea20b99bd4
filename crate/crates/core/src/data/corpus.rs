use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_jsonl, write_jsonl, ParallelExample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

/// Parallel data by split and language, stored as `{split}.{lang}.jsonl`.
/// The source-language file pairs each source utterance with itself; every
/// other file pairs the same source rows, in the same order, with a
/// translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    source_language: String,
    splits: BTreeMap<Split, BTreeMap<String, Vec<ParallelExample>>>,
}

impl Corpus {
    pub fn new(
        source_language: impl Into<String>,
        splits: BTreeMap<Split, BTreeMap<String, Vec<ParallelExample>>>,
    ) -> Result<Self> {
        let c = Corpus {
            source_language: source_language.into(),
            splits,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        for (split, langs) in &self.splits {
            let Some(src) = langs.get(&self.source_language) else {
                return Err(Error::Config(format!(
                    "split {} has no {} file",
                    split.name(),
                    self.source_language
                )));
            };
            for (lang, rows) in langs {
                if rows.len() != src.len() {
                    return Err(Error::Pairing(format!(
                        "{}.{lang} has {} rows, source file has {}",
                        split.name(),
                        rows.len(),
                        src.len()
                    )));
                }
                for (a, b) in rows.iter().zip(src) {
                    if a.source() != b.source() {
                        return Err(Error::Pairing(format!(
                            "pair `{}` in {}.{lang} is not aligned with `{}`",
                            a.pair_id(),
                            split.name(),
                            b.pair_id()
                        )));
                    }
                    if a.target_language() != lang {
                        return Err(Error::Pairing(format!(
                            "pair `{}` in {}.{lang} has target language {}",
                            a.pair_id(),
                            split.name(),
                            a.target_language()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(stem) = name.strip_suffix(".jsonl") else { continue };
            let Some((split, lang)) = stem.split_once('.') else { continue };
            let Some(split) = Split::parse(split) else { continue };
            files.push((split, lang.to_string(), entry.path()));
        }
        files.sort();
        let mut splits: BTreeMap<Split, BTreeMap<String, Vec<ParallelExample>>> = BTreeMap::new();
        let mut source_language: Option<String> = None;
        for (split, lang, path) in files {
            let rows = load_jsonl(&path)?;
            if let Some(first) = rows.first() {
                let src = &first.source().language;
                match &source_language {
                    None => source_language = Some(src.clone()),
                    Some(s) if s != src => {
                        return Err(Error::Config(format!(
                            "{} mixes source languages {s} and {src}",
                            path.display()
                        )))
                    }
                    _ => {}
                }
            }
            splits.entry(split).or_default().insert(lang, rows);
        }
        let source_language = source_language
            .ok_or_else(|| Error::Config(format!("no corpus files found in {}", dir.display())))?;
        Corpus::new(source_language, splits)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for (split, langs) in &self.splits {
            for (lang, rows) in langs {
                let p = dir.join(format!("{}.{lang}.jsonl", split.name()));
                write_jsonl(&p, rows)?;
                written.push(p);
            }
        }
        Ok(written)
    }

    pub fn source_language(&self) -> &str {
        &self.source_language
    }

    /// Languages present in the train split, source language first.
    pub fn languages(&self) -> Vec<String> {
        let mut out = vec![self.source_language.clone()];
        out.extend(self.target_languages());
        out
    }

    pub fn target_languages(&self) -> Vec<String> {
        self.splits
            .get(&Split::Train)
            .map(|m| {
                m.keys()
                    .filter(|l| **l != self.source_language)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.splits.contains_key(&split)
    }

    pub fn rows(&self, split: Split, language: &str) -> Result<&[ParallelExample]> {
        self.splits
            .get(&split)
            .and_then(|m| m.get(language))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Config(format!("corpus has no {}.{language} data", split.name()))
            })
    }

    /// The source-language rows of a split.
    pub fn source_rows(&self, split: Split) -> Result<&[ParallelExample]> {
        self.rows(split, &self.source_language)
    }
}
