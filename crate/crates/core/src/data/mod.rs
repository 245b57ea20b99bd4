//! Corpus schema, vocabulary, batching and the synthetic bilingual generator.

mod batch;
mod corpus;
mod jsonl;
pub mod synth;
mod vocab;

pub use batch::{encode_example, encode_tokens, make_batches, Batch, EncodeStats, EncodedExample, EncodedItem};
pub use corpus::{Corpus, Split};
pub use jsonl::{load_jsonl, write_jsonl};
pub use vocab::{build_vocab, Labels, Vocab, CLS_ID, CLS_TOKEN, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::Mode;

/// A labeled utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub tokens: Vec<String>,
    pub intent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<Vec<String>>,
    pub language: String,
}

/// Who is asking for target-side labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelAccess {
    Train(Mode),
    Evaluation,
}

/// A labeled source utterance paired with its translation. Target labels,
/// when present, are only handed out through [`ParallelExample::target_gold`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pair_id: String,
    source: Example,
    target_tokens: Vec<String>,
    target_language: String,
    target_gold: Option<Example>,
}

impl ParallelExample {
    pub fn new(
        pair_id: impl Into<String>,
        source: Example,
        target_tokens: Vec<String>,
        target_language: impl Into<String>,
        target_labels: Option<(String, Option<Vec<String>>)>,
    ) -> Result<Self> {
        let pair_id = pair_id.into();
        let target_language = target_language.into();
        let target_gold = target_labels.map(|(intent, slots)| Example {
            tokens: target_tokens.clone(),
            intent,
            slots,
            language: target_language.clone(),
        });
        let pe = ParallelExample {
            pair_id,
            source,
            target_tokens,
            target_language,
            target_gold,
        };
        pe.validate()?;
        Ok(pe)
    }

    fn validate(&self) -> Result<()> {
        let bio = |message: String| Error::Bio {
            pair_id: self.pair_id.clone(),
            message,
        };
        if self.source.tokens.is_empty() || self.target_tokens.is_empty() {
            return Err(Error::Input(format!("pair `{}` has an empty utterance", self.pair_id)));
        }
        for (side, ex) in [("source", Some(&self.source)), ("target", self.target_gold.as_ref())] {
            let Some(ex) = ex else { continue };
            if let Some(slots) = &ex.slots {
                if slots.len() != ex.tokens.len() {
                    return Err(bio(format!(
                        "{side} has {} tags for {} tokens",
                        slots.len(),
                        ex.tokens.len()
                    )));
                }
                validate_bio(slots).map_err(|m| bio(format!("{side}: {m}")))?;
            }
        }
        Ok(())
    }

    pub fn pair_id(&self) -> &str {
        &self.pair_id
    }

    pub fn source(&self) -> &Example {
        &self.source
    }

    pub fn target_tokens(&self) -> &[String] {
        &self.target_tokens
    }

    pub fn target_language(&self) -> &str {
        &self.target_language
    }

    pub fn has_target_gold(&self) -> bool {
        self.target_gold.is_some()
    }

    /// Target-side labels. Training modes other than `target` and
    /// `translate_train` are refused.
    pub fn target_gold(&self, access: LabelAccess) -> Result<&Example> {
        if let LabelAccess::Train(mode) = access {
            if !mode.reads_target_labels() {
                return Err(Error::LabelAccess {
                    pair_id: self.pair_id.clone(),
                    mode: mode.name().to_string(),
                });
            }
        }
        self.target_gold.as_ref().ok_or_else(|| {
            Error::Config(format!("pair `{}` carries no target labels", self.pair_id))
        })
    }

    /// A copy with target labels removed.
    pub fn without_target_gold(&self) -> Self {
        ParallelExample {
            target_gold: None,
            ..self.clone()
        }
    }

    pub(crate) fn raw_target_gold(&self) -> Option<&Example> {
        self.target_gold.as_ref()
    }
}

fn tag_type(tag: &str) -> Option<(char, &str)> {
    let (prefix, ty) = tag.split_once('-')?;
    let p = match prefix {
        "B" => 'B',
        "I" => 'I',
        _ => return None,
    };
    if ty.is_empty() || !ty.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return None;
    }
    Some((p, ty))
}

/// Checks tag syntax and that every `I-X` continues a `B-X` or `I-X`.
pub fn validate_bio(tags: &[String]) -> std::result::Result<(), String> {
    let mut open: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            open = None;
            continue;
        }
        match tag_type(tag) {
            Some(('B', ty)) => open = Some(ty),
            Some((_, ty)) => {
                if open != Some(ty) {
                    return Err(format!("tag {i} `{tag}` does not continue a {ty} span"));
                }
            }
            None => return Err(format!("tag {i} `{tag}` is not O, B-X or I-X")),
        }
    }
    Ok(())
}

/// Entity type of a `B-`/`I-` tag.
pub fn slot_type(tag: &str) -> Option<&str> {
    tag_type(tag).map(|(_, t)| t)
}
