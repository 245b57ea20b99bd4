use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to id map shared by every language. Ids follow first occurrence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Builds a vocabulary over every sentence given, keeping tokens seen at
/// least `min_count` times.
pub fn build_vocab<'a, I>(sentences: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut order: Vec<&'a str> = Vec::new();
    let mut counts: HashMap<&'a str, usize> = HashMap::new();
    for s in sentences {
        for t in s {
            let c = counts.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                order.push(t.as_str());
            }
            *c += 1;
        }
    }
    if order.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut tokens: Vec<String> = [PAD_TOKEN, CLS_TOKEN, UNK_TOKEN].map(String::from).to_vec();
    for t in order {
        if counts[t] >= min_count && !matches!(t, PAD_TOKEN | CLS_TOKEN | UNK_TOKEN) {
            tokens.push(t.to_string());
        }
    }
    Ok(Vocab::from(tokens))
}

/// Intent and slot-tag inventories of a trained model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub intents: Vec<String>,
    /// `O` first, then `B-`/`I-` pairs per slot type.
    pub slot_tags: Vec<String>,
}

impl Labels {
    /// Collects labels in first-occurrence order.
    pub fn from_examples<'a, I>(examples: I) -> Self
    where
        I: IntoIterator<Item = &'a super::Example>,
    {
        let mut intents: Vec<String> = Vec::new();
        let mut types: Vec<String> = Vec::new();
        for ex in examples {
            if !intents.contains(&ex.intent) {
                intents.push(ex.intent.clone());
            }
            for tag in ex.slots.iter().flatten() {
                if let Some(t) = super::slot_type(tag) {
                    if !types.iter().any(|x| x == t) {
                        types.push(t.to_string());
                    }
                }
            }
        }
        let mut slot_tags = vec!["O".to_string()];
        for t in types {
            slot_tags.push(format!("B-{t}"));
            slot_tags.push(format!("I-{t}"));
        }
        Labels { intents, slot_tags }
    }

    pub fn intent_id(&self, intent: &str) -> Result<usize> {
        self.intents
            .iter()
            .position(|i| i == intent)
            .ok_or_else(|| Error::Input(format!("unknown intent `{intent}`")))
    }

    pub fn slot_id(&self, tag: &str) -> Result<usize> {
        self.slot_tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::Input(format!("unknown slot tag `{tag}`")))
    }
}
