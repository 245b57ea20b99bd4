//! Deterministic synthetic bilingual benchmark.
//!
//! Source utterances are sampled from per-intent templates whose `[slot]`
//! placeholders are filled from slot lexicons. Each target language is a
//! cipher of the source: a bijective word map into opaque tokens, followed by
//! an optional word-order transform. Slot tags travel with their tokens and
//! are rebuilt as valid BIO after reordering.
//!
//! A share of source words (`cognate_rate`) maps to the same token in every
//! target language, so target languages overlap with each other but never
//! with the source vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Example, ParallelExample, Split};
use crate::error::{Error, Result};
use crate::metrics::bio_spans;

/// The shipped default generator spec.
pub const DEFAULT_SPEC: &str = include_str!("../../configs/default_data.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    /// Keep source order.
    None,
    /// Reverse the whole token sequence.
    Reverse,
    /// Apply a fixed seeded permutation of template units, per template.
    Permute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    #[serde(default = "default_order")]
    pub word_order: WordOrder,
}

fn default_order() -> WordOrder {
    WordOrder::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Seed of the word maps; defaults to `seed`.
    #[serde(default)]
    pub cipher_seed: Option<u64>,
    #[serde(default = "default_source")]
    pub source_language: String,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub cognate_rate: f64,
    /// Length (including CLS) above which the stats report counts an
    /// utterance as over-length.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub targets: Vec<TargetSpec>,
    pub intents: Vec<IntentSpec>,
    /// Slot type to lexicon entries; entries may span several words.
    pub slots: BTreeMap<String, Vec<String>>,
}

fn default_source() -> String {
    "en".to_string()
}

fn default_max_len() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Unit {
    Word(String),
    Slot(String),
}

#[derive(Clone, Debug)]
struct Template {
    intent: usize,
    index: usize,
    units: Vec<Unit>,
}

fn parse_template(text: &str, slots: &BTreeMap<String, Vec<String>>) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for word in text.split_whitespace() {
        if let Some(inner) = word.strip_prefix('[').and_then(|w| w.strip_suffix(']')) {
            if !slots.contains_key(inner) {
                return Err(Error::Spec(format!(
                    "template `{text}` references unknown slot type `{inner}`"
                )));
            }
            units.push(Unit::Slot(inner.to_string()));
        } else if word.contains(['[', ']']) {
            return Err(Error::Spec(format!("template `{text}` has a malformed placeholder `{word}`")));
        } else {
            units.push(Unit::Word(word.to_string()));
        }
    }
    if units.is_empty() {
        return Err(Error::Spec("empty template".into()));
    }
    Ok(units)
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))
    }

    pub fn default_spec() -> Self {
        Self::from_toml(DEFAULT_SPEC).expect("shipped spec parses")
    }

    fn validate(&self) -> Result<Vec<Template>> {
        let err = |m: String| Err(Error::Spec(m));
        if self.intents.is_empty() {
            return err("at least one intent is required".into());
        }
        if self.train_size == 0 {
            return err("train_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cognate_rate) {
            return err(format!("cognate_rate {} outside [0, 1]", self.cognate_rate));
        }
        let mut names = HashSet::new();
        for t in &self.targets {
            if t.name == self.source_language || !names.insert(&t.name) {
                return err(format!("duplicate language `{}`", t.name));
            }
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric()) {
                return err(format!("language name `{}` must be alphanumeric", t.name));
            }
        }
        for (ty, lex) in &self.slots {
            if ty.is_empty() || !ty.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return err(format!("slot type `{ty}` must match [A-Za-z0-9_]+"));
            }
            if lex.is_empty() || lex.iter().any(|v| v.split_whitespace().next().is_none()) {
                return err(format!("slot type `{ty}` needs non-empty lexicon entries"));
            }
        }
        let mut templates = Vec::new();
        for (i, intent) in self.intents.iter().enumerate() {
            if intent.templates.is_empty() {
                return err(format!("intent `{}` has no templates", intent.name));
            }
            for (j, text) in intent.templates.iter().enumerate() {
                templates.push(Template {
                    intent: i,
                    index: j,
                    units: parse_template(text, &self.slots)?,
                });
            }
        }
        Ok(templates)
    }

    /// Sorted source word inventory.
    fn source_words(&self, templates: &[Template]) -> Vec<String> {
        let mut words = BTreeSet::new();
        for t in templates {
            for u in &t.units {
                if let Unit::Word(w) = u {
                    words.insert(w.clone());
                }
            }
        }
        for lex in self.slots.values() {
            for v in lex {
                words.extend(v.split_whitespace().map(String::from));
            }
        }
        words.into_iter().collect()
    }
}

/// Bijective word map from the source vocabulary into one target language.
#[derive(Clone, Debug)]
pub struct Cipher {
    forward: HashMap<String, String>,
    backward: HashMap<String, String>,
}

impl Cipher {
    pub fn encode(&self, tokens: &[String]) -> Vec<String> {
        tokens.iter().map(|t| self.forward[t].clone()).collect()
    }

    pub fn decode(&self, tokens: &[String]) -> Option<Vec<String>> {
        tokens.iter().map(|t| self.backward.get(t).cloned()).collect()
    }

    pub fn target_tokens(&self) -> impl Iterator<Item = &String> {
        self.forward.values()
    }
}

fn build_ciphers(spec: &SynthSpec, words: &[String]) -> Result<Vec<Cipher>> {
    let seed = spec.cipher_seed.unwrap_or(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cognate: Vec<bool> = words
        .iter()
        .map(|_| rng.random::<f64>() < spec.cognate_rate)
        .collect();
    let mut shared: Vec<usize> = (0..words.len()).collect();
    shared.shuffle(&mut rng);
    let width = words.len().to_string().len().max(3);
    let source: HashSet<&String> = words.iter().collect();
    let mut ciphers = Vec::new();
    for (li, target) in spec.targets.iter().enumerate() {
        let mut lrng = ChaCha8Rng::seed_from_u64(seed);
        lrng.set_stream(li as u64 + 1);
        let mut own: Vec<usize> = (0..words.len()).collect();
        own.shuffle(&mut lrng);
        let mut forward = HashMap::new();
        let mut backward = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            let tok = if cognate[i] {
                format!("cg_{:0width$}", shared[i])
            } else {
                format!("{}_{:0width$}", target.name, own[i])
            };
            if source.contains(&tok) {
                return Err(Error::Spec(format!("cipher token `{tok}` collides with a source word")));
            }
            if backward.insert(tok.clone(), w.clone()).is_some() {
                return Err(Error::Spec(format!("cipher for {} is not injective", target.name)));
            }
            forward.insert(w.clone(), tok);
        }
        ciphers.push(Cipher { forward, backward });
    }
    Ok(ciphers)
}

/// Reorders `tokens` by `order` (new position -> old position) and rebuilds
/// BIO tags from the moved spans. Spans must stay contiguous under `order`.
fn reorder(tokens: &[String], tags: &[String], order: &[usize]) -> (Vec<String>, Vec<String>) {
    let mut new_pos = vec![0; order.len()];
    for (new, &old) in order.iter().enumerate() {
        new_pos[old] = new;
    }
    let out_tokens = order.iter().map(|&o| tokens[o].clone()).collect();
    let mut out_tags = vec!["O".to_string(); tags.len()];
    for span in bio_spans(tags) {
        let positions: Vec<usize> = (span.start..span.end).map(|p| new_pos[p]).collect();
        let lo = *positions.iter().min().expect("span is non-empty");
        let hi = *positions.iter().max().expect("span is non-empty");
        debug_assert_eq!(hi - lo + 1, positions.len(), "span stays contiguous");
        out_tags[lo] = format!("B-{}", span.label);
        for t in out_tags.iter_mut().take(hi + 1).skip(lo + 1) {
            *t = format!("I-{}", span.label);
        }
    }
    (out_tokens, out_tags)
}

/// A filled template: token and tag per position, plus unit boundaries.
struct Filled {
    template: usize,
    tokens: Vec<String>,
    tags: Vec<String>,
    unit_bounds: Vec<(usize, usize)>,
}

fn fill(template_idx: usize, template: &Template, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Filled {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut unit_bounds = Vec::new();
    for u in &template.units {
        let start = tokens.len();
        match u {
            Unit::Word(w) => {
                tokens.push(w.clone());
                tags.push("O".to_string());
            }
            Unit::Slot(ty) => {
                let lex = &spec.slots[ty];
                let value = &lex[rng.random_range(0..lex.len())];
                for (k, w) in value.split_whitespace().enumerate() {
                    tokens.push(w.to_string());
                    tags.push(if k == 0 { format!("B-{ty}") } else { format!("I-{ty}") });
                }
            }
        }
        unit_bounds.push((start, tokens.len()));
    }
    Filled {
        template: template_idx,
        tokens,
        tags,
        unit_bounds,
    }
}

/// Position order for a target language: new position -> source position.
fn target_order(filled: &Filled, order: WordOrder, unit_perm: &[usize]) -> Vec<usize> {
    let n = filled.tokens.len();
    match order {
        WordOrder::None => (0..n).collect(),
        WordOrder::Reverse => (0..n).rev().collect(),
        WordOrder::Permute => unit_perm
            .iter()
            .flat_map(|&u| {
                let (s, e) = filled.unit_bounds[u];
                s..e
            })
            .collect(),
    }
}

/// Per-split summary written next to the generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub pairs: usize,
    pub languages: Vec<String>,
    pub intents: BTreeMap<String, usize>,
    pub slot_types: BTreeMap<String, usize>,
    pub max_tokens: usize,
    pub mean_tokens: f64,
    /// Utterances that would be truncated at `max_len` (CLS included).
    pub over_length: usize,
}

/// Generated corpus plus the ciphers used, for inspection.
pub struct Generated {
    pub corpus: Corpus,
    pub ciphers: BTreeMap<String, Cipher>,
    pub stats: Vec<SplitStats>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Generated> {
    let templates = spec.validate()?;
    let words = spec.source_words(&templates);
    let ciphers = build_ciphers(spec, &words)?;
    let cipher_seed = spec.cipher_seed.unwrap_or(spec.seed);

    // Fixed unit permutation per (language, template).
    let unit_perms: Vec<Vec<Vec<usize>>> = spec
        .targets
        .iter()
        .enumerate()
        .map(|(li, _)| {
            templates
                .iter()
                .map(|t| {
                    let mut r = ChaCha8Rng::seed_from_u64(cipher_seed ^ 0x5eed_0000);
                    r.set_stream(((li as u64 + 1) << 32) | ((t.intent as u64) << 16) | t.index as u64);
                    let mut p: Vec<usize> = (0..t.units.len()).collect();
                    p.shuffle(&mut r);
                    p
                })
                .collect()
        })
        .collect();

    let by_intent: Vec<Vec<usize>> = (0..spec.intents.len())
        .map(|i| (0..templates.len()).filter(|&t| templates[t].intent == i).collect())
        .collect();

    let total = spec.train_size + spec.dev_size + spec.test_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen: Vec<HashSet<Vec<String>>> = vec![HashSet::new(); spec.targets.len() + 1];
    // (intent, source tokens, source tags, per target: tokens and tags)
    type Row = (usize, Vec<String>, Vec<String>, Vec<(Vec<String>, Vec<String>)>);
    let mut rows: Vec<Row> = Vec::with_capacity(total);
    const MAX_TRIES: usize = 2000;
    for idx in 0..total {
        let intent = idx % spec.intents.len();
        let mut produced = None;
        for _ in 0..MAX_TRIES {
            let t = by_intent[intent][rng.random_range(0..by_intent[intent].len())];
            let filled = fill(t, &templates[t], spec, &mut rng);
            if seen[0].contains(&filled.tokens) {
                continue;
            }
            let targets: Vec<(Vec<String>, Vec<String>)> = spec
                .targets
                .iter()
                .enumerate()
                .map(|(li, ts)| {
                    let order = target_order(&filled, ts.word_order, &unit_perms[li][filled.template]);
                    let (tok, tags) = reorder(&filled.tokens, &filled.tags, &order);
                    (ciphers[li].encode(&tok), tags)
                })
                .collect();
            if targets.iter().enumerate().any(|(li, (tok, _))| seen[li + 1].contains(tok)) {
                continue;
            }
            seen[0].insert(filled.tokens.clone());
            for (li, (tok, _)) in targets.iter().enumerate() {
                seen[li + 1].insert(tok.clone());
            }
            produced = Some((intent, filled.tokens, filled.tags, targets));
            break;
        }
        let row = produced.ok_or_else(|| {
            Error::Spec(format!(
                "could not sample {} distinct utterances for intent `{}`; add templates or lexicon entries",
                total.div_ceil(spec.intents.len()),
                spec.intents[intent].name
            ))
        })?;
        rows.push(row);
    }

    let bounds = [
        (Split::Train, 0, spec.train_size),
        (Split::Dev, spec.train_size, spec.train_size + spec.dev_size),
        (Split::Test, spec.train_size + spec.dev_size, total),
    ];
    let mut splits = BTreeMap::new();
    let mut stats = Vec::new();
    for (split, lo, hi) in bounds {
        if hi == lo {
            continue;
        }
        let mut order: Vec<usize> = (lo..hi).collect();
        order.shuffle(&mut rng);
        let mut langs: BTreeMap<String, Vec<ParallelExample>> = BTreeMap::new();
        let mut intents_hist: BTreeMap<String, usize> = BTreeMap::new();
        let mut slot_hist: BTreeMap<String, usize> = BTreeMap::new();
        let (mut max_tokens, mut sum_tokens, mut over) = (0, 0usize, 0);
        for (k, &r) in order.iter().enumerate() {
            let (intent, tokens, tags, targets) = &rows[r];
            let intent_name = spec.intents[*intent].name.clone();
            *intents_hist.entry(intent_name.clone()).or_default() += 1;
            for s in bio_spans(tags) {
                *slot_hist.entry(s.label.clone()).or_default() += 1;
            }
            max_tokens = max_tokens.max(tokens.len());
            sum_tokens += tokens.len();
            over += usize::from(tokens.len() + 1 > spec.max_len);
            let source = Example {
                tokens: tokens.clone(),
                intent: intent_name.clone(),
                slots: Some(tags.clone()),
                language: spec.source_language.clone(),
            };
            let id = |lang: &str| format!("{}-{lang}-{k:05}", split.name());
            langs.entry(spec.source_language.clone()).or_default().push(ParallelExample::new(
                id(&spec.source_language),
                source.clone(),
                tokens.clone(),
                spec.source_language.clone(),
                Some((intent_name.clone(), Some(tags.clone()))),
            )?);
            for (li, (ttok, ttags)) in targets.iter().enumerate() {
                let lang = &spec.targets[li].name;
                langs.entry(lang.clone()).or_default().push(ParallelExample::new(
                    id(lang),
                    source.clone(),
                    ttok.clone(),
                    lang.clone(),
                    Some((intent_name.clone(), Some(ttags.clone()))),
                )?);
            }
        }
        let n = hi - lo;
        let uniform = n as f64 / spec.intents.len() as f64;
        for (name, count) in &intents_hist {
            if (*count as f64 - uniform).abs() > 0.2 * uniform {
                return Err(Error::Spec(format!(
                    "intent `{name}` has {count} of {n} {} examples, outside 20% of uniform",
                    split.name()
                )));
            }
        }
        stats.push(SplitStats {
            split: split.name().to_string(),
            pairs: n,
            languages: langs.keys().cloned().collect(),
            intents: intents_hist,
            slot_types: slot_hist,
            max_tokens,
            mean_tokens: sum_tokens as f64 / n as f64,
            over_length: over,
        });
        splits.insert(split, langs);
    }
    let corpus = Corpus::new(spec.source_language.clone(), splits)?;
    let ciphers = spec
        .targets
        .iter()
        .map(|t| t.name.clone())
        .zip(ciphers)
        .collect();
    Ok(Generated {
        corpus,
        ciphers,
        stats,
    })
}

/// Generates and writes `{split}.{lang}.jsonl` plus `{split}.stats.json`.
pub fn write_generated(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let generated = synth_generate(spec)?;
    let mut files = generated.corpus.write_dir(out_dir)?;
    for s in &generated.stats {
        let p = out_dir.join(format!("{}.stats.json", s.split));
        let body = serde_json::to_string_pretty(s)? + "\n";
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok(files)
}
