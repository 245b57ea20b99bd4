use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::data::{encode_tokens, Corpus, LabelAccess, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, span_f1};

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageScores {
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    /// Mean over pairs of the per-pair mean squared CLS difference.
    pub align_mse: f64,
    /// Mean cosine similarity of paired CLS vectors.
    pub align_cosine: f64,
}

impl LanguageScores {
    fn mean<'a>(items: impl IntoIterator<Item = &'a LanguageScores>) -> LanguageScores {
        let items: Vec<&LanguageScores> = items.into_iter().collect();
        let n = items.len() as f64;
        let avg = |f: fn(&LanguageScores) -> f64| items.iter().map(|s| f(s)).sum::<f64>() / n;
        LanguageScores {
            intent_accuracy: avg(|s| s.intent_accuracy),
            slot_precision: avg(|s| s.slot_precision),
            slot_recall: avg(|s| s.slot_recall),
            slot_f1: avg(|s| s.slot_f1),
            align_mse: avg(|s| s.align_mse),
            align_cosine: avg(|s| s.align_cosine),
        }
    }
}

/// Scores for one split. `average` is the arithmetic mean over `languages`,
/// which holds the target languages; the source language is kept apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub source_language: String,
    pub source: LanguageScores,
    pub languages: BTreeMap<String, LanguageScores>,
    pub average: LanguageScores,
}

fn encode_all(model: &Model, rows: &[Vec<String>]) -> Vec<Vec<usize>> {
    rows.iter()
        .map(|t| encode_tokens(t, &model.vocab, model.encoder_config.max_len).0)
        .collect()
}

fn check_vocab(model: &Model, rows: &[Vec<String>], language: &str) -> Result<()> {
    let unknown: Vec<&str> = rows
        .iter()
        .flatten()
        .filter(|t| !model.vocab.contains(t))
        .map(String::as_str)
        .take(5)
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::VocabMismatch(format!(
            "{language} tokens missing from the model vocabulary: {}",
            unknown.join(", ")
        )))
    }
}

fn predict_all(model: &Model, seqs: &[Vec<usize>]) -> Result<super::Prediction> {
    let mut all = super::Prediction {
        intents: Vec::new(),
        slots: Vec::new(),
        cls: Vec::new(),
    };
    for chunk in seqs.chunks(EVAL_BATCH) {
        let p = model.predict(chunk)?;
        all.intents.extend(p.intents);
        all.slots.extend(p.slots);
        all.cls.extend(p.cls);
    }
    Ok(all)
}

fn pair_distances(source: &[f64], target: &[f64], h: usize) -> (f64, f64) {
    let n = source.len() / h;
    let (mut mse, mut cos) = (0.0, 0.0);
    for (a, b) in source.chunks(h).zip(target.chunks(h)) {
        let (mut d, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..h {
            d += (a[k] - b[k]).powi(2);
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        mse += d / h as f64;
        let denom = (na * nb).sqrt();
        cos += if denom > 0.0 { dot / denom } else { 0.0 };
    }
    (mse / n as f64, cos / n as f64)
}

/// Greedy evaluation of every language of `split`.
pub fn evaluate(model: &Model, corpus: &Corpus, split: Split) -> Result<EvalReport> {
    let src_rows = corpus.source_rows(split)?;
    if src_rows.is_empty() {
        return Err(Error::Input(format!("{} split is empty", split.name())));
    }
    let src_tokens: Vec<Vec<String>> = src_rows.iter().map(|r| r.source().tokens.clone()).collect();
    check_vocab(model, &src_tokens, corpus.source_language())?;
    let src_pred = predict_all(model, &encode_all(model, &src_tokens))?;
    let h = model.encoder_config.d_model;

    let score = |lang: &str| -> Result<LanguageScores> {
        let rows = corpus.rows(split, lang)?;
        let tokens: Vec<Vec<String>> = rows.iter().map(|r| r.target_tokens().to_vec()).collect();
        check_vocab(model, &tokens, lang)?;
        let pred = if lang == corpus.source_language() {
            src_pred.clone()
        } else {
            predict_all(model, &encode_all(model, &tokens))?
        };
        let mut gold_intents = Vec::with_capacity(rows.len());
        let mut gold_tags = Vec::with_capacity(rows.len());
        let mut pred_tags = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let gold = r.target_gold(LabelAccess::Evaluation)?;
            gold_intents.push(model.labels.intent_id(&gold.intent).ok());
            let mut tags: Vec<String> = pred.slots[i]
                .iter()
                .map(|&t| model.labels.slot_tags[t].clone())
                .collect();
            tags.resize(gold.tokens.len(), "O".to_string());
            pred_tags.push(tags);
            gold_tags.push(gold.slots.clone().unwrap_or_else(|| vec!["O".into(); gold.tokens.len()]));
        }
        let pred_intents: Vec<Option<usize>> = pred.intents.iter().map(|&i| Some(i)).collect();
        let prf = span_f1(&gold_tags, &pred_tags)?;
        let (align_mse, align_cosine) = pair_distances(&src_pred.cls, &pred.cls, h);
        Ok(LanguageScores {
            intent_accuracy: accuracy(&pred_intents, &gold_intents)?,
            slot_precision: prf.precision,
            slot_recall: prf.recall,
            slot_f1: prf.f1,
            align_mse,
            align_cosine,
        })
    };

    let source = score(corpus.source_language())?;
    let mut languages = BTreeMap::new();
    for lang in corpus.target_languages() {
        if corpus.rows(split, &lang).is_ok() {
            languages.insert(lang.clone(), score(&lang)?);
        }
    }
    let average = if languages.is_empty() {
        source.clone()
    } else {
        LanguageScores::mean(languages.values())
    };
    Ok(EvalReport {
        split,
        source_language: corpus.source_language().to_string(),
        source,
        languages,
        average,
    })
}
