//! Intent accuracy and seqeval-style entity span scores.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An entity span over token positions `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn split_tag(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some(("B", t)) => ('B', t),
        Some(("I", t)) => ('I', t),
        _ => ('O', ""),
    }
}

/// Lenient BIO decoding: `O` (or anything unparseable) closes the open span,
/// `B-T` starts a new one, and `I-T` extends an open span of type `T` or
/// else starts one.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (kind, ty) = split_tag(tag.as_ref());
        let continues = kind == 'I' && open.is_some_and(|(t, _)| t == ty);
        if continues {
            continue;
        }
        if let Some((t, s)) = open.take() {
            spans.push(Span {
                label: t.to_string(),
                start: s,
                end: i,
            });
        }
        if kind != 'O' {
            open = Some((ty, i));
        }
    }
    if let Some((t, s)) = open {
        spans.push(Span {
            label: t.to_string(),
            start: s,
            end: tags.len(),
        });
    }
    spans
}

/// Micro-averaged exact-match span precision, recall and F1. Empty
/// denominators count as 0.
pub fn span_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(format!(
            "{} gold sequences, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let (mut n_gold, mut n_pred, mut hits) = (0usize, 0usize, 0usize);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::LengthMismatch(format!(
                "sequence {i}: {} gold tags, {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gs: HashSet<Span> = bio_spans(g).into_iter().collect();
        let ps: HashSet<Span> = bio_spans(p).into_iter().collect();
        n_gold += gs.len();
        n_pred += ps.len();
        hits += gs.intersection(&ps).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(hits, n_pred);
    let recall = ratio(hits, n_gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}
