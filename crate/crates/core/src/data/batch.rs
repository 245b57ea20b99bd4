use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Labels, Vocab, CLS_ID, PAD_ID};
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::IGNORE_INDEX;

/// One utterance mapped to ids, with CLS prepended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub intent: usize,
    /// Per position; [`IGNORE_INDEX`] at CLS and when the example has no slots.
    pub slots: Vec<i64>,
    pub truncated: bool,
}

/// Counts of encoded utterances and silent truncations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub encoded: usize,
    pub truncated: usize,
}

impl EncodeStats {
    pub fn record(&mut self, truncated: bool) {
        self.encoded += 1;
        self.truncated += usize::from(truncated);
    }
}

/// CLS plus at most `max_len - 1` content ids.
pub fn encode_tokens(tokens: &[String], vocab: &Vocab, max_len: usize) -> (Vec<usize>, bool) {
    let keep = tokens.len().min(max_len.saturating_sub(1));
    let mut ids = Vec::with_capacity(keep + 1);
    ids.push(CLS_ID);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id(t)));
    (ids, keep < tokens.len())
}

pub fn encode_example(
    example: &Example,
    vocab: &Vocab,
    labels: &Labels,
    max_len: usize,
) -> Result<EncodedExample> {
    if example.tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty utterance".into()));
    }
    let (ids, truncated) = encode_tokens(&example.tokens, vocab, max_len);
    let mut slots = vec![IGNORE_INDEX; ids.len()];
    if let Some(tags) = &example.slots {
        for (pos, tag) in tags.iter().take(ids.len() - 1).enumerate() {
            slots[pos + 1] = labels.slot_id(tag)? as i64;
        }
    }
    Ok(EncodedExample {
        mask: vec![true; ids.len()],
        ids,
        intent: labels.intent_id(&example.intent)?,
        slots,
        truncated,
    })
}

/// A training row: source ids with optional labels, optional paired target ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedItem {
    pub pair_id: String,
    pub source_ids: Vec<usize>,
    /// [`IGNORE_INDEX`] for rows without task labels.
    pub intent: i64,
    pub slots: Vec<i64>,
    pub target_ids: Option<Vec<usize>>,
}

impl EncodedItem {
    pub fn labeled(pair_id: &str, ex: &EncodedExample, target_ids: Option<Vec<usize>>) -> Self {
        EncodedItem {
            pair_id: pair_id.to_string(),
            source_ids: ex.ids.clone(),
            intent: ex.intent as i64,
            slots: ex.slots.clone(),
            target_ids,
        }
    }

    pub fn unlabeled(pair_id: &str, source_ids: Vec<usize>, target_ids: Option<Vec<usize>>) -> Self {
        let n = source_ids.len();
        EncodedItem {
            pair_id: pair_id.to_string(),
            source_ids,
            intent: IGNORE_INDEX,
            slots: vec![IGNORE_INDEX; n],
            target_ids,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pair_ids: Vec<String>,
    pub source: TokenBatch,
    pub intents: Vec<i64>,
    /// `[batch, source.len]`, padded with [`IGNORE_INDEX`].
    pub slots: Vec<i64>,
    /// Row `i` is the translation of source row `i`.
    pub target: Option<TokenBatch>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }

    pub fn has_intent_targets(&self) -> bool {
        self.intents.iter().any(|&t| t != IGNORE_INDEX)
    }

    pub fn has_slot_targets(&self) -> bool {
        self.slots.iter().any(|&t| t != IGNORE_INDEX)
    }

    fn assemble(rows: &[&EncodedItem]) -> Self {
        let seqs: Vec<Vec<usize>> = rows.iter().map(|r| r.source_ids.clone()).collect();
        let source = TokenBatch::from_sequences(&seqs, PAD_ID);
        let mut slots = Vec::with_capacity(rows.len() * source.len);
        for r in rows {
            slots.extend(&r.slots);
            slots.extend(std::iter::repeat_n(IGNORE_INDEX, source.len - r.slots.len()));
        }
        let target = rows[0].target_ids.as_ref().map(|_| {
            let t: Vec<Vec<usize>> = rows
                .iter()
                .map(|r| r.target_ids.clone().unwrap_or_default())
                .collect();
            TokenBatch::from_sequences(&t, PAD_ID)
        });
        Batch {
            pair_ids: rows.iter().map(|r| r.pair_id.clone()).collect(),
            source,
            intents: rows.iter().map(|r| r.intent).collect(),
            slots,
            target,
        }
    }
}

/// Shuffles `items` deterministically from `(seed, epoch)` and cuts them into
/// batches of at most `batch_size` rows. Either every item carries a target
/// utterance or none does.
pub fn make_batches(items: &[EncodedItem], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if let Some(first) = items.first() {
        let paired = first.target_ids.is_some();
        if let Some(bad) = items.iter().find(|i| i.target_ids.is_some() != paired) {
            return Err(Error::Pairing(format!(
                "item `{}` differs from the rest in carrying a target utterance",
                bad.pair_id
            )));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<&EncodedItem> = chunk.iter().map(|&i| &items[i]).collect();
            Batch::assemble(&rows)
        })
        .collect())
}
