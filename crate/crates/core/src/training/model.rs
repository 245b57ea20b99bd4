use crate::data::{Labels, Vocab};
use crate::encoder::{encode, init_params, EncoderConfig, EncoderParams, TokenBatch};
use crate::error::Result;
use crate::heads::{intent_logits, slot_logits, HeadParams};
use crate::tensor::{Graph, Tensor};

/// Encoder, task heads and the inventories they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub vocab: Vocab,
    pub labels: Labels,
}

/// Greedy decisions for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub intents: Vec<usize>,
    /// Per sequence, one tag id per content token (CLS excluded).
    pub slots: Vec<Vec<usize>>,
    /// `[batch, d_model]`, row-major.
    pub cls: Vec<f64>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn init(encoder_config: EncoderConfig, vocab: Vocab, labels: Labels, seed: u64) -> Result<Self> {
        let encoder = init_params(&encoder_config, seed)?;
        let heads = HeadParams::init(
            encoder_config.d_model,
            labels.intents.len(),
            labels.slot_tags.len(),
            seed,
        );
        Ok(Model {
            encoder_config,
            encoder,
            heads,
            vocab,
            labels,
        })
    }

    /// Every trainable tensor with its name, encoder first.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named();
        out.extend(self.heads.named());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Forward pass without dropout, returning argmax decisions.
    pub fn predict(&self, sequences: &[Vec<usize>]) -> Result<Prediction> {
        let batch = TokenBatch::from_sequences(sequences, self.encoder_config.pad_id);
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g);
        let heads = self.heads.bind(&mut g);
        let out = encode(&enc, &self.encoder_config, &mut g, &batch, None)?;
        let il = intent_logits(&mut g, out.cls, &heads)?;
        let sl = slot_logits(&mut g, out.tokens, &heads)?;
        let n_int = self.labels.intents.len();
        let n_tags = self.labels.slot_tags.len();
        let intents = g.value(il).chunks(n_int).map(argmax).collect();
        let sv = g.value(sl);
        let slots = sequences
            .iter()
            .enumerate()
            .map(|(b, seq)| {
                (1..seq.len())
                    .map(|p| {
                        let at = (b * batch.len + p) * n_tags;
                        argmax(&sv[at..at + n_tags])
                    })
                    .collect()
            })
            .collect();
        Ok(Prediction {
            intents,
            slots,
            cls: g.value(out.cls).to_vec(),
        })
    }
}
