use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Checkpoint, Mode, Model, TrainConfig};
use crate::data::{
    build_vocab, encode_example, encode_tokens, make_batches, Batch, Corpus, EncodeStats,
    EncodedItem, LabelAccess, Labels, Split,
};
use crate::encoder::{encode, Dropout};
use crate::error::{Error, Result};
use crate::heads::{intent_logits, slot_logits, task_loss, total_loss, xero_align_loss};
use crate::optim::{adam_step, AdamState};
use crate::tensor::Graph;

/// Which loss terms an epoch optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Task,
    Align,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    /// 0 when the batch has no task labels or the phase skips the task.
    pub task_loss: f64,
    /// 0 when the phase skips alignment.
    pub align_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub task_loss: f64,
    pub align_loss: f64,
    pub total_loss: f64,
    /// Dev-split scores averaged over target languages.
    pub dev_intent_accuracy: Option<f64>,
    pub dev_slot_f1: Option<f64>,
    pub dev_align_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub align_languages: Vec<String>,
    pub encode_stats: EncodeStats,
}

fn phase_of(mode: Mode, epoch: usize, epochs: usize) -> Phase {
    let first_half = epoch < epochs / 2;
    match mode {
        Mode::XeroAlign | Mode::XeroAlignUnlabeledEval => Phase::Joint,
        Mode::XeroAlignSeqAlignFirst if first_half => Phase::Align,
        Mode::XeroAlignSeqTaskFirst if !first_half => Phase::Align,
        _ => Phase::Task,
    }
}

/// Pre-encoded training material.
struct Prepared {
    /// Labeled rows for the task loss of non-alignment modes.
    task_items: Vec<EncodedItem>,
    /// Labeled source rows with one encoded translation per alignment language.
    source_items: Vec<EncodedItem>,
    source_targets: Vec<Vec<Vec<usize>>>,
    /// Unlabeled extra alignment rows.
    extra_items: Vec<EncodedItem>,
    extra_targets: Vec<Vec<Vec<usize>>>,
}

fn prepare(
    config: &TrainConfig,
    corpus: &Corpus,
    model: &Model,
    align_langs: &[String],
    stats: &mut EncodeStats,
) -> Result<Prepared> {
    let max_len = model.encoder_config.max_len;
    let access = LabelAccess::Train(config.mode);
    let src = corpus.source_rows(Split::Train)?;
    let mut source_items = Vec::with_capacity(src.len());
    for r in src {
        let e = encode_example(r.source(), &model.vocab, &model.labels, max_len)?;
        stats.record(e.truncated);
        source_items.push(EncodedItem::labeled(r.pair_id(), &e, None));
    }
    let encode_targets = |split: Split, stats: &mut EncodeStats| -> Result<Vec<Vec<Vec<usize>>>> {
        let n = corpus.source_rows(split)?.len();
        let mut per_row = vec![Vec::with_capacity(align_langs.len()); n];
        for lang in align_langs {
            for (i, r) in corpus.rows(split, lang)?.iter().enumerate() {
                let (ids, truncated) = encode_tokens(r.target_tokens(), &model.vocab, max_len);
                stats.record(truncated);
                per_row[i].push(ids);
            }
        }
        Ok(per_row)
    };

    let mut task_items = Vec::new();
    let mut source_targets = Vec::new();
    let mut extra_items = Vec::new();
    let mut extra_targets = Vec::new();
    match config.mode {
        Mode::ZeroShot => task_items = source_items.clone(),
        Mode::Target | Mode::TranslateTrain => {
            if config.mode == Mode::TranslateTrain {
                task_items = source_items.clone();
            }
            for lang in corpus.target_languages() {
                for r in corpus.rows(Split::Train, &lang)? {
                    let gold = r.target_gold(access)?;
                    let e = encode_example(gold, &model.vocab, &model.labels, max_len)?;
                    stats.record(e.truncated);
                    task_items.push(EncodedItem::labeled(&format!("{lang}:{}", r.pair_id()), &e, None));
                }
            }
        }
        _ => {
            source_targets = encode_targets(Split::Train, stats)?;
            if config.mode == Mode::XeroAlignUnlabeledEval {
                for split in [Split::Dev, Split::Test] {
                    if !corpus.has_split(split) {
                        continue;
                    }
                    for r in corpus.source_rows(split)? {
                        let (ids, truncated) = encode_tokens(&r.source().tokens, &model.vocab, max_len);
                        stats.record(truncated);
                        extra_items.push(EncodedItem::unlabeled(r.pair_id(), ids, None));
                    }
                    extra_targets.extend(encode_targets(split, stats)?);
                }
            }
        }
    }
    Ok(Prepared {
        task_items,
        source_items,
        source_targets,
        extra_items,
        extra_targets,
    })
}

impl Prepared {
    /// Items for one epoch. Alignment rows rotate through the alignment
    /// languages: row `i` of epoch `e` uses language `(i + e) % n`.
    fn epoch_items(&self, mode: Mode, epoch: usize) -> Vec<EncodedItem> {
        if !mode.is_alignment() {
            return self.task_items.clone();
        }
        let pair = |items: &[EncodedItem], targets: &[Vec<Vec<usize>>], offset: usize| {
            items
                .iter()
                .zip(targets)
                .enumerate()
                .map(|(i, (item, t))| {
                    let mut item = item.clone();
                    item.target_ids = Some(t[(offset + i + epoch) % t.len()].clone());
                    item
                })
                .collect::<Vec<_>>()
        };
        let mut out = pair(&self.source_items, &self.source_targets, 0);
        out.extend(pair(&self.extra_items, &self.extra_targets, self.source_items.len()));
        out
    }
}

/// Shared vocabulary over the raw text of every split and language.
fn corpus_vocab(corpus: &Corpus, min_count: usize) -> Result<crate::data::Vocab> {
    let mut sentences: Vec<&[String]> = Vec::new();
    for split in Split::ALL {
        if !corpus.has_split(split) {
            continue;
        }
        let src = corpus.source_rows(split)?;
        sentences.extend(src.iter().map(|r| r.source().tokens.as_slice()));
        for lang in corpus.target_languages() {
            if let Ok(rows) = corpus.rows(split, &lang) {
                sentences.extend(rows.iter().map(|r| r.target_tokens()));
            }
        }
    }
    build_vocab(sentences, min_count)
}

/// Losses for one batch, before backward.
struct StepLosses {
    task: f64,
    align: f64,
    total: f64,
}

fn dropout(rate: f64, rng: &mut ChaCha8Rng) -> Option<Dropout<'_>> {
    (rate > 0.0).then_some(Dropout { rate, rng })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    config: &TrainConfig,
    model: &mut Model,
    batch: &Batch,
    phase: Phase,
    rngs: &mut [ChaCha8Rng; 2],
    names: &[String],
    adam: &mut AdamState,
    lr: f64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g);
    let heads = model.heads.bind(&mut g);
    let ecfg = &model.encoder_config;
    let [src_rng, tgt_rng] = rngs;
    let src = encode(&enc, ecfg, &mut g, &batch.source, dropout(config.dropout, src_rng))?;

    let task = if phase != Phase::Align && batch.has_intent_targets() {
        let il = intent_logits(&mut g, src.cls, &heads)?;
        let sl = if batch.has_slot_targets() {
            Some(slot_logits(&mut g, src.tokens, &heads)?)
        } else {
            None
        };
        Some(task_loss(&mut g, il, &batch.intents, sl, &batch.slots)?.0)
    } else {
        None
    };
    let align = if phase != Phase::Task {
        let target = batch
            .target
            .as_ref()
            .ok_or_else(|| Error::Pairing("alignment batch without target utterances".into()))?;
        let tgt = encode(&enc, ecfg, &mut g, target, dropout(config.dropout, tgt_rng))?;
        Some(xero_align_loss(&mut g, src.cls, tgt.cls)?)
    } else {
        None
    };
    let (total, task_v, align_v) = match (task, align) {
        (Some(t), None) => (t, g.scalar(t)?, 0.0),
        (t, Some(a)) => {
            let t = match t {
                Some(t) => t,
                None => g.constant(vec![], vec![0.0])?,
            };
            (total_loss(&mut g, t, a, config.lambda)?, g.scalar(t)?, g.scalar(a)?)
        }
        (None, None) => {
            return Err(Error::Input(format!(
                "batch starting at `{}` has nothing to optimize",
                batch.pair_ids[0]
            )))
        }
    };
    let total_v = g.scalar(total)?;
    g.backward(total)?;
    let vars: Vec<_> = enc.vars().iter().copied().chain(heads.vars()).collect();
    for (var, t) in vars.into_iter().zip(model.tensors_mut()) {
        match g.grad(var) {
            Some(grad) => t.accumulate_grad(grad)?,
            None => t.accumulate_grad(&vec![0.0; t.numel()])?,
        }
    }
    let params = names.iter().cloned().zip(model.tensors_mut()).collect();
    adam_step(adam, params, lr)?;
    Ok(StepLosses {
        task: task_v,
        align: align_v,
        total: total_v,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains a fresh model according to `config`. The returned checkpoint holds
/// the final-epoch parameters, optimizer state and history.
pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<Checkpoint> {
    config.validate()?;
    let align_langs = config.resolved_align_languages(corpus)?;
    let src_train = corpus.source_rows(Split::Train)?;
    if src_train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if config.mode == Mode::XeroAlignUnlabeledEval
        && !(corpus.has_split(Split::Dev) || corpus.has_split(Split::Test))
    {
        return Err(Error::Config(format!("{} needs a dev or test split", config.mode)));
    }
    if config.mode == Mode::Target && corpus.target_languages().is_empty() {
        return Err(Error::Config("target mode needs a target language".into()));
    }
    let vocab = corpus_vocab(corpus, config.min_count)?;
    let labels = Labels::from_examples(src_train.iter().map(|r| r.source()));
    let mut ecfg = config.preset.config(vocab.len());
    ecfg.dropout = config.dropout;
    let mut model = Model::init(ecfg, vocab, labels, config.seed)?;
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(config.adam, model.named().into_iter().map(|(_, t)| t));

    let mut history = History {
        align_languages: align_langs.clone(),
        ..History::default()
    };
    let prepared = prepare(config, corpus, &model, &align_langs, &mut history.encode_stats)?;

    let batches_per_epoch = {
        let n = prepared.epoch_items(config.mode, 0).len();
        n.div_ceil(config.batch_size)
    };
    let total_steps = batches_per_epoch * config.epochs;
    let schedule = config.schedule(total_steps.max(1));
    let mut rngs = [0u64, 1].map(|stream| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(1000 + stream);
        r
    });
    let mut step = 0;
    for epoch in 0..config.epochs {
        let phase = phase_of(config.mode, epoch, config.epochs);
        let items = prepared.epoch_items(config.mode, epoch);
        let batches = make_batches(&items, config.batch_size, config.seed, epoch)?;
        let (mut tasks, mut aligns, mut totals) = (Vec::new(), Vec::new(), Vec::new());
        for batch in &batches {
            let lr = schedule.lr_at(step)?;
            let l = run_step(config, &mut model, batch, phase, &mut rngs, &names, &mut adam, lr)?;
            history.steps.push(StepRecord {
                epoch,
                step,
                phase,
                lr,
                task_loss: l.task,
                align_loss: l.align,
                total_loss: l.total,
            });
            tasks.push(l.task);
            aligns.push(l.align);
            totals.push(l.total);
            step += 1;
        }
        let dev = if config.eval_each_epoch && corpus.has_split(Split::Dev) {
            Some(evaluate(&model, corpus, Split::Dev)?.average)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            phase,
            task_loss: mean(&tasks),
            align_loss: mean(&aligns),
            total_loss: mean(&totals),
            dev_intent_accuracy: dev.as_ref().map(|d| d.intent_accuracy),
            dev_slot_f1: dev.as_ref().map(|d| d.slot_f1),
            dev_align_mse: dev.as_ref().map(|d| d.align_mse),
        });
    }
    Ok(Checkpoint {
        config: config.clone(),
        model,
        adam,
        history,
    })
}
