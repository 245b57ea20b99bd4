#![allow(dead_code)]

use std::collections::HashSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xeroalign_core::data::synth::{synth_generate, SynthSpec};
use xeroalign_core::data::Corpus;
use xeroalign_core::encoder::{encode, init_params, BoundEncoder, EncoderConfig, TokenBatch};
use xeroalign_core::heads::{
    intent_logits, slot_logits, task_loss, total_loss, xero_align_loss, BoundHeads, HeadParams,
};
use xeroalign_core::metrics::Prf;
use xeroalign_core::tensor::{grad_check, GradCheckReport, Graph, Tensor, Var, IGNORE_INDEX};
use xeroalign_core::Result;

pub const OP_REL_TOL: f64 = 1e-4;
pub const COMPOSITE_REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-8;
pub const TRIALS: u64 = 10;

pub const OPS: [&str; 22] = [
    "matmul",
    "batched_matmul",
    "shared_rhs_matmul",
    "add",
    "sub",
    "mul",
    "add_scalar",
    "scale",
    "add_bias",
    "relu",
    "gelu",
    "map_tanh",
    "softmax",
    "layer_norm",
    "embedding",
    "reshape",
    "permute",
    "select",
    "mse",
    "cross_entropy",
    "sum",
    "mean",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero so kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

/// Contracts `y` with a fixed random weight so every output element
/// contributes a distinct gradient.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, shape.clone());
    let w = g.constant(shape, w.data().to_vec())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference check of one operation on random inputs.
pub fn check_op(op: &str, trial: u64) -> Result<GradCheckReport> {
    let seed = 1000 * trial + op.len() as u64 * 31 + op.bytes().map(u64::from).sum::<u64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let tol = OP_REL_TOL;
    match op {
        "matmul" => {
            let ins = [rand_tensor(&mut rng, vec![m, k]), rand_tensor(&mut rng, vec![k, n])];
            grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "batched_matmul" => {
            let b = rng.random_range(1..=3);
            let ins = [rand_tensor(&mut rng, vec![b, m, k]), rand_tensor(&mut rng, vec![b, k, n])];
            grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "shared_rhs_matmul" => {
            let b = rng.random_range(1..=3);
            let ins = [rand_tensor(&mut rng, vec![b, m, k]), rand_tensor(&mut rng, vec![k, n])];
            grad_check(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "add" | "sub" | "mul" => {
            let ins = [rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![m, n])];
            grad_check(
                |g, v| {
                    let y = match op {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    readout(g, y, seed)
                },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "add_scalar" | "scale" => {
            let c: f64 = rng.random_range(-2.0..2.0);
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(
                |g, v| {
                    let y = if op == "scale" { g.scale(v[0], c) } else { g.add_scalar(v[0], c) };
                    readout(g, y, seed)
                },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "add_bias" => {
            let ins = [rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![n])];
            grad_check(|g, v| { let y = g.add_bias(v[0], v[1])?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "relu" => {
            let ins = [off_zero(&mut rng, vec![m, n])];
            grad_check(|g, v| { let y = g.relu(v[0]); readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "gelu" => {
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(|g, v| { let y = g.gelu(v[0]); readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "map_tanh" => {
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(
                |g, v| {
                    let y = g.map(v[0], f64::tanh, |x| 1.0 - x.tanh().powi(2));
                    readout(g, y, seed)
                },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "softmax" => {
            let axis = rng.random_range(0..3);
            let ins = [rand_tensor(&mut rng, vec![m, k, n])];
            grad_check(|g, v| { let y = g.softmax(v[0], axis)?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "layer_norm" => {
            let h = rng.random_range(2..=6);
            let ins = [
                rand_tensor(&mut rng, vec![m, h]),
                rand_tensor(&mut rng, vec![h]),
                rand_tensor(&mut rng, vec![h]),
            ];
            grad_check(
                |g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; readout(g, y, seed) },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "embedding" => {
            let ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(|g, v| { let y = g.embedding(v[0], &ids)?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "reshape" => {
            let ins = [rand_tensor(&mut rng, vec![m, k, n])];
            grad_check(
                |g, v| { let y = g.reshape(v[0], vec![m * k, n])?; readout(g, y, seed) },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "permute" => {
            let ins = [rand_tensor(&mut rng, vec![m, k, n])];
            grad_check(
                |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; readout(g, y, seed) },
                &ins,
                tol,
                ABS_TOL,
            )
        }
        "select" => {
            let axis = rng.random_range(0..3);
            let shape = [m, k, n];
            let index = rng.random_range(0..shape[axis]);
            let ins = [rand_tensor(&mut rng, shape.to_vec())];
            grad_check(|g, v| { let y = g.select(v[0], axis, index)?; readout(g, y, seed) }, &ins, tol, ABS_TOL)
        }
        "mse" => {
            let ins = [rand_tensor(&mut rng, vec![m, n]), rand_tensor(&mut rng, vec![m, n])];
            grad_check(|g, v| g.mse(v[0], v[1]), &ins, tol, ABS_TOL)
        }
        "cross_entropy" => {
            let c = rng.random_range(2..=6);
            let mut targets: Vec<i64> = (0..m).map(|_| rng.random_range(0..c as i64)).collect();
            if m > 1 && rng.random::<bool>() {
                targets[0] = IGNORE_INDEX;
            }
            let ins = [rand_tensor(&mut rng, vec![m, c])];
            grad_check(|g, v| g.cross_entropy(v[0], &targets, IGNORE_INDEX), &ins, tol, ABS_TOL)
        }
        "sum" => {
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(|g, v| Ok(g.sum(v[0])), &ins, tol, ABS_TOL)
        }
        "mean" => {
            let ins = [rand_tensor(&mut rng, vec![m, n])];
            grad_check(|g, v| Ok(g.mean(v[0])), &ins, tol, ABS_TOL)
        }
        other => panic!("unknown op {other}"),
    }
}

pub fn composite_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 11,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 12,
        max_len: 6,
        cls_id: 1,
        pad_id: 0,
        dropout: 0.0,
    }
}

/// Checks every encoder and head parameter through the full loss
/// `task + lambda * align` on a padded parallel batch.
pub fn check_composite(trial: u64) -> Result<GradCheckReport> {
    let cfg = composite_config();
    let mut rng = ChaCha8Rng::seed_from_u64(77 + trial);
    let enc = init_params(&cfg, trial)?;
    let heads = HeadParams::init(cfg.d_model, 3, 4, trial);
    let inputs: Vec<Tensor> = enc
        .named()
        .into_iter()
        .chain(heads.named())
        .map(|(_, t)| {
            let data = t.data().iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    let n_enc = enc.named().len();
    let seq = |rng: &mut ChaCha8Rng, len: usize| -> Vec<usize> {
        std::iter::once(1).chain((1..len).map(|_| rng.random_range(2..11))).collect()
    };
    let src = vec![seq(&mut rng, 5), seq(&mut rng, 3)];
    let tgt = vec![seq(&mut rng, 4), seq(&mut rng, 6)];
    let src_batch = TokenBatch::from_sequences(&src, 0);
    let tgt_batch = TokenBatch::from_sequences(&tgt, 0);
    let intents: Vec<i64> = vec![rng.random_range(0..3), rng.random_range(0..3)];
    let slots: Vec<i64> = src_batch
        .mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if !m || i % src_batch.len == 0 {
                IGNORE_INDEX
            } else {
                rng.random_range(0..4)
            }
        })
        .collect();
    let lambda = rng.random_range(0.5..2.0);
    grad_check(
        |g, v| {
            let bound = BoundEncoder::from_vars(v[..n_enc].to_vec(), &cfg)?;
            let hv = &v[n_enc..];
            let heads = BoundHeads {
                intent_w: hv[0],
                intent_b: hv[1],
                slot_w: hv[2],
                slot_b: hv[3],
            };
            let s = encode(&bound, &cfg, g, &src_batch, None)?;
            let t = encode(&bound, &cfg, g, &tgt_batch, None)?;
            let il = intent_logits(g, s.cls, &heads)?;
            let sl = slot_logits(g, s.tokens, &heads)?;
            let (task, _, _) = task_loss(g, il, &intents, Some(sl), &slots)?;
            let align = xero_align_loss(g, s.cls, t.cls)?;
            total_loss(g, task, align, lambda)
        },
        &inputs,
        COMPOSITE_REL_TOL,
        ABS_TOL,
    )
}

pub fn random_tags(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    const TAGS: [&str; 7] = ["O", "B-a", "I-a", "B-b", "I-b", "O", "I-c"];
    (0..len).map(|_| TAGS[rng.random_range(0..TAGS.len())].to_string()).collect()
}

fn parts(tag: &str) -> (char, &str) {
    match tag.split_once('-') {
        Some(("B", t)) => ('B', t),
        Some(("I", t)) => ('I', t),
        _ => ('O', ""),
    }
}

/// Every `(type, start, end)` interval that forms a maximal span, found by
/// testing all intervals against the span definition directly.
pub fn brute_spans(tags: &[String]) -> HashSet<(String, usize, usize)> {
    let n = tags.len();
    let mut out = HashSet::new();
    for s in 0..n {
        let (k0, ty) = parts(&tags[s]);
        if k0 == 'O' {
            continue;
        }
        let starts = k0 == 'B'
            || s == 0
            || matches!(parts(&tags[s - 1]), (k, t) if k == 'O' || t != ty);
        if !starts {
            continue;
        }
        for e in s + 1..=n {
            let inside = (s + 1..e).all(|i| parts(&tags[i]) == ('I', ty));
            let closed = e == n || parts(&tags[e]) != ('I', ty);
            if inside && closed {
                out.insert((ty.to_string(), s, e));
            }
        }
    }
    out
}

pub fn brute_prf(gold: &[Vec<String>], pred: &[Vec<String>]) -> Prf {
    let (mut ng, mut np, mut hit) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        let (gs, ps) = (brute_spans(g), brute_spans(p));
        ng += gs.len();
        np += ps.len();
        hit += gs.intersection(&ps).count();
    }
    let precision = if np == 0 { 0.0 } else { hit as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { hit as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// A small two-target corpus that trains in well under a second per epoch.
pub fn small_corpus() -> Corpus {
    let spec = SynthSpec::from_toml(
        r#"
seed = 3
train_size = 48
dev_size = 12
test_size = 12
cognate_rate = 0.4
max_len = 16
targets = [{ name = "xa", word_order = "none" }, { name = "xb", word_order = "reverse" }]
[[intents]]
name = "alarm"
templates = ["wake me at [time]", "alarm for [time] on [day]", "set an alarm [day]"]
[[intents]]
name = "call"
templates = ["call [who] now", "ring [who] at [time]", "phone [who] [day]"]
[[intents]]
name = "rain"
templates = ["will it rain [day]", "is rain expected at [time]", "rain forecast for [day]", "any rain [day] at [time]"]
[slots]
time = ["seven", "half past six", "noon", "ten", "eleven", "nine"]
day = ["monday", "next friday", "tomorrow", "sunday"]
who = ["mom", "my boss", "bob", "the office"]
"#,
    )
    .unwrap();
    synth_generate(&spec).unwrap().corpus
}
