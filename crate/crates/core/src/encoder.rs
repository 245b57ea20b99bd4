//! A small pre-norm transformer encoder producing a CLS sentence embedding
//! and per-token contextual embeddings.
//!
//! Block layout: `x + attn(ln(x))`, then `x + ffn(ln(x))`, with a final layer
//! norm after the last block. Positions are learned embeddings. The CLS
//! output is the raw final-layer vector at position 0 (no pooler).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Additive logit penalty for masked attention keys.
pub const MASK_PENALTY: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub cls_id: usize,
    pub pad_id: usize,
    #[serde(default)]
    pub dropout: f64,
}

/// Named model sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 2 layers, d_model 64.
    #[default]
    Tiny,
    /// 4 layers, d_model 128.
    Small,
}

impl Preset {
    pub fn config(self, vocab_size: usize) -> EncoderConfig {
        let (d_model, n_heads, n_layers) = match self {
            Preset::Tiny => (64, 4, 2),
            Preset::Small => (128, 4, 4),
        };
        EncoderConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ff: 2 * d_model,
            max_len: 32,
            cls_id: crate::data::CLS_ID,
            pad_id: crate::data::PAD_ID,
            dropout: 0.0,
        }
    }

    /// Default peak learning rate for this size.
    pub fn default_max_lr(self) -> f64 {
        match self {
            Preset::Tiny => 3e-4,
            Preset::Small => 1e-4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.cls_id == self.pad_id {
            return bad("cls_id and pad_id must differ".into());
        }
        if self.cls_id >= self.vocab_size || self.pad_id >= self.vocab_size {
            return bad(format!(
                "reserved ids must be below vocab_size {}",
                self.vocab_size
            ));
        }
        if self.max_len == 0 || self.d_ff == 0 {
            return bad("max_len and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.d_model, self.d_ff);
        let per_layer = 4 * h * h + h * f + f + f * h + h + 4 * h;
        self.vocab_size * h + self.max_len * h + self.n_layers * per_layer + 2 * h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn new(h: usize) -> Self {
        NormParams {
            gain: Tensor::parameter(vec![h], vec![1.0; h]),
            bias: Tensor::parameter(vec![h], vec![0.0; h]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: NormParams,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
}

/// Normal(0, std^2) truncated at two standard deviations.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = crate::tensor::numel(&shape);
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    Tensor::parameter(shape, data)
}

/// Deterministic initialization from `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, f) = (config.d_model, config.d_ff);
    let token_embedding = truncated_normal(&mut rng, vec![config.vocab_size, h], INIT_STD);
    let position_embedding = truncated_normal(&mut rng, vec![config.max_len, h], INIT_STD);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            attn_norm: NormParams::new(h),
            wq: truncated_normal(&mut rng, vec![h, h], INIT_STD),
            wk: truncated_normal(&mut rng, vec![h, h], INIT_STD),
            wv: truncated_normal(&mut rng, vec![h, h], INIT_STD),
            wo: truncated_normal(&mut rng, vec![h, h], INIT_STD),
            ffn_norm: NormParams::new(h),
            w1: truncated_normal(&mut rng, vec![h, f], INIT_STD),
            b1: Tensor::parameter(vec![f], vec![0.0; f]),
            w2: truncated_normal(&mut rng, vec![f, h], INIT_STD),
            b2: Tensor::parameter(vec![h], vec![0.0; h]),
        })
        .collect();
    Ok(EncoderParams {
        token_embedding,
        position_embedding,
        layers,
        final_norm: NormParams::new(h),
    })
}

impl EncoderParams {
    /// All tensors with stable names, in binding order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &self.token_embedding),
            ("encoder.position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("encoder.layers.{i}.{s}");
            out.extend([
                (p("attn_norm.gain"), &l.attn_norm.gain),
                (p("attn_norm.bias"), &l.attn_norm.bias),
                (p("wq"), &l.wq),
                (p("wk"), &l.wk),
                (p("wv"), &l.wv),
                (p("wo"), &l.wo),
                (p("ffn_norm.gain"), &l.ffn_norm.gain),
                (p("ffn_norm.bias"), &l.ffn_norm.bias),
                (p("w1"), &l.w1),
                (p("b1"), &l.b1),
                (p("w2"), &l.w2),
                (p("b2"), &l.b2),
            ]);
        }
        out.push(("encoder.final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("encoder.final_norm.bias".to_string(), &self.final_norm.bias));
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm.gain,
                &mut l.attn_norm.bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm.gain,
                &mut l.ffn_norm.bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inserts every tensor into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundEncoder {
        let vars = self.named().into_iter().map(|(_, t)| graph.leaf(t)).collect();
        BoundEncoder { vars }
    }
}

/// Graph handles for one binding of [`EncoderParams`], in `named()` order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    vars: Vec<Var>,
}

const PER_LAYER: usize = 12;

struct BoundLayer {
    attn_gain: Var,
    attn_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_gain: Var,
    ffn_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundEncoder {
    /// Wraps graph handles given in `named()` order.
    pub fn from_vars(vars: Vec<Var>, config: &EncoderConfig) -> Result<Self> {
        let want = 4 + PER_LAYER * config.n_layers;
        if vars.len() != want {
            return Err(Error::Input(format!(
                "encoder binding needs {want} tensors, got {}",
                vars.len()
            )));
        }
        Ok(BoundEncoder { vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn token_embedding(&self) -> Var {
        self.vars[0]
    }

    fn position_embedding(&self) -> Var {
        self.vars[1]
    }

    fn n_layers(&self) -> usize {
        (self.vars.len() - 4) / PER_LAYER
    }

    fn layer(&self, i: usize) -> BoundLayer {
        let v = &self.vars[2 + i * PER_LAYER..2 + (i + 1) * PER_LAYER];
        BoundLayer {
            attn_gain: v[0],
            attn_bias: v[1],
            wq: v[2],
            wk: v[3],
            wv: v[4],
            wo: v[5],
            ffn_gain: v[6],
            ffn_bias: v[7],
            w1: v[8],
            b1: v[9],
            w2: v[10],
            b2: v[11],
        }
    }

    fn final_norm(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Row-major `[batch, len]` token ids with a matching key mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, len: usize, ids: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != batch * len || mask.len() != batch * len {
            return Err(Error::dim("token batch", &[batch, len], &[ids.len(), mask.len()]));
        }
        Ok(TokenBatch {
            batch,
            len,
            ids,
            mask,
        })
    }

    /// Pads unequal sequences with `pad_id` to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>], pad_id: usize) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad_id, len - s.len()));
            mask.extend(std::iter::repeat_n(false, len - s.len()));
        }
        TokenBatch {
            batch: seqs.len(),
            len,
            ids,
            mask,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceEncoding {
    /// `[batch, d_model]`
    pub cls: Var,
    /// `[batch, len, d_model]`
    pub tokens: Var,
}

/// Dropout applied during a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, graph: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        use rand::RngExt;
        let keep = 1.0 - self.rate;
        let n = graph.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = graph.constant(graph.shape(x).to_vec(), mask)?;
        graph.mul(x, m)
    }
}

/// Scaled dot-product attention over `[batch, heads, len, head_dim]` inputs.
/// `key_mask` is `[batch, len]`; masked keys get [`MASK_PENALTY`] added to
/// their logits. Returns the output and the attention weights.
pub fn attention(
    graph: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
) -> Result<(Var, Var)> {
    let shape = graph.shape(q).to_vec();
    if shape.len() != 4 || graph.shape(k) != shape.as_slice() || graph.shape(v) != shape.as_slice()
    {
        return Err(Error::dim("attention", &shape, graph.shape(k)));
    }
    let (b, heads, len, dh) = (shape[0], shape[1], shape[2], shape[3]);
    if key_mask.len() != b * len {
        return Err(Error::dim("attention mask", &[b, len], &[key_mask.len()]));
    }
    let kt = graph.permute(k, &[0, 1, 3, 2])?;
    let scores = graph.matmul(q, kt)?;
    let scores = graph.scale(scores, 1.0 / (dh as f64).sqrt());
    let mut penalty = vec![0.0; b * heads * len * len];
    for bi in 0..b {
        for hi in 0..heads {
            for qi in 0..len {
                let row = ((bi * heads + hi) * len + qi) * len;
                for ki in 0..len {
                    if !key_mask[bi * len + ki] {
                        penalty[row + ki] = MASK_PENALTY;
                    }
                }
            }
        }
    }
    let penalty = graph.constant(vec![b, heads, len, len], penalty)?;
    let scores = graph.add(scores, penalty)?;
    let weights = graph.softmax(scores, 3)?;
    let out = graph.matmul(weights, v)?;
    Ok((out, weights))
}

fn split_heads(graph: &mut Graph, x: Var, b: usize, len: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = graph.reshape(x, vec![b, len, heads, dh])?;
    graph.permute(x, &[0, 2, 1, 3])
}

/// Runs the encoder over a batch. Every sequence must start with `cls_id`.
pub fn encode(
    bound: &BoundEncoder,
    config: &EncoderConfig,
    graph: &mut Graph,
    input: &TokenBatch,
    mut dropout: Option<Dropout<'_>>,
) -> Result<SequenceEncoding> {
    let (b, len) = (input.batch, input.len);
    if len > config.max_len {
        return Err(Error::Length {
            len,
            max_len: config.max_len,
        });
    }
    if b == 0 || len == 0 {
        return Err(Error::Input("empty token batch".into()));
    }
    for bi in 0..b {
        if input.ids[bi * len] != config.cls_id || !input.mask[bi * len] {
            return Err(Error::Input(format!(
                "sequence {bi} does not start with the CLS token"
            )));
        }
    }
    let h = config.d_model;
    let heads = config.n_heads;
    let dh = config.head_dim();

    let tok = graph.embedding(bound.token_embedding(), &input.ids)?;
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
    let pos = graph.embedding(bound.position_embedding(), &positions)?;
    let x = graph.add(tok, pos)?;
    let mut x = graph.reshape(x, vec![b, len, h])?;
    if let Some(d) = dropout.as_mut() {
        x = d.apply(graph, x)?;
    }

    for i in 0..bound.n_layers() {
        let l = bound.layer(i);
        let normed = graph.layer_norm(x, l.attn_gain, l.attn_bias, LAYER_NORM_EPS)?;
        let q = graph.matmul(normed, l.wq)?;
        let k = graph.matmul(normed, l.wk)?;
        let v = graph.matmul(normed, l.wv)?;
        let q = split_heads(graph, q, b, len, heads, dh)?;
        let k = split_heads(graph, k, b, len, heads, dh)?;
        let v = split_heads(graph, v, b, len, heads, dh)?;
        let (att, _) = attention(graph, q, k, v, &input.mask)?;
        let att = graph.permute(att, &[0, 2, 1, 3])?;
        let att = graph.reshape(att, vec![b, len, h])?;
        let mut att = graph.matmul(att, l.wo)?;
        if let Some(d) = dropout.as_mut() {
            att = d.apply(graph, att)?;
        }
        x = graph.add(x, att)?;

        let normed = graph.layer_norm(x, l.ffn_gain, l.ffn_bias, LAYER_NORM_EPS)?;
        let hidden = graph.matmul(normed, l.w1)?;
        let hidden = graph.add_bias(hidden, l.b1)?;
        let hidden = graph.gelu(hidden);
        let out = graph.matmul(hidden, l.w2)?;
        let mut out = graph.add_bias(out, l.b2)?;
        if let Some(d) = dropout.as_mut() {
            out = d.apply(graph, out)?;
        }
        x = graph.add(x, out)?;
    }
    let (fg, fb) = bound.final_norm();
    let tokens = graph.layer_norm(x, fg, fb, LAYER_NORM_EPS)?;
    let cls = graph.select(tokens, 1, 0)?;
    Ok(SequenceEncoding { cls, tokens })
}
