use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{History, Model, TrainConfig};
use crate::data::{Labels, Vocab};
use crate::encoder::{init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::optim::{AdamConfig, AdamState};

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

/// Trained model, optimizer state, configuration and history.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub history: History,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: usize,
    /// Number of elements.
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    encoder_config: EncoderConfig,
    vocab: Vocab,
    labels: Labels,
    adam_config: AdamConfig,
    adam_step: u64,
    history: History,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `tensors.bin` (little-endian f64) into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f64".into(),
            offset: blob.len(),
            len: data.len(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let named = ckpt.model.named();
    if named.len() != ckpt.adam.m.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    for (name, t) in &named {
        push(name.clone(), t.shape().to_vec(), t.data());
    }
    for (i, (name, t)) in named.iter().enumerate() {
        push(format!("adam.m.{name}"), t.shape().to_vec(), &ckpt.adam.m[i]);
        push(format!("adam.v.{name}"), t.shape().to_vec(), &ckpt.adam.v[i]);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT,
        meta: Meta {
            config: ckpt.config.clone(),
            encoder_config: ckpt.model.encoder_config.clone(),
            vocab: ckpt.model.vocab.clone(),
            labels: ckpt.model.labels.clone(),
            adam_config: ckpt.adam.config,
            adam_step: ckpt.adam.step,
            history: ckpt.history.clone(),
        },
        tensors,
    };
    let mp = dir.join(MANIFEST);
    let body = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&mp, body).map_err(|e| Error::io(&mp, e))?;
    let bp = dir.join(BLOB);
    fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mp = dir.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mp.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    let bp = dir.join(BLOB);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let meta = manifest.meta;
    meta.encoder_config.validate()?;

    let read = |entry: &TensorEntry| -> Result<Vec<f64>> {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("`{}` has dtype {}", entry.name, entry.dtype)));
        }
        let end = entry.offset + entry.len * 8;
        if end > blob.len() || entry.len != entry.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("`{}` is out of bounds or misshapen", entry.name)));
        }
        Ok(blob[entry.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect())
    };
    let by_name: std::collections::HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
        read(entry)
    };

    let encoder = init_params(&meta.encoder_config, 0)?;
    let h = meta.encoder_config.d_model;
    let heads = HeadParams::init(h, meta.labels.intents.len(), meta.labels.slot_tags.len(), 0);
    let mut model = Model {
        encoder_config: meta.encoder_config,
        encoder,
        heads,
        vocab: meta.vocab,
        labels: meta.labels,
    };
    if manifest.tensors.len() != 3 * model.named().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            3 * model.named().len(),
            manifest.tensors.len()
        )));
    }
    let shapes: Vec<(String, Vec<usize>)> = model
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for ((name, shape), t) in shapes.iter().zip(model.tensors_mut()) {
        t.data_mut().copy_from_slice(&fetch(name, shape)?);
    }
    let mut adam = AdamState::new(meta.adam_config, model.named().into_iter().map(|(_, t)| t));
    adam.step = meta.adam_step;
    for (i, (name, shape)) in shapes.iter().enumerate() {
        adam.m[i] = fetch(&format!("adam.m.{name}"), shape)?;
        adam.v[i] = fetch(&format!("adam.v.{name}"), shape)?;
    }
    Ok(Checkpoint {
        config: meta.config,
        model,
        adam,
        history: meta.history,
    })
}
