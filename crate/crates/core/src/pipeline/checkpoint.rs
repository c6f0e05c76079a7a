//! `FLCK` container: magic, `u32` version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use facelock_tensor::nn::Sequential;
use facelock_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{Critic, Eraser};
use crate::conditioning::EncoderRegistry;
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

use super::train::{AdversaryConfig, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub steps: usize,
    pub train_config: Option<TrainConfig>,
    pub config_digest: Option<String>,
    pub dataset_digest: Option<String>,
    /// Set when training halted on a non-finite loss.
    pub halted: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    encoder_fingerprints: Vec<String>,
    adversary: Option<AdversaryConfig>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Model,
    pub adversary: Option<(Critic, Eraser)>,
    pub meta: CheckpointMeta,
}

fn push_net(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, net: &Sequential<f32>) {
    for (i, p) in net.params().iter().enumerate() {
        out.push((format!("{prefix}.{i}"), p.clone()));
    }
}

fn named_tensors(model: &Model, adversary: Option<(&Critic, &Eraser)>) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (spec, state) in model.encoders.specs().iter().zip(model.encoders.states()) {
        let n = state.len();
        out.push((format!("attributes.{}", spec.kind), Tensor::from_vec(&[n], state).expect("1-d state")));
    }
    push_net(&mut out, "condition", &model.condition.net);
    push_net(&mut out, "encoder", &model.encoder.net);
    push_net(&mut out, "decoder", &model.decoder.net);
    if let Some((c, e)) = adversary {
        push_net(&mut out, "critic", &c.net);
        push_net(&mut out, "eraser", &e.net);
    }
    out
}

/// Serialises to the container format.
pub fn to_bytes(model: &Model, adversary: Option<(&Critic, &Eraser, &AdversaryConfig)>, meta: &CheckpointMeta) -> Vec<u8> {
    let tensors = named_tensors(model, adversary.map(|(c, e, _)| (c, e)));
    let header = Header {
        model: model.config.clone(),
        encoder_fingerprints: model.encoders.fingerprints(),
        adversary: adversary.map(|(_, _, a)| a.clone()),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 4 * t.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn take_net(net: &mut Sequential<f32>, tensors: &mut std::vec::IntoIter<Tensor<f32>>, what: &str) -> Result<()> {
    let n = net.params().len();
    let params: Vec<_> = tensors.by_ref().take(n).collect();
    net.set_params(params).map_err(|e| format_err(format!("{what}: {e}")))
}

pub fn from_bytes(bytes: &[u8], registry: &EncoderRegistry) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("not a facelock checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| format_err("truncated"))?;
    let json = body.get(..len).ok_or_else(|| format_err("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut data = &body[len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = data.get(..4 * n).ok_or_else(|| format_err(format!("truncated tensor {}", entry.name)))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push(Tensor::from_vec(&entry.shape, values).map_err(|e| format_err(e.to_string()))?);
        data = &data[4 * n..];
    }
    if !data.is_empty() {
        return Err(format_err(format!("{} trailing bytes", data.len())));
    }

    // Weights are overwritten below; the seed only fixes shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(header.model.clone(), registry, &mut rng)?;
    if model.encoders.fingerprints() != header.encoder_fingerprints {
        return Err(format_err("attribute encoder weights differ from the ones this checkpoint was trained with"));
    }
    let mut it = tensors.into_iter();
    let states: Vec<Vec<f32>> = it.by_ref().take(3).map(Tensor::into_data).collect();
    model.encoders.set_states(&states)?;
    take_net(&mut model.condition.net, &mut it, "condition")?;
    take_net(&mut model.encoder.net, &mut it, "encoder")?;
    take_net(&mut model.decoder.net, &mut it, "decoder")?;
    let adversary = match &header.adversary {
        Some(a) => {
            let mut critic = Critic::new(a.critic_hidden, &mut rng);
            let mut eraser = Eraser::new(a.eraser_hidden, a.beta, &mut rng);
            take_net(&mut critic.net, &mut it, "critic")?;
            take_net(&mut eraser.net, &mut it, "eraser")?;
            Some((critic, eraser))
        }
        None => None,
    };
    if it.next().is_some() {
        return Err(format_err("unexpected extra tensors"));
    }
    Ok(Checkpoint {
        model,
        adversary,
        meta: header.meta,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adversary: Option<(&Critic, &Eraser, &AdversaryConfig)>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // Write-then-rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("flck.partial");
    std::fs::write(&tmp, to_bytes(model, adversary, meta))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, registry: &EncoderRegistry) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?, registry)
}

/// Hex sha256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
