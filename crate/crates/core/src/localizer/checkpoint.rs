//! Self-describing binary checkpoints.
//!
//! Layout: `LOOCCKPT` magic, `u32` format version, `u64` header length, a
//! JSON header (model kind, network and optimizer config, round, RNG state,
//! array table, free-form config echo), the arrays as little-endian `f32`,
//! and a trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LoocError, Result};

use super::glance::GlanceModel;
use super::nn::{GlanceNet, NetConfig, UNet};
use super::optim::{Adam, OptimConfig};
use super::train::{LocalizerModel, TrainerState};

pub const MAGIC: &[u8; 8] = b"LOOCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Localizer,
    Glance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| LoocError::Contract(format!("invalid rng state: {m}"));
        let bytes = hex::decode(&self.seed_hex).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub net: NetConfig,
    pub optim: Option<OptimConfig>,
    pub adam_steps: Option<u64>,
    pub round: Option<usize>,
    pub rng: Option<RngState>,
    pub arrays: Vec<ArrayInfo>,
    #[serde(default)]
    pub config_echo: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&[f32]> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.arrays[i].as_slice())
            .ok_or_else(|| LoocError::Contract(format!("checkpoint has no array '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| LoocError::json("<checkpoint header>", e))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LoocError::Contract(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(LoocError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&body[20..hend]).map_err(|e| LoocError::json("<checkpoint header>", e))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        let mut pos = hend;
        for info in &header.arrays {
            let end = pos + info.len * 4;
            if end > body.len() {
                return Err(bad("truncated array data"));
            }
            arrays.push(
                body[pos..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
            pos = end;
        }
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| LoocError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| LoocError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LoocError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Localizer parameters, optionally with optimizer moments and RNG state
/// for exact resumption.
pub fn localizer_checkpoint(
    model: &LocalizerModel,
    trainer: Option<&TrainerState>,
    rng: Option<&ChaCha8Rng>,
    round: Option<usize>,
    config_echo: serde_json::Value,
) -> Checkpoint {
    let mut infos = vec![ArrayInfo {
        name: "params".into(),
        len: model.params.len(),
    }];
    let mut arrays = vec![model.params.clone()];
    if let Some(t) = trainer {
        for (name, a) in [("adam_m", &t.adam.m), ("adam_v", &t.adam.v)] {
            infos.push(ArrayInfo {
                name: name.into(),
                len: a.len(),
            });
            arrays.push(a.clone());
        }
    }
    Checkpoint {
        header: CheckpointHeader {
            kind: ModelKind::Localizer,
            net: model.net.config.clone(),
            optim: trainer.map(|t| t.optim.clone()),
            adam_steps: trainer.map(|t| t.adam.t),
            round,
            rng: rng.map(RngState::capture),
            arrays: infos,
            config_echo,
        },
        arrays,
    }
}

pub fn restore_localizer(ckpt: &Checkpoint) -> Result<(LocalizerModel, Option<TrainerState>)> {
    if ckpt.header.kind != ModelKind::Localizer {
        return Err(LoocError::Contract("checkpoint does not hold a localizer".into()));
    }
    let net = UNet::new(ckpt.header.net.clone())?;
    let params = ckpt.array("params")?.to_vec();
    if params.len() != net.n_params() {
        return Err(LoocError::Contract(format!(
            "checkpoint has {} parameters, network needs {}",
            params.len(),
            net.n_params()
        )));
    }
    let trainer = match (&ckpt.header.optim, ckpt.header.adam_steps) {
        (Some(optim), Some(t)) => Some(TrainerState {
            optim: optim.clone(),
            adam: Adam {
                m: ckpt.array("adam_m")?.to_vec(),
                v: ckpt.array("adam_v")?.to_vec(),
                t,
            },
        }),
        _ => None,
    };
    Ok((LocalizerModel { net, params }, trainer))
}

pub fn glance_checkpoint(model: &GlanceModel, config_echo: serde_json::Value) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            kind: ModelKind::Glance,
            net: model.net.config.clone(),
            optim: None,
            adam_steps: None,
            round: None,
            rng: None,
            arrays: vec![ArrayInfo {
                name: "params".into(),
                len: model.params.len(),
            }],
            config_echo,
        },
        arrays: vec![model.params.clone()],
    }
}

pub fn restore_glance(ckpt: &Checkpoint) -> Result<GlanceModel> {
    if ckpt.header.kind != ModelKind::Glance {
        return Err(LoocError::Contract("checkpoint does not hold a glance model".into()));
    }
    let net = GlanceNet::new(ckpt.header.net.clone())?;
    let params = ckpt.array("params")?.to_vec();
    if params.len() != net.n_params() {
        return Err(LoocError::Contract("glance parameter count mismatch".into()));
    }
    Ok(GlanceModel { net, params })
}
