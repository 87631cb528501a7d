//! Versioned parameter checkpoints.
//!
//! A checkpoint is one JSON document holding the encoder configuration, the
//! vocabulary and every named buffer as a flat 64-bit array with its shape.
//! Floats are written in shortest round-trip form, so save followed by load
//! is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{Buffer, ParamSet};
use crate::typing::TyperParams;
use crate::vocab::HashVocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Detector,
    Typer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: EncoderConfig,
    pub vocab: HashVocab,
    pub buffers: Vec<Buffer>,
}

/// Models that can be stored in a [`Checkpoint`].
pub trait Checkpointable: ParamSet + Sized {
    const KIND: ModelKind;

    fn encoder_config(&self) -> EncoderConfig;

    /// Builds a model of the right shape to receive checkpoint buffers.
    fn skeleton(config: EncoderConfig) -> Result<Self>;

    fn to_checkpoint(&self, vocab: HashVocab) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: Self::KIND,
            config: self.encoder_config(),
            vocab,
            buffers: self.buffers().into_iter().cloned().collect(),
        }
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        if ck.kind != Self::KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {:?} checkpoint, found {:?}",
                Self::KIND,
                ck.kind
            )));
        }
        let mut model = Self::skeleton(ck.config)?;
        let slots = model.buffers_mut();
        if slots.len() != ck.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} buffers, found {}",
                slots.len(),
                ck.buffers.len()
            )));
        }
        for (slot, stored) in slots.into_iter().zip(&ck.buffers) {
            if slot.name != stored.name || slot.shape != stored.shape {
                return Err(Error::Checkpoint(format!(
                    "buffer `{}` {:?} does not match stored `{}` {:?}",
                    slot.name, slot.shape, stored.name, stored.shape
                )));
            }
            if stored.data.len() != stored.shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "buffer `{}` has {} values for shape {:?}",
                    stored.name,
                    stored.data.len(),
                    stored.shape
                )));
            }
            *slot = stored.clone();
        }
        Ok(model)
    }
}

impl Checkpointable for DetectorParams {
    const KIND: ModelKind = ModelKind::Detector;

    fn encoder_config(&self) -> EncoderConfig {
        self.encoder.config
    }

    fn skeleton(config: EncoderConfig) -> Result<Self> {
        let mut c = config;
        c.embed_init = 0.0;
        c.weight_init = 0.0;
        let mut p = DetectorParams::init(c, 0)?;
        p.encoder.config = config;
        Ok(p)
    }
}

impl Checkpointable for TyperParams {
    const KIND: ModelKind = ModelKind::Typer;

    fn encoder_config(&self) -> EncoderConfig {
        self.encoder.config
    }

    fn skeleton(config: EncoderConfig) -> Result<Self> {
        let mut c = config;
        c.embed_init = 0.0;
        c.weight_init = 0.0;
        let mut encoder = EncoderParams::init(c, 0)?;
        encoder.config = config;
        Ok(TyperParams { encoder })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(ck).expect("checkpoint serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn save_model<M: Checkpointable>(path: impl AsRef<Path>, model: &M, vocab: HashVocab) -> Result<()> {
    save_checkpoint(path, &model.to_checkpoint(vocab))
}

pub fn load_model<M: Checkpointable>(path: impl AsRef<Path>) -> Result<(M, HashVocab)> {
    let ck = load_checkpoint(path)?;
    Ok((M::from_checkpoint(&ck)?, ck.vocab))
}
