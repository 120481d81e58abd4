//! Checkpoints: one safetensors file holding parameters and optimiser moments,
//! with a versioned JSON header carrying the experiment config, step counter
//! and sampling-RNG position.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::networks::RFaceModel;

pub const CHECKPOINT_FORMAT: &str = "rface-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const METADATA_KEY: &str = "rface";
const PARAM_PREFIX: &str = "param/";
const ADAM_G_PREFIX: &str = "adam-g/";
const ADAM_D_PREFIX: &str = "adam-d/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// The JSON header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub config: ExperimentConfig,
    rng: RngState,
}

fn invalid(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes the full training state. The output bytes depend only on that state.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: trainer.step,
        generator_steps: trainer.opt_g.steps_taken(),
        discriminator_steps: trainer.opt_d.steps_taken(),
        config: trainer.cfg.clone(),
        rng: RngState::capture(&trainer.rng),
    };
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in trainer.model.store().snapshot()? {
        tensors.insert(format!("{PARAM_PREFIX}{name}"), t);
    }
    for (name, t) in trainer.opt_g.state() {
        tensors.insert(format!("{ADAM_G_PREFIX}{name}"), t);
    }
    for (name, t) in trainer.opt_d.state() {
        tensors.insert(format!("{ADAM_D_PREFIX}{name}"), t);
    }
    // a single metadata entry keeps the header byte-stable
    let header = HashMap::from([(METADATA_KEY.to_string(), serde_json::to_string(&meta)?)]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(header), path)?;
    Ok(())
}

fn read(path: &Path, device: &Device) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| invalid(path, e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| invalid(path, "missing checkpoint header"))?;
    let meta: CheckpointMeta = serde_json::from_str(raw).map_err(|e| invalid(path, e.to_string()))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(invalid(path, format!("unknown format {}", meta.format)));
    }
    if meta.version != CHECKPOINT_VERSION {
        return Err(invalid(
            path,
            format!("unsupported version {} (expected {CHECKPOINT_VERSION})", meta.version),
        ));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?.into_iter().collect();
    Ok((meta, tensors))
}

fn with_prefix(all: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    all.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

/// Restores a trainer exactly as it was saved, ready to continue.
pub fn load_trainer(path: &Path, dtype: DType, device: &Device) -> Result<Trainer> {
    let (meta, tensors) = read(path, device)?;
    let mut trainer = Trainer::new(&meta.config, dtype, device)?;
    trainer
        .model
        .store()
        .load(&with_prefix(&tensors, PARAM_PREFIX))
        .map_err(|e| invalid(path, e.to_string()))?;
    trainer
        .opt_g
        .load_state(&with_prefix(&tensors, ADAM_G_PREFIX), meta.generator_steps)?;
    trainer
        .opt_d
        .load_state(&with_prefix(&tensors, ADAM_D_PREFIX), meta.discriminator_steps)?;
    trainer.rng = meta.rng.restore()?;
    trainer.step = meta.step;
    Ok(trainer)
}

/// Loads only the model and its experiment config, for inference.
pub fn load_model(path: &Path, dtype: DType, device: &Device) -> Result<(RFaceModel, ExperimentConfig)> {
    let (meta, tensors) = read(path, device)?;
    let model = RFaceModel::new(&meta.config.generator, meta.config.train.seed, dtype, device)?;
    model
        .store()
        .load(&with_prefix(&tensors, PARAM_PREFIX))
        .map_err(|e| invalid(path, e.to_string()))?;
    Ok((model, meta.config))
}
