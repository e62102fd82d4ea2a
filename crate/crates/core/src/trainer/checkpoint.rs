//! Safetensors checkpoints: student, teacher, optimizer moments and queue
//! as tensors; step counters, RNG position and the config as metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::optim::{Optimizer, OptimizerSettings};
use super::TrainState;
use crate::config::{config_digest, RunConfig};
use crate::error::{CmidError, Result};
use crate::losses::MemoryQueue;
use crate::model::ModelState;

pub const CHECKPOINT_VERSION: &str = "cmid-ckpt-1";

fn meta_get<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| CmidError::Checkpoint(format!("missing metadata field {key}")))
}

fn meta_num<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
    meta_get(meta, key)?
        .parse()
        .map_err(|_| CmidError::Checkpoint(format!("malformed metadata field {key}")))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in state.model.student_params.tensors()? {
        tensors.insert(format!("student.{name}"), t);
    }
    for (name, t) in state.model.teacher_params.tensors()? {
        tensors.insert(format!("teacher.{name}"), t);
    }
    let (optim, optim_steps) = state.optimizer.export();
    for (name, t) in optim {
        tensors.insert(format!("optim.{name}"), t);
    }
    let q = &state.queue;
    tensors.insert(
        "queue.buffer".into(),
        Tensor::from_slice(q.buffer(), (q.capacity(), q.dim()), &Device::Cpu)?,
    );
    if let Some(center) = &state.center {
        tensors.insert("center".into(), center.clone());
    }

    let mut meta = HashMap::new();
    meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
    meta.insert("config_digest".into(), config_digest(&state.cfg));
    meta.insert("config".into(), state.cfg.to_text());
    meta.insert("step".into(), state.step.to_string());
    meta.insert("total_steps".into(), state.total_steps.to_string());
    meta.insert("steps_per_epoch".into(), state.steps_per_epoch.to_string());
    meta.insert("optim_steps".into(), optim_steps.to_string());
    meta.insert("queue_cursor".into(), q.cursor().to_string());
    meta.insert("queue_filled".into(), q.len().to_string());
    meta.insert("rng_seed".into(), hex::encode(state.rng.get_seed()));
    meta.insert("rng_stream".into(), state.rng.get_stream().to_string());
    meta.insert("rng_word_pos".into(), state.rng.get_word_pos().to_string());

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CmidError::io(parent, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors.iter(), Some(meta), &tmp)
        .map_err(|e| CmidError::Checkpoint(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CmidError::io(path, e))?;
    Ok(())
}

struct RawCheckpoint {
    meta: HashMap<String, String>,
    tensors: HashMap<String, Tensor>,
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| CmidError::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| CmidError::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let version = meta_get(&meta, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CmidError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(RawCheckpoint { meta, tensors })
}

fn with_prefix(tensors: &HashMap<String, Tensor>, prefix: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t)))
        .map(|(n, t)| Ok((n, t.to_device(device)?)))
        .collect()
}

/// The configuration stored in a checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<RunConfig> {
    let raw = read_raw(path)?;
    RunConfig::parse(meta_get(&raw.meta, "config")?)
}

/// Restores the full training state. With `expected` set, a config digest
/// different from the stored one is refused unless `force` is true, in
/// which case `expected` replaces the stored config.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&RunConfig>,
    force: bool,
    device: &Device,
) -> Result<TrainState> {
    let raw = read_raw(path)?;
    let meta = &raw.meta;
    let stored = RunConfig::parse(meta_get(meta, "config")?)?;
    let stored_digest = meta_get(meta, "config_digest")?;
    let cfg = match expected {
        Some(cfg) if config_digest(cfg) != stored_digest => {
            if !force {
                return Err(CmidError::Checkpoint(format!(
                    "config digest {} differs from checkpoint {}; pass force to override",
                    config_digest(cfg),
                    stored_digest
                )));
            }
            log::warn!("loading {} under a different config", path.display());
            cfg.clone()
        }
        _ => stored,
    };

    let model = ModelState::new(&cfg, device)?;
    model.student_params.load(&with_prefix(&raw.tensors, "student.", device)?)?;
    model.teacher_params.load(&with_prefix(&raw.tensors, "teacher.", device)?)?;

    let mut optimizer = Optimizer::new(
        model.trainable(),
        OptimizerSettings::new(cfg.train.optimizer, cfg.train.weight_decay),
    );
    optimizer.import(
        &with_prefix(&raw.tensors, "optim.", device)?,
        meta_num(meta, "optim_steps")?,
    )?;

    let buffer = raw
        .tensors
        .get("queue.buffer")
        .ok_or_else(|| CmidError::Checkpoint("missing queue buffer".into()))?;
    let (capacity, dim) = buffer.dims2()?;
    let queue = MemoryQueue::from_parts(
        capacity,
        dim,
        buffer.flatten_all()?.to_vec1::<f32>()?,
        meta_num(meta, "queue_cursor")?,
        meta_num(meta, "queue_filled")?,
    )?;
    if capacity != cfg.global.queue_size || dim != cfg.model.global_dim {
        return Err(CmidError::Checkpoint("queue shape disagrees with config".into()));
    }

    let seed_bytes = hex::decode(meta_get(meta, "rng_seed")?)
        .map_err(|_| CmidError::Checkpoint("malformed rng seed".into()))?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| CmidError::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta_num(meta, "rng_stream")?);
    rng.set_word_pos(meta_num(meta, "rng_word_pos")?);

    let center = match raw.tensors.get("center") {
        Some(t) => Some(t.to_device(device)?),
        None => None,
    };
    let weights = cfg.weights;
    Ok(TrainState {
        cfg,
        model,
        queue,
        optimizer,
        step: meta_num(meta, "step")?,
        total_steps: meta_num(meta, "total_steps")?,
        steps_per_epoch: meta_num(meta, "steps_per_epoch")?,
        rng,
        weights,
        center,
    })
}

/// Student-side model only, for feature extraction.
pub fn load_model(path: &Path, device: &Device) -> Result<(RunConfig, ModelState)> {
    let raw = read_raw(path)?;
    let cfg = RunConfig::parse(meta_get(&raw.meta, "config")?)?;
    let model = ModelState::new(&cfg, device)?;
    model.student_params.load(&with_prefix(&raw.tensors, "student.", device)?)?;
    model.teacher_params.load(&with_prefix(&raw.tensors, "teacher.", device)?)?;
    Ok((cfg, model))
}
