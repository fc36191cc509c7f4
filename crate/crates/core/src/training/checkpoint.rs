//! Checkpoints are safetensors files. Tensor names carry a prefix per
//! state group (`g/`, `d/`, `ema/`, `opt_g/m/`, ...) and the single
//! metadata entry `nsd` holds the JSON-encoded [`CheckpointMeta`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nsd_layout::{ClassVocabulary, LayoutMode, SizeStats};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, Trainer};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "nsd-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "nsd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Training,
    Generator,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, in decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub dtype: String,
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscriminatorConfig>,
    pub train: Option<TrainConfig>,
    pub label_mode: LayoutMode,
    pub vocabulary: Option<ClassVocabulary>,
    pub size_stats: Option<SizeStats>,
    pub iteration: u64,
    pub skipped_steps: u64,
    pub rng: Option<RngState>,
    pub adam_g_steps: u64,
    pub adam_d_steps: u64,
    pub accumulated: usize,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn prefixed(out: &mut Vec<(String, Tensor)>, prefix: &str, map: &BTreeMap<String, Tensor>) {
    out.extend(map.iter().map(|(k, t)| (format!("{prefix}{k}"), t.clone())));
}

fn write_atomic(path: &Path, tensors: Vec<(String, Tensor)>, meta: &CheckpointMeta) -> Result<()> {
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(tensors, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint"),
        std::process::id()
    ));
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Loaded {
    meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

impl Loaded {
    fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = meta_from_bytes(&bytes, path)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(Self { meta, tensors })
    }

    fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }
}

fn meta_from_bytes(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| corrupt(e.to_string()))?;
    let text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| corrupt("not a scene-decoration checkpoint (no metadata)".into()))?;
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("unknown checkpoint format".into()));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => {
            return Err(corrupt(format!("checkpoint version {other:?} is not supported (expected {CHECKPOINT_VERSION})")))
        }
    }
    serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
}

/// Metadata of a checkpoint without loading its tensors.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    meta_from_bytes(&bytes, path)
}

/// Writes the complete training state.
pub fn save_checkpoint(path: &Path, trainer: &Trainer, vocab: Option<&ClassVocabulary>) -> Result<()> {
    let mut tensors = Vec::new();
    prefixed(&mut tensors, "g/", &trainer.g_store.snapshot()?);
    prefixed(&mut tensors, "d/", &trainer.d_store.snapshot()?);
    prefixed(&mut tensors, "ema/", &trainer.ema.store().snapshot()?);
    for (name, opt) in [("opt_g", &trainer.opt_g), ("opt_d", &trainer.opt_d)] {
        let (m, v) = opt.moments();
        prefixed(&mut tensors, &format!("{name}/m/"), m);
        prefixed(&mut tensors, &format!("{name}/v/"), v);
    }
    if trainer.acc_g.count() > 0 {
        prefixed(&mut tensors, "acc_g/", trainer.acc_g.sums());
        prefixed(&mut tensors, "acc_d/", trainer.acc_d.sums());
    }
    let cfg = trainer.config();
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Training,
        dtype: dtype_name(trainer.g_store.dtype())?.into(),
        generator: cfg.generator.clone(),
        discriminator: Some(cfg.discriminator.clone()),
        train: Some(cfg.clone()),
        label_mode: cfg.label_mode,
        vocabulary: vocab.cloned(),
        size_stats: trainer.size_stats.clone(),
        iteration: trainer.iteration,
        skipped_steps: trainer.skipped_steps,
        rng: Some(trainer.rng_state()),
        adam_g_steps: trainer.opt_g.steps(),
        adam_d_steps: trainer.opt_d.steps(),
        accumulated: trainer.acc_g.count(),
    };
    write_atomic(path, tensors, &meta)
}

/// Restores a trainer saved by [`save_checkpoint`], together with the
/// vocabulary it was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(Trainer, Option<ClassVocabulary>)> {
    let loaded = Loaded::read(path)?;
    let meta = &loaded.meta;
    if meta.kind != CheckpointKind::Training {
        return Err(Error::Checkpoint(format!("{} holds only a generator, not a training state", path.display())));
    }
    let cfg = meta.train.clone().ok_or_else(|| Error::Checkpoint("training checkpoint lacks its config".into()))?;
    let mut t = Trainer::new(cfg, parse_dtype(&meta.dtype)?)?;
    t.g_store.load(&loaded.group("g/"))?;
    t.d_store.load(&loaded.group("d/"))?;
    t.ema.store().load(&loaded.group("ema/"))?;
    t.opt_g.restore(meta.adam_g_steps, loaded.group("opt_g/m/"), loaded.group("opt_g/v/"))?;
    t.opt_d.restore(meta.adam_d_steps, loaded.group("opt_d/m/"), loaded.group("opt_d/v/"))?;
    t.acc_g.restore(meta.accumulated, loaded.group("acc_g/"));
    t.acc_d.restore(meta.accumulated, loaded.group("acc_d/"));
    if meta.accumulated > 0 && (t.acc_g.sums().len() != t.g_store.trainable().count()) {
        return Err(Error::Checkpoint("accumulated gradients are incomplete".into()));
    }
    t.rng = meta.rng.as_ref().ok_or_else(|| Error::Checkpoint("training checkpoint lacks RNG state".into()))?.restore()?;
    t.iteration = meta.iteration;
    t.skipped_steps = meta.skipped_steps;
    t.size_stats = meta.size_stats.clone();
    Ok((t, meta.vocabulary.clone()))
}

/// Inference-ready generator with the metadata it was saved with.
#[derive(Debug)]
pub struct GeneratorBundle {
    pub generator: Generator,
    pub store: ParamStore,
    pub meta: CheckpointMeta,
    /// Whether the averaged weights were loaded.
    pub averaged: bool,
}

/// Writes a generator-only checkpoint from `store`, saved as averaged
/// weights.
pub fn save_generator(
    path: &Path,
    config: &GeneratorConfig,
    store: &ParamStore,
    label_mode: LayoutMode,
    vocab: Option<&ClassVocabulary>,
    size_stats: Option<&SizeStats>,
) -> Result<()> {
    let mut tensors = Vec::new();
    prefixed(&mut tensors, "ema/", &store.snapshot()?);
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Generator,
        dtype: dtype_name(store.dtype())?.into(),
        generator: config.clone(),
        discriminator: None,
        train: None,
        label_mode,
        vocabulary: vocab.cloned(),
        size_stats: size_stats.cloned(),
        iteration: 0,
        skipped_steps: 0,
        rng: None,
        adam_g_steps: 0,
        adam_d_steps: 0,
        accumulated: 0,
    };
    write_atomic(path, tensors, &meta)
}

/// Loads generator weights, preferring the averaged copy. With `config`,
/// the weights are validated against that architecture instead of the
/// stored one.
pub fn load_generator(path: &Path, config: Option<&GeneratorConfig>, dtype: DType) -> Result<GeneratorBundle> {
    let loaded = Loaded::read(path)?;
    let cfg = config.cloned().unwrap_or_else(|| loaded.meta.generator.clone());
    let mut store = ParamStore::new(dtype, 0);
    let generator = Generator::new(&cfg, &mut store)?;
    let ema = loaded.group("ema/");
    let averaged = !ema.is_empty();
    let weights = if averaged { ema } else { loaded.group("g/") };
    store.load(&weights)?;
    Ok(GeneratorBundle { generator, store, meta: loaded.meta, averaged })
}
