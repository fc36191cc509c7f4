//! Adversarial training: hinge losses, Adam with gradient accumulation,
//! weight averaging of the generator and checkpointing.

mod checkpoint;
mod ema;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use nsd_layout::{ClassVocabulary, LayoutMode, SizeStats, SizeStrategy, DEFAULT_SIZE_MULTIPLIER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_generator, read_checkpoint_meta, save_checkpoint, save_generator, CheckpointMeta,
    GeneratorBundle, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use ema::{ema_update, EmaState};
pub use loss::{d_loss, g_loss};
pub use optim::{collect_grads, Adam, AdamConfig, GradAccumulator};

use crate::datapipe::{augment_batch, AugmentPolicy, PairDataset, TrainBatch};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{global_norm, Mode, ParamStore};

pub const TRAIN_CONFIG_VERSION: u32 = 1;

/// How "update every n iterations" is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// Average gradients over n iterations, then update both networks.
    #[default]
    Gradients,
    /// Update D every iteration and G every n-th iteration.
    UpdateRatio,
}

/// Network sizes bundled under one name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// 256x256 networks.
    Full,
    /// 64x64 networks of the same structure with `width` base channels.
    Reduced64 { width: usize },
    /// 64x64 networks with a handful of channels.
    Tiny,
}

impl ModelPreset {
    pub fn configs(self, num_classes: usize) -> (GeneratorConfig, DiscriminatorConfig) {
        match self {
            ModelPreset::Full => {
                let mut g = GeneratorConfig { num_classes, ..GeneratorConfig::default() };
                g.blocks[0].in_channels = num_classes;
                let d = DiscriminatorConfig { num_classes, ..DiscriminatorConfig::default() };
                (g, d)
            }
            ModelPreset::Reduced64 { width } => {
                (GeneratorConfig::reduced_64(num_classes, width), DiscriminatorConfig::reduced_64(num_classes, width))
            }
            ModelPreset::Tiny => (GeneratorConfig::tiny(num_classes), DiscriminatorConfig::tiny(num_classes)),
        }
    }
}

impl std::str::FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelPreset::Full),
            "tiny" => Ok(ModelPreset::Tiny),
            "reduced64" => Ok(ModelPreset::Reduced64 { width: 32 }),
            other => match other.strip_prefix("reduced64:").and_then(|w| w.parse().ok()) {
                Some(width) => Ok(ModelPreset::Reduced64 { width }),
                None => Err(Error::Config(format!(
                    "unknown model preset {other:?}; expected full, reduced64[:WIDTH] or tiny"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub lambda_obj: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub accumulation_mode: AccumulationMode,
    pub total_iterations: u64,
    pub ema_decay: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub include_real_obj_term: bool,
    pub label_mode: LayoutMode,
    pub size_strategy: SizeStrategy,
    pub size_multiplier: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: TRAIN_CONFIG_VERSION,
            lambda_obj: 0.01,
            learning_rate: 1e-4,
            batch_size: 32,
            accumulation_steps: 4,
            accumulation_mode: AccumulationMode::Gradients,
            total_iterations: 400_000,
            ema_decay: 0.999,
            optimizer: AdamConfig::default(),
            seed: 0,
            augment: AugmentPolicy::default(),
            include_real_obj_term: false,
            label_mode: LayoutMode::Box,
            size_strategy: SizeStrategy::Median,
            size_multiplier: DEFAULT_SIZE_MULTIPLIER,
            checkpoint_every: 10_000,
            log_every: 100,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_preset(preset: ModelPreset, num_classes: usize) -> Self {
        let (generator, discriminator) = preset.configs(num_classes);
        Self { generator, discriminator, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.version != TRAIN_CONFIG_VERSION {
            return fail(format!("config version {} is not supported (expected {TRAIN_CONFIG_VERSION})", self.version));
        }
        if !(self.lambda_obj >= 0.0 && self.lambda_obj.is_finite()) {
            return fail(format!("lambda_obj must be a finite value >= 0, got {}", self.lambda_obj));
        }
        if self.accumulation_steps < 1 {
            return fail("accumulation_steps must be at least 1".into());
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return fail(format!("optimizer betas must lie in [0, 1) and eps be positive, got {o:?}"));
        }
        if !(self.size_multiplier > 0.0 && self.size_multiplier.is_finite()) {
            return fail(format!("size_multiplier must be positive, got {}", self.size_multiplier));
        }
        self.augment.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.image_size() != self.discriminator.image_size() {
            return fail(format!(
                "generator produces {0}x{0} images but the discriminator expects {1}x{1}",
                self.generator.image_size(),
                self.discriminator.image_size()
            ));
        }
        if self.generator.num_classes != self.discriminator.num_classes {
            return fail(format!(
                "generator has {} layout channels, discriminator {}",
                self.generator.num_classes, self.discriminator.num_classes
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Outcome of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    pub d_updated: bool,
    pub g_updated: bool,
    pub skipped: bool,
}

/// Both networks, their optimisers, the weight average and the RNG that
/// drives latents, augmentation and batch sampling.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    g_store: ParamStore,
    generator: Generator,
    d_store: ParamStore,
    discriminator: Discriminator,
    ema: EmaState,
    opt_g: Adam,
    opt_d: Adam,
    acc_g: GradAccumulator,
    acc_d: GradAccumulator,
    rng: ChaCha8Rng,
    iteration: u64,
    skipped_steps: u64,
    /// Per-class size statistics used for point labels and saved with
    /// checkpoints.
    pub size_stats: Option<SizeStats>,
}

const G_INIT_STREAM: u64 = 0x0047_454e;
const D_INIT_STREAM: u64 = 0x0044_4953;

impl Trainer {
    pub fn new(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut g_store = ParamStore::new(dtype, config.seed ^ G_INIT_STREAM);
        let generator = Generator::new(&config.generator, &mut g_store)?;
        let mut d_store = ParamStore::new(dtype, config.seed ^ D_INIT_STREAM);
        let discriminator = Discriminator::new(&config.discriminator, &mut d_store)?;
        let ema = EmaState::new(&config.generator, &g_store, config.ema_decay)?;
        let opt_g = Adam::new(&g_store, config.learning_rate, config.optimizer)?;
        let opt_d = Adam::new(&d_store, config.learning_rate, config.optimizer)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            g_store,
            generator,
            d_store,
            discriminator,
            ema,
            opt_g,
            opt_d,
            acc_g: GradAccumulator::default(),
            acc_d: GradAccumulator::default(),
            rng,
            iteration: 0,
            skipped_steps: 0,
            size_stats: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn g_store(&self) -> &ParamStore {
        &self.g_store
    }

    pub fn d_store(&self) -> &ParamStore {
        &self.d_store
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    /// The generator used for inference: the weight average or the live one.
    pub fn inference_generator(&self, use_ema: bool) -> &Generator {
        if use_ema {
            self.ema.generator()
        } else {
            &self.generator
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Extends or shortens the schedule of a resumed run.
    pub fn set_total_iterations(&mut self, n: u64) {
        self.config.total_iterations = n;
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn sample_latent(&mut self, batch: usize) -> Result<Tensor> {
        let dim = self.config.generator.latent_dim;
        let v: Vec<f32> = (0..batch * dim).map(|_| self.rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, (batch, dim), self.g_store.device())?.to_dtype(self.g_store.dtype())?)
    }

    /// Indices of the next mini-batch: the whole set in order when it is no
    /// larger than a batch, otherwise a uniform sample without replacement.
    pub fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        if n <= b {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut self.rng, n, b).into_vec()
        }
    }

    pub fn next_batch(&mut self, data: &PairDataset, vocab: &ClassVocabulary) -> Result<TrainBatch> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let needs_stats = self.config.label_mode == LayoutMode::Point && self.config.size_strategy != SizeStrategy::Gt;
        let fallback = SizeStats::new(vocab.len(), self.config.size_multiplier);
        let stats = match (&self.size_stats, needs_stats) {
            (Some(s), _) => s.clone(),
            (None, false) => fallback,
            (None, true) => return Err(Error::Config("point labels need per-class size statistics".into())),
        };
        let idx = self.sample_indices(data.len());
        data.batch(&idx, vocab, self.config.label_mode, self.config.size_strategy, &stats, self.g_store.dtype())
    }

    fn buffers(store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
        store.buffers().map(|(n, v)| Ok((n.to_string(), v.as_tensor().copy()?))).collect()
    }

    fn restore_buffers(store: &ParamStore, saved: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in store.buffers() {
            var.set(&saved[name])?;
        }
        Ok(())
    }

    fn losses(&mut self, batch: &TrainBatch) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let policy = cfg.augment;
        let lambda = cfg.lambda_obj;
        let with_bg = cfg.discriminator.condition_on_background;
        let latent = self.sample_latent(batch.len())?;
        let fake = self.generator.forward(&batch.backgrounds, &batch.layouts, &latent, Mode::Train)?;

        let group = |img: &Tensor, rng: &mut ChaCha8Rng| -> Result<Vec<Tensor>> {
            let mut members = vec![img, &batch.layouts];
            if with_bg {
                members.push(&batch.backgrounds);
            }
            Ok(augment_batch(&members, &policy, rng)?.0)
        };
        let real = group(&batch.images, &mut self.rng)?;
        let fake_d = group(&fake.detach(), &mut self.rng)?;
        let d = &self.discriminator;
        let (adv_r, obj_r) = d.forward(&real[0], &real[1], real.get(2), Mode::Train)?;
        let (adv_f, obj_f) = d.forward(&fake_d[0], &fake_d[1], fake_d.get(2), Mode::Train)?;
        let obj_real = self.config.include_real_obj_term.then_some(&obj_r);
        let dl = d_loss(&adv_r, &adv_f, &obj_f, lambda, obj_real)?;

        let fake_g = group(&fake, &mut self.rng)?;
        let (adv_g, obj_g) = self.discriminator.forward(&fake_g[0], &fake_g[1], fake_g.get(2), Mode::Train)?;
        let gl = g_loss(&adv_g, &obj_g, lambda)?;
        Ok((dl, gl))
    }

    /// One iteration: losses for both networks on `batch`, gradient
    /// accumulation, and optimiser and average updates when due. A
    /// non-finite loss or gradient leaves every network state untouched.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let iteration = self.iteration;
        self.iteration += 1;
        let g_buffers = Self::buffers(&self.g_store)?;
        let d_buffers = Self::buffers(&self.d_store)?;
        let skip = |this: &mut Self, why: String, d: f64, g: f64| -> Result<StepReport> {
            log::warn!("iteration {iteration}: skipping step ({why})");
            Self::restore_buffers(&this.g_store, &g_buffers)?;
            Self::restore_buffers(&this.d_store, &d_buffers)?;
            this.skipped_steps += 1;
            Ok(StepReport {
                iteration,
                d_loss: d,
                g_loss: g,
                d_grad_norm: f64::NAN,
                g_grad_norm: f64::NAN,
                d_updated: false,
                g_updated: false,
                skipped: true,
            })
        };

        let (dl, gl) = match self.losses(batch) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => return skip(self, msg, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let d_val = dl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let g_val = gl.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !d_val.is_finite() || !g_val.is_finite() {
            return skip(self, "non-finite loss".into(), d_val, g_val);
        }
        let d_grads = collect_grads(&self.d_store, &dl.backward()?)?;
        let g_grads = collect_grads(&self.g_store, &gl.backward()?)?;
        let d_norm = global_norm(d_grads.values())?;
        let g_norm = global_norm(g_grads.values())?;
        if !d_norm.is_finite() || !g_norm.is_finite() {
            return skip(self, "non-finite gradient".into(), d_val, g_val);
        }

        let n = self.config.accumulation_steps;
        let (mut d_updated, mut g_updated) = (false, false);
        match self.config.accumulation_mode {
            AccumulationMode::Gradients => {
                self.acc_d.add(d_grads)?;
                self.acc_g.add(g_grads)?;
                if self.acc_d.count() >= n {
                    let mean = self.acc_d.take_mean()?;
                    self.opt_d.step(&self.d_store, &mean)?;
                    d_updated = true;
                }
                if self.acc_g.count() >= n {
                    let mean = self.acc_g.take_mean()?;
                    self.opt_g.step(&self.g_store, &mean)?;
                    g_updated = true;
                }
            }
            AccumulationMode::UpdateRatio => {
                self.opt_d.step(&self.d_store, &d_grads)?;
                d_updated = true;
                if (iteration + 1).is_multiple_of(n as u64) {
                    self.opt_g.step(&self.g_store, &g_grads)?;
                    g_updated = true;
                }
            }
        }
        if g_updated {
            self.ema.update(&self.g_store)?;
        }
        Ok(StepReport {
            iteration,
            d_loss: d_val,
            g_loss: g_val,
            d_grad_norm: d_norm,
            g_grad_norm: g_norm,
            d_updated,
            g_updated,
            skipped: false,
        })
    }
}

/// Append-only JSON-lines training log.
#[derive(Debug)]
pub struct MetricsLog {
    file: File,
}

#[derive(Serialize)]
struct LogLine {
    iteration: u64,
    d_loss: f64,
    g_loss: f64,
    grad_norm: GradNorms,
    wall_time: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    skipped: bool,
}

#[derive(Serialize)]
struct GradNorms {
    d: f64,
    g: f64,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn record(&mut self, report: &StepReport, wall_time: f64) -> Result<()> {
        let finite = |v: f64| if v.is_finite() { v } else { -1.0 };
        let line = LogLine {
            iteration: report.iteration,
            d_loss: report.d_loss,
            g_loss: report.g_loss,
            grad_norm: GradNorms { d: finite(report.d_grad_norm), g: finite(report.g_grad_norm) },
            wall_time,
            skipped: report.skipped,
        };
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        self.file.write_all(text.as_bytes()).map_err(|e| Error::io("metrics log", e))
    }
}
