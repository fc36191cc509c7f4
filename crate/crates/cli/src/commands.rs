use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use nsd_core::datapipe::{
    make_manifest, preprocess_scene, size_stats_from, write_crop, write_crop_manifest, PairDataset, PreprocessConfig,
    Split,
};
use nsd_core::imaging::{load_rgb, save_rgb, RgbPlanes};
use nsd_core::inference::{generate as run_generator, latent_from_seed, prepare_background, resolve_layout};
use nsd_core::layout::{encode_layout, ClassVocabulary, SizeStats, SizeStrategy};
use nsd_core::metrics::{extract_features, extractor_by_id, FeatureSet, FeatureSource, KidOptions, MetricReport};
use nsd_core::nn::Mode;
use nsd_core::synthetic::synthetic_pairs;
use nsd_core::training::{
    load_checkpoint, load_generator, save_checkpoint, save_generator, MetricsLog, ModelPreset, TrainConfig, Trainer,
};
use nsd_core::Error;
use serde_json::json;

use crate::args::{EvaluateArgs, GenerateArgs, LabelArgs, PreprocessArgs, ServeArgs, TrainArgs};

/// A failed command: message and process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const MISSING: u8 = 2;
    pub const CORRUPT: u8 = 3;
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 65;

    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingPaths(_) => Failure::MISSING,
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => Failure::MISSING,
            Error::Image { source: image::ImageError::IoError(io), .. } if io.kind() == ErrorKind::NotFound => {
                Failure::MISSING
            }
            Error::Checkpoint(_) => Failure::CORRUPT,
            Error::Config(_) => Failure::USAGE,
            _ => Failure::DATA,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Prints one JSON object per line on stdout.
fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::new(Failure::MISSING, format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::from(Error::io(path, e)))
}

pub fn preprocess(a: PreprocessArgs) -> CmdResult {
    require(&a.dataset, "dataset root")?;
    let cfg = PreprocessConfig { retention_rule: a.retention_rule, ..PreprocessConfig::default() };
    emit(json!({ "resolved_config": {
        "command": "preprocess", "dataset": a.dataset, "out": a.out, "room_type": a.room_type,
        "split": a.split, "seed": a.seed, "preprocess": cfg,
    } }));
    let vocab = ClassVocabulary::default();
    let manifest = make_manifest(&a.dataset, a.room_type, a.split)?;
    create_dir(&a.out)?;
    let source_path = a.out.join("sources.json");
    std::fs::write(&source_path, manifest.to_json()?).map_err(|e| Failure::from(Error::io(&source_path, e)))?;

    let mut records = Vec::new();
    for rec in &manifest.records {
        let scene = manifest.load_source(rec)?;
        for pair in preprocess_scene(&scene, &vocab, &cfg)? {
            records.push(write_crop(&a.out, &a.dataset, rec, &pair)?);
        }
    }
    let crops = a.out.join("crops.jsonl");
    write_crop_manifest(&crops, &records)?;
    for split in [Split::Train, Split::Test] {
        emit(json!({
            "split": split.to_string(),
            "views": manifest.count(split),
            "crops": records.iter().filter(|r| r.split == split).count(),
        }));
    }
    emit(json!({ "manifest": crops }));
    Ok(())
}

fn apply_labels(cfg: &mut TrainConfig, labels: &LabelArgs) {
    if let Some(mode) = labels.label_mode {
        cfg.label_mode = mode;
    }
    if let Some(s) = labels.size_strategy {
        cfg.size_strategy = s;
    }
    if let Some(m) = labels.m {
        cfg.size_multiplier = m;
    }
}

fn resolve_train_config(a: &TrainArgs, num_classes: usize) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            require(path, "config")?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::with_preset(a.preset.unwrap_or(ModelPreset::Full), num_classes),
    };
    if let (Some(preset), Some(_)) = (a.preset, &a.config) {
        let (g, d) = preset.configs(num_classes);
        cfg.generator = g;
        cfg.discriminator = d;
    }
    apply_labels(&mut cfg, &a.labels);
    if let Some(v) = a.iterations {
        cfg.total_iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.lambda_obj {
        cfg.lambda_obj = v;
    }
    if let Some(v) = a.accumulation_steps {
        cfg.accumulation_steps = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let vocab = ClassVocabulary::default();
    let mut trainer = match &a.resume {
        Some(path) => {
            require(path, "checkpoint")?;
            let (mut t, saved_vocab) = load_checkpoint(path)?;
            if saved_vocab.is_some_and(|v| v != vocab) {
                return Err(Failure::new(Failure::CORRUPT, "checkpoint vocabulary differs from the built-in one"));
            }
            if let Some(n) = a.iterations {
                t.set_total_iterations(n);
            }
            t
        }
        None => Trainer::new(resolve_train_config(&a, vocab.len())?, DType::F32)?,
    };
    let cfg = trainer.config().clone();
    emit(json!({ "resolved_config": { "command": "train", "resume": a.resume, "out": a.out, "train": cfg } }));

    let size = cfg.generator.image_size();
    let data = match (&a.data, a.synthetic) {
        (Some(path), _) => {
            require(path, "crop manifest")?;
            PairDataset::load(path, Some(Split::Train), size)?
        }
        (None, Some(n)) => synthetic_pairs(n, size, &vocab, cfg.seed)?,
        (None, None) if cfg.total_iterations == 0 => PairDataset::from_pairs(size, Vec::new())?,
        (None, None) => return Err(Failure::new(Failure::USAGE, "pass --data or --synthetic")),
    };
    if trainer.size_stats.is_none() && !data.is_empty() {
        trainer.size_stats = Some(size_stats_from(data.annotations(), vocab.len(), cfg.size_multiplier)?);
    }
    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint.safetensors");
    let mut log = MetricsLog::open(&a.out.join("metrics.jsonl"))?;
    let start = Instant::now();
    while trainer.iteration() < cfg.total_iterations {
        let batch = trainer.next_batch(&data, &vocab)?;
        let report = trainer.train_step(&batch)?;
        log.record(&report, start.elapsed().as_secs_f64())?;
        let done = trainer.iteration();
        if cfg.log_every > 0 && done % cfg.log_every == 0 {
            log::info!("iteration {done}: d {:.4} g {:.4}", report.d_loss, report.g_loss);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt, &trainer, Some(&vocab))?;
        }
    }
    save_checkpoint(&ckpt, &trainer, Some(&vocab))?;
    let generator = a.out.join("generator.safetensors");
    save_generator(
        &generator,
        &cfg.generator,
        trainer.ema().store(),
        cfg.label_mode,
        Some(&vocab),
        trainer.size_stats.as_ref(),
    )?;
    emit(json!({
        "iterations": trainer.iteration(),
        "skipped_steps": trainer.skipped_steps(),
        "checkpoint": ckpt,
        "generator": generator,
        "wall_time_s": start.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn load_images(dir: &Path) -> Result<Vec<RgbPlanes>, Failure> {
    require(dir, "image directory")?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::from(Error::io(dir, e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(RgbPlanes::from_rgb(&load_rgb(p)?))).collect()
}

fn stats_or_default(stats: Option<&SizeStats>, k: usize, m: f64) -> SizeStats {
    stats.cloned().unwrap_or_else(|| SizeStats::new(k, m))
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let kid_opts = KidOptions { subset_size: a.subset_size, n_subsets: a.subsets, seed: a.seed };
    emit(json!({ "resolved_config": {
        "command": "evaluate", "checkpoint": a.checkpoint, "data": a.data, "split": a.split,
        "real_images": a.real_images, "fake_images": a.fake_images,
        "real_features": a.real_features, "fake_features": a.fake_features,
        "extractor": a.extractor, "kid": kid_opts, "seed": a.seed,
        "label_mode": a.labels.label_mode, "size_strategy": a.labels.size_strategy, "m": a.labels.m,
    } }));
    let (real, fake) = if let (Some(r), Some(f)) = (&a.real_features, &a.fake_features) {
        require(r, "feature file")?;
        require(f, "feature file")?;
        (FeatureSet::load_json(r, FeatureSource::Real)?, FeatureSet::load_json(f, FeatureSource::Generated)?)
    } else {
        let extractor = extractor_by_id(&a.extractor).map_err(|e| Failure::new(Failure::USAGE, e.to_string()))?;
        let (real_imgs, fake_imgs) = match (&a.real_images, &a.fake_images, &a.checkpoint, &a.data) {
            (Some(r), Some(f), _, _) => (load_images(r)?, load_images(f)?),
            (_, _, Some(ckpt), Some(data)) => generate_for_dataset(ckpt, data, &a)?,
            _ => {
                return Err(Failure::new(
                    Failure::USAGE,
                    "pass --checkpoint with --data, --real-images with --fake-images, or feature files",
                ))
            }
        };
        (
            extract_features(&real_imgs, extractor.as_ref(), FeatureSource::Real)?,
            extract_features(&fake_imgs, extractor.as_ref(), FeatureSource::Generated)?,
        )
    };
    let report = MetricReport::compute(&real, &fake, &kid_opts)?;
    eprintln!("{report}");
    let text = serde_json::to_string(&report).map_err(|e| Failure::from(Error::from(e)))?;
    if let Some(out) = &a.out {
        std::fs::write(out, &text).map_err(|e| Failure::from(Error::io(out, e)))?;
    }
    println!("{text}");
    Ok(())
}

/// Real crops of the selected split and one generated image per crop.
fn generate_for_dataset(ckpt: &Path, data: &Path, a: &EvaluateArgs) -> Result<(Vec<RgbPlanes>, Vec<RgbPlanes>), Failure> {
    require(ckpt, "checkpoint")?;
    require(data, "crop manifest")?;
    let bundle = load_generator(ckpt, None, DType::F32)?;
    let vocab = bundle.meta.vocabulary.clone().unwrap_or_default();
    let cfg = bundle.generator.config().clone();
    let size = cfg.image_size();
    let split = match a.split {
        nsd_core::datapipe::SplitSelector::Train => Some(Split::Train),
        nsd_core::datapipe::SplitSelector::Test => Some(Split::Test),
        nsd_core::datapipe::SplitSelector::All => None,
    };
    let set = PairDataset::load(data, split, size)?;
    if set.len() < 2 {
        return Err(Failure::new(Failure::DATA, format!("{} holds {} pairs in the split; need at least 2", data.display(), set.len())));
    }
    let mode = a.labels.label_mode.unwrap_or(bundle.meta.label_mode);
    let strategy = a.labels.size_strategy.unwrap_or(SizeStrategy::Median);
    let m = a.labels.m.unwrap_or(nsd_core::layout::DEFAULT_SIZE_MULTIPLIER);
    let stats = stats_or_default(bundle.meta.size_stats.as_ref(), vocab.len(), m);
    let mut real = Vec::with_capacity(set.len());
    let mut fake = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let objects = set.objects(i, mode, strategy, &stats)?;
        let layout = encode_layout(&objects, mode, size, size, &vocab).map_err(Error::from)?;
        let l = nsd_core::imaging::layout_tensor(&layout, DType::F32)?.unsqueeze(0).map_err(Error::from)?;
        let x = set.background(i).to_tensor(DType::F32)?.unsqueeze(0).map_err(Error::from)?;
        let z = latent_from_seed(a.seed.wrapping_add(i as u64), cfg.latent_dim, DType::F32)?;
        let y = bundle.generator.forward(&x, &l, &z, Mode::Eval)?;
        fake.push(RgbPlanes::from_tensor(&y)?);
        real.push(set.image(i).clone());
    }
    Ok((real, fake))
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.background, "background")?;
    require(&a.layout, "layout document")?;
    emit(json!({ "resolved_config": {
        "command": "generate", "checkpoint": a.checkpoint, "background": a.background, "layout": a.layout,
        "size_strategy": a.size_strategy, "seed": a.seed, "out": a.out,
    } }));
    let bundle = load_generator(&a.checkpoint, None, DType::F32)?;
    let vocab = bundle.meta.vocabulary.clone().unwrap_or_default();
    let size = bundle.generator.config().image_size();
    let img = load_rgb(&a.background)?;
    let text = std::fs::read_to_string(&a.layout).map_err(|e| Failure::from(Error::io(&a.layout, e)))?;
    let start = Instant::now();
    let (background, transform) = prepare_background(&img, size);
    let strategy = a.size_strategy.unwrap_or_default();
    let defaults = match (strategy, &bundle.meta.size_stats) {
        (SizeStrategy::Gt, _) | (_, None) => None,
        (s, Some(stats)) => Some((stats, s)),
    };
    let doc = resolve_layout(&text, &vocab, defaults, &transform)
        .map_err(|e| Failure::new(Failure::DATA, format!("invalid layout document {}: {e}", a.layout.display())))?;
    let out = run_generator(&bundle, &vocab, &background, &doc, a.seed)?;
    let latency = start.elapsed().as_secs_f64() * 1e3;
    save_rgb(&out.to_rgb(), &a.out)?;
    log::info!("generated {} in {latency:.1} ms", a.out.display());
    emit(json!({ "out": a.out, "latency_ms": latency, "transform": transform, "objects": doc.objects.len() }));
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    require(&a.checkpoint, "checkpoint")?;
    let config = nsd_service::ServiceConfig {
        max_body_bytes: a.max_body_mb << 20,
        queue_capacity: a.queue,
        ..nsd_service::ServiceConfig::default()
    };
    emit(json!({ "resolved_config": {
        "command": "serve", "checkpoint": a.checkpoint, "addr": a.addr.to_string(),
        "queue": a.queue, "max_body_bytes": config.max_body_bytes, "max_pixels": config.max_pixels,
    } }));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(1, e.to_string()))?;
    runtime
        .block_on(nsd_service::serve(a.addr, config, a.checkpoint))
        .map_err(|e| Failure::new(1, format!("server error: {e}")))
}
