//! Model slot and the bounded single-consumer inference queue.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::DType;
use nsd_core::imaging::{Letterbox, RgbPlanes};
use nsd_core::inference::generate;
use nsd_core::layout::{ClassVocabulary, LayoutDocument, SizeStats};
use nsd_core::training::{load_generator, GeneratorBundle};
use sha2::{Digest, Sha256};
use tokio::sync::{mpsc, oneshot};

use crate::api::ApiError;

/// A generator ready to serve.
#[derive(Debug)]
pub struct LoadedModel {
    pub bundle: GeneratorBundle,
    pub model_id: String,
    pub size_stats: Option<SizeStats>,
}

impl LoadedModel {
    /// Loads a generator checkpoint; the model id is derived from the file
    /// contents.
    pub fn from_checkpoint(path: &Path, vocab: &ClassVocabulary) -> nsd_core::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| nsd_core::Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        let bundle = load_generator(path, None, DType::F32)?;
        if let Some(v) = &bundle.meta.vocabulary {
            if v != vocab {
                return Err(nsd_core::Error::Config("checkpoint vocabulary differs from the served one".into()));
            }
        }
        if bundle.generator.config().num_classes != vocab.len() {
            return Err(nsd_core::Error::Config(format!(
                "checkpoint has {} classes, the vocabulary {}",
                bundle.generator.config().num_classes,
                vocab.len()
            )));
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let size_stats = bundle.meta.size_stats.clone();
        Ok(Self { bundle, model_id: format!("{stem}-{hex}"), size_stats })
    }

    pub fn image_size(&self) -> usize {
        self.bundle.generator.config().image_size()
    }
}

/// A validated request in canvas coordinates.
#[derive(Debug)]
pub struct Job {
    pub background: RgbPlanes,
    pub layout: LayoutDocument,
    pub latent_seed: u64,
    pub transform: Letterbox,
}

struct Queued {
    job: Job,
    reply: oneshot::Sender<Result<RgbPlanes, ApiError>>,
}

/// Owns the model slot and feeds one worker thread through a bounded
/// queue. The model is read-only once installed.
pub struct Engine {
    model: Arc<OnceLock<Arc<LoadedModel>>>,
    load_error: Mutex<Option<String>>,
    tx: mpsc::Sender<Queued>,
    depth: Arc<AtomicUsize>,
    capacity: usize,
    vocab: ClassVocabulary,
}

impl Engine {
    /// Starts the worker thread. Requests are refused until a model is
    /// installed.
    pub fn start(vocab: ClassVocabulary, capacity: usize) -> Self {
        let capacity = capacity.max(1);
        let (tx, mut rx) = mpsc::channel::<Queued>(capacity);
        let model: Arc<OnceLock<Arc<LoadedModel>>> = Arc::default();
        let depth = Arc::new(AtomicUsize::new(0));
        let (slot, counter, worker_vocab) = (model.clone(), depth.clone(), vocab.clone());
        std::thread::Builder::new()
            .name("nsd-inference".into())
            .spawn(move || {
                while let Some(Queued { job, reply }) = rx.blocking_recv() {
                    let out = match slot.get() {
                        Some(m) => generate(&m.bundle, &worker_vocab, &job.background, &job.layout, job.latent_seed)
                            .map_err(|e| ApiError::internal(e.to_string())),
                        None => Err(ApiError::not_ready()),
                    };
                    counter.fetch_sub(1, Ordering::SeqCst);
                    let _ = reply.send(out);
                }
            })
            .expect("spawning the inference thread");
        Self { model, load_error: Mutex::new(None), tx, depth, capacity, vocab }
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn install(&self, model: LoadedModel) -> Result<(), String> {
        self.model.set(Arc::new(model)).map_err(|_| "a model is already installed".to_string())
    }

    pub fn fail(&self, message: String) {
        *self.load_error.lock().unwrap() = Some(message);
    }

    pub fn load_error(&self) -> Option<String> {
        self.load_error.lock().unwrap().clone()
    }

    pub fn model(&self) -> Option<&Arc<LoadedModel>> {
        self.model.get()
    }

    pub fn queue_depth(&self) -> usize {
        self.depth.load(Ordering::SeqCst)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Enqueues `job` and waits for its result. A full queue is refused
    /// immediately.
    pub async fn submit(&self, job: Job) -> Result<RgbPlanes, ApiError> {
        if self.model.get().is_none() {
            return Err(ApiError::not_ready());
        }
        let (reply, rx) = oneshot::channel();
        self.depth.fetch_add(1, Ordering::SeqCst);
        if self.tx.try_send(Queued { job, reply }).is_err() {
            self.depth.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::queue_full());
        }
        rx.await.map_err(|_| ApiError::internal("the inference worker stopped"))?
    }
}
