use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

/// Exponential moving average of the generator weights, held as a second
/// generator over its own parameter store.
#[derive(Debug)]
pub struct EmaState {
    pub decay: f64,
    store: ParamStore,
    generator: Generator,
}

impl EmaState {
    /// Shadow initialised to a copy of `live`.
    pub fn new(config: &GeneratorConfig, live: &ParamStore, decay: f64) -> Result<Self> {
        let mut store = ParamStore::new(live.dtype(), 0);
        let generator = Generator::new(config, &mut store)?;
        store.copy_from(live)?;
        Ok(Self { decay, store, generator })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn update(&self, live: &ParamStore) -> Result<()> {
        ema_update(&self.store, live, self.decay)
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live` for trainable entries;
/// buffers are copied from `live`.
pub fn ema_update(shadow: &ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    for (name, var, kind) in shadow.iter() {
        let src = live.get(name).ok_or_else(|| Error::Checkpoint(format!("live model lacks '{name}'")))?;
        if src.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "'{name}' has shape {:?} in the live model but {:?} in the average",
                src.dims(),
                var.dims()
            )));
        }
        let next = match kind {
            crate::nn::ParamKind::Weight => {
                (var.as_tensor().affine(decay, 0.0)? + src.as_tensor().affine(1.0 - decay, 0.0)?)?
            }
            crate::nn::ParamKind::Buffer => src.as_tensor().copy()?,
        };
        var.set(&next)?;
    }
    Ok(())
}
