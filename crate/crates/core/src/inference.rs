//! Single-image generation from a loaded generator checkpoint.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use nsd_layout::{
    encode_layout, parse_layout, BoxGeom, ClassVocabulary, Geometry, LayoutDocument, ObjectSpec, PointGeom, SizeStats,
    SizeStrategy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imaging::{layout_tensor, letterbox, Letterbox, RgbPlanes};
use crate::nn::Mode;
use crate::training::GeneratorBundle;

/// `1 x dim` standard-normal latent determined by `seed`.
pub fn latent_from_seed(seed: u64, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (1, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Letterboxes an arbitrary background onto the generator's square canvas.
pub fn prepare_background(img: &RgbImage, size: usize) -> (RgbPlanes, Letterbox) {
    let (canvas, tf) = letterbox(img, size as u32);
    (RgbPlanes::from_rgb(&canvas), tf)
}

/// Expresses a layout document in canvas coordinates. Documents drawn on
/// the canvas pass through; documents drawn on the source image are mapped
/// through the letterbox transform.
pub fn map_document(doc: &LayoutDocument, tf: &Letterbox) -> Result<LayoutDocument> {
    let size = tf.size as usize;
    if (doc.width, doc.height) == (size, size) {
        return Ok(doc.clone());
    }
    if (doc.width, doc.height) != (tf.source_width as usize, tf.source_height as usize) {
        return Err(Error::Shape(format!(
            "layout canvas {}x{} matches neither the background ({}x{}) nor the model canvas ({size}x{size})",
            doc.width, doc.height, tf.source_width, tf.source_height
        )));
    }
    let objects = doc
        .objects
        .iter()
        .map(|o| {
            let geometry = match o.geometry {
                Geometry::Box(b) => {
                    let (x0, y0) = tf.to_canvas(b.x0 as f64, b.y0 as f64);
                    let (x1, y1) = tf.to_canvas(b.x1 as f64, b.y1 as f64);
                    let (x0, y0) = (x0.floor() as i32, y0.floor() as i32);
                    Geometry::Box(BoxGeom::new(x0, y0, (x1.ceil() as i32).max(x0 + 1), (y1.ceil() as i32).max(y0 + 1)))
                }
                Geometry::Point(p) => {
                    let (cx, cy) = tf.to_canvas(p.cx + 0.5, p.cy + 0.5);
                    let hi = size as f64 - 1.0;
                    Geometry::Point(PointGeom {
                        cx: (cx - 0.5).clamp(0.0, hi),
                        cy: (cy - 0.5).clamp(0.0, hi),
                        size: p.size * tf.scale * tf.scale,
                    })
                }
            };
            ObjectSpec { class_id: o.class_id, geometry }
        })
        .collect();
    Ok(LayoutDocument::new(doc.mode, size, size, objects))
}

/// Parses a layout document drawn either on the model canvas or on the
/// source background and returns it in canvas coordinates. Class default
/// sizes are canvas quantities, so they are converted to source units
/// before filling omitted point sizes.
pub fn resolve_layout(
    text: &str,
    vocab: &ClassVocabulary,
    defaults: Option<(&SizeStats, SizeStrategy)>,
    tf: &Letterbox,
) -> Result<LayoutDocument> {
    let canvas = serde_json::from_str::<serde_json::Value>(text).ok().and_then(|v| {
        let c = v.get("canvas")?;
        Some((c.get("width")?.as_u64()?, c.get("height")?.as_u64()?))
    });
    let on_source = canvas == Some((tf.source_width as u64, tf.source_height as u64))
        && canvas != Some((tf.size as u64, tf.size as u64));
    let scaled;
    let defaults = match defaults {
        Some((stats, strategy)) if on_source => {
            scaled = stats.rescaled(1.0 / (tf.scale * tf.scale));
            Some((&scaled, strategy))
        }
        other => other,
    };
    let doc = parse_layout(text, vocab, defaults)?;
    map_document(&doc, tf)
}

/// Runs the generator in inference mode on one background and layout.
pub fn generate(
    bundle: &GeneratorBundle,
    vocab: &ClassVocabulary,
    background: &RgbPlanes,
    doc: &LayoutDocument,
    latent_seed: u64,
) -> Result<RgbPlanes> {
    let cfg = bundle.generator.config();
    let size = cfg.image_size();
    if (background.width, background.height) != (size, size) {
        return Err(Error::Shape(format!(
            "background is {}x{}, the model expects {size}x{size}",
            background.width, background.height
        )));
    }
    if vocab.len() != cfg.num_classes {
        return Err(Error::Config(format!(
            "vocabulary has {} classes, the model expects {}",
            vocab.len(),
            cfg.num_classes
        )));
    }
    let dtype = bundle.store.dtype();
    let layout = encode_layout(&doc.objects, doc.mode, size, size, vocab)?;
    let l = layout_tensor(&layout, dtype)?.unsqueeze(0)?;
    let x = background.to_tensor(dtype)?.unsqueeze(0)?;
    let z = latent_from_seed(latent_seed, cfg.latent_dim, dtype)?;
    let y = bundle.generator.forward(&x, &l, &z, Mode::Eval)?;
    RgbPlanes::from_tensor(&y)
}
