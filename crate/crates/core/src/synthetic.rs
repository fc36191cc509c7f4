//! Procedurally generated rooms for smoke tests, demos and fixtures: in-memory
//! training pairs and miniature Structured3D trees on disk.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nsd_layout::{BoxGeom, ClassVocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::datapipe::{Annotation, PairDataset, RoomType, NYU40_COLORS};
use crate::error::{Error, Result};
use crate::imaging::RgbPlanes;

/// NYU-40 label painted behind every object in fixture renders (wall).
pub const WALL_LABEL: u16 = 1;

/// Empty room: wall above a floor line, tinted by `tint`.
pub fn empty_room(width: u32, height: u32, tint: [u8; 3]) -> RgbImage {
    let horizon = height * 2 / 3;
    RgbImage::from_fn(width, height, |x, y| {
        let shade = (y * 40 / height.max(1)) as u8;
        let base = if y < horizon { [200u8, 196, 188] } else { [120, 96, 72] };
        let ripple = ((x / 8) % 2) as u8 * 6;
        Rgb(std::array::from_fn(|c| {
            (base[c] as u16 / 2 + tint[c] as u16 / 2).saturating_sub(shade as u16).saturating_add(ripple as u16) as u8
        }))
    })
}

/// `n` square pairs of side `size`, each with two to four solid boxes in
/// class colours painted over an empty room.
pub fn synthetic_pairs(n: usize, size: usize, vocab: &ClassVocabulary, seed: u64) -> Result<PairDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as i32;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let tint = [rng.random(), rng.random(), rng.random()];
        let empty = empty_room(size as u32, size as u32, tint);
        let mut full = empty.clone();
        let count = rng.random_range(2..=4);
        let mut annotations = Vec::with_capacity(count);
        for _ in 0..count {
            let class_id = rng.random_range(0..vocab.len());
            let w = rng.random_range(s / 6..=s / 3);
            let h = rng.random_range(s / 6..=s / 3);
            let x0 = rng.random_range(0..s - w);
            let y0 = rng.random_range(0..s - h);
            let bbox = BoxGeom::new(x0, y0, x0 + w, y0 + h);
            let color = vocab.color(class_id).unwrap_or([255, 255, 255]);
            for y in bbox.y0..bbox.y1 {
                for x in bbox.x0..bbox.x1 {
                    full.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
            annotations.push(Annotation {
                class_id,
                bbox,
                centroid: (x0 as f64 + (w - 1) as f64 / 2.0, y0 as f64 + (h - 1) as f64 / 2.0),
                mask_area: (w * h) as u64,
            });
        }
        pairs.push((RgbPlanes::from_rgb(&empty), RgbPlanes::from_rgb(&full), annotations));
    }
    PairDataset::from_pairs(size, pairs)
}

/// One rectangular object in a fixture render, in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureObject {
    pub label: u16,
    pub instance: u16,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl FixtureObject {
    pub fn new(label: u16, instance: u16, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { label, instance, x0, y0, x1, y1 }
    }
}

/// Aligned empty, furnished, semantic and instance renders of one view.
pub struct FixtureView {
    pub empty: RgbImage,
    pub full: RgbImage,
    pub semantic: RgbImage,
    pub instance: ImageBuffer<Luma<u16>, Vec<u16>>,
}

pub fn render_view(width: u32, height: u32, objects: &[FixtureObject]) -> Result<FixtureView> {
    let empty = empty_room(width, height, [128, 128, 128]);
    let mut full = empty.clone();
    let mut semantic = RgbImage::from_pixel(width, height, Rgb(NYU40_COLORS[WALL_LABEL as usize]));
    let mut instance = ImageBuffer::from_pixel(width, height, Luma([0u16]));
    for o in objects {
        let color = *NYU40_COLORS
            .get(o.label as usize)
            .ok_or_else(|| Error::Config(format!("label {} is not an NYU-40 id", o.label)))?;
        if o.x1 > width || o.y1 > height || o.x0 >= o.x1 || o.y0 >= o.y1 {
            return Err(Error::Config(format!("object {o:?} does not fit a {width}x{height} view")));
        }
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                full.put_pixel(x, y, Rgb(color));
                semantic.put_pixel(x, y, Rgb(color));
                instance.put_pixel(x, y, Luma([o.instance]));
            }
        }
    }
    Ok(FixtureView { empty, full, semantic, instance })
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes one scene of a Structured3D-shaped tree: a single room of
/// `room_type` with id `room_id` and one perspective position per entry of
/// `views`.
pub fn write_structured3d_scene(
    root: &Path,
    scene_id: u32,
    room_id: u32,
    room_type: RoomType,
    size: (u32, u32),
    views: &[Vec<FixtureObject>],
) -> Result<()> {
    let scene = root.join(format!("scene_{scene_id:05}"));
    fs::create_dir_all(&scene).map_err(|e| Error::io(&scene, e))?;
    let label = match room_type {
        RoomType::Bedroom => "bedroom",
        RoomType::LivingRoom => "living room",
    };
    let ann = json!({ "semantics": [{ "ID": room_id, "type": label }] });
    let ann_path = scene.join("annotation_3d.json");
    fs::write(&ann_path, serde_json::to_vec_pretty(&ann)?).map_err(|e| Error::io(&ann_path, e))?;
    let persp = scene.join("2D_rendering").join(room_id.to_string()).join("perspective");
    for (position, objects) in views.iter().enumerate() {
        let v = render_view(size.0, size.1, objects)?;
        let full = persp.join("full").join(position.to_string());
        save(&v.full, &full.join("rgb_rawlight.png"))?;
        save(&v.semantic, &full.join("semantic.png"))?;
        save(&v.instance, &full.join("instance.png"))?;
        save(&v.empty, &persp.join("empty").join(position.to_string()).join("rgb_rawlight.png"))?;
    }
    Ok(())
}

/// Four furniture objects that all fall inside the left 256 columns once a
/// 1280x720 render is resized to 456x256.
pub fn left_furnished_view() -> Vec<FixtureObject> {
    vec![
        FixtureObject::new(4, 1, 40, 380, 300, 600),
        FixtureObject::new(6, 2, 320, 420, 560, 620),
        FixtureObject::new(11, 3, 60, 100, 200, 220),
        FixtureObject::new(35, 4, 500, 200, 600, 400),
    ]
}
