//! NYU-40 semantic labels and per-instance object extraction.

use std::collections::BTreeMap;

use image::RgbImage;
use nsd_layout::{BoxGeom, ClassVocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NYU-40 label names, indexed by label id (0 = unlabelled).
pub const NYU40_NAMES: [&str; 41] = [
    "unlabeled", "wall", "floor", "cabinet", "bed", "chair", "sofa", "table", "door", "window",
    "bookshelf", "picture", "counter", "blinds", "desk", "shelves", "curtain", "dresser", "pillow",
    "mirror", "floor mat", "clothes", "ceiling", "books", "refrigerator", "television", "paper",
    "towel", "shower curtain", "box", "whiteboard", "person", "night stand", "toilet", "sink",
    "lamp", "bathtub", "bag", "otherstructure", "otherfurniture", "otherprop",
];

/// Colours used by Structured3D's `semantic.png` renders, indexed by
/// NYU-40 label id.
pub const NYU40_COLORS: [[u8; 3]; 41] = [
    [0, 0, 0], [174, 199, 232], [152, 223, 138], [31, 119, 180], [255, 187, 120], [188, 189, 34],
    [140, 86, 75], [255, 152, 150], [214, 39, 40], [197, 176, 213], [148, 103, 189],
    [196, 156, 148], [23, 190, 207], [178, 76, 76], [247, 182, 210], [66, 188, 102],
    [219, 219, 141], [140, 57, 197], [202, 185, 52], [51, 176, 203], [200, 54, 131],
    [92, 193, 61], [78, 71, 183], [172, 114, 82], [255, 127, 14], [91, 163, 138],
    [153, 98, 156], [140, 153, 101], [158, 218, 229], [100, 125, 154], [178, 127, 135],
    [120, 185, 128], [146, 111, 194], [44, 160, 44], [112, 128, 144], [96, 207, 209],
    [227, 119, 194], [213, 92, 176], [94, 106, 211], [82, 84, 163], [100, 85, 144],
];

/// Structural classes present in both empty and furnished renders.
pub const BACKGROUND_LABELS: [u16; 5] = [1, 2, 8, 9, 22];

/// Maps an NYU-40 label to a vocabulary channel; background and classes
/// outside the vocabulary map to `None`.
pub fn nyu40_to_class(label: u16, vocab: &ClassVocabulary) -> Option<usize> {
    if label == 0 || BACKGROUND_LABELS.contains(&label) {
        return None;
    }
    let name = NYU40_NAMES.get(label as usize)?;
    let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect();
    vocab.index_of(name).or_else(|| vocab.index_of(&compact))
}

/// Per-pixel NYU-40 label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!("label map needs {} entries, got {}", width * height, labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    /// Decodes a colour-coded semantic render. Unknown colours become 0.
    pub fn from_color_render(img: &RgbImage) -> Self {
        let lookup: BTreeMap<[u8; 3], u16> =
            NYU40_COLORS.iter().enumerate().skip(1).map(|(i, c)| (*c, i as u16)).collect();
        let labels = img.pixels().map(|p| lookup.get(&p.0).copied().unwrap_or(0)).collect();
        Self { width: img.width() as usize, height: img.height() as usize, labels }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }
}

/// Per-pixel instance ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

impl InstanceMap {
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!("instance map needs {} entries, got {}", width * height, ids.len())));
        }
        Ok(Self { width, height, ids })
    }

    pub fn from_image(img: &image::DynamicImage) -> Self {
        let l = img.to_luma16();
        Self { width: l.width() as usize, height: l.height() as usize, ids: l.pixels().map(|p| p.0[0] as u32).collect() }
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }
}

/// One foreground object found in a render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BoxGeom,
    /// Mean pixel-centre position of the mask.
    pub centroid: (f64, f64),
    pub mask_area: u64,
}

/// Groups foreground pixels by `(instance id, class)` and summarises each
/// group. Background and out-of-vocabulary labels are ignored. Output is
/// ordered by instance id, then class.
pub fn extract_objects_from_semantics(
    semantic: &LabelMap,
    instance: &InstanceMap,
    vocab: &ClassVocabulary,
) -> Result<Vec<Annotation>> {
    if (semantic.width, semantic.height) != (instance.width, instance.height) {
        return Err(Error::Alignment(format!(
            "semantic map is {}x{} but instance map is {}x{}",
            semantic.width, semantic.height, instance.width, instance.height
        )));
    }
    struct Acc {
        min_x: usize,
        min_y: usize,
        max_x: usize,
        max_y: usize,
        sum_x: f64,
        sum_y: f64,
        count: u64,
    }
    let class_of: Vec<Option<usize>> = (0..NYU40_NAMES.len() as u16).map(|l| nyu40_to_class(l, vocab)).collect();
    let mut groups: BTreeMap<(u32, usize), Acc> = BTreeMap::new();
    for y in 0..semantic.height {
        for x in 0..semantic.width {
            let Some(class) = class_of.get(semantic.get(x, y) as usize).copied().flatten() else {
                continue;
            };
            let acc = groups.entry((instance.get(x, y), class)).or_insert(Acc {
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
                sum_x: 0.0,
                sum_y: 0.0,
                count: 0,
            });
            acc.min_x = acc.min_x.min(x);
            acc.min_y = acc.min_y.min(y);
            acc.max_x = acc.max_x.max(x);
            acc.max_y = acc.max_y.max(y);
            acc.sum_x += x as f64;
            acc.sum_y += y as f64;
            acc.count += 1;
        }
    }
    Ok(groups
        .into_iter()
        .filter_map(|((inst, class), a)| {
            if a.count == 0 {
                log::debug!("skipping empty instance {inst}");
                return None;
            }
            Some(Annotation {
                class_id: class,
                bbox: BoxGeom::new(a.min_x as i32, a.min_y as i32, a.max_x as i32 + 1, a.max_y as i32 + 1),
                centroid: (a.sum_x / a.count as f64, a.sum_y / a.count as f64),
                mask_area: a.count,
            })
        })
        .collect())
}
