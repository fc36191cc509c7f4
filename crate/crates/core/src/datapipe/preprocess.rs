use image::RgbImage;
use nsd_layout::ClassVocabulary;
use serde::{Deserialize, Serialize};

use super::semantics::{extract_objects_from_semantics, nyu40_to_class, Annotation, InstanceMap, LabelMap};
use super::RoomType;
use crate::error::{Error, Result};
use crate::imaging::{resize_rgb, RgbPlanes};

/// How the retention threshold is measured for a crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionRule {
    /// Fraction of all foreground pixels of the resized image inside the crop.
    #[default]
    Union,
    /// Every object touching the crop keeps at least the threshold of its pixels.
    PerObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub resized_width: u32,
    pub resized_height: u32,
    pub crop_size: u32,
    pub min_retention: f64,
    pub min_objects: usize,
    pub retention_rule: RetentionRule,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resized_width: 456,
            resized_height: 256,
            crop_size: 256,
            min_retention: 0.6,
            min_objects: 4,
            retention_rule: RetentionRule::Union,
        }
    }
}

/// One aligned source render: empty room, furnished room and its masks.
#[derive(Debug, Clone)]
pub struct SourceScene {
    pub scene_id: u32,
    pub room_id: String,
    pub position: String,
    pub room_type: RoomType,
    pub empty: RgbImage,
    pub decorated: RgbImage,
    pub semantic: LabelMap,
    pub instance: InstanceMap,
}

/// Square training pair cut from a source render.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: u32,
    pub room_id: String,
    pub position: String,
    pub room_type: RoomType,
    pub crop_x: u32,
    pub empty: RgbPlanes,
    pub decorated: RgbPlanes,
    /// Annotations in crop coordinates.
    pub objects: Vec<Annotation>,
}

fn resize_labels<T: Copy>(src: &[T], w: usize, h: usize, nw: usize, nh: usize) -> Vec<T> {
    // Nearest neighbour on pixel centres.
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let sy = (((y as f64 + 0.5) * h as f64 / nh as f64) as usize).min(h - 1);
        for x in 0..nw {
            let sx = (((x as f64 + 0.5) * w as f64 / nw as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

fn crop_labels<T: Copy>(src: &[T], w: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Vec<T> {
    (y0..y0 + ch).flat_map(|y| src[y * w + x0..y * w + x0 + cw].iter().copied()).collect()
}

/// Per-object column histograms of the rows `rows`, and per-object totals
/// over the whole resized image.
struct Coverage {
    columns: Vec<Vec<u64>>,
    totals: Vec<u64>,
}

impl Coverage {
    fn new(semantic: &LabelMap, instance: &InstanceMap, vocab: &ClassVocabulary, rows: std::ops::Range<usize>) -> Self {
        let mut keys: Vec<(u32, usize)> = Vec::new();
        let mut columns: Vec<Vec<u64>> = Vec::new();
        let mut totals: Vec<u64> = Vec::new();
        let class_of: Vec<Option<usize>> = (0..=40).map(|l| nyu40_to_class(l, vocab)).collect();
        for y in 0..semantic.height {
            for x in 0..semantic.width {
                let Some(class) = class_of.get(semantic.get(x, y) as usize).copied().flatten() else {
                    continue;
                };
                let key = (instance.get(x, y), class);
                let idx = match keys.iter().position(|k| *k == key) {
                    Some(i) => i,
                    None => {
                        keys.push(key);
                        columns.push(vec![0; semantic.width]);
                        totals.push(0);
                        keys.len() - 1
                    }
                };
                totals[idx] += 1;
                if rows.contains(&y) {
                    columns[idx][x] += 1;
                }
            }
        }
        Self { columns, totals }
    }

    fn inside(&self, obj: usize, x0: usize, width: usize) -> u64 {
        self.columns[obj][x0..x0 + width].iter().sum()
    }

    fn qualifies(&self, x0: usize, width: usize, cfg: &PreprocessConfig) -> bool {
        let inside: Vec<u64> = (0..self.columns.len()).map(|i| self.inside(i, x0, width)).collect();
        let present = inside.iter().filter(|&&n| n > 0).count();
        if present < cfg.min_objects {
            return false;
        }
        match cfg.retention_rule {
            RetentionRule::Union => {
                let total: u64 = self.totals.iter().sum();
                let kept: u64 = inside.iter().sum();
                kept as f64 >= cfg.min_retention * total as f64
            }
            RetentionRule::PerObject => inside
                .iter()
                .zip(&self.totals)
                .all(|(&n, &t)| n == 0 || n as f64 >= cfg.min_retention * t as f64),
        }
    }
}

/// Resizes an aligned render, then cuts up to two square crops: the
/// leftmost and rightmost offsets that satisfy the retention and
/// object-count rules.
pub fn preprocess_scene(source: &SourceScene, vocab: &ClassVocabulary, cfg: &PreprocessConfig) -> Result<Vec<ScenePair>> {
    let dims = source.empty.dimensions();
    let others = [
        ("decorated", source.decorated.dimensions()),
        ("semantic", (source.semantic.width as u32, source.semantic.height as u32)),
        ("instance", (source.instance.width as u32, source.instance.height as u32)),
    ];
    for (name, d) in others {
        if d != dims {
            return Err(Error::Alignment(format!(
                "{} scene {} room {} position {}: {name} is {}x{} but empty render is {}x{}",
                source.room_type, source.scene_id, source.room_id, source.position, d.0, d.1, dims.0, dims.1
            )));
        }
    }
    let (rw, rh) = (cfg.resized_width as usize, cfg.resized_height as usize);
    let c = cfg.crop_size as usize;
    if c > rw || c > rh {
        return Err(Error::Config(format!("crop {c} does not fit the resized {rw}x{rh} frame")));
    }
    let (sw, sh) = (dims.0 as usize, dims.1 as usize);
    let semantic = LabelMap::new(rw, rh, resize_labels(&source.semantic.labels, sw, sh, rw, rh))?;
    let instance = InstanceMap::new(rw, rh, resize_labels(&source.instance.ids, sw, sh, rw, rh))?;
    let y0 = (rh - c) / 2;
    let coverage = Coverage::new(&semantic, &instance, vocab, y0..y0 + c);

    let valid: Vec<usize> = (0..=rw - c).filter(|&x| coverage.qualifies(x, c, cfg)).collect();
    let mut offsets: Vec<usize> = valid.first().into_iter().chain(valid.last()).copied().collect();
    offsets.dedup();
    if offsets.is_empty() {
        return Ok(Vec::new());
    }

    let empty = RgbPlanes::from_rgb(&resize_rgb_exact(&source.empty, rw, rh));
    let decorated = RgbPlanes::from_rgb(&resize_rgb_exact(&source.decorated, rw, rh));
    offsets
        .into_iter()
        .map(|x0| {
            let sem = LabelMap::new(c, c, crop_labels(&semantic.labels, rw, x0, y0, c, c))?;
            let inst = InstanceMap::new(c, c, crop_labels(&instance.ids, rw, x0, y0, c, c))?;
            Ok(ScenePair {
                scene_id: source.scene_id,
                room_id: source.room_id.clone(),
                position: source.position.clone(),
                room_type: source.room_type,
                crop_x: x0 as u32,
                empty: empty.crop(x0, y0, c, c)?,
                decorated: decorated.crop(x0, y0, c, c)?,
                objects: extract_objects_from_semantics(&sem, &inst, vocab)?,
            })
        })
        .collect()
}

fn resize_rgb_exact(img: &RgbImage, w: usize, h: usize) -> RgbImage {
    if img.dimensions() == (w as u32, h as u32) {
        img.clone()
    } else {
        resize_rgb(img, w as u32, h as u32)
    }
}

/// Nearest-neighbour resize used for label maps, exposed for validators.
pub fn resize_label_map(map: &LabelMap, width: usize, height: usize) -> LabelMap {
    LabelMap { width, height, labels: resize_labels(&map.labels, map.width, map.height, width, height) }
}

pub fn resize_instance_map(map: &InstanceMap, width: usize, height: usize) -> InstanceMap {
    InstanceMap { width, height, ids: resize_labels(&map.ids, map.width, map.height, width, height) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_resize_is_identity_at_same_size() {
        let src: Vec<u16> = (0..12).collect();
        assert_eq!(resize_labels(&src, 4, 3, 4, 3), src);
        assert_eq!(resize_labels(&src, 4, 3, 2, 1), vec![5, 7]);
    }

    #[test]
    fn crop_labels_window() {
        let src: Vec<u16> = (0..12).collect();
        assert_eq!(crop_labels(&src, 4, 1, 1, 2, 2), vec![5, 6, 9, 10]);
    }
}
