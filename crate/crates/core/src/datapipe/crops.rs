//! Preprocessed crop files, their JSON-lines manifest and the in-memory
//! training set built from it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use nsd_layout::{
    encode_layout, ground_truth_size, BoxGeom, ClassVocabulary, LayoutMode, ObjectSpec, SizeStats, SizeStrategy,
};
use serde::{Deserialize, Serialize};

use super::preprocess::ScenePair;
use super::semantics::Annotation;
use super::structured3d::SourceRecord;
use super::{RoomType, Split};
use crate::error::{Error, Result};
use crate::imaging::{layout_tensor, load_rgb, resize_rgb, save_rgb, RgbPlanes};

pub const CROP_RECORD_VERSION: u32 = 1;

/// One line of the crop manifest. Image paths are relative to the manifest's
/// directory; source paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub version: u32,
    pub id: String,
    pub scene_id: u32,
    pub room_id: String,
    pub position: String,
    pub room_type: RoomType,
    pub split: Split,
    pub crop_x: u32,
    pub crop_size: u32,
    pub source_root: PathBuf,
    pub source_empty: PathBuf,
    pub source_full: PathBuf,
    pub source_semantic: PathBuf,
    pub source_instance: PathBuf,
    pub empty_image: PathBuf,
    pub decorated_image: PathBuf,
    pub annotations: Vec<Annotation>,
}

/// Writes a pair's two crops as PNG under `out_dir/crops` and returns its
/// manifest record.
pub fn write_crop(out_dir: &Path, root: &Path, source: &SourceRecord, pair: &ScenePair) -> Result<CropRecord> {
    let id = format!("{:05}_{}_{}_x{:03}", pair.scene_id, pair.room_id, pair.position, pair.crop_x);
    let crops = out_dir.join("crops");
    fs::create_dir_all(&crops).map_err(|e| Error::io(&crops, e))?;
    let empty_rel = PathBuf::from("crops").join(format!("{id}_empty.png"));
    let full_rel = PathBuf::from("crops").join(format!("{id}_full.png"));
    save_rgb(&pair.empty.to_rgb(), &out_dir.join(&empty_rel))?;
    save_rgb(&pair.decorated.to_rgb(), &out_dir.join(&full_rel))?;
    Ok(CropRecord {
        version: CROP_RECORD_VERSION,
        id,
        scene_id: pair.scene_id,
        room_id: pair.room_id.clone(),
        position: pair.position.clone(),
        room_type: pair.room_type,
        split: source.split,
        crop_x: pair.crop_x,
        crop_size: pair.empty.width as u32,
        source_root: root.to_path_buf(),
        source_empty: source.empty_rgb.clone(),
        source_full: source.full_rgb.clone(),
        source_semantic: source.semantic.clone(),
        source_instance: source.instance.clone(),
        empty_image: empty_rel,
        decorated_image: full_rel,
        annotations: pair.objects.clone(),
    })
}

pub fn write_crop_manifest(path: &Path, records: &[CropRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_crop_manifest(path: &Path) -> Result<Vec<CropRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: CropRecord = serde_json::from_str(line)
                .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.version != CROP_RECORD_VERSION {
                return Err(Error::Ingestion(format!(
                    "{}:{}: record version {} (expected {CROP_RECORD_VERSION})",
                    path.display(),
                    i + 1,
                    rec.version
                )));
            }
            Ok(rec)
        })
        .collect()
}

/// Label for one annotation in the requested mode.
pub fn annotation_spec(a: &Annotation, mode: LayoutMode, size: f64) -> ObjectSpec {
    match mode {
        LayoutMode::Box => ObjectSpec::boxed(a.class_id, a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1),
        LayoutMode::Point => ObjectSpec::point(a.class_id, a.centroid.0, a.centroid.1, size),
    }
}

/// Per-class `m * sqrt(A)` statistics over a set of annotations.
pub fn size_stats_from<'a>(
    annotations: impl IntoIterator<Item = &'a Annotation>,
    num_classes: usize,
    m: f64,
) -> Result<SizeStats> {
    let mut stats = SizeStats::new(num_classes, m);
    for a in annotations {
        stats.record_area(a.class_id, a.mask_area)?;
    }
    Ok(stats)
}

/// A mini-batch of `(X, Y, L)` triples.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub backgrounds: Tensor,
    pub images: Tensor,
    pub layouts: Tensor,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Sample {
    background: RgbPlanes,
    image: RgbPlanes,
    annotations: Vec<Annotation>,
}

/// Aligned pairs held in memory. Layouts are rasterised per batch.
#[derive(Debug, Clone)]
pub struct PairDataset {
    size: usize,
    samples: Vec<Sample>,
}

fn scale_annotation(a: &Annotation, f: f64) -> Annotation {
    Annotation {
        class_id: a.class_id,
        bbox: BoxGeom::new(
            (a.bbox.x0 as f64 * f).floor() as i32,
            (a.bbox.y0 as f64 * f).floor() as i32,
            ((a.bbox.x1 as f64 * f).ceil() as i32).max((a.bbox.x0 as f64 * f).floor() as i32 + 1),
            ((a.bbox.y1 as f64 * f).ceil() as i32).max((a.bbox.y0 as f64 * f).floor() as i32 + 1),
        ),
        centroid: ((a.centroid.0 + 0.5) * f - 0.5, (a.centroid.1 + 0.5) * f - 0.5),
        mask_area: ((a.mask_area as f64 * f * f).round() as u64).max(1),
    }
}

impl PairDataset {
    /// Builds a dataset from in-memory square pairs of side `size`.
    pub fn from_pairs(size: usize, pairs: Vec<(RgbPlanes, RgbPlanes, Vec<Annotation>)>) -> Result<Self> {
        let samples = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (background, image, annotations))| {
                for p in [&background, &image] {
                    if (p.width, p.height) != (size, size) {
                        return Err(Error::Shape(format!(
                            "pair {i} is {}x{}, expected {size}x{size}",
                            p.width, p.height
                        )));
                    }
                }
                Ok(Sample { background, image, annotations })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, samples })
    }

    /// Loads the crops of `split` listed in a manifest, resampled to
    /// `size x size`.
    pub fn load(manifest: &Path, split: Option<Split>, size: usize) -> Result<Self> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for rec in read_crop_manifest(manifest)? {
            if split.is_some_and(|s| s != rec.split) {
                continue;
            }
            let load = |rel: &Path| -> Result<RgbPlanes> {
                let img = load_rgb(&base.join(rel))?;
                let img = if img.dimensions() == (size as u32, size as u32) {
                    img
                } else {
                    resize_rgb(&img, size as u32, size as u32)
                };
                Ok(RgbPlanes::from_rgb(&img))
            };
            let f = size as f64 / rec.crop_size as f64;
            let annotations =
                if f == 1.0 { rec.annotations.clone() } else { rec.annotations.iter().map(|a| scale_annotation(a, f)).collect() };
            pairs.push((load(&rec.empty_image)?, load(&rec.decorated_image)?, annotations));
        }
        Self::from_pairs(size, pairs)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.samples.iter().flat_map(|s| s.annotations.iter())
    }

    pub fn background(&self, i: usize) -> &RgbPlanes {
        &self.samples[i].background
    }

    pub fn image(&self, i: usize) -> &RgbPlanes {
        &self.samples[i].image
    }

    /// Object labels of sample `i`. Point sizes come from the mask area for
    /// `SizeStrategy::Gt`, otherwise from the class statistics.
    pub fn objects(
        &self,
        i: usize,
        mode: LayoutMode,
        strategy: SizeStrategy,
        stats: &SizeStats,
    ) -> Result<Vec<ObjectSpec>> {
        self.samples[i]
            .annotations
            .iter()
            .map(|a| {
                let size = match (mode, strategy) {
                    (LayoutMode::Box, _) => 0.0,
                    (LayoutMode::Point, SizeStrategy::Gt) => ground_truth_size(a.mask_area, stats.multiplier())?,
                    (LayoutMode::Point, s) => nsd_layout::default_size(a.class_id, stats, s)?,
                };
                Ok(annotation_spec(a, mode, size))
            })
            .collect()
    }

    pub fn batch(
        &self,
        indices: &[usize],
        vocab: &ClassVocabulary,
        mode: LayoutMode,
        strategy: SizeStrategy,
        stats: &SizeStats,
        dtype: DType,
    ) -> Result<TrainBatch> {
        if indices.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut bgs = Vec::with_capacity(indices.len());
        let mut imgs = Vec::with_capacity(indices.len());
        let mut lays = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::Shape(format!("sample {i} out of range")))?;
            bgs.push(s.background.to_tensor(dtype)?);
            imgs.push(s.image.to_tensor(dtype)?);
            let objects = self.objects(i, mode, strategy, stats)?;
            let layout = encode_layout(&objects, mode, self.size, self.size, vocab)?;
            lays.push(layout_tensor(&layout, dtype)?);
        }
        Ok(TrainBatch {
            backgrounds: Tensor::stack(&bgs, 0)?,
            images: Tensor::stack(&imgs, 0)?,
            layouts: Tensor::stack(&lays, 0)?,
        })
    }
}
