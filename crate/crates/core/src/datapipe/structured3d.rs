//! Scanning a Structured3D tree for aligned empty/furnished perspective
//! renders.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::preprocess::SourceScene;
use super::semantics::{InstanceMap, LabelMap};
use super::{RoomType, Split};
use crate::error::{Error, Result};
use crate::imaging::load_rgb;

/// Scenes with an id below this belong to the training split.
pub const TRAIN_SCENE_LIMIT: u32 = 3000;

pub fn split_of(scene_id: u32) -> Split {
    if scene_id < TRAIN_SCENE_LIMIT {
        Split::Train
    } else {
        Split::Test
    }
}

/// Which split(s) a manifest covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSelector {
    Train,
    Test,
    All,
}

impl SplitSelector {
    pub fn admits(self, split: Split) -> bool {
        match self {
            SplitSelector::All => true,
            SplitSelector::Train => split == Split::Train,
            SplitSelector::Test => split == Split::Test,
        }
    }
}

/// One aligned render position. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub scene_id: u32,
    pub room_id: String,
    pub position: String,
    pub split: Split,
    pub empty_rgb: PathBuf,
    pub full_rgb: PathBuf,
    pub semantic: PathBuf,
    pub instance: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: PathBuf,
    pub room_type: RoomType,
    pub split: SplitSelector,
    pub records: Vec<SourceRecord>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads the images of one record.
    pub fn load_source(&self, record: &SourceRecord) -> Result<SourceScene> {
        let p = |rel: &Path| self.root.join(rel);
        let semantic = LabelMap::from_color_render(&load_rgb(&p(&record.semantic))?);
        let inst_path = p(&record.instance);
        let instance = InstanceMap::from_image(
            &image::open(&inst_path).map_err(|source| Error::Image { path: inst_path, source })?,
        );
        Ok(SourceScene {
            scene_id: record.scene_id,
            room_id: record.room_id.clone(),
            position: record.position.clone(),
            room_type: self.room_type,
            empty: load_rgb(&p(&record.empty_rgb))?,
            decorated: load_rgb(&p(&record.full_rgb))?,
            semantic,
            instance,
        })
    }
}

#[derive(Deserialize)]
struct Annotation3d {
    #[serde(default)]
    semantics: Vec<SemanticEntry>,
}

#[derive(Deserialize)]
struct SemanticEntry {
    #[serde(rename = "ID")]
    id: i64,
    #[serde(rename = "type")]
    kind: String,
}

fn scene_id_of(name: &str) -> Option<u32> {
    name.strip_prefix("scene_")?.parse().ok()
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Lists every aligned perspective render of `room_type` in the requested
/// split, sorted by scene, room and position. Absent files are reported
/// together in one error.
pub fn make_manifest(root: &Path, room_type: RoomType, split: SplitSelector) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingPaths(vec![root.to_path_buf()]));
    }
    let mut scenes: Vec<(u32, String)> =
        sorted_subdirs(root)?.into_iter().filter_map(|n| scene_id_of(&n).map(|id| (id, n))).collect();
    scenes.sort();

    let mut missing = Vec::new();
    let mut records = Vec::new();
    for (scene_id, dir_name) in scenes {
        let scene_split = split_of(scene_id);
        if !split.admits(scene_split) {
            continue;
        }
        let scene_dir = PathBuf::from(&dir_name);
        let ann_path = root.join(&scene_dir).join("annotation_3d.json");
        let Ok(text) = fs::read_to_string(&ann_path) else {
            missing.push(ann_path);
            continue;
        };
        let ann: Annotation3d = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", ann_path.display())))?;
        let rooms: BTreeSet<i64> =
            ann.semantics.iter().filter(|s| room_type.matches(&s.kind)).map(|s| s.id).collect();
        for room in rooms {
            let room_id = room.to_string();
            let persp = scene_dir.join("2D_rendering").join(&room_id).join("perspective");
            let full_dir = root.join(&persp).join("full");
            if !full_dir.is_dir() {
                missing.push(full_dir);
                continue;
            }
            for position in sorted_subdirs(&full_dir)? {
                let full = persp.join("full").join(&position);
                let empty = persp.join("empty").join(&position);
                let rec = SourceRecord {
                    scene_id,
                    room_id: room_id.clone(),
                    position: position.clone(),
                    split: scene_split,
                    empty_rgb: empty.join("rgb_rawlight.png"),
                    full_rgb: full.join("rgb_rawlight.png"),
                    semantic: full.join("semantic.png"),
                    instance: full.join("instance.png"),
                };
                let absent: Vec<PathBuf> = [&rec.empty_rgb, &rec.full_rgb, &rec.semantic, &rec.instance]
                    .into_iter()
                    .map(|p| root.join(p))
                    .filter(|p| !p.is_file())
                    .collect();
                if absent.is_empty() {
                    records.push(rec);
                } else {
                    missing.extend(absent);
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPaths(missing));
    }
    if records.is_empty() {
        log::warn!("no {room_type} renders found under {}", root.display());
    }
    Ok(DatasetManifest { version: 1, root: root.to_path_buf(), room_type, split, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_threshold() {
        assert_eq!(split_of(0), Split::Train);
        assert_eq!(split_of(2999), Split::Train);
        assert_eq!(split_of(3000), Split::Test);
    }

    #[test]
    fn scene_names() {
        assert_eq!(scene_id_of("scene_03001"), Some(3001));
        assert_eq!(scene_id_of("scene_x"), None);
        assert_eq!(scene_id_of("other"), None);
    }

    #[test]
    fn missing_root() {
        let err = make_manifest(Path::new("/nonexistent/s3d"), RoomType::Bedroom, SplitSelector::All).unwrap_err();
        assert!(matches!(err, Error::MissingPaths(p) if p.len() == 1));
    }
}
