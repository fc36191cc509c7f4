//! Structured3D ingestion, crop extraction and paired augmentation.

mod augment;
mod crops;
mod preprocess;
mod semantics;
mod structured3d;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{apply_transform, augment_batch, augment_pair, AugmentPolicy};
pub use crops::{
    annotation_spec, read_crop_manifest, size_stats_from, write_crop, write_crop_manifest, CropRecord, PairDataset,
    TrainBatch, CROP_RECORD_VERSION,
};
pub use preprocess::{
    preprocess_scene, resize_instance_map, resize_label_map, PreprocessConfig, RetentionRule, ScenePair, SourceScene,
};
pub use semantics::{
    extract_objects_from_semantics, nyu40_to_class, Annotation, InstanceMap, LabelMap, BACKGROUND_LABELS,
    NYU40_COLORS, NYU40_NAMES,
};
pub use structured3d::{make_manifest, split_of, DatasetManifest, SourceRecord, SplitSelector, TRAIN_SCENE_LIMIT};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomType {
    Bedroom,
    LivingRoom,
}

impl RoomType {
    pub fn as_str(self) -> &'static str {
        match self {
            RoomType::Bedroom => "bedroom",
            RoomType::LivingRoom => "living_room",
        }
    }

    /// Whether a Structured3D room label (e.g. `"living room"`) is this type.
    pub fn matches(self, label: &str) -> bool {
        label.trim().to_ascii_lowercase().replace([' ', '-'], "_") == self.as_str()
    }
}

impl fmt::Display for RoomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoomType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "bedroom" => Ok(RoomType::Bedroom),
            "living_room" => Ok(RoomType::LivingRoom),
            other => Err(Error::Config(format!("unknown room type {other:?}; expected bedroom or living_room"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn room_type_labels() {
        assert!(RoomType::LivingRoom.matches("living room"));
        assert!(RoomType::Bedroom.matches("Bedroom"));
        assert!(!RoomType::Bedroom.matches("kitchen"));
        assert_eq!("living_room".parse::<RoomType>().unwrap(), RoomType::LivingRoom);
        assert!("garage".parse::<RoomType>().is_err());
    }
}
