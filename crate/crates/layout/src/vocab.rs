use serde::{Deserialize, Serialize};

use crate::error::LayoutError;

/// Foreground classes decorated by the default model, in channel order.
pub const DEFAULT_CLASSES: [&str; 12] = [
    "cabinet",
    "picture",
    "bed",
    "curtain",
    "chair",
    "television",
    "sofa",
    "nightstand",
    "table",
    "lamp",
    "desk",
    "pillow",
];

/// Display colours for the default classes. These are the NYU-40 label
/// colours used by the Structured3D semantic renders, so overlays match the
/// dataset's own visualisations.
pub const DEFAULT_PALETTE: [[u8; 3]; 12] = [
    [31, 119, 180],
    [196, 156, 148],
    [255, 187, 120],
    [219, 219, 141],
    [188, 189, 34],
    [91, 163, 138],
    [140, 86, 75],
    [146, 111, 194],
    [255, 152, 150],
    [96, 207, 209],
    [247, 182, 210],
    [202, 185, 52],
];

/// Ordered list of foreground classes. The index of a class is its layout
/// channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    classes: Vec<String>,
    palette: Vec<[u8; 3]>,
}

impl Default for ClassVocabulary {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            palette: DEFAULT_PALETTE.to_vec(),
        }
    }
}

impl ClassVocabulary {
    /// Builds a vocabulary with grey display colours. Names must be unique
    /// and the list non-empty.
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, LayoutError> {
        let classes: Vec<String> = names.into_iter().map(Into::into).collect();
        if classes.is_empty() {
            return Err(LayoutError::Vocabulary("vocabulary must contain at least one class".into()));
        }
        for (i, name) in classes.iter().enumerate() {
            if classes[..i].contains(name) {
                return Err(LayoutError::Vocabulary(format!("duplicate class name '{name}'")));
            }
        }
        let palette = vec![[128, 128, 128]; classes.len()];
        Ok(Self { classes, palette })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, class_id: usize) -> Result<&str, LayoutError> {
        self.classes
            .get(class_id)
            .map(String::as_str)
            .ok_or(LayoutError::UnknownClassId { class_id, k: self.len() })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn color(&self, class_id: usize) -> Option<[u8; 3]> {
        self.palette.get(class_id).copied()
    }

    pub fn check(&self, class_id: usize) -> Result<(), LayoutError> {
        self.name(class_id).map(|_| ())
    }
}
