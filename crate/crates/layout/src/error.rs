use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("vocabulary error: class id {class_id} out of range for {k} classes")]
    UnknownClassId { class_id: usize, k: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no size observations for class {class_id}")]
    MissingStats { class_id: usize },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported layout document version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
}

impl LayoutError {
    /// JSON path of the offending field, for parse errors.
    pub fn field_path(&self) -> Option<&str> {
        match self {
            LayoutError::Parse { path, .. } => Some(path),
            _ => None,
        }
    }
}
