//! Versioned JSON layout document shared by the CLI, the HTTP service and
//! the browser front-ends.
//!
//! ```json
//! {"version":1,"mode":"box","canvas":{"width":256,"height":256},
//!  "objects":[{"class":"bed","box":{"x0":10,"y0":20,"x1":120,"y1":200}},
//!             {"class":"lamp","point":{"cx":30.5,"cy":40.0}}]}
//! ```
//!
//! Objects are stored by class name; channel indices stay local to a
//! vocabulary. A point without `size` is filled from class statistics when
//! they are supplied.

use serde::{Deserialize, Serialize};

use crate::error::LayoutError;
use crate::object::{BoxGeom, Geometry, LayoutMode, ObjectSpec, PointGeom};
use crate::size::{default_size, SizeStats, SizeStrategy};
use crate::vocab::ClassVocabulary;

pub const LAYOUT_DOC_VERSION: u64 = 1;

/// Parsed layout request: canvas, label mode and objects.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutDocument {
    pub mode: LayoutMode,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectSpec>,
}

impl LayoutDocument {
    pub fn new(mode: LayoutMode, width: usize, height: usize, objects: Vec<ObjectSpec>) -> Self {
        Self { mode, width, height, objects }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    version: u64,
    mode: LayoutMode,
    canvas: RawCanvas,
    objects: Vec<RawObject>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCanvas {
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    class: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BoxGeom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<RawPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoint {
    cx: f64,
    cy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<f64>,
}

fn parse_err(path: impl Into<String>, message: impl Into<String>) -> LayoutError {
    LayoutError::Parse { path: path.into(), message: message.into() }
}

pub fn serialize_layout(doc: &LayoutDocument, vocab: &ClassVocabulary) -> Result<String, LayoutError> {
    let objects = doc
        .objects
        .iter()
        .map(|o| {
            let class = vocab.name(o.class_id)?.to_string();
            Ok(match o.geometry {
                Geometry::Box(b) => RawObject { class, bbox: Some(b), point: None },
                Geometry::Point(p) => RawObject {
                    class,
                    bbox: None,
                    point: Some(RawPoint { cx: p.cx, cy: p.cy, size: Some(p.size) }),
                },
            })
        })
        .collect::<Result<Vec<_>, LayoutError>>()?;
    let raw = RawDocument {
        version: LAYOUT_DOC_VERSION,
        mode: doc.mode,
        canvas: RawCanvas { width: doc.width, height: doc.height },
        objects,
    };
    serde_json::to_string_pretty(&raw).map_err(|e| parse_err("$", e.to_string()))
}

/// Parses and validates a layout document against `vocab`.
///
/// `size_defaults` supplies sizes for point objects that omit one; without
/// it such objects are rejected.
pub fn parse_layout(
    text: &str,
    vocab: &ClassVocabulary,
    size_defaults: Option<(&SizeStats, SizeStrategy)>,
) -> Result<LayoutDocument, LayoutError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
    match value.get("version") {
        None => return Err(parse_err("version", "missing field `version`")),
        Some(v) => match v.as_u64() {
            Some(LAYOUT_DOC_VERSION) => {}
            Some(found) => return Err(LayoutError::Version { found, expected: LAYOUT_DOC_VERSION }),
            None => return Err(parse_err("version", "expected an unsigned integer")),
        },
    }
    let raw: RawDocument = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        parse_err(path, e.into_inner().to_string())
    })?;
    if raw.canvas.width == 0 || raw.canvas.height == 0 {
        return Err(parse_err("canvas", "canvas dimensions must be positive"));
    }

    let mut objects = Vec::with_capacity(raw.objects.len());
    for (i, o) in raw.objects.into_iter().enumerate() {
        let class_id = vocab
            .index_of(&o.class)
            .ok_or_else(|| parse_err(format!("objects[{i}].class"), format!("unknown class '{}'", o.class)))?;
        let geometry = match (o.bbox, o.point) {
            (Some(b), None) => {
                if b.x0 >= b.x1 || b.y0 >= b.y1 {
                    return Err(parse_err(format!("objects[{i}].box"), "box must satisfy x0 < x1 and y0 < y1"));
                }
                Geometry::Box(b)
            }
            (None, Some(p)) => {
                let size = match (p.size, size_defaults) {
                    (Some(s), _) => s,
                    (None, Some((stats, strategy))) => default_size(class_id, stats, strategy)
                        .map_err(|e| parse_err(format!("objects[{i}].point.size"), e.to_string()))?,
                    (None, None) => {
                        return Err(parse_err(
                            format!("objects[{i}].point.size"),
                            "size omitted and no class size statistics available",
                        ))
                    }
                };
                let p = PointGeom { cx: p.cx, cy: p.cy, size };
                p.validate(raw.canvas.width, raw.canvas.height)
                    .map_err(|e| parse_err(format!("objects[{i}].point"), e.to_string()))?;
                Geometry::Point(p)
            }
            _ => return Err(parse_err(format!("objects[{i}]"), "exactly one of `box` or `point` is required")),
        };
        let spec = ObjectSpec { class_id, geometry };
        if spec.mode() != raw.mode {
            return Err(parse_err(
                format!("objects[{i}]"),
                format!("{} label in a {} layout", spec.mode().as_str(), raw.mode.as_str()),
            ));
        }
        objects.push(spec);
    }
    Ok(LayoutDocument { mode: raw.mode, width: raw.canvas.width, height: raw.canvas.height, objects })
}
