use serde::{Deserialize, Serialize};

use crate::error::LayoutError;

/// Half-open pixel box `[x0, x1) x [y0, y1)`, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxGeom {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BoxGeom {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0).max(0) as i64 * (self.y1 - self.y0).max(0) as i64
    }

    /// Clips to `[0,width) x [0,height)`. Boxes with nothing left are rejected.
    pub fn clipped(&self, width: usize, height: usize) -> Result<BoxGeom, LayoutError> {
        let c = BoxGeom {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i32),
            y1: self.y1.min(height as i32),
        };
        if c.x0 >= c.x1 || c.y0 >= c.y1 {
            return Err(LayoutError::Geometry(format!(
                "box [{},{})x[{},{}) is empty inside the {width}x{height} canvas",
                self.x0, self.x1, self.y0, self.y1
            )));
        }
        Ok(c)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as i32, y as i32);
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Heat-map label: centre in pixel coordinates and a spread `size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointGeom {
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl PointGeom {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), LayoutError> {
        if self.size <= 0.0 || !self.size.is_finite() {
            return Err(LayoutError::Geometry(format!("point size must be positive, got {}", self.size)));
        }
        let inside = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n as f64 - 1.0);
        if !inside(self.cx, width) || !inside(self.cy, height) {
            return Err(LayoutError::Geometry(format!(
                "point centre ({}, {}) lies outside the {width}x{height} canvas",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Heat-map value `exp(-|p - c|^2 / size)` at pixel centre `(x, y)`.
    #[inline]
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (-(dx * dx + dy * dy) / self.size).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Box(BoxGeom),
    Point(PointGeom),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    Box,
    Point,
}

impl LayoutMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayoutMode::Box => "box",
            LayoutMode::Point => "point",
        }
    }
}

impl std::str::FromStr for LayoutMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(LayoutMode::Box),
            "point" => Ok(LayoutMode::Point),
            other => Err(format!("unknown label mode '{other}' (expected box or point)")),
        }
    }
}

/// One object to place: its class channel and where it goes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub geometry: Geometry,
}

impl ObjectSpec {
    pub fn boxed(class_id: usize, x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { class_id, geometry: Geometry::Box(BoxGeom::new(x0, y0, x1, y1)) }
    }

    pub fn point(class_id: usize, cx: f64, cy: f64, size: f64) -> Self {
        Self { class_id, geometry: Geometry::Point(PointGeom { cx, cy, size }) }
    }

    pub fn mode(&self) -> LayoutMode {
        match self.geometry {
            Geometry::Box(_) => LayoutMode::Box,
            Geometry::Point(_) => LayoutMode::Point,
        }
    }
}
