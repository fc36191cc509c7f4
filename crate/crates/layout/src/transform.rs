use serde::{Deserialize, Serialize};

use crate::encode::ObjectLayout;
use crate::object::{BoxGeom, Geometry, ObjectSpec, PointGeom};

/// Horizontal mirror followed by an integer shift, applied identically to
/// images, layouts and object geometry. Pixels shifted in from outside are
/// zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridTransform {
    pub hflip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl GridTransform {
    pub const IDENTITY: GridTransform = GridTransform { hflip: false, dx: 0, dy: 0 };

    pub fn flip() -> Self {
        Self { hflip: true, dx: 0, dy: 0 }
    }

    pub fn translate(dx: i32, dy: i32) -> Self {
        Self { hflip: false, dx, dy }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Input pixel that lands on output pixel `(x, y)`, if any.
    #[inline]
    pub fn source_pixel(&self, x: usize, y: usize, width: usize, height: usize) -> Option<(usize, usize)> {
        let xf = x as i64 - self.dx as i64;
        let ys = y as i64 - self.dy as i64;
        if xf < 0 || xf >= width as i64 || ys < 0 || ys >= height as i64 {
            return None;
        }
        let xs = if self.hflip { width as i64 - 1 - xf } else { xf };
        Some((xs as usize, ys as usize))
    }

    /// Transforms one `width x height` row-major plane.
    pub fn apply_plane<T: Copy + Default>(&self, plane: &[T], width: usize, height: usize) -> Vec<T> {
        let mut out = vec![T::default(); width * height];
        for y in 0..height {
            for x in 0..width {
                if let Some((xs, ys)) = self.source_pixel(x, y, width, height) {
                    out[y * width + x] = plane[ys * width + xs];
                }
            }
        }
        out
    }

    pub fn apply_layout(&self, layout: &ObjectLayout) -> ObjectLayout {
        let (w, h) = (layout.width(), layout.height());
        let data: Vec<f64> =
            (0..layout.channels()).flat_map(|k| self.apply_plane(layout.channel(k), w, h)).collect();
        ObjectLayout::from_vec(layout.channels(), w, h, layout.mode(), data).expect("shape preserved")
    }

    /// Moves an object's geometry on a `width`-wide canvas. The result is not
    /// clipped; encoding clips boxes.
    pub fn apply_object(&self, obj: &ObjectSpec, width: usize) -> ObjectSpec {
        let geometry = match obj.geometry {
            Geometry::Box(b) => {
                let (x0, x1) = if self.hflip { (width as i32 - b.x1, width as i32 - b.x0) } else { (b.x0, b.x1) };
                Geometry::Box(BoxGeom::new(x0 + self.dx, b.y0 + self.dy, x1 + self.dx, b.y1 + self.dy))
            }
            Geometry::Point(p) => {
                let cx = if self.hflip { width as f64 - 1.0 - p.cx } else { p.cx };
                Geometry::Point(PointGeom { cx: cx + self.dx as f64, cy: p.cy + self.dy as f64, size: p.size })
            }
        };
        ObjectSpec { class_id: obj.class_id, geometry }
    }
}
