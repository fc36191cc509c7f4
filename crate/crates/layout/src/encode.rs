use serde::{Deserialize, Serialize};

use crate::error::LayoutError;
use crate::object::{Geometry, LayoutMode, ObjectSpec};
use crate::vocab::ClassVocabulary;

/// K-channel object layout. Values are stored channel-major, then row
/// (`y`), then column (`x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLayout {
    channels: usize,
    width: usize,
    height: usize,
    mode: LayoutMode,
    data: Vec<f64>,
}

impl ObjectLayout {
    pub fn zeros(channels: usize, width: usize, height: usize, mode: LayoutMode) -> Self {
        Self { channels, width, height, mode, data: vec![0.0; channels * width * height] }
    }

    pub fn from_vec(
        channels: usize,
        width: usize,
        height: usize,
        mode: LayoutMode,
        data: Vec<f64>,
    ) -> Result<Self, LayoutError> {
        if data.len() != channels * width * height {
            return Err(LayoutError::Shape(format!(
                "expected {} values for {channels}x{height}x{width}, got {}",
                channels * width * height,
                data.len()
            )));
        }
        Ok(Self { channels, width, height, mode, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn mode(&self) -> LayoutMode {
        self.mode
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, k: usize, x: usize, y: usize) -> usize {
        (k * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, k: usize, x: usize, y: usize) -> f64 {
        self.data[self.index(k, x, y)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, x: usize, y: usize, v: f64) {
        let i = self.index(k, x, y);
        self.data[i] = v;
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copy with every cell clamped to `[0, 1]`, for consumers that expect
    /// occupancy rather than counts.
    pub fn clamped_unit(&self) -> ObjectLayout {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Mean-pools non-overlapping `factor x factor` cells.
    pub fn avg_pool(&self, factor: usize) -> Result<ObjectLayout, LayoutError> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(LayoutError::Shape(format!(
                "{}x{} layout is not divisible by pooling factor {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = ObjectLayout::zeros(self.channels, w, h, self.mode);
        for k in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for yy in y * factor..(y + 1) * factor {
                        for xx in x * factor..(x + 1) * factor {
                            acc += self.get(k, xx, yy);
                        }
                    }
                    out.set(k, x, y, acc * norm);
                }
            }
        }
        Ok(out)
    }
}

/// Rasterises objects into a `K x H x W` layout: the per-pixel sum over
/// objects of a one-hot class vector times the object's label map.
///
/// Box labels are 1 inside the (clipped) box; point labels are
/// `exp(-|p - c|^2 / s)` evaluated at integer pixel centres.
pub fn encode_layout(
    objects: &[ObjectSpec],
    mode: LayoutMode,
    width: usize,
    height: usize,
    vocab: &ClassVocabulary,
) -> Result<ObjectLayout, LayoutError> {
    if width == 0 || height == 0 {
        return Err(LayoutError::Shape(format!("canvas must be non-empty, got {width}x{height}")));
    }
    let mut layout = ObjectLayout::zeros(vocab.len(), width, height, mode);
    for (i, obj) in objects.iter().enumerate() {
        vocab.check(obj.class_id)?;
        if obj.mode() != mode {
            return Err(LayoutError::Geometry(format!(
                "object {i} is a {} label but the layout mode is {}",
                obj.mode().as_str(),
                mode.as_str()
            )));
        }
        let k = obj.class_id;
        match obj.geometry {
            Geometry::Box(b) => {
                let b = b.clipped(width, height)?;
                for y in b.y0 as usize..b.y1 as usize {
                    let row = layout.index(k, 0, y);
                    for v in &mut layout.data[row + b.x0 as usize..row + b.x1 as usize] {
                        *v += 1.0;
                    }
                }
            }
            Geometry::Point(p) => {
                p.validate(width, height)?;
                for y in 0..height {
                    let row = layout.index(k, 0, y);
                    for x in 0..width {
                        layout.data[row + x] += p.value_at(x as f64, y as f64);
                    }
                }
            }
        }
    }
    Ok(layout)
}

/// Builds down-scaled copies of a square layout at each requested
/// resolution by repeated 2x2 mean pooling. Levels are returned in the
/// order requested.
pub fn build_layout_pyramid(
    layout: &ObjectLayout,
    resolutions: &[usize],
) -> Result<Vec<ObjectLayout>, LayoutError> {
    if layout.width != layout.height {
        return Err(LayoutError::Shape(format!(
            "pyramid needs a square layout, got {}x{}",
            layout.width, layout.height
        )));
    }
    let size = layout.width;
    for &r in resolutions {
        if r == 0 || !size.is_multiple_of(r) || !(size / r).is_power_of_two() {
            return Err(LayoutError::Shape(format!(
                "resolution {r} does not divide {size} by a power of two"
            )));
        }
    }
    let mut sorted: Vec<usize> = resolutions.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();

    let mut levels: Vec<(usize, ObjectLayout)> = Vec::with_capacity(sorted.len());
    let mut current = layout.clone();
    for r in sorted {
        while current.width > r {
            current = current.avg_pool(2)?;
        }
        levels.push((r, current.clone()));
    }
    Ok(resolutions
        .iter()
        .map(|r| levels.iter().find(|(lr, _)| lr == r).map(|(_, l)| l.clone()).unwrap())
        .collect())
}
