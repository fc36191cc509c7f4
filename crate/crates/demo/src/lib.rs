//! WebAssembly bindings for the layout demo page.
//!
//! Every operation takes a layout document as JSON and returns an RGBA
//! frame ready for `ImageData`. Channel intensities are clamped to `[0, 1]`
//! and blended additively in class colours over a dark backdrop.

use nsd_layout::{
    build_layout_pyramid, encode_layout, parse_layout, ClassVocabulary, GridTransform, LayoutDocument, LayoutError,
    ObjectLayout,
};
use wasm_bindgen::prelude::*;

const BACKDROP: [u8; 3] = [24, 24, 28];

/// Row-major RGBA image.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Copies the pixels out as a `Uint8Array`.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn describe(e: LayoutError) -> String {
    match e.field_path() {
        Some(path) => format!("{path}: {e}"),
        None => e.to_string(),
    }
}

fn parse(text: &str, vocab: &ClassVocabulary) -> Result<(LayoutDocument, ObjectLayout), String> {
    let doc = parse_layout(text, vocab, None).map_err(describe)?;
    let layout = encode_layout(&doc.objects, doc.mode, doc.width, doc.height, vocab).map_err(describe)?;
    Ok((doc, layout))
}

/// Paints `layout` at `scale` display pixels per cell.
fn paint(layout: &ObjectLayout, vocab: &ClassVocabulary, scale: usize) -> Frame {
    let (w, h) = (layout.width() * scale, layout.height() * scale);
    let mut rgba = Vec::with_capacity(w * h * 4);
    for y in 0..h {
        for x in 0..w {
            let mut acc = BACKDROP.map(f64::from);
            for k in 0..layout.channels() {
                let v = layout.get(k, x / scale, y / scale).clamp(0.0, 1.0);
                let color = vocab.color(k).unwrap_or([255, 255, 255]);
                for c in 0..3 {
                    acc[c] += v * f64::from(color[c]);
                }
            }
            rgba.extend(acc.map(|v| v.round().min(255.0) as u8));
            rgba.push(255);
        }
    }
    Frame { width: w, height: h, rgba }
}

pub fn layout_frame(text: &str) -> Result<Frame, String> {
    let vocab = ClassVocabulary::default();
    let (_, layout) = parse(text, &vocab)?;
    Ok(paint(&layout, &vocab, 1))
}

/// The layout mean-pooled to `resolution` cells a side, drawn back at the
/// canvas size.
pub fn pyramid_frame(text: &str, resolution: usize) -> Result<Frame, String> {
    let vocab = ClassVocabulary::default();
    let (doc, layout) = parse(text, &vocab)?;
    let level = build_layout_pyramid(&layout, &[resolution]).map_err(describe)?.remove(0);
    Ok(paint(&level, &vocab, doc.width / resolution))
}

/// The encoded layout after a horizontal flip and an integer shift.
pub fn augmented_frame(text: &str, hflip: bool, dx: i32, dy: i32) -> Result<Frame, String> {
    let vocab = ClassVocabulary::default();
    let (_, layout) = parse(text, &vocab)?;
    Ok(paint(&GridTransform { hflip, dx, dy }.apply_layout(&layout), &vocab, 1))
}

#[wasm_bindgen(js_name = renderLayout)]
pub fn render_layout(text: &str) -> Result<Frame, JsError> {
    layout_frame(text).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderPyramid)]
pub fn render_pyramid(text: &str, resolution: usize) -> Result<Frame, JsError> {
    pyramid_frame(text, resolution).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderAugmented)]
pub fn render_augmented(text: &str, hflip: bool, dx: i32, dy: i32) -> Result<Frame, JsError> {
    augmented_frame(text, hflip, dx, dy).map_err(|e| JsError::new(&e))
}

/// Class names in channel order.
#[wasm_bindgen(js_name = classNames)]
pub fn class_names() -> Vec<String> {
    ClassVocabulary::default().names().to_vec()
}

/// Class colour as `#rrggbb`.
#[wasm_bindgen(js_name = classColor)]
pub fn class_color(class_id: usize) -> Option<String> {
    let [r, g, b] = ClassVocabulary::default().color(class_id)?;
    Some(format!("#{r:02x}{g:02x}{b:02x}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(mode: &str, size: usize, objects: &str) -> String {
        format!(r#"{{"version":1,"mode":"{mode}","canvas":{{"width":{size},"height":{size}}},"objects":[{objects}]}}"#)
    }

    fn pixel(f: &Frame, x: usize, y: usize) -> [u8; 4] {
        let i = (y * f.width + x) * 4;
        f.rgba[i..i + 4].try_into().unwrap()
    }

    #[test]
    fn boxes_paint_their_class_colour() {
        let vocab = ClassVocabulary::default();
        let f = layout_frame(&doc("box", 8, r#"{"class":"bed","box":{"x0":2,"y0":2,"x1":4,"y1":5}}"#)).unwrap();
        assert_eq!((f.width, f.height, f.rgba.len()), (8, 8, 256));
        let c = vocab.color(vocab.index_of("bed").unwrap()).unwrap();
        let want = std::array::from_fn::<u8, 3, _>(|i| (BACKDROP[i] as u16 + c[i] as u16).min(255) as u8);
        assert_eq!(pixel(&f, 3, 4)[..3], want);
        assert_eq!(pixel(&f, 4, 4), [BACKDROP[0], BACKDROP[1], BACKDROP[2], 255]);
    }

    #[test]
    fn pyramid_levels_are_block_averages() {
        let text = doc("box", 8, r#"{"class":"sofa","box":{"x0":0,"y0":0,"x1":2,"y1":1}}"#);
        let coarse = pyramid_frame(&text, 4).unwrap();
        assert_eq!((coarse.width, coarse.height), (8, 8));
        let full = layout_frame(&text).unwrap();
        // A 2x2 block half covered lands halfway between backdrop and full colour.
        for (c, &back) in BACKDROP.iter().enumerate() {
            let mid = (back as f64 + full.rgba[c] as f64) / 2.0;
            assert!((coarse.rgba[c] as f64 - mid).abs() <= 1.0);
        }
        assert_eq!(pixel(&coarse, 1, 1), pixel(&coarse, 0, 0));
        assert!(pyramid_frame(&text, 3).is_err());
    }

    #[test]
    fn augmentation_matches_moved_objects() {
        let before = doc("box", 8, r#"{"class":"bed","box":{"x0":1,"y0":2,"x1":3,"y1":4}}"#);
        let after = doc("box", 8, r#"{"class":"bed","box":{"x0":6,"y0":3,"x1":8,"y1":5}}"#);
        assert_eq!(augmented_frame(&before, true, 1, 1).unwrap(), layout_frame(&after).unwrap());
        assert_eq!(augmented_frame(&before, false, 0, 0).unwrap(), layout_frame(&before).unwrap());
    }

    #[test]
    fn errors_name_the_field() {
        let e = layout_frame(&doc("box", 8, r#"{"class":"fireplace","box":{"x0":0,"y0":0,"x1":1,"y1":1}}"#)).unwrap_err();
        assert!(e.starts_with("objects[0].class"), "{e}");
        assert_eq!(class_names().len(), 12);
        assert!(class_color(0).unwrap().starts_with('#'));
    }
}
