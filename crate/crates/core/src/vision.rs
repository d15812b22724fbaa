//! Pixel-level analysis shared by curation and evaluation: palette tones,
//! connected components and fill-ratio shape classification.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::toydata::{Color, Shape};
use crate::video::Image;

/// Axis-aligned box in pixel coordinates (`x1`, `y1` exclusive).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
    pub label: String,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, score: f64, label: impl Into<String>) -> Self {
        BoundingBox {
            x0,
            y0,
            x1,
            y1,
            score,
            label: label.into(),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0]
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Positive extent, inside `[0, width] × [0, height]`, score in `[0, 1]`.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.x1 > self.x0
            && self.y1 > self.y0
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= width as f64
            && self.y1 <= height as f64
            && (0.0..=1.0).contains(&self.score);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(alloc::format!(
                "box {self:?} invalid for {width}x{height}"
            )))
        }
    }

    /// Integer pixel window covering the box, clamped to the frame.
    pub fn pixel_window(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let c = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        let x0 = c(libm::floor(self.x0), width);
        let y0 = c(libm::floor(self.y0), height);
        let x1 = c(libm::ceil(self.x1), width).max(x0);
        let y1 = c(libm::ceil(self.y1), height).max(y0);
        (x0, y0, x1, y1)
    }
}

pub const SKIN: [f64; 3] = [0.95, 0.75, 0.6];

/// A recognizable surface color: one of the paint colors or skin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tone {
    Paint(Color),
    Skin,
}

impl Tone {
    pub fn all() -> impl Iterator<Item = Tone> {
        Color::ALL
            .into_iter()
            .map(Tone::Paint)
            .chain(core::iter::once(Tone::Skin))
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Tone::Paint(c) => c.rgb(),
            Tone::Skin => SKIN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tone::Paint(c) => c.name(),
            Tone::Skin => "skin",
        }
    }
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Largest RGB distance at which a pixel is assigned a tone.
pub const TONE_RADIUS: f64 = 0.4;

pub fn nearest_tone(rgb: [f64; 3]) -> Option<Tone> {
    let (tone, d) = Tone::all()
        .map(|t| (t, dist2(rgb, t.rgb())))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty palette");
    (d < TONE_RADIUS * TONE_RADIUS).then_some(tone)
}

pub fn tone_map(img: &Image) -> Vec<Option<Tone>> {
    (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (y, x)))
        .map(|(y, x)| nearest_tone(img.pixel(y, x)))
        .collect()
}

/// `(max − min) / max` over the channels; 0 for black.
pub fn saturation(rgb: [f64; 3]) -> f64 {
    let mx = rgb[0].max(rgb[1]).max(rgb[2]);
    let mn = rgb[0].min(rgb[1]).min(rgb[2]);
    if mx <= 0.0 {
        0.0
    } else {
        (mx - mn) / mx
    }
}

/// Connected pixel set with its tight integer bounding box (exclusive ends).
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub pixels: Vec<usize>,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn fill(&self) -> f64 {
        self.pixels.len() as f64 / ((self.x1 - self.x0) * (self.y1 - self.y0)) as f64
    }

    pub fn to_box(&self, score: f64, label: impl Into<String>) -> BoundingBox {
        BoundingBox::new(
            self.x0 as f64,
            self.y0 as f64,
            self.x1 as f64,
            self.y1 as f64,
            score,
            label,
        )
    }
}

/// Components of `mask` in raster order of their first pixel.
pub fn components(mask: &[bool], width: usize, height: usize, eight: bool) -> Vec<Component> {
    debug_assert_eq!(mask.len(), width * height);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Component {
            pixels: Vec::new(),
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / width, p % width);
            comp.pixels.push(p);
            comp.x0 = comp.x0.min(x);
            comp.y0 = comp.y0.min(y);
            comp.x1 = comp.x1.max(x + 1);
            comp.y1 = comp.y1.max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.pixels.sort_unstable();
        out.push(comp);
    }
    out
}

fn morph(mask: &[bool], width: usize, height: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![!dilate; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = !dilate;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    // outside the frame counts as set for erosion, unset for dilation
                    let v = if ny < 0 || nx < 0 || ny >= height as i64 || nx >= width as i64 {
                        !dilate
                    } else {
                        mask[ny as usize * width + nx as usize]
                    };
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// 3×3 morphological closing (dilate, then erode).
pub fn close(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let d = morph(mask, width, height, true);
    morph(&d, width, height, false)
}

pub const SQUARE_MIN_FILL: f64 = 0.95;
pub const CIRCLE_MIN_FILL: f64 = 0.66;

pub fn classify_shape(fill: f64) -> Shape {
    if fill >= SQUARE_MIN_FILL {
        Shape::Square
    } else if fill >= CIRCLE_MIN_FILL {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

/// Single-tone connected region with its shape reading.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub tone: Tone,
    pub component: Component,
    pub shape: Shape,
}

impl Blob {
    pub fn label(&self) -> String {
        match self.tone {
            Tone::Paint(c) => crate::toydata::concept_label(c, self.shape),
            Tone::Skin => "person".into(),
        }
    }

    pub fn score(&self) -> f64 {
        shape_score(self.shape, self.component.fill())
    }
}

/// Confidence in `[0, 1]` from how close a fill ratio sits to the typical
/// rasterized fill of `shape`.
pub fn shape_score(shape: Shape, fill: f64) -> f64 {
    let typical = match shape {
        Shape::Square => 1.0,
        Shape::Circle => 0.8,
        Shape::Triangle => 0.55,
    };
    (1.0 - (fill - typical).abs()).clamp(0.0, 1.0)
}

/// Per-tone 8-connected regions of at least `min_area` pixels, optionally
/// after a closing that heals pinholes and checkerboard dithering.
pub fn find_blobs(img: &Image, min_area: usize, closing: bool) -> Vec<Blob> {
    let tones = tone_map(img);
    let (w, h) = (img.width, img.height);
    let mut out = Vec::new();
    for tone in Tone::all() {
        let mask: Vec<bool> = tones.iter().map(|t| *t == Some(tone)).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let mask = if closing { close(&mask, w, h) } else { mask };
        for component in components(&mask, w, h, true) {
            if component.area() >= min_area.max(1) {
                let shape = classify_shape(component.fill());
                out.push(Blob { tone, component, shape });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0, 1.0, "a");
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0, 1.0, "b");
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-15);
        let far = BoundingBox::new(5.0, 5.0, 6.0, 6.0, 1.0, "c");
        assert_eq!(a.iou(&far), 0.0);
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 4.0, 4.0, 0.5, "x").validate(4, 4).is_ok());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 4.0, 0.5, "x").validate(4, 4).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 5.0, 4.0, 0.5, "x").validate(4, 4).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 2.0, 2.0, 1.5, "x").validate(4, 4).is_err());
    }

    #[test]
    fn connectivity_counts() {
        // diagonal pair: one 8-component, two 4-components
        let mask = [true, false, false, true];
        assert_eq!(components(&mask, 2, 2, true).len(), 1);
        assert_eq!(components(&mask, 2, 2, false).len(), 2);
        let c = &components(&mask, 2, 2, true)[0];
        assert_eq!((c.x0, c.y0, c.x1, c.y1, c.area()), (0, 0, 2, 2, 2));
    }

    #[test]
    fn closing_heals_checkerboard() {
        let (w, h) = (10, 10);
        let mask: Vec<bool> = (0..w * h)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (2..8).contains(&x) && (2..8).contains(&y) && (x + y) % 2 == 0
            })
            .collect();
        assert_eq!(components(&mask, w, h, false).len(), 18);
        let closed = close(&mask, w, h);
        let comps = components(&closed, w, h, true);
        assert_eq!(comps.len(), 1);
        assert!(comps[0].fill() > 0.85, "{}", comps[0].fill());
        assert_eq!(comps[0].area(), 34);
    }

    #[test]
    fn tones() {
        assert_eq!(nearest_tone([0.9, 0.05, 0.0]), Some(Tone::Paint(Color::Red)));
        assert_eq!(nearest_tone([0.25, 0.25, 0.25]), None);
        assert_eq!(nearest_tone(SKIN), Some(Tone::Skin));
        assert_eq!(saturation([0.0; 3]), 0.0);
        assert_eq!(saturation([1.0, 0.0, 0.0]), 1.0);
    }
}
