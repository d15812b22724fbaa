//! Synthetic scenes of colored shapes moving over a textured background,
//! with exact trajectories, reference images and captions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::video::{Image, Video};
use crate::vision::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Point-in-shape for a shape of extent `size` centered at `(cx, cy)`.
    /// Squares are half-open; the triangle has its apex at the top and its
    /// base on the bottom edge of the bounding box.
    pub fn contains(self, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
        let h = size / 2.0;
        match self {
            Shape::Circle => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= h * h
            }
            Shape::Square => px >= cx - h && px < cx + h && py >= cy - h && py < cy + h,
            Shape::Triangle => {
                let top = cy - h;
                py >= top && py <= cy + h && (px - cx).abs() <= (py - top) / 2.0
            }
        }
    }

    /// Occupied fraction of the bounding box in the continuum.
    pub fn ideal_fill(self) -> f64 {
        match self {
            Shape::Circle => core::f64::consts::FRAC_PI_4,
            Shape::Square => 1.0,
            Shape::Triangle => 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::Orange,
        Color::White,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// `"<color> <shape>"`.
pub fn concept_label(color: Color, shape: Shape) -> String {
    format!("{} {}", color.name(), shape.name())
}

/// Parse a `"<color> <shape>"` label.
pub fn parse_label(label: &str) -> Option<(Color, Shape)> {
    let (c, s) = label.split_once(' ')?;
    Some((Color::from_name(c)?, Shape::from_name(s)?))
}

/// Center path in pixel coordinates as a function of the frame index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Linear {
        start: [f64; 2],
        velocity: [f64; 2],
    },
    /// Linear drift plus a vertical oscillation `amplitude·sin(2πf/period)`.
    Sinusoidal {
        start: [f64; 2],
        velocity: [f64; 2],
        amplitude: f64,
        period: f64,
    },
}

impl Trajectory {
    pub fn position(&self, frame: usize) -> [f64; 2] {
        let f = frame as f64;
        match *self {
            Trajectory::Linear { start, velocity } => [start[0] + velocity[0] * f, start[1] + velocity[1] * f],
            Trajectory::Sinusoidal {
                start,
                velocity,
                amplitude,
                period,
            } => {
                let wobble = amplitude * libm::sin(2.0 * core::f64::consts::PI * f / period);
                [start[0] + velocity[0] * f, start[1] + velocity[1] * f + wobble]
            }
        }
    }

    pub fn velocity(&self) -> [f64; 2] {
        match *self {
            Trajectory::Linear { velocity, .. } | Trajectory::Sinusoidal { velocity, .. } => velocity,
        }
    }

    /// Caption verb phrase for the dominant drift direction.
    pub fn motion_phrase(&self) -> &'static str {
        let [vx, vy] = self.velocity();
        let wobbly = matches!(self, Trajectory::Sinusoidal { .. });
        if vx == 0.0 && vy == 0.0 {
            return if wobbly { "bobbing in place" } else { "resting" };
        }
        match (vx.abs() >= vy.abs(), vx > 0.0, vy > 0.0, wobbly) {
            (true, true, _, false) => "moving right",
            (true, false, _, false) => "moving left",
            (false, _, true, false) => "moving down",
            (false, _, false, false) => "moving up",
            (true, true, _, true) => "bouncing right",
            (true, false, _, true) => "bouncing left",
            (false, _, true, true) => "bouncing down",
            (false, _, false, true) => "bouncing up",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSpec {
    pub shape: Shape,
    pub color: Color,
    /// Bounding-box side in pixels.
    pub size: f64,
    pub trajectory: Trajectory,
}

impl ConceptSpec {
    pub fn label(&self) -> String {
        concept_label(self.color, self.shape)
    }

    /// Exact bounding box at `frame`, centered on the trajectory position.
    pub fn box_at(&self, frame: usize) -> BoundingBox {
        let [cx, cy] = self.trajectory.position(frame);
        let h = self.size / 2.0;
        BoundingBox {
            x0: cx - h,
            y0: cy - h,
            x1: cx + h,
            y1: cy + h,
            score: 1.0,
            label: self.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub concepts: Vec<ConceptSpec>,
    pub background_seed: u64,
    pub caption_template: usize,
}

pub const MAX_CONCEPTS: usize = 4;
pub const CAPTION_TEMPLATES: usize = 3;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Range("scene dimensions must be positive".into()));
        }
        if self.concepts.is_empty() || self.concepts.len() > MAX_CONCEPTS {
            return Err(Error::Range(format!("{} concepts; need 1..=4", self.concepts.len())));
        }
        for (i, a) in self.concepts.iter().enumerate() {
            if !(a.size > 0.0) {
                return Err(Error::Range(format!("concept {i} has non-positive size")));
            }
            if self.concepts[..i]
                .iter()
                .any(|b| (b.shape, b.color) == (a.shape, a.color))
            {
                return Err(Error::Invalid(format!("duplicate concept {}", a.label())));
            }
            for f in 0..self.frames {
                let b = a.box_at(f);
                if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > self.width as f64 || b.y1 > self.height as f64 {
                    return Err(Error::Range(format!("concept {i} leaves the frame at frame {f}")));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.concepts.iter().map(ConceptSpec::label).collect()
    }
}

/// Frame geometry and motion limits for [`gen_scene_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest drift per frame along each axis, in pixels.
    pub max_speed: f64,
    pub sinusoid_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            frames: 8,
            height: 16,
            width: 16,
            min_size: 6,
            max_size: 7,
            max_speed: 0.75,
            sinusoid_prob: 0.25,
        }
    }
}

pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<SceneSpec> {
    gen_scene_with(rng, k, &SceneConfig::default())
}

/// `k` distinct concepts with pairwise disjoint starting boxes, each
/// staying inside the frame for every frame.
pub fn gen_scene_with<R: Rng + ?Sized>(rng: &mut R, k: usize, cfg: &SceneConfig) -> Result<SceneSpec> {
    if !(1..=MAX_CONCEPTS).contains(&k) {
        return Err(Error::Range(format!("k = {k}; need 1..=4")));
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size > cfg.width.min(cfg.height) || cfg.frames == 0 {
        return Err(Error::Range("scene config cannot fit a shape".into()));
    }
    let picks = index::sample(rng, Shape::ALL.len() * Color::ALL.len(), k);
    let pairs: Vec<(Shape, Color)> = picks.iter().map(|i| (Shape::ALL[i % 3], Color::ALL[i / 3])).collect();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let span = (cfg.frames.max(2) - 1) as f64;
    'attempt: for _ in 0..1000 {
        let mut concepts: Vec<ConceptSpec> = Vec::with_capacity(k);
        for &(shape, color) in &pairs {
            let size = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
            let half = size / 2.0;
            let start = [rng.random_range(half..=w - half), rng.random_range(half..=h - half)];
            let clash = concepts.iter().any(|c| {
                let [ox, oy] = c.trajectory.position(0);
                let reach = (c.size + size) / 2.0;
                (ox - start[0]).abs() < reach && (oy - start[1]).abs() < reach
            });
            if clash {
                continue 'attempt;
            }
            let wobble = cfg.frames > 2 && rng.random::<f64>() < cfg.sinusoid_prob;
            let amplitude = if wobble {
                let room = (start[1] - half).min(h - half - start[1]);
                room.min(1.5).max(0.0)
            } else {
                0.0
            };
            let axis_speed = |rng: &mut R, pos: f64, extent: f64, pad: f64| {
                let lo = ((half + pad - pos) / span).max(-cfg.max_speed);
                let hi = ((extent - half - pad - pos) / span).min(cfg.max_speed);
                if hi > lo {
                    // quantized to 1/16 px so positions are exact binary fractions
                    let v: f64 = rng.random_range(lo..=hi);
                    let q = libm::round(v * 16.0) / 16.0;
                    if q < lo || q > hi {
                        libm::trunc(v * 16.0) / 16.0
                    } else {
                        q
                    }
                } else {
                    0.0
                }
            };
            let velocity = [
                axis_speed(rng, start[0], w, 0.0),
                axis_speed(rng, start[1], h, amplitude),
            ];
            let trajectory = if amplitude > 0.0 {
                Trajectory::Sinusoidal {
                    start,
                    velocity,
                    amplitude,
                    period: cfg.frames as f64,
                }
            } else {
                Trajectory::Linear { start, velocity }
            };
            concepts.push(ConceptSpec {
                shape,
                color,
                size,
                trajectory,
            });
        }
        let spec = SceneSpec {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            concepts,
            background_seed: rng.random(),
            caption_template: rng.random_range(0..CAPTION_TEMPLATES),
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::Range("could not place concepts without overlap".into()))
}

pub const BACKGROUND_LEVEL: f64 = 0.25;
pub const BACKGROUND_JITTER: f64 = 0.08;

/// Static gray texture shared by every frame of a scene.
pub fn background(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(height, width, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let g = BACKGROUND_LEVEL + rng.random_range(-BACKGROUND_JITTER..=BACKGROUND_JITTER);
            img.set_pixel(y, x, [g; 3]);
        }
    }
    img
}

/// Paint `shape` in `rgb` onto `img`, testing pixel centers.
pub fn draw_shape(img: &mut Image, shape: Shape, center: [f64; 2], size: f64, rgb: [f64; 3]) {
    let h = size / 2.0 + 1.0;
    let x0 = (center[0] - h).max(0.0) as usize;
    let y0 = (center[1] - h).max(0.0) as usize;
    let x1 = ((center[0] + h).max(0.0) as usize + 1).min(img.width);
    let y1 = ((center[1] + h).max(0.0) as usize + 1).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(center[0], center[1], size, x as f64 + 0.5, y as f64 + 0.5) {
                img.set_pixel(y, x, rgb);
            }
        }
    }
}

pub fn render_frame(spec: &SceneSpec, frame: usize, bg: &Image) -> Image {
    let mut img = bg.clone();
    for c in &spec.concepts {
        draw_shape(&mut img, c.shape, c.trajectory.position(frame), c.size, c.color.rgb());
    }
    img
}

/// Hard rasterization, later concepts drawn over earlier ones.
pub fn render_video(spec: &SceneSpec) -> Video {
    let bg = background(spec.height, spec.width, spec.background_seed);
    let frames: Vec<Image> = (0..spec.frames).map(|f| render_frame(spec, f, &bg)).collect();
    Video::from_frames(&frames).expect("frames share one shape")
}

pub const REFERENCE_SIDE: usize = 32;
pub const REFERENCE_SHAPE_SIZE: f64 = 20.0;
pub const REFERENCE_BACKGROUND: f64 = 0.5;

/// Canonical reference image: the concept centered on mid-gray.
pub fn render_reference(concept: &ConceptSpec) -> (Image, String) {
    (reference_image(concept.shape, concept.color), concept.label())
}

pub fn reference_image(shape: Shape, color: Color) -> Image {
    let mut img = Image::filled(REFERENCE_SIDE, REFERENCE_SIDE, [REFERENCE_BACKGROUND; 3]);
    let c = REFERENCE_SIDE as f64 / 2.0;
    draw_shape(&mut img, shape, [c, c], REFERENCE_SHAPE_SIZE, color.rgb());
    img
}

/// Indefinite article for `word`.
pub fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

pub fn caption(spec: &SceneSpec) -> String {
    let parts: Vec<String> = spec
        .concepts
        .iter()
        .map(|c| {
            let label = c.label();
            format!("{} {label} {}", article(&label), c.trajectory.motion_phrase())
        })
        .collect();
    let joined = match parts.len() {
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    };
    match spec.caption_template % CAPTION_TEMPLATES {
        0 => format!("{joined} across a textured background"),
        1 => format!("a video of {joined}"),
        _ => format!("on a dark background, {joined}"),
    }
}

/// Exact boxes from trajectory math.
pub fn oracle_locate(spec: &SceneSpec, frame: usize) -> Result<Vec<(usize, BoundingBox)>> {
    if frame >= spec.frames {
        return Err(Error::Range(format!("frame {frame} >= {}", spec.frames)));
    }
    Ok(spec
        .concepts
        .iter()
        .enumerate()
        .map(|(i, c)| (i, c.box_at(frame)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still(shape: Shape, color: Color, size: f64, at: [f64; 2]) -> ConceptSpec {
        ConceptSpec {
            shape,
            color,
            size,
            trajectory: Trajectory::Linear {
                start: at,
                velocity: [0.0, 0.0],
            },
        }
    }

    #[test]
    fn gen_scene_is_seeded_and_ranged() {
        let a = gen_scene(&mut ChaCha8Rng::seed_from_u64(5), 2).unwrap();
        let b = gen_scene(&mut ChaCha8Rng::seed_from_u64(5), 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            gen_scene(&mut ChaCha8Rng::seed_from_u64(1), 1).unwrap().concepts.len(),
            1
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gen_scene(&mut rng, 0).is_err());
        assert!(gen_scene(&mut rng, 5).is_err());
    }

    #[test]
    fn zero_velocity_frames_identical_and_center_pixel_exact() {
        let spec = SceneSpec {
            frames: 4,
            height: 32,
            width: 32,
            concepts: vec![still(Shape::Triangle, Color::Cyan, 10.0, [10.5, 12.5])],
            background_seed: 3,
            caption_template: 0,
        };
        spec.validate().unwrap();
        let v = render_video(&spec);
        for f in 1..4 {
            assert_eq!(v.frame_data(f), v.frame_data(0));
        }
        assert_eq!(v.frame(2).pixel(12, 10), Color::Cyan.rgb());
        assert_eq!(oracle_locate(&spec, 0).unwrap(), oracle_locate(&spec, 3).unwrap());
        assert!(oracle_locate(&spec, 4).is_err());
        assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn reference_and_labels() {
        for shape in Shape::ALL {
            for color in Color::ALL {
                let c = still(shape, color, 5.0, [8.0, 8.0]);
                let (img, label) = render_reference(&c);
                assert_eq!(label, format!("{} {}", color.name(), shape.name()));
                assert_eq!(label, label.to_lowercase());
                assert_eq!(parse_label(&label), Some((color, shape)));
                assert_eq!(img.pixel(REFERENCE_SIDE / 2, REFERENCE_SIDE / 2), color.rgb());
                assert_eq!(render_reference(&c).0, img);
            }
        }
    }

    #[test]
    fn captions_follow_concept_order() {
        let mut spec = SceneSpec {
            frames: 2,
            height: 32,
            width: 32,
            concepts: vec![still(Shape::Circle, Color::Red, 6.0, [8.0, 8.0])],
            background_seed: 0,
            caption_template: 0,
        };
        let one = caption(&spec);
        assert_eq!(one, "a red circle resting across a textured background");
        assert!(!one.contains(" and "));
        spec.concepts.push(ConceptSpec {
            trajectory: Trajectory::Linear {
                start: [20.0, 20.0],
                velocity: [-1.0, 0.25],
            },
            ..still(Shape::Square, Color::Blue, 6.0, [0.0, 0.0])
        });
        spec.caption_template = 1;
        let two = caption(&spec);
        assert_eq!(two, "a video of a red circle resting and a blue square moving left");
        assert!(two.find("red circle").unwrap() < two.find("blue square").unwrap());
    }

    #[test]
    fn validate_rejects_duplicates_and_escapes() {
        let c = still(Shape::Circle, Color::Red, 6.0, [8.0, 8.0]);
        let mut spec = SceneSpec {
            frames: 2,
            height: 16,
            width: 16,
            concepts: vec![c.clone(), c],
            background_seed: 0,
            caption_template: 0,
        };
        assert!(spec.validate().is_err());
        spec.concepts = vec![still(Shape::Circle, Color::Red, 6.0, [2.0, 8.0])];
        assert!(spec.validate().is_err());
    }
}
