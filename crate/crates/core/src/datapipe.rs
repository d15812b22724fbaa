//! Two-stage curation of multi-concept training clips.
//!
//! Stage one drops whole videos cheaply (scene cuts, static footage, low
//! contrast, captions without known nouns). Stage two localizes every
//! caption noun, then refines each candidate with a segmentation mask and
//! keeps one reference crop per surviving entity.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::toydata::{self, Color, ConceptSpec, SceneSpec, Shape, Trajectory};
use crate::video::{luminance, Image, Video};
use crate::vision::{self, BoundingBox, Tone};

/// Noun classes and the lowercase sub-words that name them.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    classes: BTreeMap<String, Vec<String>>,
    word_to_class: BTreeMap<String, String>,
}

impl Taxonomy {
    pub fn new(classes: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut word_to_class = BTreeMap::new();
        for (class, words) in &classes {
            if words.is_empty() {
                return Err(Error::Invalid(format!("class `{class}` has no sub-words")));
            }
            for w in words {
                if w.is_empty() || *w != w.to_lowercase() {
                    return Err(Error::Invalid(format!("sub-word `{w}` must be nonempty lowercase")));
                }
                if let Some(prev) = word_to_class.insert(w.clone(), class.clone()) {
                    return Err(Error::Invalid(format!(
                        "sub-word `{w}` appears in `{prev}` and `{class}`"
                    )));
                }
            }
        }
        Ok(Taxonomy { classes, word_to_class })
    }

    /// The first `n` classes of the built-in list (shape classes and
    /// `person` first).
    pub fn builtin(n: usize) -> Result<Self> {
        if n == 0 || n > BUILTIN_CLASSES.len() {
            return Err(Error::Range(format!(
                "taxonomy size {n} outside 1..={}",
                BUILTIN_CLASSES.len()
            )));
        }
        let classes = BUILTIN_CLASSES[..n]
            .iter()
            .map(|(c, words)| (c.to_string(), words.iter().map(|w| w.to_string()).collect()))
            .collect();
        Taxonomy::new(classes)
    }

    pub fn classes(&self) -> &BTreeMap<String, Vec<String>> {
        &self.classes
    }

    pub fn class_of(&self, word: &str) -> Option<&str> {
        self.word_to_class.get(word).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl Default for Taxonomy {
    fn default() -> Self {
        Taxonomy::builtin(BUILTIN_CLASSES.len()).expect("builtin taxonomy is valid")
    }
}

#[rustfmt::skip]
const BUILTIN_CLASSES: &[(&str, &[&str])] = &[
    ("circle", &["circle", "disc", "disk", "ring"]),
    ("square", &["square", "block", "tile"]),
    ("triangle", &["triangle", "wedge"]),
    ("person", &["person", "man", "woman", "child", "girl", "boy", "people"]),
    ("dog", &["dog", "puppy", "beagle", "poodle", "terrier"]),
    ("cat", &["cat", "kitten", "kitty"]),
    ("ball", &["ball", "football", "basketball"]),
    ("bird", &["bird", "sparrow", "parrot"]),
    ("horse", &["horse", "pony", "foal"]),
    ("cow", &["cow", "calf", "cattle"]),
    ("sheep", &["sheep", "lamb"]),
    ("pig", &["pig", "piglet"]),
    ("rabbit", &["rabbit", "bunny"]),
    ("bear", &["bear", "cub"]),
    ("teddy bear", &["teddy"]),
    ("fish", &["fish", "goldfish"]),
    ("duck", &["duck", "duckling"]),
    ("chicken", &["chicken", "hen", "rooster"]),
    ("monkey", &["monkey", "chimpanzee"]),
    ("elephant", &["elephant"]),
    ("lion", &["lion", "lioness"]),
    ("tiger", &["tiger"]),
    ("fox", &["fox"]),
    ("wolf", &["wolf"]),
    ("deer", &["deer", "fawn"]),
    ("mouse", &["mouse", "mice"]),
    ("hamster", &["hamster"]),
    ("turtle", &["turtle", "tortoise"]),
    ("frog", &["frog", "toad"]),
    ("snake", &["snake", "python"]),
    ("butterfly", &["butterfly"]),
    ("bee", &["bee", "bumblebee"]),
    ("owl", &["owl"]),
    ("penguin", &["penguin"]),
    ("panda", &["panda"]),
    ("koala", &["koala"]),
    ("squirrel", &["squirrel"]),
    ("goat", &["goat", "kid"]),
    ("camel", &["camel"]),
    ("giraffe", &["giraffe"]),
    ("zebra", &["zebra"]),
    ("dolphin", &["dolphin"]),
    ("whale", &["whale"]),
    ("shark", &["shark"]),
    ("octopus", &["octopus"]),
    ("crab", &["crab"]),
    ("car", &["car", "sedan", "taxi"]),
    ("truck", &["truck", "lorry"]),
    ("bus", &["bus"]),
    ("bicycle", &["bicycle", "bike"]),
    ("motorcycle", &["motorcycle", "scooter"]),
    ("train", &["train", "locomotive"]),
    ("boat", &["boat", "ship", "canoe"]),
    ("airplane", &["airplane", "plane", "jet"]),
    ("helicopter", &["helicopter"]),
    ("robot", &["robot", "android"]),
    ("doll", &["doll", "puppet"]),
    ("toy", &["toy"]),
    ("guitar", &["guitar"]),
    ("piano", &["piano", "keyboard"]),
    ("violin", &["violin", "fiddle"]),
    ("drum", &["drum"]),
    ("hat", &["hat", "cap", "beanie"]),
    ("glasses", &["glasses", "sunglasses"]),
    ("shoe", &["shoe", "sneaker", "boot"]),
    ("bag", &["bag", "backpack", "handbag"]),
    ("umbrella", &["umbrella"]),
    ("watch", &["watch", "wristwatch"]),
    ("necklace", &["necklace"]),
    ("dress", &["dress", "gown"]),
    ("shirt", &["shirt", "tshirt"]),
    ("jacket", &["jacket", "coat"]),
    ("scarf", &["scarf"]),
    ("cup", &["cup", "mug"]),
    ("bottle", &["bottle"]),
    ("bowl", &["bowl"]),
    ("plate", &["plate", "dish"]),
    ("vase", &["vase"]),
    ("lamp", &["lamp", "lantern"]),
    ("chair", &["chair", "stool"]),
    ("sofa", &["sofa", "couch"]),
    ("table", &["table", "desk"]),
    ("bed", &["bed"]),
    ("clock", &["clock"]),
    ("book", &["book", "notebook"]),
    ("phone", &["phone", "smartphone"]),
    ("laptop", &["laptop", "computer"]),
    ("camera", &["camera"]),
    ("television", &["television", "tv"]),
    ("flower", &["flower", "rose", "tulip", "daisy"]),
    ("tree", &["tree", "pine", "oak"]),
    ("plant", &["plant", "cactus"]),
    ("apple", &["apple"]),
    ("banana", &["banana"]),
    ("orange fruit", &["tangerine"]),
    ("cake", &["cake", "cupcake"]),
    ("pizza", &["pizza"]),
    ("bread", &["bread", "loaf"]),
    ("balloon", &["balloon"]),
    ("kite", &["kite"]),
    ("candle", &["candle"]),
    ("box", &["box", "crate", "parcel"]),
    ("key", &["key"]),
    ("sword", &["sword"]),
    ("shield", &["shield"]),
    ("crown", &["crown", "tiara"]),
    ("mask", &["mask"]),
    ("statue", &["statue", "sculpture"]),
    ("house", &["house", "cottage"]),
    ("tower", &["tower"]),
    ("bridge", &["bridge"]),
    ("castle", &["castle"]),
    ("tent", &["tent"]),
    ("fence", &["fence"]),
    ("bench", &["bench"]),
    ("mailbox", &["mailbox"]),
    ("snowman", &["snowman"]),
    ("rocket", &["rocket"]),
    ("star", &["star"]),
    ("moon", &["moon"]),
];

/// Why a video was dropped (`None` for accepted videos).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    SceneCut,
    LowFlow,
    LowContrast,
    NoNouns,
    AllBoxesEliminated,
    BadMask,
    FaceMissing,
    None,
}

impl RejectReason {
    pub const ALL: [RejectReason; 8] = [
        RejectReason::SceneCut,
        RejectReason::LowFlow,
        RejectReason::LowContrast,
        RejectReason::NoNouns,
        RejectReason::AllBoxesEliminated,
        RejectReason::BadMask,
        RejectReason::FaceMissing,
        RejectReason::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::SceneCut => "scene_cut",
            RejectReason::LowFlow => "low_flow",
            RejectReason::LowContrast => "low_contrast",
            RejectReason::NoNouns => "no_nouns",
            RejectReason::AllBoxesEliminated => "all_boxes_eliminated",
            RejectReason::BadMask => "bad_mask",
            RejectReason::FaceMissing => "face_missing",
            RejectReason::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        RejectReason::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

fn need_frames(video: &Video, n: usize) -> Result<()> {
    if video.frames < n {
        return Err(Error::TooFewFrames {
            needed: n,
            got: video.frames,
        });
    }
    Ok(())
}

pub const HISTOGRAM_BINS: usize = 8;

/// Per-channel histograms, each normalized to unit mass.
pub fn color_histogram(frame: &[f64]) -> [[f64; HISTOGRAM_BINS]; 3] {
    let mut h = [[0.0; HISTOGRAM_BINS]; 3];
    let n = (frame.len() / 3).max(1) as f64;
    for px in frame.chunks_exact(3) {
        for c in 0..3 {
            let b = ((px[c].clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            h[c][b] += 1.0 / n;
        }
    }
    h
}

/// Total-variation distance between color histograms, averaged over the
/// channels; lies in `[0, 1]`.
pub fn histogram_distance(a: &[f64], b: &[f64]) -> f64 {
    let (ha, hb) = (color_histogram(a), color_histogram(b));
    let mut d = 0.0;
    for c in 0..3 {
        d += ha[c].iter().zip(&hb[c]).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
    }
    d / 3.0
}

/// Passes unless some adjacent-frame histogram distance exceeds `threshold`.
pub fn scene_cut_gate(video: &Video, threshold: f64) -> Result<bool> {
    need_frames(video, 2)?;
    Ok((1..video.frames).all(|f| histogram_distance(video.frame_data(f - 1), video.frame_data(f)) <= threshold))
}

/// Mean absolute inter-frame difference over every pixel and channel.
pub fn flow_score(video: &Video) -> Result<f64> {
    need_frames(video, 2)?;
    let mut s = 0.0;
    for f in 1..video.frames {
        s += video
            .frame_data(f)
            .iter()
            .zip(video.frame_data(f - 1))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(s / ((video.frames - 1) * video.frame_len()) as f64)
}

pub fn flow_gate(video: &Video, min_score: f64) -> Result<bool> {
    Ok(flow_score(video)? >= min_score)
}

/// Mean over frames of the luminance standard deviation.
pub fn contrast_score(video: &Video) -> Result<f64> {
    if video.frames == 0 || video.frame_len() == 0 {
        return Err(Error::Empty("video"));
    }
    let mut total = 0.0;
    for f in 0..video.frames {
        let lum: Vec<f64> = video
            .frame_data(f)
            .chunks_exact(video.channels)
            .map(|p| luminance([p[0], p[1], p[2]]))
            .collect();
        let n = lum.len() as f64;
        let mean = lum.iter().sum::<f64>() / n;
        let var = lum.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
        total += libm::sqrt(var);
    }
    Ok(total / video.frames as f64)
}

pub fn contrast_gate(video: &Video, min_std: f64) -> Result<bool> {
    Ok(contrast_score(video)? >= min_std)
}

/// `(surface word, class)` pairs for caption words that are taxonomy
/// sub-words, one per class, in caption order.
pub fn extract_nouns(caption: &str, taxonomy: &Taxonomy) -> Vec<(String, String)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for word in crate::conditioning::tokenize(caption) {
        if let Some(class) = taxonomy.class_of(&word) {
            if seen.insert(class.to_string()) {
                out.push((word, class.to_string()));
            }
        }
    }
    out
}

/// `max(1, round(fraction·n))` evenly spaced indices starting at 0.
pub fn sample_frames(n_frames: usize, fraction: f64) -> Result<Vec<usize>> {
    if n_frames == 0 {
        return Err(Error::Empty("frames"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range(format!("fraction {fraction} outside (0,1]")));
    }
    let k = (libm::round(fraction * n_frames as f64) as usize).clamp(1, n_frames);
    Ok((0..k).map(|i| i * n_frames / k).collect())
}

/// Greedy suppression in (score desc, x0, y0, input order) order; a box is
/// dropped iff its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&boxes[a], &boxes[b]);
        q.score
            .total_cmp(&p.score)
            .then(p.x0.total_cmp(&q.x0))
            .then(p.y0.total_cmp(&q.y0))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<BoundingBox> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.iou(&boxes[i]) <= iou_threshold) {
            kept.push(boxes[i].clone());
        }
    }
    kept
}

/// Keeps boxes whose area fraction of the frame lies in `[lo, hi]`.
pub fn area_gate(boxes: &[BoundingBox], width: usize, height: usize, lo: f64, hi: f64) -> Vec<BoundingBox> {
    let frame = (width * height) as f64;
    boxes
        .iter()
        .filter(|b| {
            let r = b.area() / frame;
            r >= lo && r <= hi
        })
        .cloned()
        .collect()
}

/// Binary mask over a whole frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// Tight box around the set pixels.
    pub fn bounding_box(&self, label: &str, score: f64) -> Option<BoundingBox> {
        let comps = vision::components(&self.data, self.width, self.height, true);
        let x0 = comps.iter().map(|c| c.x0).min()?;
        let y0 = comps.iter().map(|c| c.y0).min()?;
        let x1 = comps.iter().map(|c| c.x1).max()?;
        let y1 = comps.iter().map(|c| c.y1).max()?;
        Some(BoundingBox::new(
            x0 as f64, y0 as f64, x1 as f64, y1 as f64, score, label,
        ))
    }
}

/// Fails on an area fraction outside `[lo, hi]` or more than
/// `max_components` 4-connected pieces.
pub fn mask_gate(mask: &Mask, width: usize, height: usize, lo: f64, hi: f64, max_components: usize) -> Result<bool> {
    if mask.width != width || mask.height != height || mask.data.len() != width * height {
        return Err(Error::Shape(format!(
            "mask {}x{} for a {width}x{height} frame",
            mask.width, mask.height
        )));
    }
    let frac = mask.area() as f64 / (width * height) as f64;
    if frac < lo || frac > hi {
        return Ok(false);
    }
    Ok(vision::components(&mask.data, width, height, false).len() <= max_components)
}

pub trait Captioner: Send + Sync {
    fn caption(&self, video: &Video) -> Result<String>;
}

pub trait Detector: Send + Sync {
    /// Boxes for any of `labels` found in `frame`.
    fn detect(&self, frame: &Image, labels: &[String]) -> Result<Vec<BoundingBox>>;
}

pub trait Classifier: Send + Sync {
    /// One score per label; higher is a better match.
    fn scores(&self, crop: &Image, labels: &[String]) -> Result<Vec<f64>>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, frame: &Image, region: &BoundingBox) -> Result<Mask>;
}

pub trait FaceDetector: Send + Sync {
    fn faces(&self, crop: &Image) -> Result<Vec<BoundingBox>>;
}

pub fn consistency_gate(classifier: &dyn Classifier, crop: &Image, expected: &str, labels: &[String]) -> Result<bool> {
    if crop.is_empty() {
        return Err(Error::Empty("crop"));
    }
    let Some(want) = labels.iter().position(|l| l == expected) else {
        return Err(Error::Invalid(format!("expected class `{expected}` not among labels")));
    };
    let scores = classifier.scores(crop, labels)?;
    if scores.len() != labels.len() {
        return Err(Error::backend("classify", "score count differs from label count"));
    }
    let best = scores.iter().enumerate().fold(
        0,
        |best, (i, s)| if s.total_cmp(&scores[best]).is_gt() { i } else { best },
    );
    Ok(best == want || scores[best] == scores[want])
}

pub const PERSON: &str = "person";

/// Person crops must contain a face; every other class passes.
pub fn face_gate(detector: &dyn FaceDetector, crop: &Image, label_class: &str) -> Result<bool> {
    if crop.is_empty() {
        return Err(Error::Empty("crop"));
    }
    if label_class != PERSON {
        return Ok(true);
    }
    Ok(!detector.faces(crop)?.is_empty())
}

pub struct BackendSuite {
    pub captioner: Box<dyn Captioner>,
    pub detector: Box<dyn Detector>,
    pub classifier: Box<dyn Classifier>,
    pub segmenter: Box<dyn Segmenter>,
    pub face_detector: Box<dyn FaceDetector>,
}

impl BackendSuite {
    /// Deterministic palette/template backends.
    pub fn toy(face_seed: u64) -> Self {
        BackendSuite {
            captioner: Box::new(ToyCaptioner::default()),
            detector: Box::new(ToyDetector::default()),
            classifier: Box::new(ToyClassifier),
            segmenter: Box::new(ToySegmenter),
            face_detector: Box::new(ToyFaceDetector::new(face_seed)),
        }
    }
}

/// Names the closed single-tone blobs of the middle frame, left to right.
#[derive(Clone, Debug)]
pub struct ToyCaptioner {
    pub min_area: usize,
}

impl Default for ToyCaptioner {
    fn default() -> Self {
        ToyCaptioner { min_area: 16 }
    }
}

impl Captioner for ToyCaptioner {
    fn caption(&self, video: &Video) -> Result<String> {
        if video.frames == 0 {
            return Err(Error::backend("caption", "empty video"));
        }
        let mut blobs = vision::find_blobs(&video.frame(video.frames / 2), self.min_area, true);
        blobs.sort_by_key(|b| (b.component.x0, b.component.y0));
        let names: Vec<String> = blobs
            .iter()
            .map(|b| match b.tone {
                Tone::Skin => String::from("person"),
                _ => b.label(),
            })
            .collect();
        let named: Vec<String> = names.iter().map(|n| format!("{} {n}", toydata::article(n))).collect();
        Ok(match named.len() {
            0 => String::from("an empty textured scene"),
            1 => named[0].clone(),
            n => format!("{} and {}", named[..n - 1].join(", "), named[n - 1]),
        })
    }
}

/// Closed blobs labelled by shape (or `person` for skin), scored by how
/// close their fill ratio sits to the shape's.
#[derive(Clone, Debug)]
pub struct ToyDetector {
    pub min_area: usize,
}

impl Default for ToyDetector {
    fn default() -> Self {
        ToyDetector { min_area: 16 }
    }
}

impl Detector for ToyDetector {
    fn detect(&self, frame: &Image, labels: &[String]) -> Result<Vec<BoundingBox>> {
        let mut out = Vec::new();
        for blob in vision::find_blobs(frame, self.min_area, true) {
            let class = match blob.tone {
                Tone::Skin => PERSON,
                Tone::Paint(_) => blob.shape.name(),
            };
            let fine = blob.label();
            if let Some(l) = labels.iter().find(|l| **l == class || **l == fine) {
                out.push(blob.component.to_box(blob.score(), l.clone()));
            }
        }
        Ok(out)
    }
}

/// Features of the dominant closed blob in a crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropFeatures {
    pub mean_rgb: [f64; 3],
    pub fill: f64,
    pub tone: Option<Tone>,
}

pub fn crop_features(crop: &Image) -> CropFeatures {
    let blobs = vision::find_blobs(crop, 1, true);
    let Some(best) = blobs.iter().max_by_key(|b| b.component.area()) else {
        let n = (crop.height * crop.width).max(1) as f64;
        let mut m = [0.0; 3];
        for p in crop.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += p[c] / n;
            }
        }
        return CropFeatures {
            mean_rgb: m,
            fill: 0.0,
            tone: None,
        };
    };
    let mut m = [0.0; 3];
    let mut n = 0.0;
    for &p in &best.component.pixels {
        let px = crop.pixel(p / crop.width, p % crop.width);
        if vision::nearest_tone(px) == Some(best.tone) {
            for c in 0..3 {
                m[c] += px[c];
            }
            n += 1.0;
        }
    }
    if n > 0.0 {
        m.iter_mut().for_each(|v| *v /= n);
    } else {
        m = best.tone.rgb();
    }
    CropFeatures {
        mean_rgb: m,
        fill: best.component.fill(),
        tone: Some(best.tone),
    }
}

/// Nearest-centroid classifier over (mean color, fill ratio). Bare shape
/// labels accept any paint color; `person` expects skin.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyClassifier;

impl ToyClassifier {
    pub fn distance(features: &CropFeatures, label: &str) -> f64 {
        let fill = |s: Shape| (features.fill - s.ideal_fill()) * (features.fill - s.ideal_fill());
        if label == PERSON {
            return vision::dist2(features.mean_rgb, vision::SKIN);
        }
        if let Some((color, shape)) = toydata::parse_label(label) {
            return vision::dist2(features.mean_rgb, color.rgb()) + fill(shape);
        }
        if let Some(shape) = Shape::from_name(label) {
            let skin = if features.tone == Some(Tone::Skin) { 1.0 } else { 0.0 };
            return fill(shape) + skin;
        }
        f64::INFINITY
    }
}

impl Classifier for ToyClassifier {
    fn scores(&self, crop: &Image, labels: &[String]) -> Result<Vec<f64>> {
        if crop.is_empty() {
            return Err(Error::backend("classify", "empty crop"));
        }
        let f = crop_features(crop);
        Ok(labels.iter().map(|l| -ToyClassifier::distance(&f, l)).collect())
    }
}

/// Raw (unclosed) pixels of the dominant tone inside the box.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToySegmenter;

impl Segmenter for ToySegmenter {
    fn segment(&self, frame: &Image, region: &BoundingBox) -> Result<Mask> {
        let (x0, y0, x1, y1) = region.pixel_window(frame.width, frame.height);
        let mut counts: BTreeMap<Tone, usize> = BTreeMap::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if let Some(t) = vision::nearest_tone(frame.pixel(y, x)) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut data = vec![false; frame.width * frame.height];
        if let Some((&tone, _)) = counts.iter().max_by_key(|(t, c)| (**c, core::cmp::Reverse(**t))) {
            for y in y0..y1 {
                for x in x0..x1 {
                    data[y * frame.width + x] = vision::nearest_tone(frame.pixel(y, x)) == Some(tone);
                }
            }
        }
        Ok(Mask {
            width: frame.width,
            height: frame.height,
            data,
        })
    }
}

pub const FACE_SIDE: usize = 5;
pub const FACE_DARK: f64 = 0.1;

/// Seeded 5×5 dark/light face pattern; `true` marks dark pixels. Always
/// has between 6 and 14 dark cells so it correlates with nothing flat.
pub fn face_template(seed: u64) -> [[bool; FACE_SIDE]; FACE_SIDE] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut t = [[false; FACE_SIDE]; FACE_SIDE];
        for row in t.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.random::<f64>() < 0.4;
            }
        }
        let dark = t.iter().flatten().filter(|&&d| d).count();
        if (6..=14).contains(&dark) {
            return t;
        }
    }
}

/// Slides the template over the crop's luminance; a face is any window
/// whose Pearson correlation with the template reaches `min_correlation`.
#[derive(Clone, Debug)]
pub struct ToyFaceDetector {
    pub template: [[bool; FACE_SIDE]; FACE_SIDE],
    pub min_correlation: f64,
}

impl ToyFaceDetector {
    pub fn new(seed: u64) -> Self {
        ToyFaceDetector {
            template: face_template(seed),
            min_correlation: 0.9,
        }
    }

    pub fn best_match(&self, crop: &Image) -> Option<(f64, usize, usize)> {
        if crop.height < FACE_SIDE || crop.width < FACE_SIDE {
            return None;
        }
        let tpl: Vec<f64> = self
            .template
            .iter()
            .flatten()
            .map(|&d| if d { 0.0 } else { 1.0 })
            .collect();
        let tm = tpl.iter().sum::<f64>() / tpl.len() as f64;
        let tc: Vec<f64> = tpl.iter().map(|v| v - tm).collect();
        let tn = libm::sqrt(tc.iter().map(|v| v * v).sum::<f64>());
        let mut best: Option<(f64, usize, usize)> = None;
        let mut win = vec![0.0; FACE_SIDE * FACE_SIDE];
        for y in 0..=crop.height - FACE_SIDE {
            for x in 0..=crop.width - FACE_SIDE {
                for dy in 0..FACE_SIDE {
                    for dx in 0..FACE_SIDE {
                        win[dy * FACE_SIDE + dx] = luminance(crop.pixel(y + dy, x + dx));
                    }
                }
                let wm = win.iter().sum::<f64>() / win.len() as f64;
                let wn = libm::sqrt(win.iter().map(|v| (v - wm) * (v - wm)).sum::<f64>());
                if wn < 1e-9 {
                    continue;
                }
                let r = win.iter().zip(&tc).map(|(w, t)| (w - wm) * t).sum::<f64>() / (wn * tn);
                if best.is_none_or(|b| r > b.0) {
                    best = Some((r, x, y));
                }
            }
        }
        best
    }
}

impl FaceDetector for ToyFaceDetector {
    fn faces(&self, crop: &Image) -> Result<Vec<BoundingBox>> {
        Ok(match self.best_match(crop) {
            Some((r, x, y)) if r >= self.min_correlation => vec![BoundingBox::new(
                x as f64,
                y as f64,
                (x + FACE_SIDE) as f64,
                (y + FACE_SIDE) as f64,
                r.clamp(0.0, 1.0),
                "face",
            )],
            _ => Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub scene_cut_threshold: f64,
    pub min_flow: f64,
    pub min_contrast: f64,
    pub sample_fraction: f64,
    pub iou_threshold: f64,
    pub box_area_lo: f64,
    pub box_area_hi: f64,
    pub mask_area_lo: f64,
    pub mask_area_hi: f64,
    pub max_mask_components: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene_cut_threshold: 0.5,
            min_flow: 2e-4,
            min_contrast: 0.05,
            sample_fraction: 0.1,
            iou_threshold: 0.5,
            box_area_lo: 0.1,
            box_area_hi: 0.9,
            mask_area_lo: 0.1,
            mask_area_hi: 0.9,
            max_mask_components: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageStatus {
    pub stage: &'static str,
    pub passed: bool,
    /// Gate score or surviving candidate count.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub label: String,
    pub frame: usize,
    pub region: BoundingBox,
    pub crop: Image,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationRecord {
    pub video_id: String,
    pub sampled_frames: Vec<usize>,
    pub caption: String,
    pub nouns: Vec<(String, String)>,
    pub stages: Vec<StageStatus>,
    pub reject_reason: RejectReason,
    pub entities: Vec<Entity>,
}

impl CurationRecord {
    pub fn accepted(&self) -> bool {
        self.reject_reason == RejectReason::None && !self.entities.is_empty()
    }

    /// Sorted entity labels.
    pub fn label_set(&self) -> Vec<String> {
        let mut l: Vec<String> = self.entities.iter().map(|e| e.label.clone()).collect();
        l.sort();
        l
    }
}

pub fn crop(frame: &Image, b: &BoundingBox) -> Image {
    let (x0, y0, x1, y1) = b.pixel_window(frame.width, frame.height);
    frame.crop(x0, y0, x1, y1)
}

#[derive(Clone, Debug)]
struct Candidate {
    frame: usize,
    region: BoundingBox,
    /// Dominant tone, used to tell same-class entities apart.
    key: (String, Option<Tone>),
    mask: Option<Mask>,
}

/// Runs every gate in order; the first stage that leaves nothing sets the
/// reject reason. Box- and mask-level gates filter the candidate pool.
pub fn run_pipeline(
    video_id: &str,
    video: &Video,
    suite: &BackendSuite,
    taxonomy: &Taxonomy,
    cfg: &PipelineConfig,
) -> Result<CurationRecord> {
    let mut rec = CurationRecord {
        video_id: video_id.to_string(),
        sampled_frames: Vec::new(),
        caption: String::new(),
        nouns: Vec::new(),
        stages: Vec::new(),
        reject_reason: RejectReason::None,
        entities: Vec::new(),
    };
    macro_rules! gate {
        ($stage:literal, $value:expr, $passed:expr, $reason:expr) => {{
            let passed = $passed;
            rec.stages.push(StageStatus {
                stage: $stage,
                passed,
                value: $value,
            });
            if !passed {
                rec.reject_reason = $reason;
                return Ok(rec);
            }
        }};
    }
    need_frames(video, 2)?;
    let cut = (1..video.frames)
        .map(|f| histogram_distance(video.frame_data(f - 1), video.frame_data(f)))
        .fold(0.0, f64::max);
    gate!("scene_cut", cut, cut <= cfg.scene_cut_threshold, RejectReason::SceneCut);
    let flow = flow_score(video)?;
    gate!("flow", flow, flow >= cfg.min_flow, RejectReason::LowFlow);
    let contrast = contrast_score(video)?;
    gate!(
        "contrast",
        contrast,
        contrast >= cfg.min_contrast,
        RejectReason::LowContrast
    );

    rec.caption = suite.captioner.caption(video).map_err(|e| e.at_stage("caption"))?;
    rec.nouns = extract_nouns(&rec.caption, taxonomy);
    let classes: Vec<String> = rec.nouns.iter().map(|(_, c)| c.clone()).collect();
    gate!(
        "extract_nouns",
        classes.len() as f64,
        !classes.is_empty(),
        RejectReason::NoNouns
    );

    rec.sampled_frames = sample_frames(video.frames, cfg.sample_fraction)?;
    let frames: BTreeMap<usize, Image> = rec.sampled_frames.iter().map(|&f| (f, video.frame(f))).collect();
    let (w, h) = (video.width, video.height);
    let mut pool: Vec<Candidate> = Vec::new();
    let mut detected = 0usize;
    for (&f, img) in &frames {
        let boxes = suite.detector.detect(img, &classes).map_err(|e| e.at_stage("detect"))?;
        for b in &boxes {
            b.validate(w, h).map_err(|e| Error::backend("detect", format!("{e}")))?;
        }
        detected += boxes.len();
        let kept = nms(&boxes, cfg.iou_threshold);
        for region in area_gate(&kept, w, h, cfg.box_area_lo, cfg.box_area_hi) {
            let c = crop(img, &region);
            if consistency_gate(suite.classifier.as_ref(), &c, &region.label, &classes)
                .map_err(|e| e.at_stage("classify"))?
            {
                let tone = crop_features(&c).tone;
                pool.push(Candidate {
                    frame: f,
                    key: (region.label.clone(), tone),
                    region,
                    mask: None,
                });
            }
        }
    }
    rec.stages.push(StageStatus {
        stage: "detect",
        passed: detected > 0,
        value: detected as f64,
    });
    gate!(
        "boxes",
        pool.len() as f64,
        !pool.is_empty(),
        RejectReason::AllBoxesEliminated
    );

    let mut masked = Vec::new();
    for mut cand in pool {
        let mask = suite
            .segmenter
            .segment(&frames[&cand.frame], &cand.region)
            .map_err(|e| e.at_stage("segment"))?;
        if mask_gate(&mask, w, h, cfg.mask_area_lo, cfg.mask_area_hi, cfg.max_mask_components)? {
            cand.mask = Some(mask);
            masked.push(cand);
        }
    }
    gate!("mask", masked.len() as f64, !masked.is_empty(), RejectReason::BadMask);

    let mut refined = Vec::new();
    for mut cand in masked {
        let mask = cand.mask.as_ref().expect("masked candidates carry masks");
        let Some(b) = mask.bounding_box(&cand.region.label, cand.region.score) else {
            continue;
        };
        let c = crop(&frames[&cand.frame], &b);
        if consistency_gate(suite.classifier.as_ref(), &c, &b.label, &classes).map_err(|e| e.at_stage("classify"))? {
            cand.region = b;
            refined.push(cand);
        }
    }
    gate!(
        "refined_boxes",
        refined.len() as f64,
        !refined.is_empty(),
        RejectReason::AllBoxesEliminated
    );

    let mut faced = Vec::new();
    for cand in refined {
        let c = crop(&frames[&cand.frame], &cand.region);
        if face_gate(suite.face_detector.as_ref(), &c, &cand.region.label).map_err(|e| e.at_stage("face"))? {
            faced.push(cand);
        }
    }
    gate!("face", faced.len() as f64, !faced.is_empty(), RejectReason::FaceMissing);

    // one entity per (class, tone): the best-scoring candidate, earliest frame on ties
    let mut best: BTreeMap<(String, Option<Tone>), Candidate> = BTreeMap::new();
    for cand in faced {
        match best.get(&cand.key) {
            Some(b) if b.region.score >= cand.region.score => {}
            _ => {
                best.insert(cand.key.clone(), cand);
            }
        }
    }
    rec.entities = best
        .into_values()
        .map(|c| Entity {
            label: c.region.label.clone(),
            frame: c.frame,
            crop: crop(&frames[&c.frame], &c.region),
            region: c.region,
            mask: c.mask.expect("masked"),
        })
        .collect();
    Ok(rec)
}

/// Fraction of accepted records whose sorted label list equals the ground
/// truth; 0 when nothing was accepted.
pub fn success_rate(records: &[CurationRecord], ground_truth: &BTreeMap<String, Vec<String>>) -> Result<f64> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    if ids.len() != records.len() {
        return Err(Error::Alignment("duplicate video ids".into()));
    }
    if let Some(missing) = records.iter().find(|r| !ground_truth.contains_key(&r.video_id)) {
        return Err(Error::Alignment(format!("no ground truth for {}", missing.video_id)));
    }
    if let Some(extra) = ground_truth.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(Error::Alignment(format!("ground truth for unknown video {extra}")));
    }
    let accepted: Vec<&CurationRecord> = records.iter().filter(|r| r.accepted()).collect();
    if accepted.is_empty() {
        return Ok(0.0);
    }
    let ok = accepted
        .iter()
        .filter(|r| {
            let mut gt = ground_truth[&r.video_id].clone();
            gt.sort();
            gt == r.label_set()
        })
        .count();
    Ok(ok as f64 / accepted.len() as f64)
}

/// Accepted count and rejections per reason; merges associatively.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurationSummary {
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<&'static str, usize>,
    pub errors: usize,
}

impl CurationSummary {
    pub fn add(&mut self, record: &CurationRecord) {
        if record.accepted() {
            self.accepted += 1;
        } else {
            *self
                .rejected_by_reason
                .entry(record.reject_reason.as_str())
                .or_default() += 1;
        }
    }

    pub fn merge(mut self, other: CurationSummary) -> CurationSummary {
        self.accepted += other.accepted;
        self.errors += other.errors;
        for (k, v) in other.rejected_by_reason {
            *self.rejected_by_reason.entry(k).or_default() += v;
        }
        self
    }

    pub fn rejected(&self) -> usize {
        self.rejected_by_reason.values().sum()
    }
}

/// Skin disc with an optional face pattern centered on it.
pub fn draw_person(img: &mut Image, center: [f64; 2], size: f64, face: Option<&[[bool; FACE_SIDE]; FACE_SIDE]>) {
    toydata::draw_shape(img, Shape::Circle, center, size, vision::SKIN);
    if let Some(tpl) = face {
        let x0 = (center[0] as usize).saturating_sub(FACE_SIDE / 2);
        let y0 = (center[1] as usize).saturating_sub(FACE_SIDE / 2);
        for (dy, row) in tpl.iter().enumerate() {
            for (dx, &dark) in row.iter().enumerate() {
                if dark {
                    img.set_pixel(y0 + dy, x0 + dx, [FACE_DARK; 3]);
                }
            }
        }
    }
}

/// One curation fixture with its ground truth and the expected outcome.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub video_id: String,
    pub video: Video,
    pub ground_truth: Vec<String>,
    pub expected: RejectReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flaw {
    SceneCut,
    Static,
    LowContrast,
    Undersized,
    Fragmented,
    Faceless,
}

impl Flaw {
    pub const ALL: [Flaw; 6] = [
        Flaw::SceneCut,
        Flaw::Static,
        Flaw::LowContrast,
        Flaw::Undersized,
        Flaw::Fragmented,
        Flaw::Faceless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Flaw::SceneCut => "scene_cut",
            Flaw::Static => "static",
            Flaw::LowContrast => "low_contrast",
            Flaw::Undersized => "undersized",
            Flaw::Fragmented => "fragmented",
            Flaw::Faceless => "faceless",
        }
    }

    pub fn parse(s: &str) -> Option<Flaw> {
        Flaw::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn expected(self) -> RejectReason {
        match self {
            Flaw::SceneCut => RejectReason::SceneCut,
            Flaw::Static => RejectReason::LowFlow,
            Flaw::LowContrast => RejectReason::LowContrast,
            Flaw::Undersized => RejectReason::AllBoxesEliminated,
            Flaw::Fragmented => RejectReason::BadMask,
            Flaw::Faceless => RejectReason::FaceMissing,
        }
    }
}

pub const CORPUS_SIDE: usize = 64;
pub const CORPUS_FRAMES: usize = 20;

fn corpus_spec(rng: &mut ChaCha8Rng, shapes: &[(Shape, Color, f64)], moving: bool) -> SceneSpec {
    // two fixed lanes keep concepts apart for the whole clip
    let lanes = [[18.0, 20.0], [46.0, 44.0]];
    let concepts = shapes
        .iter()
        .enumerate()
        .map(|(i, &(shape, color, size))| {
            let dir = if i == 0 { 1.0 } else { -1.0 };
            let speed = if moving { 0.25 * dir } else { 0.0 };
            let jitter = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            ConceptSpec {
                shape,
                color,
                size,
                trajectory: Trajectory::Linear {
                    start: [lanes[i][0] + jitter[0], lanes[i][1] + jitter[1]],
                    velocity: [speed, 0.0],
                },
            }
        })
        .collect();
    SceneSpec {
        frames: CORPUS_FRAMES,
        height: CORPUS_SIDE,
        width: CORPUS_SIDE,
        concepts,
        background_seed: rng.random(),
        caption_template: 0,
    }
}

fn person_video(
    rng: &mut ChaCha8Rng,
    face: Option<&[[bool; FACE_SIDE]; FACE_SIDE]>,
    companion: Option<(Shape, Color)>,
) -> Video {
    let bg = toydata::background(CORPUS_SIDE, CORPUS_SIDE, rng.random());
    let start = [18.0 + rng.random_range(-1.0..1.0), 20.0 + rng.random_range(-1.0..1.0)];
    let other = companion.map(|(s, c)| corpus_spec(rng, &[(Shape::Circle, Color::White, 1.0), (s, c, 26.0)], true));
    let frames: Vec<Image> = (0..CORPUS_FRAMES)
        .map(|f| {
            let mut img = bg.clone();
            if let Some(spec) = &other {
                let c = &spec.concepts[1];
                toydata::draw_shape(&mut img, c.shape, c.trajectory.position(f), c.size, c.color.rgb());
            }
            let center = [start[0] + 0.25 * f as f64, start[1]];
            draw_person(&mut img, center, 28.0, face);
            img
        })
        .collect();
    Video::from_frames(&frames).expect("uniform frames")
}

/// Checkerboard-dithered square: solid to a closing, shattered to a
/// pixel-exact segmentation.
fn dithered_video(rng: &mut ChaCha8Rng) -> Video {
    let bg = toydata::background(CORPUS_SIDE, CORPUS_SIDE, rng.random());
    let start = [30.0 + rng.random_range(-1.0..1.0), 30.0];
    let frames: Vec<Image> = (0..CORPUS_FRAMES)
        .map(|f| {
            let mut img = bg.clone();
            let cx = start[0] + 0.25 * f as f64;
            for y in 0..CORPUS_SIDE {
                for x in 0..CORPUS_SIDE {
                    let inside = Shape::Square.contains(cx, start[1], 30.0, x as f64 + 0.5, y as f64 + 0.5);
                    if inside && (x + y) % 2 == 0 {
                        img.set_pixel(y, x, Color::Green.rgb());
                    }
                }
            }
            img
        })
        .collect();
    Video::from_frames(&frames).expect("uniform frames")
}

/// Ground-truth class of a paint shape.
fn class(shape: Shape) -> String {
    shape.name().to_string()
}

fn clean_shapes(rng: &mut ChaCha8Rng) -> Vec<(Shape, Color, f64)> {
    let mut picks: Vec<(Shape, Color, f64)> = Vec::new();
    while picks.len() < 2 {
        let shape = Shape::ALL[rng.random_range(0..3)];
        let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        if picks.iter().any(|p| (p.0, p.1) == (shape, color)) {
            continue;
        }
        let size = if shape == Shape::Triangle { 30.0 } else { 26.0 };
        picks.push((shape, color, size));
    }
    picks
}

/// `n` clips, the first `flaws.len()` carrying one planted flaw each.
/// Clean clip `n - 1` is given a wrong ground-truth label so the success
/// rate over accepted clips is `(clean - 1) / clean`.
pub fn planted_flaw_corpus(seed: u64, n: usize, flaws: &[Flaw], face_seed: u64) -> Result<Vec<CorpusItem>> {
    if flaws.len() >= n {
        return Err(Error::Range("corpus needs at least one clean clip".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let face = face_template(face_seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let video_id = format!("clip_{i:03}");
        let item = if let Some(&flaw) = flaws.get(i) {
            let (video, gt) = match flaw {
                Flaw::SceneCut | Flaw::Static | Flaw::LowContrast => {
                    let shapes = clean_shapes(&mut rng);
                    let spec = corpus_spec(&mut rng, &shapes, flaw != Flaw::Static);
                    let mut v = toydata::render_video(&spec);
                    if flaw == Flaw::SceneCut {
                        for f in CORPUS_FRAMES / 2..CORPUS_FRAMES {
                            v.frame_data_mut(f).iter_mut().for_each(|x| *x = 1.0 - *x);
                        }
                    }
                    if flaw == Flaw::LowContrast {
                        v.data.iter_mut().for_each(|x| *x = 0.5 + 0.15 * (*x - 0.5));
                    }
                    (v, shapes.iter().map(|s| class(s.0)).collect())
                }
                Flaw::Undersized => {
                    let spec = corpus_spec(&mut rng, &[(Shape::Square, Color::Yellow, 8.0)], true);
                    (toydata::render_video(&spec), vec![class(Shape::Square)])
                }
                Flaw::Fragmented => (dithered_video(&mut rng), vec![class(Shape::Square)]),
                Flaw::Faceless => (person_video(&mut rng, None, None), vec![PERSON.to_string()]),
            };
            CorpusItem {
                video_id,
                video,
                ground_truth: gt,
                expected: flaw.expected(),
            }
        } else if i % 4 == 3 {
            let companion = (Shape::Square, Color::ALL[rng.random_range(0..Color::ALL.len())]);
            let v = person_video(&mut rng, Some(&face), Some(companion));
            CorpusItem {
                video_id,
                video: v,
                ground_truth: vec![PERSON.to_string(), class(Shape::Square)],
                expected: RejectReason::None,
            }
        } else {
            let shapes = clean_shapes(&mut rng);
            let spec = corpus_spec(&mut rng, &shapes, true);
            CorpusItem {
                video_id,
                video: toydata::render_video(&spec),
                ground_truth: shapes.iter().map(|s| class(s.0)).collect(),
                expected: RejectReason::None,
            }
        };
        out.push(item);
    }
    let last = out.last_mut().expect("n > 0");
    last.ground_truth = vec![PERSON.to_string(); last.ground_truth.len() + 1];
    Ok(out)
}
