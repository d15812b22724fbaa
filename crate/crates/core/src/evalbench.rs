//! Three-axis scoring of generated clips against their concept references:
//! concept fidelity, decoupling and video-quality proxies, aggregated per
//! composition scenario.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConceptRef;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Mat};
use crate::toydata::{self, Color, Shape};
use crate::video::{Image, Video};
use crate::vision::{self, BoundingBox, Tone};

pub trait ImageEmbedder: Send + Sync {
    /// Unit-norm feature vector.
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

const HIST_BINS: usize = 8;
const COLOR_FEATURES: usize = 3 * HIST_BINS + 10;
const SHAPE_FEATURES: usize = 7;

/// Raw color features: per-channel histograms plus a tone histogram.
pub fn color_features(img: &Image) -> Vec<f64> {
    let mut f = vec![0.0; COLOR_FEATURES];
    let n = (img.height * img.width).max(1) as f64;
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            let b = ((px[c].clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            f[c * HIST_BINS + b] += 1.0 / n;
        }
        let slot = match vision::nearest_tone([px[0], px[1], px[2]]) {
            Some(Tone::Paint(col)) => Color::ALL.iter().position(|&c| c == col).expect("palette color"),
            Some(Tone::Skin) => 8,
            None => 9,
        };
        f[3 * HIST_BINS + slot] += 1.0 / n;
    }
    f
}

/// Moments of the toned (non-background) pixels: coverage, fill of their
/// box, normalized second moments, vertical skew and aspect.
pub fn shape_features(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let pts: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| vision::nearest_tone(img.pixel(y, x)).is_some())
        .map(|(y, x)| (x as f64 + 0.5, y as f64 + 0.5))
        .collect();
    if pts.is_empty() {
        return vec![0.0; SHAPE_FEATURES];
    }
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    let (mut m20, mut m02, mut m11, mut m03) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
        let (dx, dy) = (x - mx, y - my);
        m20 += dx * dx;
        m02 += dy * dy;
        m11 += dx * dy;
        m03 += dy * dy * dy;
    }
    let bw = xmax - xmin + 1.0;
    let bh = ymax - ymin + 1.0;
    let norm = n * n;
    let sd = libm::sqrt(m02 / n).max(1e-9);
    vec![
        n / (w * h) as f64,
        n / (bw * bh),
        m20 / norm * 4.0,
        m02 / norm * 4.0,
        m11 / norm * 4.0,
        (m03 / n) / (sd * sd * sd) / 2.0,
        bw / (bw + bh),
    ]
}

/// Seeded random projection of weighted color and shape features.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    pub color_weight: f64,
    pub shape_weight: f64,
    projection: Mat,
}

pub const EMBED_DIM: usize = 64;

impl ToyEmbedder {
    pub fn new(color_weight: f64, shape_weight: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyEmbedder {
            color_weight,
            shape_weight,
            projection: Mat::randn(COLOR_FEATURES + SHAPE_FEATURES, EMBED_DIM, 1.0, &mut rng),
        }
    }

    /// Color-dominated embedder (the image-text style similarity).
    pub fn clip(seed: u64) -> Self {
        ToyEmbedder::new(1.0, 0.3, seed)
    }

    /// Shape-dominated embedder (the self-supervised style similarity).
    pub fn dino(seed: u64) -> Self {
        ToyEmbedder::new(0.3, 1.0, seed ^ 0x9e37_79b9_7f4a_7c15)
    }
}

impl ImageEmbedder for ToyEmbedder {
    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        if image.is_empty() {
            return Err(Error::backend("embed", "empty image"));
        }
        let mut feats: Vec<f64> = color_features(image)
            .into_iter()
            .map(|v| v * self.color_weight)
            .collect();
        feats.extend(shape_features(image).into_iter().map(|v| v * self.shape_weight));
        let row = Mat::from_vec(1, feats.len(), feats)?;
        let z = row.matmul(&self.projection)?;
        let norm = libm::sqrt(z.data.iter().map(|v| v * v).sum::<f64>());
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::backend("embed", "degenerate embedding"));
        }
        Ok(z.data.iter().map(|v| v / norm).collect())
    }
}

/// Color reading of a detected region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ColorRead {
    Pure(Color),
    Skin,
    /// Midway between two palette colors (stored in palette order).
    Blend(Color, Color),
}

impl ColorRead {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorRead::Pure(c) => c.rgb(),
            ColorRead::Skin => vision::SKIN,
            ColorRead::Blend(a, b) => {
                let (x, y) = (a.rgb(), b.rgb());
                [(x[0] + y[0]) / 2.0, (x[1] + y[1]) / 2.0, (x[2] + y[2]) / 2.0]
            }
        }
    }

    pub fn name(self) -> String {
        match self {
            ColorRead::Pure(c) => c.name().to_string(),
            ColorRead::Skin => "skin".to_string(),
            ColorRead::Blend(a, b) => format!("{}-{}", a.name(), b.name()),
        }
    }
}

fn blend(a: Color, b: Color) -> ColorRead {
    if a <= b {
        ColorRead::Blend(a, b)
    } else {
        ColorRead::Blend(b, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub frame: usize,
    pub bbox: BoundingBox,
    pub color: ColorRead,
    pub shape: Shape,
    /// Touches another colored region, so its silhouette is unreliable.
    pub occluded: bool,
}

/// Color threshold, closing, connected components and fill-ratio shapes.
/// The color vocabulary is the palette plus the midpoints of every pair of
/// colors named in the query labels.
#[derive(Clone, Debug)]
pub struct AttributeDetector {
    pub min_area: usize,
    pub radius: f64,
    /// Pixels of contact with other regions that mark a region occluded.
    pub occlusion_contact: usize,
}

impl Default for AttributeDetector {
    fn default() -> Self {
        AttributeDetector {
            min_area: 6,
            radius: vision::TONE_RADIUS,
            occlusion_contact: 3,
        }
    }
}

impl AttributeDetector {
    fn vocabulary(labels: &[String]) -> Vec<ColorRead> {
        let mut vocab: Vec<ColorRead> = Color::ALL.into_iter().map(ColorRead::Pure).collect();
        vocab.push(ColorRead::Skin);
        let colors: Vec<Color> = labels
            .iter()
            .filter_map(|l| toydata::parse_label(l).map(|p| p.0))
            .collect();
        for (i, &a) in colors.iter().enumerate() {
            for &b in &colors[i + 1..] {
                let m = blend(a, b);
                if a == b || vocab.contains(&m) {
                    continue;
                }
                // a midpoint landing on a palette color reads as that color
                // only when the color was asked for
                match Color::ALL.into_iter().find(|p| p.rgb() == m.rgb()) {
                    Some(p) if colors.contains(&p) => {}
                    Some(p) => {
                        let at = vocab
                            .iter()
                            .position(|v| *v == ColorRead::Pure(p))
                            .expect("palette entry");
                        vocab[at] = m;
                    }
                    None => vocab.push(m),
                }
            }
        }
        vocab
    }

    pub fn detect_frame(&self, frame: &Image, index: usize, labels: &[String]) -> Vec<Region> {
        let vocab = AttributeDetector::vocabulary(labels);
        let (w, h) = (frame.width, frame.height);
        let r2 = self.radius * self.radius;
        let map: Vec<Option<usize>> = frame
            .data
            .chunks_exact(3)
            .map(|p| {
                let px = [p[0], p[1], p[2]];
                let (k, d) = vocab
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, vision::dist2(px, c.rgb())))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty vocabulary");
                // the backdrop gray competes as a sink
                let backdrop = vision::dist2(px, [toydata::BACKGROUND_LEVEL; 3]);
                (d < r2 && d < backdrop).then_some(k)
            })
            .collect();
        let mut out = Vec::new();
        for (k, &color) in vocab.iter().enumerate() {
            let raw: Vec<bool> = map.iter().map(|m| *m == Some(k)).collect();
            if !raw.iter().any(|&b| b) {
                continue;
            }
            let closed = vision::close(&raw, w, h);
            for comp in vision::components(&closed, w, h, true) {
                if comp.area() < self.min_area {
                    continue;
                }
                let mut contact = 0;
                for &p in &comp.pixels {
                    let (y, x) = ((p / w) as i64, (p % w) as i64);
                    let touches = [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().any(|(dy, dx)| {
                        let (ny, nx) = (y + dy, x + dx);
                        ny >= 0
                            && nx >= 0
                            && ny < h as i64
                            && nx < w as i64
                            && matches!(map[ny as usize * w + nx as usize], Some(j) if j != k)
                    });
                    contact += touches as usize;
                }
                let shape = vision::classify_shape(comp.fill());
                let label = format!("{} {}", color.name(), shape.name());
                out.push(Region {
                    frame: index,
                    bbox: comp.to_box(vision::shape_score(shape, comp.fill()), label),
                    color,
                    shape,
                    occluded: contact >= self.occlusion_contact,
                });
            }
        }
        out
    }
}

/// Per-frame labeled regions, deterministic.
pub fn detect_regions(detector: &AttributeDetector, video: &Video, labels: &[String]) -> Result<Vec<Vec<Region>>> {
    for l in labels {
        if toydata::parse_label(l).is_none() && l != "person" {
            return Err(Error::Invalid(format!("`{l}` is not a toy label")));
        }
    }
    Ok((0..video.frames)
        .map(|f| detector.detect_frame(&video.frame(f), f, labels))
        .collect())
}

/// The six composition classes, with circle, square and triangle standing
/// in for person, living and stuff.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    MultiPerson,
    PersonLiving,
    PersonStuff,
    MultiLiving,
    LivingStuff,
    PersonLivingStuff,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::MultiPerson,
        Scenario::PersonLiving,
        Scenario::PersonStuff,
        Scenario::MultiLiving,
        Scenario::LivingStuff,
        Scenario::PersonLivingStuff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::MultiPerson => "multi-person",
            Scenario::PersonLiving => "person+living",
            Scenario::PersonStuff => "person+stuff",
            Scenario::MultiLiving => "multi-living",
            Scenario::LivingStuff => "living+stuff",
            Scenario::PersonLivingStuff => "person+living+stuff",
        }
    }

    pub fn parse(s: &str) -> Option<Scenario> {
        Scenario::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Scenario of a set of reference shapes, if it is one of the six.
    pub fn of_shapes(shapes: &[Shape]) -> Option<Scenario> {
        let count = |s: Shape| shapes.iter().filter(|&&x| x == s).count();
        let (p, l, s) = (count(Shape::Circle), count(Shape::Square), count(Shape::Triangle));
        match (p, l, s) {
            (p, 0, 0) if p >= 2 => Some(Scenario::MultiPerson),
            (p, l, 0) if p >= 1 && l >= 1 => Some(Scenario::PersonLiving),
            (p, 0, s) if p >= 1 && s >= 1 => Some(Scenario::PersonStuff),
            (0, l, 0) if l >= 2 => Some(Scenario::MultiLiving),
            (0, l, s) if l >= 1 && s >= 1 => Some(Scenario::LivingStuff),
            (p, l, s) if p >= 1 && l >= 1 && s >= 1 => Some(Scenario::PersonLivingStuff),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalCase {
    pub case_id: String,
    pub refs: Vec<ConceptRef>,
    pub caption: String,
    pub generated: Video,
    pub scenario: Scenario,
}

impl EvalCase {
    pub fn labels(&self) -> Vec<String> {
        self.refs.iter().map(|r| r.label.clone()).collect()
    }
}

/// `(color, shape)` pairs named in a caption.
pub fn caption_pairs(caption: &str) -> Vec<(Color, Shape)> {
    let words = crate::conditioning::tokenize(caption);
    let mut out = Vec::new();
    for pair in words.windows(2) {
        if let (Some(c), Some(s)) = (Color::from_name(&pair[0]), Shape::from_name(&pair[1])) {
            if !out.contains(&(c, s)) {
                out.push((c, s));
            }
        }
    }
    out
}

/// `(clipI proxy, clipT proxy)`: mean over frames of the best reference
/// cosine, and the fraction of captioned (color, shape) pairs seen in any
/// frame.
pub fn global_fidelity(
    case: &EvalCase,
    embedder: &dyn ImageEmbedder,
    detector: &AttributeDetector,
) -> Result<(f64, f64)> {
    if case.refs.is_empty() {
        return Err(Error::Empty("refs"));
    }
    if case.generated.frames == 0 {
        return Err(Error::Empty("generated video"));
    }
    let refs: Vec<Vec<f64>> = case
        .refs
        .iter()
        .map(|r| embedder.embed(&r.image))
        .collect::<Result<_>>()?;
    let mut clip_i = 0.0;
    for f in 0..case.generated.frames {
        let e = embedder.embed(&case.generated.frame(f))?;
        clip_i += refs.iter().map(|r| cosine(&e, r)).fold(f64::NEG_INFINITY, f64::max);
    }
    clip_i /= case.generated.frames as f64;
    let pairs = caption_pairs(&case.caption);
    let clip_t = if pairs.is_empty() {
        0.0
    } else {
        let regions = detect_regions(detector, &case.generated, &case.labels())?;
        let seen = pairs
            .iter()
            .filter(|&&(c, s)| {
                regions
                    .iter()
                    .flatten()
                    .any(|r| r.color == ColorRead::Pure(c) && r.shape == s)
            })
            .count();
        seen as f64 / pairs.len() as f64
    };
    Ok((clip_i.clamp(-1.0, 1.0), clip_t))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecouplingScores {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    pub mixing_rate: f64,
    /// No region could be matched to any reference.
    pub no_regions: bool,
}

/// Whether a region's attributes come from different references.
pub fn is_mixed(region: &Region, refs: &[(Color, Shape)]) -> bool {
    let exact = refs
        .iter()
        .any(|&(c, s)| region.color == ColorRead::Pure(c) && region.shape == s);
    if exact {
        return false;
    }
    match region.color {
        ColorRead::Pure(c) => refs
            .iter()
            .enumerate()
            .any(|(i, &(_, s))| s == region.shape && refs.iter().enumerate().any(|(j, &(cj, _))| j != i && cj == c)),
        // any silhouette
        ColorRead::Blend(a, b) => {
            let has = |c: Color| refs.iter().any(|r| r.0 == c);
            has(a) && has(b)
        }
        ColorRead::Skin => false,
    }
}

/// Refs a region can be matched to: those sharing its color (or either
/// side of a blend) or its shape.
fn eligible(region: &Region, r: (Color, Shape)) -> bool {
    let color = match region.color {
        ColorRead::Pure(c) => c == r.0,
        ColorRead::Blend(a, b) => a == r.0 || b == r.0,
        ColorRead::Skin => false,
    };
    color || region.shape == r.1
}

/// Region-level scores. Regions are matched to references per frame,
/// greedily by clip-embedder similarity among references sharing an
/// attribute; unmatched regions are ignored. With no matched region every
/// score is 0 and `no_regions` is set.
pub fn decoupling_scores(
    case: &EvalCase,
    detector: &AttributeDetector,
    clip: &dyn ImageEmbedder,
    dino: &dyn ImageEmbedder,
) -> Result<DecouplingScores> {
    if case.refs.is_empty() {
        return Err(Error::Empty("refs"));
    }
    let attrs: Vec<(Color, Shape)> = case
        .refs
        .iter()
        .map(|r| {
            toydata::parse_label(&r.label).ok_or_else(|| Error::Invalid(format!("`{}` is not a toy label", r.label)))
        })
        .collect::<Result<_>>()?;
    let ref_clip: Vec<Vec<f64>> = case.refs.iter().map(|r| clip.embed(&r.image)).collect::<Result<_>>()?;
    let ref_dino: Vec<Vec<f64>> = case.refs.iter().map(|r| dino.embed(&r.image)).collect::<Result<_>>()?;
    let regions = detect_regions(detector, &case.generated, &case.labels())?;

    let (mut n, mut label_hits, mut ci, mut di, mut mixed, mut mix_n) = (0usize, 0usize, 0.0, 0.0, 0usize, 0usize);
    for (f, frame_regions) in regions.iter().enumerate() {
        let frame = case.generated.frame(f);
        let mut pairs = Vec::new();
        let mut crops = Vec::new();
        for (ri, region) in frame_regions.iter().enumerate() {
            let c = crate::datapipe::crop(&frame, &region.bbox);
            let e = clip.embed(&c)?;
            for (k, &a) in attrs.iter().enumerate() {
                if eligible(region, a) {
                    pairs.push((cosine(&e, &ref_clip[k]), ri, k));
                }
            }
            crops.push((c, e));
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut region_used = vec![false; frame_regions.len()];
        let mut ref_used = vec![false; attrs.len()];
        for (sim, ri, k) in pairs {
            if region_used[ri] || ref_used[k] {
                continue;
            }
            region_used[ri] = true;
            ref_used[k] = true;
            let region = &frame_regions[ri];
            n += 1;
            ci += sim;
            di += cosine(&dino.embed(&crops[ri].0)?, &ref_dino[k]);
            if region.color == ColorRead::Pure(attrs[k].0) && region.shape == attrs[k].1 {
                label_hits += 1;
            }
            if !region.occluded {
                mix_n += 1;
                mixed += is_mixed(region, &attrs) as usize;
            }
        }
    }
    if n == 0 {
        return Ok(DecouplingScores {
            no_regions: true,
            ..DecouplingScores::default()
        });
    }
    Ok(DecouplingScores {
        clip_t: label_hits as f64 / n as f64,
        clip_i: (ci / n as f64).clamp(-1.0, 1.0),
        dino_i: (di / n as f64).clamp(-1.0, 1.0),
        mixing_rate: if mix_n == 0 { 0.0 } else { mixed as f64 / mix_n as f64 },
        no_regions: false,
    })
}

/// `(motion_smoothness, dynamic_degree)`.
pub fn quality_proxies(video: &Video) -> Result<(f64, f64)> {
    if video.frames < 3 {
        return Err(Error::TooFewFrames {
            needed: 3,
            got: video.frames,
        });
    }
    let n = video.frame_len() as f64;
    let mut first = 0.0;
    for f in 1..video.frames {
        first += video
            .frame_data(f)
            .iter()
            .zip(video.frame_data(f - 1))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    let dynamic = first / (n * (video.frames - 1) as f64);
    let mut second = 0.0;
    for f in 1..video.frames - 1 {
        let (p, c, q) = (video.frame_data(f - 1), video.frame_data(f), video.frame_data(f + 1));
        second += (0..p.len()).map(|i| (q[i] - 2.0 * c[i] + p[i]).abs()).sum::<f64>();
    }
    // second differences of [0,1] values lie in [-2, 2]
    let smooth = 1.0 - second / (n * (video.frames - 2) as f64) / 2.0;
    Ok((smooth.clamp(0.0, 1.0), dynamic))
}

/// All per-case metrics in report column order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CaseScores {
    pub fidelity_clip_t: f64,
    pub fidelity_clip_i: f64,
    pub decoupling_clip_t: f64,
    pub decoupling_clip_i: f64,
    pub decoupling_dino_i: f64,
    pub mixing_rate: f64,
    pub motion_smoothness: f64,
    pub dynamic_degree: f64,
}

pub const COLUMNS: [&str; 8] = [
    "fid.clipT",
    "fid.clipI",
    "dec.clipT",
    "dec.clipI",
    "dec.dinoI",
    "mixing",
    "smooth",
    "dynamic",
];

impl CaseScores {
    pub fn values(&self) -> [f64; 8] {
        [
            self.fidelity_clip_t,
            self.fidelity_clip_i,
            self.decoupling_clip_t,
            self.decoupling_clip_i,
            self.decoupling_dino_i,
            self.mixing_rate,
            self.motion_smoothness,
            self.dynamic_degree,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        CaseScores {
            fidelity_clip_t: v[0],
            fidelity_clip_i: v[1],
            decoupling_clip_t: v[2],
            decoupling_clip_i: v[3],
            decoupling_dino_i: v[4],
            mixing_rate: v[5],
            motion_smoothness: v[6],
            dynamic_degree: v[7],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case_id: String,
    pub scenario: Scenario,
    pub scores: CaseScores,
    pub no_regions: bool,
}

/// Every metric for one case.
pub fn evaluate_case(
    case: &EvalCase,
    detector: &AttributeDetector,
    clip: &dyn ImageEmbedder,
    dino: &dyn ImageEmbedder,
) -> Result<CaseReport> {
    let (fid_i, fid_t) = global_fidelity(case, clip, detector)?;
    let dec = decoupling_scores(case, detector, clip, dino)?;
    let (smooth, dynamic) = quality_proxies(&case.generated)?;
    Ok(CaseReport {
        case_id: case.case_id.clone(),
        scenario: case.scenario,
        scores: CaseScores {
            fidelity_clip_t: fid_t,
            fidelity_clip_i: fid_i,
            decoupling_clip_t: dec.clip_t,
            decoupling_clip_i: dec.clip_i,
            decoupling_dino_i: dec.dino_i,
            mixing_rate: dec.mixing_rate,
            motion_smoothness: smooth,
            dynamic_degree: dynamic,
        },
        no_regions: dec.no_regions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub cases: usize,
    pub flagged: usize,
    pub means: CaseScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_scenario: BTreeMap<Scenario, ScoreRow>,
    pub overall: ScoreRow,
}

/// Order-independent mean: values are sorted before summation.
fn mean_sorted(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn row(reports: &[&CaseReport]) -> ScoreRow {
    let mut means = [0.0; 8];
    for (k, m) in means.iter_mut().enumerate() {
        *m = mean_sorted(reports.iter().map(|r| r.scores.values()[k]).collect());
    }
    ScoreRow {
        cases: reports.len(),
        flagged: reports.iter().filter(|r| r.no_regions).count(),
        means: CaseScores::from_values(means),
    }
}

/// Per-scenario and overall means.
pub fn aggregate(reports: &[CaseReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let mut groups: BTreeMap<Scenario, Vec<&CaseReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.scenario).or_default().push(r);
    }
    let all: Vec<&CaseReport> = reports.iter().collect();
    Ok(EvalReport {
        per_scenario: groups.into_iter().map(|(s, rs)| (s, row(&rs))).collect(),
        overall: row(&all),
    })
}

impl EvalReport {
    /// Aligned text table: one row per scenario and an overall row, grouped
    /// as fidelity | decoupling | quality.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>5} | {:>9} {:>9} | {:>9} {:>9} {:>9} {:>9} | {:>9} {:>9}\n",
            "scenario",
            "n",
            COLUMNS[0],
            COLUMNS[1],
            COLUMNS[2],
            COLUMNS[3],
            COLUMNS[4],
            COLUMNS[5],
            COLUMNS[6],
            COLUMNS[7]
        ));
        let line = |name: &str, r: &ScoreRow| {
            let v = r.means.values();
            format!(
                "{:<20} {:>5} | {:>9.4} {:>9.4} | {:>9.4} {:>9.4} {:>9.4} {:>9.4} | {:>9.4} {:>9.4}\n",
                name, r.cases, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
            )
        };
        for (s, r) in &self.per_scenario {
            out.push_str(&line(s.name(), r));
        }
        out.push_str(&line("overall", &self.overall));
        out
    }
}

/// Clip rendered from `spec` with each concept's color replaced: by the
/// next concept's color when shapes differ, else by the midpoint of the
/// two colors. Every region then carries attributes of two references.
pub fn attribute_swapped(spec: &toydata::SceneSpec) -> Video {
    let k = spec.concepts.len();
    let bg = toydata::background(spec.height, spec.width, spec.background_seed);
    let frames: Vec<Image> = (0..spec.frames)
        .map(|f| {
            let mut img = bg.clone();
            for (i, c) in spec.concepts.iter().enumerate() {
                let other = &spec.concepts[(i + 1) % k];
                let rgb = if k > 1 && spec.concepts.iter().all(|o| o.shape == c.shape) {
                    blend(c.color, other.color).rgb()
                } else {
                    other.color.rgb()
                };
                toydata::draw_shape(&mut img, c.shape, c.trajectory.position(f), c.size, rgb);
            }
            img
        })
        .collect();
    Video::from_frames(&frames).expect("uniform frames")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_mapping() {
        use Shape::*;
        assert_eq!(Scenario::of_shapes(&[Circle, Circle]), Some(Scenario::MultiPerson));
        assert_eq!(Scenario::of_shapes(&[Square, Circle]), Some(Scenario::PersonLiving));
        assert_eq!(Scenario::of_shapes(&[Triangle, Circle]), Some(Scenario::PersonStuff));
        assert_eq!(Scenario::of_shapes(&[Square, Square]), Some(Scenario::MultiLiving));
        assert_eq!(Scenario::of_shapes(&[Square, Triangle]), Some(Scenario::LivingStuff));
        assert_eq!(
            Scenario::of_shapes(&[Square, Triangle, Circle]),
            Some(Scenario::PersonLivingStuff)
        );
        assert_eq!(Scenario::of_shapes(&[Triangle, Triangle]), None);
        assert_eq!(Scenario::of_shapes(&[Circle]), None);
        for s in Scenario::ALL {
            assert_eq!(Scenario::parse(s.name()), Some(s));
        }
    }

    #[test]
    fn caption_pair_parsing() {
        let pairs = caption_pairs("a red circle moving left and blue square resting");
        assert_eq!(pairs, vec![(Color::Red, Shape::Circle), (Color::Blue, Shape::Square)]);
        assert!(caption_pairs("nothing").is_empty());
    }

    #[test]
    fn mixing_classification() {
        let refs = [(Color::Red, Shape::Circle), (Color::Blue, Shape::Square)];
        let region = |color, shape| Region {
            frame: 0,
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0, 1.0, "r"),
            color,
            shape,
            occluded: false,
        };
        assert!(!is_mixed(&region(ColorRead::Pure(Color::Red), Shape::Circle), &refs));
        assert!(is_mixed(&region(ColorRead::Pure(Color::Blue), Shape::Circle), &refs));
        assert!(is_mixed(&region(ColorRead::Pure(Color::Red), Shape::Square), &refs));
        assert!(!is_mixed(&region(ColorRead::Pure(Color::Green), Shape::Circle), &refs));
        assert!(is_mixed(&region(blend(Color::Blue, Color::Red), Shape::Circle), &refs));
        assert!(!is_mixed(&region(ColorRead::Pure(Color::Red), Shape::Triangle), &refs));
        assert!(is_mixed(
            &region(blend(Color::Blue, Color::Red), Shape::Triangle),
            &refs
        ));
        assert!(!is_mixed(
            &region(blend(Color::Blue, Color::Green), Shape::Circle),
            &refs
        ));
    }

    #[test]
    fn midpoint_on_palette_color() {
        let labels = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let vocab = AttributeDetector::vocabulary(&labels(&["red circle", "yellow circle"]));
        assert!(vocab.contains(&blend(Color::Red, Color::Yellow)));
        assert!(!vocab.contains(&ColorRead::Pure(Color::Orange)));
        let vocab = AttributeDetector::vocabulary(&labels(&["red circle", "yellow circle", "orange square"]));
        assert!(!vocab.contains(&blend(Color::Red, Color::Yellow)));
        assert!(vocab.contains(&ColorRead::Pure(Color::Orange)));
    }

    #[test]
    fn aggregate_means_and_errors() {
        assert!(aggregate(&[]).is_err());
        let rep = |m: f64, s| CaseReport {
            case_id: "c".into(),
            scenario: s,
            scores: CaseScores {
                mixing_rate: m,
                ..CaseScores::default()
            },
            no_regions: false,
        };
        let one = aggregate(&[rep(0.25, Scenario::MultiLiving)]).unwrap();
        assert_eq!(one.overall.means.mixing_rate, 0.25);
        let two = aggregate(&[rep(0.0, Scenario::MultiLiving), rep(1.0, Scenario::MultiLiving)]).unwrap();
        assert_eq!(two.overall.means.mixing_rate, 0.5);
        assert_eq!(two.to_table().lines().count(), 3);
    }

    #[test]
    fn quality_needs_three_frames() {
        assert!(matches!(
            quality_proxies(&Video::zeros(2, 2, 2, 3)),
            Err(Error::TooFewFrames { needed: 3, got: 2 })
        ));
        assert_eq!(quality_proxies(&Video::zeros(3, 2, 2, 3)).unwrap(), (1.0, 0.0));
    }
}
