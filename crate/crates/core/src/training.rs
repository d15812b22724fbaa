//! Toy training harness: concept bank, example builders for the three mixed
//! datasets and a seeded training loop.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{patchify, Grid, ModelConfig, VideoLatent};
use crate::conditioning::{
    encode_concepts, encode_label, ConceptRef, ConditioningConfig, DenseVisualTokens, ImageEncoderBackend,
    TextEncoderBackend, ToyImageEncoder, ToyTextEncoder,
};
use crate::error::{Error, Result};
use crate::evalbench::{EvalCase, Scenario};
use crate::flowmatch::{
    dropout_conditions, sample, train_step, Adam, FlowSample, Guided, MixSampler, MixWeights, TrainItem,
    P_DROP_CAPTION, P_DROP_REFS,
};
use crate::model::Model;
use crate::params::{FreezePolicy, ParamStore};
use crate::tensor::Mat;
use crate::toydata::{self, Color, SceneConfig, SceneSpec, Shape};
use crate::video::Video;

pub const MCVC: &str = "mcvc";
pub const SINGLE_IMAGE: &str = "single_image";
pub const SINGLE_VIDEO: &str = "single_video";

/// Small model used by the toy experiments.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        depth: 4,
        width: 64,
        heads: 4,
        patch_t: 2,
        patch_h: 4,
        patch_w: 4,
        channels: 3,
        time_dim: 32,
        caption_dim: 32,
        concept_dim: 64,
        rmsnorm_eps: 1e-6,
    }
}

pub fn toy_conditioning_config() -> ConditioningConfig {
    ConditioningConfig {
        grid: 4,
        dense_dim: 32,
        queries: 4,
        qformer_layers: 1,
        qformer_heads: 4,
        dam_heads: 4,
        dam_residual: true,
        max_concepts: toydata::MAX_CONCEPTS,
    }
}

/// Frozen encoders for reference images, captions and concept labels.
pub struct Encoders {
    pub image: Box<dyn ImageEncoderBackend>,
    pub caption: Box<dyn TextEncoderBackend>,
    pub label: Box<dyn TextEncoderBackend>,
}

impl Encoders {
    /// Seeded in-process toy encoders sized for `model` and `cond`.
    pub fn toy(model: &ModelConfig, cond: &ConditioningConfig, seed: u64) -> Self {
        Encoders {
            image: Box::new(ToyImageEncoder::new(cond.grid, cond.dense_dim, seed)),
            caption: Box::new(ToyTextEncoder::new(model.caption_dim, seed ^ 0xc0ff_ee00)),
            label: Box::new(ToyTextEncoder::new(model.concept_dim, seed ^ 0x1abe_1000)),
        }
    }

    pub fn caption(&self, text: &str) -> Result<Mat> {
        encode_label(self.caption.as_ref(), text).map_err(|e| e.at_stage("encode_caption"))
    }

    pub fn concepts(&self, refs: &[ConceptRef], max_concepts: usize) -> Result<Vec<(DenseVisualTokens, Mat)>> {
        encode_concepts(refs, max_concepts, self.image.as_ref(), self.label.as_ref())
    }
}

/// Unordered pair of concept labels.
pub fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.into(), b.into())
    } else {
        (b.into(), a.into())
    }
}

/// `n` seeded same-shape, different-color pairs. Triangles are skipped since
/// two stuff concepts form no benchmark scenario.
pub fn held_out_pairs(n: usize, seed: u64) -> Vec<(Shape, Color, Color)> {
    let mut all = Vec::new();
    for shape in [Shape::Circle, Shape::Square] {
        for (i, &a) in Color::ALL.iter().enumerate() {
            for &b in &Color::ALL[i + 1..] {
                all.push((shape, a, b));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, all.len(), n.min(all.len()));
    let mut out: Vec<_> = picked.into_iter().map(|i| all[i]).collect();
    out.sort_by_key(|&(s, a, b)| (s as u8, a as u8, b as u8));
    out
}

/// Repeat a still image into a `frames`-long video.
pub fn lift_image(img: &crate::video::Image, frames: usize) -> Video {
    let v = img.to_video();
    let f: Vec<_> = (0..frames.max(1)).map(|_| v.frame(0)).collect();
    Video::from_frames(&f).expect("identical frames")
}

/// Append zero tokens up to `target.frames` latent frames; returns the padded
/// latent and the real-token flags.
pub fn pad_latent(z: &VideoLatent, target: Grid) -> Result<(VideoLatent, Vec<bool>)> {
    if z.grid.height != target.height || z.grid.width != target.width || z.grid.frames > target.frames {
        return Err(Error::shape("latent does not fit the padded grid"));
    }
    let d = z.tokens.cols;
    let mut data = z.tokens.data.clone();
    data.resize(target.tokens() * d, 0.0);
    let mut valid = vec![true; z.grid.tokens()];
    valid.resize(target.tokens(), false);
    Ok((
        VideoLatent::new(Mat::from_vec(target.tokens(), d, data)?, target)?,
        valid,
    ))
}

/// One raw training example. Single images are 1-frame videos.
#[derive(Clone, Debug)]
pub struct Example {
    pub video: Video,
    pub caption: String,
    pub refs: Vec<ConceptRef>,
}

/// An example with its latent and frozen-encoder outputs computed once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub z0: VideoLatent,
    pub valid: Option<Vec<bool>>,
    pub caption: Mat,
    pub concepts: Option<Vec<(DenseVisualTokens, Mat)>>,
}

/// Latent grid of a `frames × height × width` clip.
pub fn latent_grid(model: &ModelConfig, frames: usize, height: usize, width: usize) -> Grid {
    Grid {
        frames: frames / model.patch_t,
        height: height / model.patch_h,
        width: width / model.patch_w,
    }
}

/// Patchify (lifting stills to one latent frame and padding to `grid`) and
/// run the frozen encoders.
pub fn prepare(
    ex: &Example,
    model: &ModelConfig,
    cond: &ConditioningConfig,
    enc: &Encoders,
    grid: Grid,
) -> Result<Prepared> {
    let video = if ex.video.frames == 1 {
        lift_image(&ex.video.frame(0), model.patch_t)
    } else {
        ex.video.clone()
    };
    let z0 = patchify(&video, model)?;
    let (z0, valid) = if z0.grid == grid {
        (z0, None)
    } else {
        let (z, v) = pad_latent(&z0, grid)?;
        (z, Some(v))
    };
    let caption = enc.caption(&ex.caption)?;
    let concepts = if ex.refs.is_empty() {
        None
    } else {
        Some(enc.concepts(&ex.refs, cond.max_concepts)?)
    };
    Ok(Prepared {
        z0,
        valid,
        caption,
        concepts,
    })
}

/// Fresh noise, timestep and condition dropout for one prepared example.
pub fn make_item<R: Rng + ?Sized>(p: &Prepared, p_caption: f64, p_refs: f64, rng: &mut R) -> Result<TrainItem> {
    let flow = FlowSample::draw(p.z0.clone(), rng)?;
    let cond = dropout_conditions(rng, p.caption.clone(), p.concepts.clone(), p_caption, p_refs)?;
    Ok(TrainItem {
        flow,
        valid: p.valid.clone(),
        caption: cond.caption,
        concepts: cond.refs.flatten(),
    })
}

/// Sizes of the generated toy datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataConfig {
    pub scene: SceneConfig,
    pub mcvc: usize,
    pub single_image: usize,
    pub single_video: usize,
    pub concepts_per_scene: usize,
    /// Concept pairs never shown together.
    pub held_out: Vec<(String, String)>,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            scene: SceneConfig::default(),
            mcvc: 2000,
            single_image: 250,
            single_video: 250,
            concepts_per_scene: 2,
            held_out: Vec::new(),
        }
    }
}

/// Scene generator that skips held-out pairs.
pub fn gen_scene_avoiding<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    cfg: &SceneConfig,
    held_out: &BTreeSet<(String, String)>,
) -> Result<SceneSpec> {
    for _ in 0..1000 {
        let spec = toydata::gen_scene_with(rng, k, cfg)?;
        let labels = spec.labels();
        let blocked = labels
            .iter()
            .enumerate()
            .any(|(i, a)| labels[i + 1..].iter().any(|b| held_out.contains(&pair_key(a, b))));
        if !blocked {
            return Ok(spec);
        }
    }
    Err(Error::Invalid("held-out pairs exclude every scene".into()))
}

/// Canonical references for every concept of `spec`.
pub fn scene_refs(spec: &SceneSpec) -> Result<Vec<ConceptRef>> {
    spec.concepts
        .iter()
        .map(|c| {
            let (img, label) = toydata::render_reference(c);
            ConceptRef::new(img, label)
        })
        .collect()
}

/// The three mixed datasets as scene specs plus their examples.
pub fn toy_datasets(cfg: &ToyDataConfig, seed: u64) -> Result<BTreeMap<String, Vec<(SceneSpec, Example)>>> {
    let held: BTreeSet<_> = cfg.held_out.iter().map(|(a, b)| pair_key(a, b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    let mut mcvc = Vec::with_capacity(cfg.mcvc);
    for _ in 0..cfg.mcvc {
        let spec = gen_scene_avoiding(&mut rng, cfg.concepts_per_scene, &cfg.scene, &held)?;
        let ex = Example {
            video: toydata::render_video(&spec),
            caption: toydata::caption(&spec),
            refs: scene_refs(&spec)?,
        };
        mcvc.push((spec, ex));
    }
    out.insert(MCVC.into(), mcvc);
    let mut images = Vec::with_capacity(cfg.single_image);
    for _ in 0..cfg.single_image {
        let mut spec = gen_scene_avoiding(&mut rng, 1, &cfg.scene, &held)?;
        spec.frames = 1;
        let ex = Example {
            video: toydata::render_video(&spec),
            caption: {
                let label = spec.concepts[0].label();
                alloc::format!("{} {label}", toydata::article(&label))
            },
            refs: scene_refs(&spec)?,
        };
        images.push((spec, ex));
    }
    out.insert(SINGLE_IMAGE.into(), images);
    let mut videos = Vec::with_capacity(cfg.single_video);
    for _ in 0..cfg.single_video {
        let spec = gen_scene_avoiding(&mut rng, 1, &cfg.scene, &held)?;
        let ex = Example {
            video: toydata::render_video(&spec),
            caption: toydata::caption(&spec),
            refs: Vec::new(),
        };
        videos.push((spec, ex));
    }
    out.insert(SINGLE_VIDEO.into(), videos);
    Ok(out)
}

/// Optimizer and condition-dropout settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_caption: f64,
    pub p_refs: f64,
    pub mix: MixWeights,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch: 8,
            lr: 1e-3,
            p_caption: P_DROP_CAPTION,
            p_refs: P_DROP_REFS,
            mix: MixWeights::default(),
            seed: 0,
        }
    }
}

/// Mixed-dataset training loop. `on_step` sees `(step, loss, store)` after
/// each update.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    datasets: &BTreeMap<String, Vec<Prepared>>,
    settings: &TrainSettings,
    freeze: &FreezePolicy,
    mut on_step: impl FnMut(usize, f64, &ParamStore) -> Result<()>,
) -> Result<Vec<f64>> {
    if settings.batch == 0 {
        return Err(Error::Range("batch must be positive".into()));
    }
    let sizes: BTreeMap<String, usize> = datasets.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let sampler = MixSampler::new(&settings.mix, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x7a11_5eed);
    let mut adam = Adam::new(store);
    let mut losses = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch);
        for _ in 0..settings.batch {
            let (name, i) = sampler.draw(&mut rng);
            batch.push(make_item(
                &datasets[name][i],
                settings.p_caption,
                settings.p_refs,
                &mut rng,
            )?);
        }
        let loss = train_step(model, store, &mut adam, &batch, freeze, settings.lr).map_err(|e| Error::AtStep {
            step,
            source: alloc::boxed::Box::new(e),
        })?;
        losses.push(loss);
        on_step(step, loss, store)?;
    }
    Ok(losses)
}

/// Full toy experiment setup.
#[derive(Clone, Debug)]
pub struct ToyExperiment {
    pub model: ModelConfig,
    pub cond: ConditioningConfig,
    pub data: ToyDataConfig,
    pub train: TrainSettings,
    pub model_seed: u64,
    pub data_seed: u64,
    pub encoder_seed: u64,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        ToyExperiment {
            model: toy_model_config(),
            cond: toy_conditioning_config(),
            data: ToyDataConfig::default(),
            train: TrainSettings::default(),
            model_seed: 0,
            data_seed: 1,
            encoder_seed: 17,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub losses: Vec<f64>,
}

impl ToyExperiment {
    pub fn encoders(&self) -> Encoders {
        Encoders::toy(&self.model, &self.cond, self.encoder_seed)
    }

    pub fn prepared(&self) -> Result<BTreeMap<String, Vec<Prepared>>> {
        let enc = self.encoders();
        let grid = latent_grid(
            &self.model,
            self.data.scene.frames,
            self.data.scene.height,
            self.data.scene.width,
        );
        toy_datasets(&self.data, self.data_seed)?
            .into_iter()
            .map(|(k, v)| {
                let p = v
                    .iter()
                    .map(|(_, ex)| prepare(ex, &self.model, &self.cond, &enc, grid))
                    .collect::<Result<Vec<_>>>()?;
                Ok((k, p))
            })
            .collect()
    }

    /// Initialize, generate data and train. `on_step` sees `(step, loss)`.
    pub fn run(&self, freeze: &FreezePolicy, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
        let (model, mut store) = Model::init(&self.model, &self.cond, self.model_seed)?;
        let data = self.prepared()?;
        let losses = train(&model, &mut store, &data, &self.train, freeze, |s, l, _| {
            on_step(s, l);
            Ok(())
        })?;
        Ok(TrainOutcome {
            model,
            store,
            encoders: self.encoders(),
            losses,
        })
    }
}

/// A two-concept scene whose concepts are `(shape, a)` and `(shape, b)`.
pub fn pair_scene(shape: Shape, a: Color, b: Color, cfg: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = toydata::gen_scene_with(&mut rng, 2, cfg)?;
    for (c, color) in spec.concepts.iter_mut().zip([a, b]) {
        c.shape = shape;
        c.color = color;
    }
    Ok(spec)
}

/// Sample a video for `spec` from its caption and canonical references.
pub fn generate_for_scene<R: Rng + ?Sized>(
    model: &Model,
    store: &ParamStore,
    enc: &Encoders,
    spec: &SceneSpec,
    steps: usize,
    cfg_scale: f64,
    rng: &mut R,
) -> Result<Video> {
    let m = model.cfg();
    let caption = enc.caption(&toydata::caption(spec))?;
    let refs = scene_refs(spec)?;
    let encoded = enc.concepts(&refs, model.conditioner.cfg.max_concepts)?;
    let ids = model.composite(store, &encoded)?;
    let guided = Guided {
        backbone: &model.backbone,
        store,
        caption: Some(caption),
        concepts: Some(ids.tokens),
    };
    let grid = Grid {
        frames: spec.frames / m.patch_t,
        height: spec.height / m.patch_h,
        width: spec.width / m.patch_w,
    };
    Ok(sample(&guided, m, steps, cfg_scale, rng, grid)?.clamp01())
}

/// Evaluation case for a held-out scene and a generated video.
pub fn eval_case(case_id: String, spec: &SceneSpec, generated: Video) -> Result<EvalCase> {
    let refs = scene_refs(spec)?;
    let shapes: Vec<Shape> = spec.concepts.iter().map(|c| c.shape).collect();
    let scenario = Scenario::of_shapes(&shapes).ok_or_else(|| Error::Invalid("no scenario for these shapes".into()))?;
    Ok(EvalCase {
        case_id,
        refs,
        caption: toydata::caption(spec),
        generated,
        scenario,
    })
}
