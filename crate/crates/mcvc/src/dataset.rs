//! On-disk datasets: toy training scenes, planted-flaw curation corpora and
//! evaluation benchmarks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcvc_core::conditioning::ConceptRef;
use mcvc_core::datapipe::{self, Flaw, RejectReason, Taxonomy};
use mcvc_core::evalbench::{self, Scenario};
use mcvc_core::toydata::{self, Color, ConceptSpec, SceneSpec, Shape, Trajectory};
use mcvc_core::training::{self, Example, ToyDataConfig};
use mcvc_core::video::Video;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::{fsutil, tensorfile};

pub const SCENE_FILE: &str = "scene.json";
pub const VIDEO_FILE: &str = "video.tensor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryJson {
    Linear {
        start: [f64; 2],
        velocity: [f64; 2],
    },
    Sinusoidal {
        start: [f64; 2],
        velocity: [f64; 2],
        amplitude: f64,
        period: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptJson {
    pub shape: String,
    pub color: String,
    pub size: f64,
    pub trajectory: TrajectoryJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneJson {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background_seed: u64,
    pub caption_template: usize,
    pub concepts: Vec<ConceptJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxJson {
    pub concept: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub spec: SceneJson,
    pub caption: String,
    pub labels: Vec<String>,
    pub refs: Vec<String>,
    /// Per frame, one exact box per concept.
    pub oracle_boxes: Vec<Vec<BoxJson>>,
}

impl From<&SceneSpec> for SceneJson {
    fn from(s: &SceneSpec) -> Self {
        SceneJson {
            frames: s.frames,
            height: s.height,
            width: s.width,
            background_seed: s.background_seed,
            caption_template: s.caption_template,
            concepts: s
                .concepts
                .iter()
                .map(|c| ConceptJson {
                    shape: c.shape.name().into(),
                    color: c.color.name().into(),
                    size: c.size,
                    trajectory: match c.trajectory {
                        Trajectory::Linear { start, velocity } => TrajectoryJson::Linear { start, velocity },
                        Trajectory::Sinusoidal {
                            start,
                            velocity,
                            amplitude,
                            period,
                        } => TrajectoryJson::Sinusoidal {
                            start,
                            velocity,
                            amplitude,
                            period,
                        },
                    },
                })
                .collect(),
        }
    }
}

impl SceneJson {
    pub fn to_spec(&self, origin: &str) -> Result<SceneSpec> {
        let concepts = self
            .concepts
            .iter()
            .map(|c| {
                let shape = Shape::from_name(&c.shape)
                    .ok_or_else(|| Error::parse(origin, format!("unknown shape {:?}", c.shape)))?;
                let color = Color::from_name(&c.color)
                    .ok_or_else(|| Error::parse(origin, format!("unknown color {:?}", c.color)))?;
                let trajectory = match c.trajectory {
                    TrajectoryJson::Linear { start, velocity } => Trajectory::Linear { start, velocity },
                    TrajectoryJson::Sinusoidal {
                        start,
                        velocity,
                        amplitude,
                        period,
                    } => Trajectory::Sinusoidal {
                        start,
                        velocity,
                        amplitude,
                        period,
                    },
                };
                Ok(ConceptSpec {
                    shape,
                    color,
                    size: c.size,
                    trajectory,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = SceneSpec {
            frames: self.frames,
            height: self.height,
            width: self.width,
            concepts,
            background_seed: self.background_seed,
            caption_template: self.caption_template,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn oracle_boxes(spec: &SceneSpec) -> Result<Vec<Vec<BoxJson>>> {
    (0..spec.frames)
        .map(|f| {
            Ok(toydata::oracle_locate(spec, f)?
                .into_iter()
                .map(|(i, b)| BoxJson {
                    concept: i,
                    x0: b.x0,
                    y0: b.y0,
                    x1: b.x1,
                    y1: b.y1,
                })
                .collect())
        })
        .collect()
}

/// Write one scene folder; returns the files written.
pub fn write_scene(dir: &Path, spec: &SceneSpec, ex: &Example, fps: f64) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let video = dir.join(VIDEO_FILE);
    tensorfile::write_video(&video, &ex.video, fps)?;
    files.push(video);
    let mut refs = Vec::new();
    for (i, r) in ex.refs.iter().enumerate() {
        let name = format!("ref_{i}.tensor");
        tensorfile::write_image(&dir.join(&name), &r.image)?;
        files.push(dir.join(&name));
        refs.push(name);
    }
    let scene = SceneFile {
        spec: spec.into(),
        caption: ex.caption.clone(),
        labels: ex.refs.iter().map(|r| r.label.clone()).collect(),
        refs,
        oracle_boxes: oracle_boxes(spec)?,
    };
    let path = dir.join(SCENE_FILE);
    fsutil::write_json(&path, &scene)?;
    files.push(path);
    Ok(files)
}

pub fn read_scene(dir: &Path) -> Result<(SceneFile, Example)> {
    let scene: SceneFile = fsutil::read_json(&dir.join(SCENE_FILE))?;
    let (video, _) = tensorfile::read_video(&dir.join(VIDEO_FILE))?;
    if scene.refs.len() != scene.labels.len() {
        return Err(Error::parse(
            dir.display().to_string(),
            "refs and labels differ in length",
        ));
    }
    let refs = scene
        .refs
        .iter()
        .zip(&scene.labels)
        .map(|(f, l)| Ok(ConceptRef::new(tensorfile::read_image(&dir.join(f))?, l.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let ex = Example {
        video,
        caption: scene.caption.clone(),
        refs,
    };
    Ok((scene, ex))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().is_dir() {
            out.push(e.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn toy_data_config(cfg: &RunConfig) -> ToyDataConfig {
    let held = training::held_out_pairs(cfg.data.held_out_pairs, cfg.data.held_out_seed);
    ToyDataConfig {
        scene: cfg.scene_config(),
        mcvc: cfg.data.mcvc,
        single_image: cfg.data.single_image,
        single_video: cfg.data.single_video,
        concepts_per_scene: cfg.data.concepts_per_scene,
        held_out: held
            .iter()
            .map(|&(s, a, b)| (toydata::concept_label(a, s), toydata::concept_label(b, s)))
            .collect(),
    }
}

/// `root/<dataset>/scene_NNNNN/` for each mixed dataset.
pub fn write_train_data(root: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = toy_data_config(cfg);
    let sets = training::toy_datasets(&data, cfg.seed)?;
    let mut files = Vec::new();
    for (name, items) in &sets {
        let dir = root.join(name);
        fsutil::create_dir(&dir)?;
        for (i, (spec, ex)) in items.iter().enumerate() {
            files.extend(write_scene(
                &dir.join(format!("scene_{i:05}")),
                spec,
                ex,
                cfg.sample.fps,
            )?);
        }
    }
    let held = root.join("held_out.json");
    fsutil::write_json(&held, &data.held_out)?;
    files.push(held);
    Ok(files)
}

/// Load the datasets with positive mix weight from `root`.
pub fn read_train_data(root: &Path, weights: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Vec<Example>>> {
    let mut out = BTreeMap::new();
    for (name, &w) in weights {
        if w <= 0.0 {
            continue;
        }
        let dir = root.join(name);
        if !dir.is_dir() {
            return Err(mcvc_core::Error::EmptyDataset(format!("{name} ({} missing)", dir.display())).into());
        }
        let items = sorted_subdirs(&dir)?
            .iter()
            .map(|d| read_scene(d).map(|(_, ex)| ex))
            .collect::<Result<Vec<_>>>()?;
        out.insert(name.clone(), items);
    }
    Ok(out)
}

/// One line of a curation corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub video_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<String>>,
}

pub const CORPUS_MANIFEST: &str = "manifest.jsonl";
pub const EXPECTED_FILE: &str = "expected.json";
pub const TAXONOMY_FILE: &str = "taxonomy.json";

/// Planted-flaw corpus with its manifest, taxonomy and expected reasons.
pub fn write_corpus(root: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let flaws: Vec<Flaw> = cfg
        .data
        .corpus_flaws
        .iter()
        .map(|f| Flaw::parse(f).ok_or_else(|| Error::Usage(format!("unknown flaw {f}"))))
        .collect::<Result<_>>()?;
    let items = datapipe::planted_flaw_corpus(cfg.seed, cfg.data.corpus_size, &flaws, cfg.data.face_seed)?;
    let mut files = Vec::new();
    let mut entries = Vec::new();
    let mut expected = BTreeMap::new();
    for item in &items {
        let rel = format!("videos/{}.tensor", item.video_id);
        tensorfile::write_video(&root.join(&rel), &item.video, cfg.sample.fps)?;
        files.push(root.join(&rel));
        entries.push(CorpusEntry {
            video_id: item.video_id.clone(),
            path: rel,
            ground_truth: Some(item.ground_truth.clone()),
        });
        expected.insert(item.video_id.clone(), item.expected.as_str());
    }
    let manifest = root.join(CORPUS_MANIFEST);
    fsutil::write_jsonl(&manifest, &entries)?;
    let exp = root.join(EXPECTED_FILE);
    fsutil::write_json(&exp, &expected)?;
    let tax = root.join(TAXONOMY_FILE);
    fsutil::write_json(&tax, Taxonomy::default().classes())?;
    files.extend([manifest, exp, tax]);
    Ok(files)
}

pub fn read_taxonomy(path: &Path) -> Result<Taxonomy> {
    let classes: BTreeMap<String, Vec<String>> = fsutil::read_json(path)?;
    Ok(Taxonomy::new(classes)?)
}

pub fn read_expected(path: &Path) -> Result<BTreeMap<String, RejectReason>> {
    let raw: BTreeMap<String, String> = fsutil::read_json(path)?;
    raw.into_iter()
        .map(|(k, v)| {
            let r = RejectReason::parse(&v)
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("unknown reason {v}")))?;
            Ok((k, r))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefEntry {
    pub path: String,
    pub label: String,
}

/// One line of a benchmark manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub case_id: String,
    pub scenario: String,
    pub caption: String,
    pub refs: Vec<RefEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

pub const BENCH_MANIFEST: &str = "manifest.jsonl";

/// Scenes of the benchmark: the held-out same-shape pairs followed by
/// `mixed` seeded scenes for each scenario with several shapes.
pub fn bench_scenes(cfg: &RunConfig) -> Result<Vec<(String, SceneSpec)>> {
    let scene_cfg = cfg.scene_config();
    let mut out = Vec::new();
    let held = training::held_out_pairs(cfg.data.held_out_pairs, cfg.data.held_out_seed);
    for (i, &(shape, a, b)) in held.iter().enumerate() {
        let spec = training::pair_scene(shape, a, b, &scene_cfg, cfg.seed.wrapping_add(1000 + i as u64))?;
        out.push((format!("pair_{i:03}"), spec));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbe4c_0000);
    let groups: [&[Shape]; 4] = [
        &[Shape::Circle, Shape::Square],
        &[Shape::Circle, Shape::Triangle],
        &[Shape::Square, Shape::Triangle],
        &[Shape::Circle, Shape::Square, Shape::Triangle],
    ];
    for (g, shapes) in groups.iter().enumerate() {
        for j in 0..cfg.data.bench_mixed {
            let mut spec = toydata::gen_scene_with(&mut rng, shapes.len(), &scene_cfg)?;
            let mut colors = Color::ALL;
            colors.shuffle(&mut rng);
            for ((c, &shape), color) in spec.concepts.iter_mut().zip(shapes.iter()).zip(colors) {
                c.shape = shape;
                c.color = color;
            }
            out.push((format!("mixed_{g}_{j:02}"), spec));
        }
    }
    Ok(out)
}

/// Benchmark manifest, references and scene files, plus oracle-rendered and
/// attribute-swapped fixture videos under `oracle/` and `swapped/`.
pub fn write_bench(root: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut entries = Vec::new();
    for (case_id, spec) in bench_scenes(cfg)? {
        let scenario = Scenario::of_shapes(&spec.concepts.iter().map(|c| c.shape).collect::<Vec<_>>())
            .ok_or_else(|| Error::Usage(format!("{case_id} has no scenario")))?;
        let mut refs = Vec::new();
        for (i, c) in spec.concepts.iter().enumerate() {
            let (img, label) = toydata::render_reference(c);
            let rel = format!("refs/{case_id}_{i}.tensor");
            tensorfile::write_image(&root.join(&rel), &img)?;
            files.push(root.join(&rel));
            refs.push(RefEntry { path: rel, label });
        }
        let scene_rel = format!("scenes/{case_id}.json");
        fsutil::write_json(&root.join(&scene_rel), &SceneJson::from(&spec))?;
        files.push(root.join(&scene_rel));
        for (dir, video) in [
            ("oracle", toydata::render_video(&spec)),
            ("swapped", evalbench::attribute_swapped(&spec)),
        ] {
            let p = root.join(dir).join(format!("{case_id}.tensor"));
            tensorfile::write_video(&p, &video, cfg.sample.fps)?;
            files.push(p);
        }
        entries.push(BenchEntry {
            case_id,
            scenario: scenario.name().into(),
            caption: toydata::caption(&spec),
            refs,
            scene: Some(scene_rel),
        });
    }
    let manifest = root.join(BENCH_MANIFEST);
    fsutil::write_jsonl(&manifest, &entries)?;
    files.push(manifest);
    Ok(files)
}

pub fn read_bench(manifest: &Path) -> Result<Vec<BenchEntry>> {
    let entries: Vec<BenchEntry> = fsutil::read_jsonl(manifest)?;
    for e in &entries {
        if Scenario::parse(&e.scenario).is_none() {
            return Err(Error::parse(
                manifest.display().to_string(),
                format!("unknown scenario {:?}", e.scenario),
            ));
        }
    }
    Ok(entries)
}

pub fn bench_refs(base: &Path, entry: &BenchEntry) -> Result<Vec<ConceptRef>> {
    entry
        .refs
        .iter()
        .map(|r| {
            Ok(ConceptRef::new(
                tensorfile::read_image(&base.join(&r.path))?,
                r.label.clone(),
            )?)
        })
        .collect()
}

pub fn bench_scene(base: &Path, entry: &BenchEntry) -> Result<Option<SceneSpec>> {
    match &entry.scene {
        Some(rel) => {
            let p = base.join(rel);
            let j: SceneJson = fsutil::read_json(&p)?;
            Ok(Some(j.to_spec(&p.display().to_string())?))
        }
        None => Ok(None),
    }
}

pub fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_video_for(case: &str, path: &Path) -> Result<Video> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            case: case.into(),
            path: path.to_path_buf(),
        });
    }
    Ok(tensorfile::read_video(path)?.0)
}
