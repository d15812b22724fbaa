//! `train`, `sample`, `curate`, `eval` and `gen-data`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mcvc_core::conditioning::ConceptRef;
use mcvc_core::datapipe::{self, BackendSuite, CurationRecord, CurationSummary, Taxonomy};
use mcvc_core::evalbench::{self, CaseReport, EvalCase, EvalReport, Scenario, ToyEmbedder, COLUMNS};
use mcvc_core::flowmatch::{self, Guided};
use mcvc_core::model::Model;
use mcvc_core::training::{self, Encoders, Prepared};
use mcvc_core::video::Video;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, CorpusEntry};
use crate::error::{Error, Result};
use crate::http::{HttpClient, HttpImageEncoder, HttpPipelineBackend, HttpTextEncoder};
use crate::{fsutil, tensorfile};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub wall_time_s: f64,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    /// Re-hash every artifact; returns the paths that no longer match.
    pub fn verify(&self, out: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let p = out.join(&a.path);
            if !p.exists() || fsutil::hash_file(&p)? != a.hash {
                bad.push(a.path.clone());
            }
        }
        Ok(bad)
    }
}

fn finish(
    command: &str,
    cfg: &RunConfig,
    seeds: BTreeMap<String, u64>,
    started: Instant,
    files: &[PathBuf],
) -> Result<RunManifest> {
    let out = &cfg.out;
    let mut artifacts = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/");
            Ok(Artifact {
                path: rel,
                hash: fsutil::hash_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    artifacts.dedup_by(|a, b| a.path == b.path);
    let m = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seeds,
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts,
    };
    fsutil::write_json(&out.join(RUN_MANIFEST), &m)?;
    Ok(m)
}

fn seeds(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("encoder_seed".to_string(), cfg.encoders.seed),
    ])
}

/// Toy encoders, or HTTP adapters for whichever URLs are configured.
pub fn encoders(cfg: &RunConfig) -> Encoders {
    let m = cfg.model_config();
    let c = cfg.conditioning_config();
    let mut enc = Encoders::toy(&m, &c, cfg.encoders.seed);
    let timeout = Duration::from_millis(cfg.encoders.timeout_ms);
    if let Some(url) = &cfg.encoders.image_url {
        enc.image = Box::new(HttpImageEncoder {
            client: HttpClient::new(url.clone(), timeout),
            grid: c.grid,
            dim: c.dense_dim,
        });
    }
    if let Some(url) = &cfg.encoders.text_url {
        enc.caption = Box::new(HttpTextEncoder {
            client: HttpClient::new(url.clone(), timeout),
            dim: m.caption_dim,
        });
        enc.label = Box::new(HttpTextEncoder {
            client: HttpClient::new(url.clone(), timeout),
            dim: m.concept_dim,
        });
    }
    enc
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: f64,
}

fn step_dir(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:07}"))
}

/// Keep the newest `keep_last` periodic checkpoints plus the best one.
fn prune(out: &Path, saved: &[(usize, f64)], keep_last: usize) -> Result<()> {
    let best = saved
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|s| s.0);
    let cutoff = saved.len().saturating_sub(keep_last);
    for &(step, _) in &saved[..cutoff] {
        if Some(step) != best {
            let d = step_dir(out, step);
            if d.exists() {
                std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let m = cfg.model_config();
    let c = cfg.conditioning_config();
    let settings = cfg.train_settings();
    let freeze = cfg.freeze_policy();
    let raw = dataset::read_train_data(&cfg.train.data_dir, &cfg.train.mix)?;
    let enc = encoders(cfg);
    let grid = training::latent_grid(&m, cfg.data.frames, cfg.data.height, cfg.data.width);
    let mut data: BTreeMap<String, Vec<Prepared>> = BTreeMap::new();
    for (name, items) in &raw {
        let prepared = items
            .iter()
            .map(|ex| training::prepare(ex, &m, &c, &enc, grid))
            .collect::<mcvc_core::Result<Vec<_>>>()?;
        data.insert(name.clone(), prepared);
    }
    let (model, mut store) = Model::init(&m, &c, cfg.seed)?;
    let out = cfg.out.clone();
    fsutil::create_dir(&out)?;
    let mut saved: Vec<(usize, f64)> = Vec::new();
    let mut window = Vec::new();
    let every = cfg.train.checkpoint_every;
    let losses = training::train(&model, &mut store, &data, &settings, &freeze, |step, loss, store| {
        window.push(loss);
        let done = step + 1;
        if every > 0 && done % every == 0 && done < settings.steps {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            checkpoint::save(&step_dir(&out, done), cfg, store, &freeze, done).map_err(to_core)?;
            saved.push((done, mean));
            prune(&out, &saved, cfg.train.keep_last).map_err(to_core)?;
        }
        Ok(())
    })?;
    let mut files = Vec::new();
    let final_dir = out.join("checkpoint");
    checkpoint::save(&final_dir, cfg, &store, &freeze, settings.steps)?;
    files.push(final_dir.join("manifest.json"));
    let log: Vec<LossLine> = losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossLine { step, loss })
        .collect();
    let log_path = out.join("loss.jsonl");
    fsutil::write_jsonl(&log_path, &log)?;
    files.push(log_path);
    for &(step, _) in &saved {
        let p = step_dir(&out, step).join("manifest.json");
        if p.exists() {
            files.push(p);
        }
    }
    finish("train", cfg, seeds(cfg), started, &files)
}

fn to_core(e: Error) -> mcvc_core::Error {
    match e {
        Error::Core(c) => c,
        other => mcvc_core::Error::Invalid(other.to_string()),
    }
}

/// Where a sample's conditions come from.
pub enum SampleSource {
    Single {
        refs: Vec<(PathBuf, String)>,
        caption: String,
    },
    Bench {
        manifest: PathBuf,
    },
}

#[derive(Serialize)]
struct SampleSidecar {
    refs: Vec<dataset::RefEntry>,
    caption: String,
    seed: u64,
    steps: usize,
    cfg_scale: f64,
    checkpoint_hash: String,
}

fn sample_one(
    loaded: &checkpoint::Loaded,
    enc: &Encoders,
    cfg: &RunConfig,
    refs: &[ConceptRef],
    caption: &str,
    seed: u64,
) -> Result<Video> {
    let m = loaded.model_config();
    let max = loaded.conditioning_config().max_concepts;
    let caption_tokens = enc.caption(caption)?;
    let concepts = if refs.is_empty() {
        None
    } else {
        let encoded = enc.concepts(refs, max)?;
        Some(loaded.model.composite(&loaded.store, &encoded)?.tokens)
    };
    let guided = Guided {
        backbone: &loaded.model.backbone,
        store: &loaded.store,
        caption: Some(caption_tokens),
        concepts,
    };
    let grid = training::latent_grid(&m, cfg.sample.frames, cfg.sample.height, cfg.sample.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(flowmatch::sample(
        &guided,
        &m,
        cfg.sample.steps,
        cfg.sample.cfg_scale,
        &mut rng,
        grid,
    )?)
}

pub fn cmd_sample(cfg: &RunConfig, checkpoint_dir: &Path, source: &SampleSource) -> Result<RunManifest> {
    let started = Instant::now();
    let loaded = checkpoint::load(checkpoint_dir)?;
    // encoders must match the ones the checkpoint was trained with
    let mut enc_cfg = loaded.manifest.config.clone();
    enc_cfg.encoders = cfg.encoders.clone();
    enc_cfg.encoders.seed = loaded.manifest.config.encoders.seed;
    let enc = encoders(&enc_cfg);
    let out = &cfg.out;
    fsutil::create_dir(out)?;
    let mut files = Vec::new();
    match source {
        SampleSource::Single { refs, caption } => {
            let max = loaded.conditioning_config().max_concepts;
            if refs.len() > max {
                return Err(mcvc_core::Error::TooManyConcepts { got: refs.len(), max }.into());
            }
            let concept_refs = refs
                .iter()
                .map(|(p, l)| Ok(ConceptRef::new(tensorfile::read_image(p)?, l.clone())?))
                .collect::<Result<Vec<_>>>()?;
            let video = sample_one(&loaded, &enc, cfg, &concept_refs, caption, cfg.seed)?;
            let vp = out.join("sample.tensor");
            tensorfile::write_video(&vp, &video, cfg.sample.fps)?;
            let sp = out.join("sample.json");
            fsutil::write_json(
                &sp,
                &SampleSidecar {
                    refs: refs
                        .iter()
                        .map(|(p, l)| dataset::RefEntry {
                            path: p.display().to_string(),
                            label: l.clone(),
                        })
                        .collect(),
                    caption: caption.clone(),
                    seed: cfg.seed,
                    steps: cfg.sample.steps,
                    cfg_scale: cfg.sample.cfg_scale,
                    checkpoint_hash: loaded.manifest.content_hash.clone(),
                },
            )?;
            files.extend([vp, sp]);
        }
        SampleSource::Bench { manifest } => {
            let base = dataset::manifest_dir(manifest);
            for (i, entry) in dataset::read_bench(manifest)?.iter().enumerate() {
                let refs = dataset::bench_refs(&base, entry)?;
                let seed = cfg.seed.wrapping_add(i as u64);
                let video = sample_one(&loaded, &enc, cfg, &refs, &entry.caption, seed)?.clamp01();
                let vp = out.join(format!("{}.tensor", entry.case_id));
                tensorfile::write_video(&vp, &video, cfg.sample.fps)?;
                files.push(vp);
            }
        }
    }
    finish("sample", cfg, seeds(cfg), started, &files)
}

/// Serializable view of a curation record; crops and masks are summarized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordJson {
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub accepted: bool,
    pub reject_reason: String,
    pub caption: String,
    pub nouns: Vec<(String, String)>,
    pub sampled_frames: Vec<usize>,
    pub stages: Vec<StageJson>,
    pub entities: Vec<EntityJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageJson {
    pub stage: String,
    pub passed: bool,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityJson {
    pub label: String,
    pub frame: usize,
    pub region: [f64; 4],
    pub mask_area: usize,
}

impl From<&CurationRecord> for RecordJson {
    fn from(r: &CurationRecord) -> Self {
        RecordJson {
            video_id: r.video_id.clone(),
            error: None,
            accepted: r.accepted(),
            reject_reason: r.reject_reason.as_str().into(),
            caption: r.caption.clone(),
            nouns: r.nouns.clone(),
            sampled_frames: r.sampled_frames.clone(),
            stages: r
                .stages
                .iter()
                .map(|s| StageJson {
                    stage: s.stage.into(),
                    passed: s.passed,
                    value: s.value,
                })
                .collect(),
            entities: r
                .entities
                .iter()
                .map(|e| EntityJson {
                    label: e.label.clone(),
                    frame: e.frame,
                    region: [e.region.x0, e.region.y0, e.region.x1, e.region.y1],
                    mask_area: e.mask.area(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurateSummaryJson {
    pub videos: usize,
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
}

fn backend_suite(cfg: &RunConfig) -> BackendSuite {
    match &cfg.curate.backend_url {
        Some(url) => {
            let b = || HttpPipelineBackend {
                client: HttpClient::new(url.clone(), Duration::from_millis(cfg.encoders.timeout_ms)),
            };
            BackendSuite {
                captioner: Box::new(b()),
                detector: Box::new(b()),
                classifier: Box::new(b()),
                segmenter: Box::new(b()),
                face_detector: Box::new(b()),
            }
        }
        None => BackendSuite::toy(cfg.curate.face_seed),
    }
}

fn curate_one(
    entry: &CorpusEntry,
    base: &Path,
    suite: &BackendSuite,
    tax: &Taxonomy,
    cfg: &RunConfig,
) -> (Option<CurationRecord>, RecordJson) {
    let run = || -> Result<CurationRecord> {
        let (video, _) = tensorfile::read_video(&base.join(&entry.path))?;
        Ok(datapipe::run_pipeline(
            &entry.video_id,
            &video,
            suite,
            tax,
            &cfg.pipeline_config(),
        )?)
    };
    match run() {
        Ok(r) => {
            let j = RecordJson::from(&r);
            (Some(r), j)
        }
        Err(e) => (
            None,
            RecordJson {
                video_id: entry.video_id.clone(),
                error: Some(e.to_string()),
                accepted: false,
                reject_reason: String::new(),
                caption: String::new(),
                nouns: Vec::new(),
                sampled_frames: Vec::new(),
                stages: Vec::new(),
                entities: Vec::new(),
            },
        ),
    }
}

/// Run `f` over `items` on `workers` threads; results keep input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = workers.max(1).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub fn cmd_curate(cfg: &RunConfig, manifest: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let entries: Vec<CorpusEntry> = fsutil::read_jsonl(manifest)?;
    let base = dataset::manifest_dir(manifest);
    let tax = match &cfg.curate.taxonomy {
        Some(p) => dataset::read_taxonomy(p)?,
        None => Taxonomy::default(),
    };
    let suite = backend_suite(cfg);
    let results = par_map(&entries, cfg.curate.workers, |e| {
        curate_one(e, &base, &suite, &tax, cfg)
    });
    let mut rows: Vec<RecordJson> = results.iter().map(|(_, j)| j.clone()).collect();
    rows.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut summary = CurationSummary::default();
    let mut records = Vec::new();
    for (r, _) in &results {
        match r {
            Some(r) => {
                summary.add(r);
                records.push(r.clone());
            }
            None => summary.errors += 1,
        }
    }
    let gt: Option<BTreeMap<String, Vec<String>>> = entries
        .iter()
        .map(|e| e.ground_truth.clone().map(|g| (e.video_id.clone(), g)))
        .collect();
    let success_rate = match gt {
        Some(gt) if !records.is_empty() && records.iter().any(|r| r.accepted()) && summary.errors == 0 => {
            Some(datapipe::success_rate(&records, &gt)?)
        }
        _ => None,
    };
    let out = &cfg.out;
    let rec_path = out.join("records.jsonl");
    fsutil::write_jsonl(&rec_path, &rows)?;
    let sum_path = out.join("summary.json");
    fsutil::write_json(
        &sum_path,
        &CurateSummaryJson {
            videos: entries.len(),
            accepted: summary.accepted,
            rejected_by_reason: summary
                .rejected_by_reason
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            errors: summary.errors,
            success_rate,
        },
    )?;
    finish("curate", cfg, seeds(cfg), started, &[rec_path, sum_path])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseJson {
    pub case_id: String,
    pub scenario: String,
    pub no_regions: bool,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowJson {
    pub cases: usize,
    pub flagged: usize,
    pub means: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub columns: Vec<String>,
    pub per_scenario: BTreeMap<String, RowJson>,
    pub overall: RowJson,
}

fn row_json(r: &evalbench::ScoreRow) -> RowJson {
    RowJson {
        cases: r.cases,
        flagged: r.flagged,
        means: COLUMNS.iter().map(|c| c.to_string()).zip(r.means.values()).collect(),
    }
}

pub fn report_json(report: &EvalReport) -> ReportJson {
    ReportJson {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        per_scenario: report
            .per_scenario
            .iter()
            .map(|(s, r)| (s.name().to_string(), row_json(r)))
            .collect(),
        overall: row_json(&report.overall),
    }
}

/// Evaluate every benchmark case against `generated_dir/<case_id>.tensor`.
pub fn evaluate_bench(cfg: &RunConfig, manifest: &Path, generated_dir: &Path) -> Result<(Vec<CaseReport>, EvalReport)> {
    let base = dataset::manifest_dir(manifest);
    let entries = dataset::read_bench(manifest)?;
    let mut cases = Vec::with_capacity(entries.len());
    for e in &entries {
        let generated = dataset::read_video_for(&e.case_id, &generated_dir.join(format!("{}.tensor", e.case_id)))?;
        cases.push(EvalCase {
            case_id: e.case_id.clone(),
            refs: dataset::bench_refs(&base, e)?,
            caption: e.caption.clone(),
            generated,
            scenario: Scenario::parse(&e.scenario).expect("validated on read"),
        });
    }
    let det = cfg.attribute_detector();
    let clip = ToyEmbedder::clip(cfg.eval.embed_seed);
    let dino = ToyEmbedder::dino(cfg.eval.embed_seed);
    let reports = par_map(&cases, cfg.eval.workers, |c| {
        evalbench::evaluate_case(c, &det, &clip, &dino)
    })
    .into_iter()
    .collect::<mcvc_core::Result<Vec<_>>>()?;
    let agg = evalbench::aggregate(&reports)?;
    Ok((reports, agg))
}

pub fn cmd_eval(cfg: &RunConfig, manifest: &Path, generated_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let (reports, agg) = evaluate_bench(cfg, manifest, generated_dir)?;
    let out = &cfg.out;
    let rows: Vec<CaseJson> = reports
        .iter()
        .map(|r| CaseJson {
            case_id: r.case_id.clone(),
            scenario: r.scenario.name().into(),
            no_regions: r.no_regions,
            scores: COLUMNS.iter().map(|c| c.to_string()).zip(r.scores.values()).collect(),
        })
        .collect();
    let cases_path = out.join("cases.jsonl");
    fsutil::write_jsonl(&cases_path, &rows)?;
    let json_path = out.join("report.json");
    fsutil::write_json(&json_path, &report_json(&agg))?;
    let table_path = out.join("report.txt");
    fsutil::write_atomic(&table_path, agg.to_table().as_bytes())?;
    finish("eval", cfg, seeds(cfg), started, &[cases_path, json_path, table_path])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Train,
    Corpus,
    Bench,
}

impl DataKind {
    pub fn parse(s: &str) -> Option<DataKind> {
        match s {
            "train" => Some(DataKind::Train),
            "corpus" => Some(DataKind::Corpus),
            "bench" => Some(DataKind::Bench),
            _ => None,
        }
    }
}

pub fn cmd_gen_data(cfg: &RunConfig, kind: DataKind) -> Result<RunManifest> {
    let started = Instant::now();
    let out = &cfg.out;
    fsutil::create_dir(out)?;
    let files = match kind {
        DataKind::Train => dataset::write_train_data(out, cfg)?,
        DataKind::Corpus => dataset::write_corpus(out, cfg)?,
        DataKind::Bench => dataset::write_bench(out, cfg)?,
    };
    let name = match kind {
        DataKind::Train => "gen-data train",
        DataKind::Corpus => "gen-data corpus",
        DataKind::Bench => "gen-data bench",
    };
    finish(name, cfg, seeds(cfg), started, &files)
}
