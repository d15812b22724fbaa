//! Run configuration: defaults, then the JSON file, then dotted `--set`
//! overrides, then schema validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcvc_core::backbone::ModelConfig;
use mcvc_core::conditioning::ConditioningConfig;
use mcvc_core::datapipe::PipelineConfig;
use mcvc_core::evalbench::AttributeDetector;
use mcvc_core::flowmatch::{MixWeights, DEFAULT_CFG_SCALE, DEFAULT_SAMPLE_STEPS, P_DROP_CAPTION, P_DROP_REFS};
use mcvc_core::params::{group, FreezePolicy};
use mcvc_core::toydata::SceneConfig;
use mcvc_core::training::{self, ToyDataConfig, TrainSettings};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fsutil;

pub const CONFIG_VERSION: &str = "mcvc-config/1";

/// Object-valued keys whose children are free-form names.
const OPEN_MAPS: [&str; 2] = ["train.mix", "train.freeze"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: String,
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub conditioning: ConditioningSection,
    pub encoders: EncoderSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub data: DataSection,
    pub curate: CurateSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub time_dim: usize,
    pub caption_dim: usize,
    pub concept_dim: usize,
    pub rmsnorm_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSection {
    pub grid: usize,
    pub dense_dim: usize,
    pub queries: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub dam_heads: usize,
    pub dam_residual: bool,
    pub max_concepts: usize,
}

/// Frozen encoders: toy in-process by default, or JSON-over-HTTP servers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    pub seed: u64,
    pub image_url: Option<String>,
    pub text_url: Option<String>,
    pub timeout_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub data_dir: PathBuf,
    pub steps: usize,
    /// Full-scale runs use 256; the toy default fits one CPU.
    pub batch: usize,
    /// Full-scale runs use 5e-6.
    pub lr: f64,
    pub p_caption: f64,
    pub p_refs: f64,
    pub mix: BTreeMap<String, f64>,
    pub freeze: BTreeMap<String, bool>,
    pub checkpoint_every: usize,
    pub keep_last: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSection {
    pub steps: usize,
    pub cfg_scale: f64,
    pub fps: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_speed: f64,
    pub sinusoid_prob: f64,
    pub mcvc: usize,
    pub single_image: usize,
    pub single_video: usize,
    pub concepts_per_scene: usize,
    pub held_out_pairs: usize,
    pub held_out_seed: u64,
    /// Benchmark scenes per multi-shape scenario.
    pub bench_mixed: usize,
    pub corpus_size: usize,
    pub corpus_flaws: Vec<String>,
    pub face_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurateSection {
    pub workers: usize,
    pub taxonomy: Option<PathBuf>,
    pub backend_url: Option<String>,
    pub face_seed: u64,
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub workers: usize,
    pub embed_seed: u64,
    pub min_area: usize,
    pub color_radius: f64,
    pub occlusion_contact: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = training::toy_model_config();
        let c = training::toy_conditioning_config();
        let t = TrainSettings::default();
        let s = SceneConfig::default();
        let d = ToyDataConfig::default();
        let p = PipelineConfig::default();
        let a = AttributeDetector::default();
        RunConfig {
            version: CONFIG_VERSION.into(),
            seed: 0,
            out: PathBuf::from("runs/latest"),
            model: ModelSection {
                depth: m.depth,
                width: m.width,
                heads: m.heads,
                patch_t: m.patch_t,
                patch_h: m.patch_h,
                patch_w: m.patch_w,
                channels: m.channels,
                time_dim: m.time_dim,
                caption_dim: m.caption_dim,
                concept_dim: m.concept_dim,
                rmsnorm_eps: m.rmsnorm_eps,
            },
            conditioning: ConditioningSection {
                grid: c.grid,
                dense_dim: c.dense_dim,
                queries: c.queries,
                qformer_layers: c.qformer_layers,
                qformer_heads: c.qformer_heads,
                dam_heads: c.dam_heads,
                dam_residual: c.dam_residual,
                max_concepts: c.max_concepts,
            },
            encoders: EncoderSection {
                seed: 17,
                image_url: None,
                text_url: None,
                timeout_ms: 30_000,
            },
            train: TrainSection {
                data_dir: PathBuf::from("data/train"),
                steps: t.steps,
                batch: t.batch,
                lr: t.lr,
                p_caption: P_DROP_CAPTION,
                p_refs: P_DROP_REFS,
                mix: MixWeights::default().weights.into_iter().collect(),
                freeze: FreezePolicy::default().frozen.into_iter().collect(),
                checkpoint_every: 500,
                keep_last: 3,
            },
            sample: SampleSection {
                steps: DEFAULT_SAMPLE_STEPS,
                cfg_scale: DEFAULT_CFG_SCALE,
                fps: crate::tensorfile::DEFAULT_FPS,
                frames: s.frames,
                height: s.height,
                width: s.width,
            },
            data: DataSection {
                frames: s.frames,
                height: s.height,
                width: s.width,
                min_size: s.min_size,
                max_size: s.max_size,
                max_speed: s.max_speed,
                sinusoid_prob: s.sinusoid_prob,
                mcvc: d.mcvc,
                single_image: d.single_image,
                single_video: d.single_video,
                concepts_per_scene: d.concepts_per_scene,
                held_out_pairs: 20,
                held_out_seed: 9,
                bench_mixed: 2,
                corpus_size: 20,
                corpus_flaws: mcvc_core::datapipe::Flaw::ALL
                    .iter()
                    .map(|f| f.name().to_string())
                    .collect(),
                face_seed: 11,
            },
            curate: CurateSection {
                workers: 1,
                taxonomy: None,
                backend_url: None,
                face_seed: 11,
                scene_cut_threshold: p.scene_cut_threshold,
                min_flow: p.min_flow,
                min_contrast: p.min_contrast,
                sample_fraction: p.sample_fraction,
                iou_threshold: p.iou_threshold,
                box_area_lo: p.box_area_lo,
                box_area_hi: p.box_area_hi,
                mask_area_lo: p.mask_area_lo,
                mask_area_hi: p.mask_area_hi,
                max_mask_components: p.max_mask_components,
            },
            eval: EvalSection {
                workers: 1,
                embed_seed: 1,
                min_area: a.min_area,
                color_radius: a.radius,
                occlusion_contact: a.occlusion_contact,
            },
        }
    }
}

/// Parse an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Apply `key.path=value` to `tree`, creating intermediate objects.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::parse("--set", format!("expected key=value, got {spec:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::parse("--set", format!("malformed key {key:?}")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        node = node
            .as_object_mut()
            .expect("object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !node.is_object() {
        *node = Value::Object(Map::new());
    }
    node.as_object_mut()
        .expect("object")
        .insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                leaves(child, &format!("{prefix}.{k}"), out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn unknown_keys(user: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match s.get(k) {
            None => leaves(v, &path, out),
            Some(sv) if !OPEN_MAPS.contains(&path.as_str()) && sv.is_object() => unknown_keys(v, sv, &path, out),
            Some(_) => {}
        }
    }
}

fn merge(base: &mut Value, user: &Value, prefix: &str) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() && !OPEN_MAPS.contains(&path.as_str()) => {
                        merge(slot, v, &path)
                    }
                    Some(slot) => *slot = v.clone(),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}

/// Merge `user` (file plus overrides) over the defaults and validate.
pub fn from_tree(user: &Value) -> Result<RunConfig> {
    if !user.is_object() {
        return Err(Error::parse("config", "top level must be a JSON object"));
    }
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    unknown_keys(user, &defaults, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Schema { keys: unknown });
    }
    let mut tree = defaults;
    merge(&mut tree, user, "");
    let cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| Error::Schema {
        keys: vec![format!("{} ({})", e.path(), e.inner())],
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults ← `path` (if any) ← `overrides`, then validation.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = match path {
        Some(p) => {
            let text = fsutil::read_string(p)?;
            if text.trim().is_empty() {
                Value::Object(Map::new())
            } else {
                serde_json::from_str(&text).map_err(|e| Error::parse(p.display().to_string(), e))?
            }
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    from_tree(&tree)
}

impl RunConfig {
    /// Semantic checks; every offending key is reported.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != CONFIG_VERSION {
            bad.push(format!("version (expected {CONFIG_VERSION})"));
        }
        if let Err(e) = self.model_config().validate() {
            bad.push(format!("model ({e})"));
        }
        let c = &self.conditioning;
        if c.grid == 0 || c.dense_dim == 0 || c.queries == 0 || c.max_concepts == 0 {
            bad.push("conditioning (sizes must be positive)".into());
        }
        if c.qformer_heads == 0 || self.model.concept_dim % c.qformer_heads != 0 {
            bad.push("conditioning.qformer_heads".into());
        }
        if c.dam_heads == 0 || self.model.concept_dim % c.dam_heads != 0 {
            bad.push("conditioning.dam_heads".into());
        }
        for (k, p) in [
            ("train.p_caption", self.train.p_caption),
            ("train.p_refs", self.train.p_refs),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(k.into());
            }
        }
        if self.train.batch == 0 {
            bad.push("train.batch".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            bad.push("train.lr".into());
        }
        for (k, w) in &self.train.mix {
            if !(w.is_finite() && *w >= 0.0) {
                bad.push(format!("train.mix.{k}"));
            }
        }
        if !self.train.mix.values().any(|&w| w > 0.0) {
            bad.push("train.mix (all weights zero)".into());
        }
        for k in self.train.freeze.keys() {
            if !group::ALL.contains(&k.as_str()) {
                bad.push(format!("train.freeze.{k}"));
            }
        }
        if self.sample.steps == 0 {
            bad.push("sample.steps".into());
        }
        if !self.sample.cfg_scale.is_finite() {
            bad.push("sample.cfg_scale".into());
        }
        let m = &self.model;
        let s = &self.sample;
        if s.frames % m.patch_t != 0 || s.height % m.patch_h != 0 || s.width % m.patch_w != 0 || s.frames == 0 {
            bad.push("sample (frames/height/width must be positive multiples of the patch size)".into());
        }
        let d = &self.data;
        if d.frames % m.patch_t != 0 || d.height % m.patch_h != 0 || d.width % m.patch_w != 0 || d.frames == 0 {
            bad.push("data (frames/height/width must be positive multiples of the patch size)".into());
        }
        if !(1..=mcvc_core::toydata::MAX_CONCEPTS).contains(&d.concepts_per_scene) {
            bad.push("data.concepts_per_scene".into());
        }
        for f in &d.corpus_flaws {
            if mcvc_core::datapipe::Flaw::parse(f).is_none() {
                bad.push(format!("data.corpus_flaws ({f})"));
            }
        }
        if self.curate.workers == 0 {
            bad.push("curate.workers".into());
        }
        if self.eval.workers == 0 {
            bad.push("eval.workers".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema { keys: bad })
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            depth: m.depth,
            width: m.width,
            heads: m.heads,
            patch_t: m.patch_t,
            patch_h: m.patch_h,
            patch_w: m.patch_w,
            channels: m.channels,
            time_dim: m.time_dim,
            caption_dim: m.caption_dim,
            concept_dim: m.concept_dim,
            rmsnorm_eps: m.rmsnorm_eps,
        }
    }

    pub fn conditioning_config(&self) -> ConditioningConfig {
        let c = &self.conditioning;
        ConditioningConfig {
            grid: c.grid,
            dense_dim: c.dense_dim,
            queries: c.queries,
            qformer_layers: c.qformer_layers,
            qformer_heads: c.qformer_heads,
            dam_heads: c.dam_heads,
            dam_residual: c.dam_residual,
            max_concepts: c.max_concepts,
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        let mut f = FreezePolicy::default();
        for (k, v) in &self.train.freeze {
            f.frozen.insert(k.clone(), *v);
        }
        f
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.train.steps,
            batch: self.train.batch,
            lr: self.train.lr,
            p_caption: self.train.p_caption,
            p_refs: self.train.p_refs,
            mix: MixWeights {
                weights: self.train.mix.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            },
            seed: self.seed,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        let d = &self.data;
        SceneConfig {
            frames: d.frames,
            height: d.height,
            width: d.width,
            min_size: d.min_size,
            max_size: d.max_size,
            max_speed: d.max_speed,
            sinusoid_prob: d.sinusoid_prob,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let c = &self.curate;
        PipelineConfig {
            scene_cut_threshold: c.scene_cut_threshold,
            min_flow: c.min_flow,
            min_contrast: c.min_contrast,
            sample_fraction: c.sample_fraction,
            iou_threshold: c.iou_threshold,
            box_area_lo: c.box_area_lo,
            box_area_hi: c.box_area_hi,
            mask_area_lo: c.mask_area_lo,
            mask_area_hi: c.mask_area_hi,
            max_mask_components: c.max_mask_components,
        }
    }

    pub fn attribute_detector(&self) -> AttributeDetector {
        AttributeDetector {
            min_area: self.eval.min_area,
            radius: self.eval.color_radius,
            occlusion_contact: self.eval.occlusion_contact,
        }
    }

    /// Canonical JSON of the merged config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        fsutil::content_hash(self.canonical_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "").unwrap();
        assert_eq!(load_config(Some(&p), &[]).unwrap(), RunConfig::default());
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(load_config(Some(&p), &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_override_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"depth": 3}, "train": {"mix": {"mcvc": 1}}}"#).unwrap();
        let cfg = load_config(Some(&p), &["model.depth=2".into(), "out=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.out, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.train.mix.len(), 1);
    }

    #[test]
    fn unknown_keys_are_all_named() {
        let err = load_config(None, &["foo.bar=1".into(), "model.depht=2".into()]).unwrap_err();
        match err {
            Error::Schema { keys } => assert_eq!(keys, vec!["foo.bar".to_string(), "model.depht".to_string()]),
            e => panic!("{e}"),
        }
        let err = load_config(None, &["foo.bar=1".into()]).unwrap_err();
        assert!(err.to_string().contains("foo.bar"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn bad_values_fail_validation() {
        for o in [
            "train.p_refs=1.5",
            "train.freeze.bogus=true",
            "model.heads=5",
            "model.depth=\"two\"",
        ] {
            assert!(
                matches!(load_config(None, &[o.into()]), Err(Error::Schema { .. })),
                "{o}"
            );
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
