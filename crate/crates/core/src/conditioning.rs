//! Composite multi-concept embedding.
//!
//! Each reference image is encoded to dense visual tokens, distilled by a
//! Q-Former into `M` query tokens, then bound to its own label tokens by the
//! decouple attention module (visual queries attend to label keys/values,
//! followed by a gated FFN). Per-concept outputs are concatenated row-wise.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{group, ParamId, ParamStore};
use crate::tensor::Mat;
use crate::video::{luminance, Image};

/// One user concept: reference image plus text label.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptRef {
    pub image: Image,
    pub label: String,
}

impl ConceptRef {
    pub fn new(image: Image, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if image.is_empty() {
            return Err(Error::Invalid("concept image is empty".into()));
        }
        if label.trim().is_empty() {
            return Err(Error::Invalid("concept label is empty".into()));
        }
        Ok(ConceptRef { image, label })
    }
}

/// `G×G` dense visual tokens, flattened row-major to `(G·G) × D_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseVisualTokens {
    pub grid: usize,
    pub tokens: Mat,
}

/// Image encoder contract: image → `G×G×D_v` tokens.
pub trait ImageEncoderBackend: Send + Sync {
    fn encode(&self, image: &Image) -> Result<DenseVisualTokens>;
    fn grid(&self) -> usize;
    fn dim(&self) -> usize;
    /// Whether concurrent read-only calls are safe.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Text encoder contract: string → `L×D` tokens.
pub trait TextEncoderBackend: Send + Sync {
    fn encode(&self, text: &str) -> Result<Mat>;
    fn dim(&self) -> usize;
    fn concurrent(&self) -> bool {
        true
    }
}

const IMAGE_STATS: usize = 5;

/// Deterministic stand-in image encoder: per-cell pooled colour, saturation
/// and edge statistics lifted to `D_v` by a seeded linear map plus bias.
#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    grid: usize,
    dim: usize,
    weight: Mat,
    bias: Vec<f64>,
}

impl ToyImageEncoder {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111_2222);
        let weight = Mat::randn(IMAGE_STATS, dim, 1.0, &mut rng);
        let bias = Mat::randn(1, dim, 0.1, &mut rng).data;
        ToyImageEncoder {
            grid,
            dim,
            weight,
            bias,
        }
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn cell_stats(image: &Image, y0: usize, y1: usize, x0: usize, x1: usize) -> [f64; IMAGE_STATS] {
        let mut s = [0.0; IMAGE_STATS];
        let mut n = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = image.pixel(y, x);
                s[0] += p[0];
                s[1] += p[1];
                s[2] += p[2];
                let mx = p[0].max(p[1]).max(p[2]);
                let mn = p[0].min(p[1]).min(p[2]);
                s[3] += mx - mn;
                let l = luminance(p);
                let lx = if x + 1 < image.width {
                    luminance(image.pixel(y, x + 1))
                } else {
                    l
                };
                let ly = if y + 1 < image.height {
                    luminance(image.pixel(y + 1, x))
                } else {
                    l
                };
                s[4] += (lx - l).abs() + (ly - l).abs();
                n += 1.0;
            }
        }
        for v in s.iter_mut() {
            *v /= n;
        }
        s
    }
}

impl ImageEncoderBackend for ToyImageEncoder {
    fn encode(&self, image: &Image) -> Result<DenseVisualTokens> {
        if image.is_empty() {
            return Err(Error::backend("encode_image", "empty image"));
        }
        let g = self.grid;
        let mut tokens = Mat::zeros(g * g, self.dim);
        for cy in 0..g {
            let y0 = cy * image.height / g;
            let y1 = ((cy + 1) * image.height / g).max(y0 + 1).min(image.height);
            for cx in 0..g {
                let x0 = cx * image.width / g;
                let x1 = ((cx + 1) * image.width / g).max(x0 + 1).min(image.width);
                let y0 = y0.min(image.height - 1);
                let x0 = x0.min(image.width - 1);
                let stats = Self::cell_stats(image, y0, y1, x0, x1);
                let row = tokens.row_mut(cy * g + cx);
                row.copy_from_slice(&self.bias);
                for (k, &s) in stats.iter().enumerate() {
                    for (o, &w) in row.iter_mut().zip(self.weight.row(k)) {
                        *o += s * w;
                    }
                }
            }
        }
        Ok(DenseVisualTokens { grid: g, tokens })
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Deterministic stand-in text encoder: one token per lowercase word, looked
/// up in a seeded embedding table indexed by the word's hash.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
    table_size: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyTextEncoder {
            dim,
            seed,
            table_size: 1 << 16,
        }
    }

    fn row(&self, word: &str) -> Vec<f64> {
        let slot = fnv1a(word.as_bytes()) % self.table_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ slot);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl TextEncoderBackend for ToyTextEncoder {
    fn encode(&self, text: &str) -> Result<Mat> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::backend("encode_label", "empty text"));
        }
        let mut m = Mat::zeros(words.len(), self.dim);
        for (i, w) in words.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&self.row(w));
        }
        Ok(m)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Lowercase alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningConfig {
    /// Dense token grid side `G`.
    pub grid: usize,
    /// Dense token width `D_v`.
    pub dense_dim: usize,
    /// Learnable query count `M`.
    pub queries: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub dam_heads: usize,
    /// Residual connections around the DAM attention and FFN.
    pub dam_residual: bool,
    pub max_concepts: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig {
            grid: 16,
            dense_dim: 768,
            queries: 16,
            qformer_layers: 2,
            qformer_heads: 4,
            dam_heads: 4,
            dam_residual: true,
            max_concepts: 4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QFormerLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct DamParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Gated FFN: `(gelu(h·w1) ⊙ (h·wg))·w2`.
    pub w1: ParamId,
    pub wg: ParamId,
    pub w2: ParamId,
}

/// Parameter layout of the Q-Former + DAM pathway.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub cfg: ConditioningConfig,
    pub concept_dim: usize,
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub dam: DamParams,
}

/// Concatenated per-concept embeddings with their row spans.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeConceptEmbedding {
    pub tokens: Mat,
    pub spans: Vec<(usize, usize)>,
}

impl CompositeConceptEmbedding {
    pub fn span(&self, i: usize) -> Mat {
        let (a, b) = self.spans[i];
        self.tokens.rows_range(a, b)
    }
}

fn init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::randn(rows, cols, 1.0 / libm::sqrt(rows as f64), rng)
}

impl Conditioner {
    pub fn register<R: Rng + ?Sized>(
        cfg: &ConditioningConfig,
        concept_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let d = concept_dim;
        if cfg.queries == 0 || cfg.grid == 0 || cfg.dense_dim == 0 || d == 0 {
            return Err(Error::Dimension("conditioning dimensions must be positive".into()));
        }
        if cfg.qformer_heads == 0 || d % cfg.qformer_heads != 0 || cfg.dam_heads == 0 || d % cfg.dam_heads != 0 {
            return Err(Error::Dimension(alloc::format!(
                "concept dim {d} not divisible by head counts"
            )));
        }
        if cfg.max_concepts == 0 {
            return Err(Error::Dimension("max_concepts must be positive".into()));
        }
        let queries = store.add("qformer.queries", group::QFORMER, Mat::randn(cfg.queries, d, 1.0, rng));
        let mut layers = Vec::new();
        for l in 0..cfg.qformer_layers {
            let name = |s: &str| alloc::format!("qformer.layers.{l}.{s}");
            layers.push(QFormerLayer {
                wq: store.add(name("wq"), group::QFORMER, init(d, d, rng)),
                wk: store.add(name("wk"), group::QFORMER, init(cfg.dense_dim, d, rng)),
                wv: store.add(name("wv"), group::QFORMER, init(cfg.dense_dim, d, rng)),
                wo: store.add(name("wo"), group::QFORMER, init(d, d, rng)),
                w1: store.add(name("w1"), group::QFORMER, init(d, 4 * d, rng)),
                b1: store.add(name("b1"), group::QFORMER, Mat::zeros(1, 4 * d)),
                w2: store.add(name("w2"), group::QFORMER, init(4 * d, d, rng)),
                b2: store.add(name("b2"), group::QFORMER, Mat::zeros(1, d)),
            });
        }
        let dam = DamParams {
            wq: store.add("dam.wq", group::DAM, init(d, d, rng)),
            wk: store.add("dam.wk", group::DAM, init(d, d, rng)),
            wv: store.add("dam.wv", group::DAM, init(d, d, rng)),
            w1: store.add("dam.w1", group::DAM, init(d, 4 * d, rng)),
            wg: store.add("dam.wg", group::DAM, init(d, 4 * d, rng)),
            w2: store.add("dam.w2", group::DAM, init(4 * d, d, rng)),
        };
        Ok(Conditioner {
            cfg: cfg.clone(),
            concept_dim,
            queries,
            layers,
            dam,
        })
    }

    /// Q-Former on the tape: `M` learnable queries cross-attend to the
    /// flattened dense tokens through residual (cross-attention, FFN) layers.
    pub fn qformer_tape(&self, tape: &mut Tape, store: &ParamStore, dense: &DenseVisualTokens) -> Result<Var> {
        if dense.tokens.cols != self.cfg.dense_dim {
            return Err(Error::shape(alloc::format!(
                "dense tokens are {} wide, Q-Former expects {}",
                dense.tokens.cols,
                self.cfg.dense_dim
            )));
        }
        let f = tape.leaf(dense.tokens.clone());
        let mut x = tape.param(store, self.queries);
        for layer in &self.layers {
            let (wq, wk, wv, wo) = (
                tape.param(store, layer.wq),
                tape.param(store, layer.wk),
                tape.param(store, layer.wv),
                tape.param(store, layer.wo),
            );
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(f, wk)?;
            let v = tape.matmul(f, wv)?;
            let a = tape.attention(q, k, v, self.cfg.qformer_heads, None)?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;
            let (w1, b1, w2, b2) = (
                tape.param(store, layer.w1),
                tape.param(store, layer.b1),
                tape.param(store, layer.w2),
                tape.param(store, layer.b2),
            );
            let h = tape.matmul(x, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2)?;
            let h = tape.add_row(h, b2)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// DAM on the tape: visual tokens query their own label tokens.
    pub fn dam_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, y: Var) -> Result<Var> {
        let d = self.concept_dim;
        if tape.shape(x).1 != d || tape.shape(y).1 != d {
            return Err(Error::shape(alloc::format!("DAM inputs must be {d} wide")));
        }
        let p = &self.dam;
        let (wq, wk, wv) = (
            tape.param(store, p.wq),
            tape.param(store, p.wk),
            tape.param(store, p.wv),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(y, wk)?;
        let v = tape.matmul(y, wv)?;
        let a = tape.attention(q, k, v, self.cfg.dam_heads, None)?;
        let h = if self.cfg.dam_residual { tape.add(x, a)? } else { a };
        let (w1, wg, w2) = (
            tape.param(store, p.w1),
            tape.param(store, p.wg),
            tape.param(store, p.w2),
        );
        let u = tape.matmul(h, w1)?;
        let u = tape.gelu(u);
        let gate = tape.matmul(h, wg)?;
        let m = tape.mul(u, gate)?;
        let o = tape.matmul(m, w2)?;
        if self.cfg.dam_residual {
            tape.add(h, o)
        } else {
            Ok(o)
        }
    }

    /// Full pathway on the tape for pre-encoded concepts `(dense, label)`.
    pub fn build_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        encoded: &[(DenseVisualTokens, Mat)],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        self.check_count(encoded.len())?;
        let mut parts = Vec::with_capacity(encoded.len());
        for (dense, label) in encoded {
            let x = self.qformer_tape(tape, store, dense)?;
            let y = tape.leaf(label.clone());
            parts.push(self.dam_tape(tape, store, x, y)?);
        }
        let spans = spans_for(&parts.iter().map(|&p| tape.shape(p).0).collect::<Vec<_>>());
        Ok((tape.concat_rows(&parts)?, spans))
    }

    fn check_count(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Empty("concept list"));
        }
        if n > self.cfg.max_concepts {
            return Err(Error::TooManyConcepts {
                got: n,
                max: self.cfg.max_concepts,
            });
        }
        Ok(())
    }

    pub fn qformer(&self, store: &ParamStore, dense: &DenseVisualTokens) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = self.qformer_tape(&mut tape, store, dense)?;
        Ok(tape.value(x).clone())
    }

    pub fn dam(&self, store: &ParamStore, x: &Mat, y: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let (xv, yv) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
        let c = self.dam_tape(&mut tape, store, xv, yv)?;
        Ok(tape.value(c).clone())
    }

    /// Encode every reference and assemble the composite embedding.
    pub fn build_conditions(
        &self,
        store: &ParamStore,
        refs: &[ConceptRef],
        image_encoder: &dyn ImageEncoderBackend,
        text_encoder: &dyn TextEncoderBackend,
    ) -> Result<CompositeConceptEmbedding> {
        let encoded = encode_concepts(refs, self.cfg.max_concepts, image_encoder, text_encoder)?;
        let mut tape = Tape::new();
        let (c, spans) = self.build_tape(&mut tape, store, &encoded)?;
        Ok(CompositeConceptEmbedding {
            tokens: tape.value(c).clone(),
            spans,
        })
    }
}

/// Run both encoders on each reference, tagging failures with the concept index.
pub fn encode_concepts(
    refs: &[ConceptRef],
    max_concepts: usize,
    image_encoder: &dyn ImageEncoderBackend,
    text_encoder: &dyn TextEncoderBackend,
) -> Result<Vec<(DenseVisualTokens, Mat)>> {
    if refs.is_empty() {
        return Err(Error::Empty("concept list"));
    }
    if refs.len() > max_concepts {
        return Err(Error::TooManyConcepts {
            got: refs.len(),
            max: max_concepts,
        });
    }
    refs.iter()
        .enumerate()
        .map(|(i, r)| {
            let dense = encode_image(image_encoder, &r.image).map_err(|e| e.with_concept(i))?;
            let label = encode_label(text_encoder, &r.label).map_err(|e| e.with_concept(i))?;
            Ok((dense, label))
        })
        .collect()
}

pub fn encode_image(backend: &dyn ImageEncoderBackend, image: &Image) -> Result<DenseVisualTokens> {
    if image.is_empty() {
        return Err(Error::backend("encode_image", "empty image"));
    }
    let out = backend.encode(image).map_err(|e| e.at_stage("encode_image"))?;
    let g = backend.grid();
    if out.tokens.rows != g * g || out.tokens.cols != backend.dim() || !out.tokens.is_finite() {
        return Err(Error::backend("encode_image", "backend returned malformed tokens"));
    }
    Ok(out)
}

pub fn encode_label(backend: &dyn TextEncoderBackend, label: &str) -> Result<Mat> {
    if label.trim().is_empty() {
        return Err(Error::backend("encode_label", "empty label"));
    }
    let out = backend.encode(label).map_err(|e| e.at_stage("encode_label"))?;
    if out.rows == 0 || out.cols != backend.dim() || !out.is_finite() {
        return Err(Error::backend("encode_label", "backend returned malformed tokens"));
    }
    Ok(out)
}

fn spans_for(lengths: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let s = (start, start + n);
            start += n;
            s
        })
        .collect()
}

/// Row-wise concatenation in input order.
pub fn composite(embeddings: &[Mat]) -> Result<CompositeConceptEmbedding> {
    let parts: Vec<&Mat> = embeddings.iter().collect();
    if parts.is_empty() {
        return Err(Error::Empty("concept embeddings"));
    }
    let tokens = Mat::vstack(&parts)?;
    let spans = spans_for(&embeddings.iter().map(|m| m.rows).collect::<Vec<_>>());
    Ok(CompositeConceptEmbedding { tokens, spans })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ConditioningConfig {
        ConditioningConfig {
            grid: 4,
            dense_dim: 8,
            queries: 3,
            qformer_layers: 1,
            qformer_heads: 2,
            dam_heads: 2,
            dam_residual: true,
            max_concepts: 4,
        }
    }

    fn setup() -> (Conditioner, ParamStore, ToyImageEncoder, ToyTextEncoder) {
        let mut store = ParamStore::new();
        let cond = Conditioner::register(&small_cfg(), 6, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (cond, store, ToyImageEncoder::new(4, 8, 7), ToyTextEncoder::new(6, 7))
    }

    fn img(rgb: [f64; 3]) -> Image {
        let mut im = Image::filled(12, 12, [0.5; 3]);
        for y in 3..9 {
            for x in 3..9 {
                im.set_pixel(y, x, rgb);
            }
        }
        im
    }

    #[test]
    fn toy_image_encoder_default_shape_and_constant_input() {
        let enc = ToyImageEncoder::new(16, 768, 0);
        let out = enc.encode(&Image::filled(32, 32, [0.0; 3])).unwrap();
        assert_eq!((out.grid, out.tokens.rows, out.tokens.cols), (16, 256, 768));
        for r in 0..out.tokens.rows {
            assert_eq!(out.tokens.row(r), enc.bias());
        }
        let im = img([1.0, 0.0, 0.0]);
        assert_eq!(enc.encode(&im).unwrap(), enc.encode(&im).unwrap());
    }

    #[test]
    fn toy_text_encoder_properties() {
        let enc = ToyTextEncoder::new(8, 3);
        assert_eq!(enc.encode("a dog").unwrap(), enc.encode("a dog").unwrap());
        assert_eq!(enc.encode("a dog").unwrap().rows, 2);
        let cat = enc.encode("cat").unwrap();
        let dog = enc.encode("dog").unwrap();
        assert_ne!(cat.row(0), dog.row(0));
        assert!(encode_label(&enc, "").is_err());
        assert!(encode_label(&enc, "   ").is_err());
    }

    #[test]
    fn qformer_without_layers_returns_queries() {
        let mut store = ParamStore::new();
        let cfg = ConditioningConfig {
            qformer_layers: 0,
            ..small_cfg()
        };
        let cond = Conditioner::register(&cfg, 6, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dense = ToyImageEncoder::new(4, 8, 0).encode(&img([0.0, 1.0, 0.0])).unwrap();
        assert_eq!(&cond.qformer(&store, &dense).unwrap(), store.value(cond.queries));
    }

    #[test]
    fn qformer_ignores_dense_token_order() {
        let (cond, store, enc, _) = setup();
        let dense = enc.encode(&img([0.0, 0.0, 1.0])).unwrap();
        let n = dense.tokens.rows;
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let shuffled = DenseVisualTokens {
            grid: dense.grid,
            tokens: crate::backbone::permute_rows(&dense.tokens, &perm),
        };
        let a = cond.qformer(&store, &dense).unwrap();
        let b = cond.qformer(&store, &shuffled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn composite_spans_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts: Vec<Mat> = (0..3).map(|_| Mat::randn(16, 64, 1.0, &mut rng)).collect();
        let c = composite(&parts).unwrap();
        assert_eq!(c.tokens.shape(), (48, 64));
        assert_eq!(c.spans, vec![(0, 16), (16, 32), (32, 48)]);
        let single = composite(&parts[..1]).unwrap();
        assert_eq!(single.tokens, parts[0]);
        let swapped = composite(&[parts[1].clone(), parts[0].clone(), parts[2].clone()]).unwrap();
        assert_eq!(swapped.span(0), c.span(1));
        assert_eq!(swapped.span(1), c.span(0));
        assert!(matches!(composite(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn build_conditions_shapes_and_limits() {
        let (cond, store, ie, te) = setup();
        let a = ConceptRef::new(img([1.0, 0.0, 0.0]), "red square").unwrap();
        let b = ConceptRef::new(img([0.0, 0.0, 1.0]), "blue square").unwrap();
        let c = cond
            .build_conditions(&store, &[a.clone(), b.clone()], &ie, &te)
            .unwrap();
        assert_eq!(c.tokens.shape(), (6, 6));
        let dup = cond
            .build_conditions(&store, &[a.clone(), a.clone()], &ie, &te)
            .unwrap();
        assert_eq!(dup.span(0), dup.span(1));
        let five = vec![a.clone(); 5];
        assert!(matches!(
            cond.build_conditions(&store, &five, &ie, &te),
            Err(Error::TooManyConcepts { got: 5, max: 4 })
        ));
        assert!(ConceptRef::new(img([0.0; 3]), " ").is_err());
    }

    struct FailingText;
    impl TextEncoderBackend for FailingText {
        fn encode(&self, _: &str) -> Result<Mat> {
            Err(Error::backend("remote", "unavailable"))
        }
        fn dim(&self) -> usize {
            6
        }
    }

    #[test]
    fn backend_errors_carry_concept_index() {
        let (cond, store, ie, _) = setup();
        let a = ConceptRef::new(img([1.0, 0.0, 0.0]), "red").unwrap();
        match cond.build_conditions(&store, &[a.clone(), a], &ie, &FailingText) {
            Err(Error::Backend {
                index: Some(0), stage, ..
            }) => assert_eq!(stage, "encode_label"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
