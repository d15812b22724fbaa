//! Conditioned video diffusion transformer.
//!
//! Each block applies five timestep-modulated residual sublayers in order:
//! per-frame spatial self-attention, full spatiotemporal self-attention,
//! caption cross-attention, concept-injector cross-attention and an FFN.
//! Every sublayer computes `x + f(rmsnorm(x) ⊙ (1 + scale(t)))`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Mask, RopeTable, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{group, ParamId, ParamStore};
use crate::tensor::Mat;
use crate::video::Video;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    /// Transformer width.
    pub width: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    /// Sinusoidal timestep embedding size.
    pub time_dim: usize,
    pub caption_dim: usize,
    /// Width of the composite concept tokens.
    pub concept_dim: usize,
    pub rmsnorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            width: 32,
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
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.depth,
            self.width,
            self.heads,
            self.patch_t,
            self.patch_h,
            self.patch_w,
            self.channels,
            self.time_dim,
            self.caption_dim,
            self.concept_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension("model dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Dimension(alloc::format!(
                "width {} not divisible by {} heads",
                self.width,
                self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::Dimension("head width must be even for rotary positions".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Dimension("time_dim must be even".into()));
        }
        if !(self.rmsnorm_eps >= 0.0) {
            return Err(Error::Dimension("rmsnorm_eps must be non-negative".into()));
        }
        Ok(())
    }

    /// Channels of one latent token: `patch_t · patch_h · patch_w · channels`.
    pub fn token_dim(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * self.channels
    }
}

/// Latent grid `(F', H', W')`; `S = H'·W'` tokens per latent frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.spatial()
    }

    /// `(frame, row, col)` of token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let s = self.spatial();
        (i / s, (i % s) / self.width, i % self.width)
    }
}

/// Patchified video: one row per token, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    pub tokens: Mat,
    pub grid: Grid,
}

impl VideoLatent {
    pub fn new(tokens: Mat, grid: Grid) -> Result<Self> {
        if tokens.rows != grid.tokens() || grid.frames == 0 || grid.height == 0 || grid.width == 0 {
            return Err(Error::shape("latent tokens do not match grid"));
        }
        Ok(VideoLatent { tokens, grid })
    }
}

/// Lossless space-to-depth rearrangement; token channels are ordered
/// `(dt, dy, dx, c)`.
pub fn patchify(video: &Video, cfg: &ModelConfig) -> Result<VideoLatent> {
    let (pt, ph, pw) = (cfg.patch_t, cfg.patch_h, cfg.patch_w);
    if pt == 0 || ph == 0 || pw == 0 {
        return Err(Error::Dimension("patch sizes must be positive".into()));
    }
    if video.channels != cfg.channels {
        return Err(Error::Dimension(alloc::format!(
            "video has {} channels, model expects {}",
            video.channels,
            cfg.channels
        )));
    }
    if video.frames == 0 || video.frames % pt != 0 || video.height % ph != 0 || video.width % pw != 0 {
        return Err(Error::Dimension(alloc::format!(
            "video {}x{}x{} not divisible by patch ({pt},{ph},{pw})",
            video.frames,
            video.height,
            video.width
        )));
    }
    let grid = Grid {
        frames: video.frames / pt,
        height: video.height / ph,
        width: video.width / pw,
    };
    if grid.height == 0 || grid.width == 0 {
        return Err(Error::Dimension("empty latent grid".into()));
    }
    let c = video.channels;
    let td = cfg.token_dim();
    let mut tokens = Mat::zeros(grid.tokens(), td);
    for i in 0..grid.tokens() {
        let (f, gy, gx) = grid.coords(i);
        let row = tokens.row_mut(i);
        let mut k = 0;
        for dt in 0..pt {
            for dy in 0..ph {
                for dx in 0..pw {
                    let base = video.index(f * pt + dt, gy * ph + dy, gx * pw + dx, 0);
                    row[k..k + c].copy_from_slice(&video.data[base..base + c]);
                    k += c;
                }
            }
        }
    }
    Ok(VideoLatent { tokens, grid })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(latent: &VideoLatent, cfg: &ModelConfig) -> Result<Video> {
    let (pt, ph, pw) = (cfg.patch_t, cfg.patch_h, cfg.patch_w);
    let grid = latent.grid;
    if latent.tokens.cols != cfg.token_dim() || latent.tokens.rows != grid.tokens() {
        return Err(Error::shape("latent width does not match patch geometry"));
    }
    let c = cfg.channels;
    let mut video = Video::zeros(grid.frames * pt, grid.height * ph, grid.width * pw, c);
    for i in 0..grid.tokens() {
        let (f, gy, gx) = grid.coords(i);
        let row = latent.tokens.row(i);
        let mut k = 0;
        for dt in 0..pt {
            for dy in 0..ph {
                for dx in 0..pw {
                    let base = video.index(f * pt + dt, gy * ph + dy, gx * pw + dx, 0);
                    video.data[base..base + c].copy_from_slice(&row[k..k + c]);
                    k += c;
                }
            }
        }
    }
    Ok(video)
}

/// `x / sqrt(mean(x²) + eps) ⊙ gain`.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::shape("rmsnorm gain length"));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let inv = 1.0 / libm::sqrt(ms + eps);
    Ok(x.iter().zip(gain).map(|(v, g)| v * inv * g).collect())
}

/// Residual timestep-modulated sublayer on the tape:
/// `x + sublayer(rmsnorm(x, gain) ⊙ (1 + scale))`.
pub fn modulated_sublayer(
    tape: &mut Tape,
    x: Var,
    gain: Var,
    scale: Var,
    eps: f64,
    sublayer: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let (_, w) = tape.shape(x);
    if tape.shape(scale) != (1, w) {
        return Err(Error::shape(alloc::format!(
            "scale must be 1x{w}, got {:?}",
            tape.shape(scale)
        )));
    }
    let normed = tape.rmsnorm(x, gain, eps)?;
    let one_plus = tape.add_scalar(scale, 1.0);
    let modulated = tape.mul_row(normed, one_plus)?;
    let y = sublayer(tape, modulated)?;
    tape.add(x, y)
}

/// Sinusoidal embedding of `t ∈ [0,1]` (scaled to a 0..1000 range).
pub fn timestep_embedding(t: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros(1, dim);
    for k in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        let a = t * 1000.0 * freq;
        out.data[k] = libm::sin(a);
        out.data[half + k] = libm::cos(a);
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SublayerIds {
    pub gain: ParamId,
    pub scale_w: ParamId,
    pub scale_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub spatial: (SublayerIds, AttnIds),
    pub spatiotemporal: (SublayerIds, AttnIds),
    pub text: (SublayerIds, AttnIds),
    pub injector: (SublayerIds, AttnIds),
    pub ffn: (SublayerIds, FfnIds),
}

/// Sublayer order inside a block.
pub const SUBLAYERS: [&str; 5] = ["spatial", "spatiotemporal", "text", "injector", "ffn"];

/// Timestep-derived modulation of every sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepScale {
    pub t: f64,
    pub sinusoidal_embed: Vec<f64>,
    /// `depth × 5` scale rows in block then [`SUBLAYERS`] order.
    pub per_sublayer_scales: Vec<Vec<f64>>,
}

/// Optional stages of one transformer block, for tests and ablations.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockInputs {
    pub text: Option<Var>,
    pub ids: Option<Var>,
}

/// Masks and rotary tables for one latent grid.
pub struct Geometry {
    pub grid: Grid,
    pub spatial_mask: Mask,
    pub full_mask: Option<Mask>,
    pub rope_spatial: Arc<RopeTable>,
    pub rope_full: Arc<RopeTable>,
    pub valid: Option<Vec<bool>>,
}

impl Geometry {
    /// `valid[i] == false` marks padding tokens: they are never attended to.
    pub fn new(grid: Grid, heads: usize, width: usize, valid: Option<&[bool]>) -> Result<Self> {
        let n = grid.tokens();
        if let Some(v) = valid {
            if v.len() != n {
                return Err(Error::shape("token mask length"));
            }
        }
        let key_ok = |j: usize| valid.is_none_or(|v| v[j]);
        let spatial_mask = Mask::from_fn(n, n, |i, j| grid.coords(i).0 == grid.coords(j).0 && key_ok(j));
        let full_mask = valid.map(|_| Mask::from_fn(n, n, |_, j| key_ok(j)));
        let pairs = width / heads / 2;
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let (f, y, x) = grid.coords(i);
                [f as f64, y as f64, x as f64]
            })
            .collect();
        let spatial_axes: Vec<Option<usize>> = (0..pairs).map(|p| Some(1 + p % 2)).collect();
        let full_axes: Vec<Option<usize>> = (0..pairs).map(|p| Some(p % 3)).collect();
        Ok(Geometry {
            grid,
            spatial_mask,
            full_mask,
            rope_spatial: Arc::new(RopeTable::new(&positions, &spatial_axes)),
            rope_full: Arc::new(RopeTable::new(&positions, &full_axes)),
            valid: valid.map(<[bool]>::to_vec),
        })
    }
}

/// Backbone parameter layout.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub patch_embed: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_w: ParamId,
    pub final_b: ParamId,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::randn(rows, cols, 1.0 / libm::sqrt(rows as f64), rng)
}

impl Backbone {
    /// Register all backbone parameters in `store`. The concept-injector
    /// output projections and the final projection start at zero.
    pub fn register<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let patch_embed = store.add("patch_embed.w", group::PATCH_EMBED, xavier(cfg.token_dim(), c, rng));
        let time_w = store.add("time_embed.w", group::TIME_EMBED, xavier(cfg.time_dim, c, rng));
        let time_b = store.add("time_embed.b", group::TIME_EMBED, Mat::zeros(1, c));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let sub = |store: &mut ParamStore, name: &str, grp: &'static str| SublayerIds {
                gain: store.add(alloc::format!("blocks.{b}.{name}.norm"), grp, Mat::filled(1, c, 1.0)),
                scale_w: store.add(alloc::format!("blocks.{b}.{name}.scale_w"), grp, Mat::zeros(c, c)),
                scale_b: store.add(alloc::format!("blocks.{b}.{name}.scale_b"), grp, Mat::zeros(1, c)),
            };
            let attn =
                |store: &mut ParamStore, name: &str, grp: &'static str, kv_dim: usize, zero_out: bool, rng: &mut R| {
                    AttnIds {
                        wq: store.add(alloc::format!("blocks.{b}.{name}.wq"), grp, xavier(c, c, rng)),
                        wk: store.add(alloc::format!("blocks.{b}.{name}.wk"), grp, xavier(kv_dim, c, rng)),
                        wv: store.add(alloc::format!("blocks.{b}.{name}.wv"), grp, xavier(kv_dim, c, rng)),
                        wo: store.add(
                            alloc::format!("blocks.{b}.{name}.wo"),
                            grp,
                            if zero_out { Mat::zeros(c, c) } else { xavier(c, c, rng) },
                        ),
                    }
                };
            let spatial = (
                sub(store, "spatial", group::SPATIAL_ATTN),
                attn(store, "spatial", group::SPATIAL_ATTN, c, false, rng),
            );
            let spatiotemporal = (
                sub(store, "spatiotemporal", group::SPATIOTEMPORAL_ATTN),
                attn(store, "spatiotemporal", group::SPATIOTEMPORAL_ATTN, c, false, rng),
            );
            let text = (
                sub(store, "text", group::TEXT_XATTN),
                attn(store, "text", group::TEXT_XATTN, cfg.caption_dim, false, rng),
            );
            let injector = (
                sub(store, "injector", group::MC_INJECTOR),
                attn(store, "injector", group::MC_INJECTOR, cfg.concept_dim, true, rng),
            );
            let ffn_sub = sub(store, "ffn", group::FFN);
            let ffn = FfnIds {
                w1: store.add(alloc::format!("blocks.{b}.ffn.w1"), group::FFN, xavier(c, 4 * c, rng)),
                b1: store.add(alloc::format!("blocks.{b}.ffn.b1"), group::FFN, Mat::zeros(1, 4 * c)),
                w2: store.add(alloc::format!("blocks.{b}.ffn.w2"), group::FFN, xavier(4 * c, c, rng)),
                b2: store.add(alloc::format!("blocks.{b}.ffn.b2"), group::FFN, Mat::zeros(1, c)),
            };
            blocks.push(BlockParams {
                spatial,
                spatiotemporal,
                text,
                injector,
                ffn: (ffn_sub, ffn),
            });
        }
        let final_gain = store.add("final.norm", group::FINAL, Mat::filled(1, c, 1.0));
        let final_w = store.add("final.w", group::FINAL, Mat::zeros(c, cfg.token_dim()));
        let final_b = store.add("final.b", group::FINAL, Mat::zeros(1, cfg.token_dim()));
        Ok(Backbone {
            cfg: cfg.clone(),
            patch_embed,
            time_w,
            time_b,
            blocks,
            final_gain,
            final_w,
            final_b,
        })
    }

    /// Shared timestep feature `silu(emb(t)·W + b)`.
    pub fn time_features(&self, tape: &mut Tape, store: &ParamStore, t: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Range(alloc::format!("timestep {t} outside [0,1]")));
        }
        let emb = tape.leaf(timestep_embedding(t, self.cfg.time_dim));
        let w = tape.param(store, self.time_w);
        let b = tape.param(store, self.time_b);
        let h = tape.matmul(emb, w)?;
        let h = tape.add_row(h, b)?;
        Ok(tape.silu(h))
    }

    fn scale(&self, tape: &mut Tape, store: &ParamStore, tfeat: Var, ids: &SublayerIds) -> Result<Var> {
        let w = tape.param(store, ids.scale_w);
        let b = tape.param(store, ids.scale_b);
        let s = tape.matmul(tfeat, w)?;
        tape.add_row(s, b)
    }

    pub fn timestep_scales(&self, store: &ParamStore, t: f64) -> Result<TimestepScale> {
        let mut tape = Tape::new();
        let tfeat = self.time_features(&mut tape, store, t)?;
        let mut per = Vec::new();
        for blk in &self.blocks {
            for ids in [
                &blk.spatial.0,
                &blk.spatiotemporal.0,
                &blk.text.0,
                &blk.injector.0,
                &blk.ffn.0,
            ] {
                let s = self.scale(&mut tape, store, tfeat, ids)?;
                per.push(tape.value(s).data.clone());
            }
        }
        Ok(TimestepScale {
            t,
            sinusoidal_embed: timestep_embedding(t, self.cfg.time_dim).data,
            per_sublayer_scales: per,
        })
    }

    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &AttnIds,
        x: Var,
        kv: Var,
        mask: Option<&Mask>,
        rope: Option<&Arc<RopeTable>>,
    ) -> Result<Var> {
        let heads = self.cfg.heads;
        let (wq, wk, wv, wo) = (
            tape.param(store, ids.wq),
            tape.param(store, ids.wk),
            tape.param(store, ids.wv),
            tape.param(store, ids.wo),
        );
        let mut q = tape.matmul(x, wq)?;
        let mut k = tape.matmul(kv, wk)?;
        let v = tape.matmul(kv, wv)?;
        if let Some(table) = rope {
            q = tape.rope(q, heads, table)?;
            k = tape.rope(k, heads, table)?;
        }
        let a = tape.attention(q, k, v, heads, mask)?;
        tape.matmul(a, wo)
    }

    /// One transformer block. `text`/`ids` set to `None` make the
    /// corresponding cross-attention sublayer the identity.
    pub fn block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        blk: &BlockParams,
        x: Var,
        tfeat: Var,
        geo: &Geometry,
        cond: BlockInputs,
    ) -> Result<Var> {
        let eps = self.cfg.rmsnorm_eps;
        let mut x = x;
        // (1) per-frame spatial self-attention
        let (sub, attn) = &blk.spatial;
        let s = self.scale(tape, store, tfeat, sub)?;
        let g = tape.param(store, sub.gain);
        x = modulated_sublayer(tape, x, g, s, eps, |tp, m| {
            self.attend(tp, store, attn, m, m, Some(&geo.spatial_mask), Some(&geo.rope_spatial))
        })?;
        // (2) spatiotemporal self-attention over every token
        let (sub, attn) = &blk.spatiotemporal;
        let s = self.scale(tape, store, tfeat, sub)?;
        let g = tape.param(store, sub.gain);
        x = modulated_sublayer(tape, x, g, s, eps, |tp, m| {
            self.attend(tp, store, attn, m, m, geo.full_mask.as_ref(), Some(&geo.rope_full))
        })?;
        // (3) caption cross-attention
        if let Some(text) = cond.text {
            let (sub, attn) = &blk.text;
            let s = self.scale(tape, store, tfeat, sub)?;
            let g = tape.param(store, sub.gain);
            x = modulated_sublayer(tape, x, g, s, eps, |tp, m| {
                self.attend(tp, store, attn, m, text, None, None)
            })?;
        }
        // (4) concept injector, after the caption cross-attention
        if let Some(ids) = cond.ids {
            let (sub, attn) = &blk.injector;
            let s = self.scale(tape, store, tfeat, sub)?;
            let g = tape.param(store, sub.gain);
            x = modulated_sublayer(tape, x, g, s, eps, |tp, m| {
                self.attend(tp, store, attn, m, ids, None, None)
            })?;
        }
        // (5) FFN
        let (sub, ffn) = &blk.ffn;
        let s = self.scale(tape, store, tfeat, sub)?;
        let g = tape.param(store, sub.gain);
        modulated_sublayer(tape, x, g, s, eps, |tp, m| {
            let (w1, b1, w2, b2) = (
                tp.param(store, ffn.w1),
                tp.param(store, ffn.b1),
                tp.param(store, ffn.w2),
                tp.param(store, ffn.b2),
            );
            let h = tp.matmul(m, w1)?;
            let h = tp.add_row(h, b1)?;
            let h = tp.gelu(h);
            let o = tp.matmul(h, w2)?;
            tp.add_row(o, b2)
        })
    }

    /// Embed latent tokens into the model width.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, z: &VideoLatent) -> Result<Var> {
        if z.tokens.cols != self.cfg.token_dim() {
            return Err(Error::shape(alloc::format!(
                "latent width {} but model expects {}",
                z.tokens.cols,
                self.cfg.token_dim()
            )));
        }
        let zt = tape.leaf(z.tokens.clone());
        let w = tape.param(store, self.patch_embed);
        tape.matmul(zt, w)
    }

    /// Velocity prediction on the tape. `valid` flags real (non-padding) tokens.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: &VideoLatent,
        t: f64,
        text: Option<Var>,
        ids: Option<Var>,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        if let Some(tx) = text {
            if tape.shape(tx).1 != self.cfg.caption_dim {
                return Err(Error::shape("caption token width"));
            }
        }
        if let Some(c) = ids {
            if tape.shape(c).1 != self.cfg.concept_dim {
                return Err(Error::shape("concept token width"));
            }
        }
        let geo = Geometry::new(z.grid, self.cfg.heads, self.cfg.width, valid)?;
        let tfeat = self.time_features(tape, store, t)?;
        let mut x = self.embed(tape, store, z)?;
        for blk in &self.blocks {
            x = self.block(tape, store, blk, x, tfeat, &geo, BlockInputs { text, ids })?;
        }
        let g = tape.param(store, self.final_gain);
        let w = tape.param(store, self.final_w);
        let b = tape.param(store, self.final_b);
        let h = tape.rmsnorm(x, g, self.cfg.rmsnorm_eps)?;
        let o = tape.matmul(h, w)?;
        tape.add_row(o, b)
    }

    /// Inference forward: predicted velocity with the shape of `z.tokens`.
    pub fn forward(
        &self,
        store: &ParamStore,
        z: &VideoLatent,
        t: f64,
        text: Option<&Mat>,
        ids: Option<&Mat>,
    ) -> Result<Mat> {
        let mut tape = Tape::new();
        let text = text.map(|m| tape.leaf(m.clone()));
        let ids = ids.map(|m| tape.leaf(m.clone()));
        let out = self.forward_tape(&mut tape, store, z, t, text, ids, None)?;
        Ok(tape.value(out).clone())
    }
}

/// Zero every output projection (attention `wo` and FFN `w2`/`b2`) of a block.
pub fn zero_block_outputs(store: &mut ParamStore, blk: &BlockParams) {
    for ids in [blk.spatial.1, blk.spatiotemporal.1, blk.text.1, blk.injector.1] {
        store.value_mut(ids.wo).data.iter_mut().for_each(|x| *x = 0.0);
    }
    store.value_mut(blk.ffn.1.w2).data.iter_mut().for_each(|x| *x = 0.0);
    store.value_mut(blk.ffn.1.b2).data.iter_mut().for_each(|x| *x = 0.0);
}

/// Indices that permute whole latent frames: token `i` of the result is
/// token `perm_tokens[i]` of the input.
pub fn frame_permutation(grid: Grid, frame_perm: &[usize]) -> Vec<usize> {
    let s = grid.spatial();
    let mut out = vec![0; grid.tokens()];
    for (new_f, &old_f) in frame_perm.iter().enumerate() {
        for j in 0..s {
            out[new_f * s + j] = old_f * s + j;
        }
    }
    out
}

pub fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for (i, &src) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(src));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 1,
            width: 8,
            heads: 2,
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            channels: 3,
            time_dim: 8,
            caption_dim: 6,
            concept_dim: 4,
            rmsnorm_eps: 1e-6,
        }
    }

    fn random_video(shape: [usize; 4], seed: u64) -> Video {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Video::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn patchify_shape_arithmetic() {
        let cfg = ModelConfig {
            width: 16,
            ..ModelConfig::default()
        };
        let v = random_video([8, 16, 16, 3], 1);
        let z = patchify(&v, &cfg).unwrap();
        assert_eq!((z.grid.frames, z.grid.spatial()), (4, 16));
        assert_eq!(z.tokens.shape(), (64, 96));
        assert_eq!(unpatchify(&z, &cfg).unwrap(), v);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let cfg = ModelConfig::default();
        let v = random_video([7, 16, 16, 3], 2);
        assert!(matches!(patchify(&v, &cfg), Err(Error::Dimension(_))));
        let v = random_video([8, 15, 16, 3], 2);
        assert!(matches!(patchify(&v, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_video_gives_zero_embedding() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::register(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = patchify(&Video::zeros(2, 4, 4, 3), &cfg).unwrap();
        assert!(z.tokens.data.iter().all(|&x| x == 0.0));
        let mut tape = Tape::new();
        let e = bb.embed(&mut tape, &store, &z).unwrap();
        assert!(tape.value(e).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rmsnorm_examples() {
        let ones = [1.0; 4];
        let y = rmsnorm(&ones, &ones, 1e-12).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert_eq!(rmsnorm(&[0.0; 3], &[1.0; 3], 1e-6).unwrap(), vec![0.0; 3]);
        assert_eq!(rmsnorm(&[3.0, -3.0], &[2.0, 2.0], 0.0).unwrap(), vec![2.0, -2.0]);
        assert!(rmsnorm(&[1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn modulated_sublayer_identity_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::randn(5, 4, 1.0, &mut rng));
        let g = tape.leaf(Mat::filled(1, 4, 1.0));
        let s = tape.leaf(Mat::filled(1, 4, 0.3));
        let y = modulated_sublayer(&mut tape, x, g, s, 1e-6, |tp, m| Ok(tp.scale(m, 0.0))).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let s = tape.leaf(Mat::filled(1, 4, -1.0));
        let mut seen = None;
        modulated_sublayer(&mut tape, x, g, s, 1e-6, |tp, m| {
            seen = Some(tp.value(m).clone());
            Ok(m)
        })
        .unwrap();
        assert!(seen.unwrap().data.iter().all(|&v| v == 0.0));

        let bad = tape.leaf(Mat::filled(1, 3, 0.0));
        assert!(modulated_sublayer(&mut tape, x, g, bad, 1e-6, |_, m| Ok(m)).is_err());
    }

    #[test]
    fn forward_at_init_is_zero_and_shape_preserving() {
        for depth in [1, 2, 4] {
            let cfg = ModelConfig { depth, ..tiny_cfg() };
            let mut store = ParamStore::new();
            let bb = Backbone::register(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(depth as u64)).unwrap();
            let z = patchify(&random_video([2, 4, 6, 3], 9), &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let text = Mat::randn(3, cfg.caption_dim, 1.0, &mut rng);
            let ids = Mat::randn(2, cfg.concept_dim, 1.0, &mut rng);
            let v = bb.forward(&store, &z, 0.4, Some(&text), Some(&ids)).unwrap();
            assert_eq!(v.shape(), z.tokens.shape());
            assert!(v.data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn forward_rejects_out_of_range_t() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::register(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = patchify(&random_video([1, 4, 4, 3], 1), &cfg).unwrap();
        assert!(matches!(bb.forward(&store, &z, 1.5, None, None), Err(Error::Range(_))));
    }

    #[test]
    fn timestep_scales_are_deterministic() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::register(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = bb.timestep_scales(&store, 0.25).unwrap();
        assert_eq!(a, bb.timestep_scales(&store, 0.25).unwrap());
        assert_eq!(a.per_sublayer_scales.len(), 5);
        // zero-initialized projections give neutral modulation
        assert!(a.per_sublayer_scales.iter().flatten().all(|&s| s == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..tiny_cfg() }.validate().is_err());
        assert!(ModelConfig { depth: 0, ..tiny_cfg() }.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
