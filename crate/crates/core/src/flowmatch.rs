//! Rectified-flow training and sampling.
//!
//! Noise `eps` sits at `t = 1` and data `z0` at `t = 0` on the straight path
//! `z_t = (1 - t)·z0 + t·eps`; the model regresses the constant velocity
//! `eps - z0` and sampling integrates it back from `t = 1` with Euler steps.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{unpatchify, Backbone, Grid, ModelConfig, VideoLatent};
use crate::conditioning::DenseVisualTokens;
use crate::error::{ensure_same_shape, Error, Result};
use crate::model::{check_t, Model};
use crate::params::{FreezePolicy, ParamStore};
use crate::tensor::Mat;
use crate::video::Video;

/// `(1 - t)·z0 + t·eps`, exact at both endpoints.
pub fn interpolate(z0: &Mat, eps: &Mat, t: f64) -> Result<Mat> {
    ensure_same_shape(z0.shape(), eps.shape(), "interpolate")?;
    check_t(t)?;
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    z0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)
}

/// Mean over all elements of `(v_pred - (eps - z0))²`.
pub fn fm_loss(v_pred: &Mat, z0: &Mat, eps: &Mat) -> Result<f64> {
    ensure_same_shape(v_pred.shape(), z0.shape(), "fm_loss")?;
    ensure_same_shape(z0.shape(), eps.shape(), "fm_loss")?;
    let n = v_pred.data.len().max(1) as f64;
    let s: f64 = v_pred
        .data
        .iter()
        .zip(z0.data.iter().zip(&eps.data))
        .map(|(v, (a, e))| {
            let d = v - (e - a);
            d * d
        })
        .sum();
    Ok(s / n)
}

/// One point on a straight path together with its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: VideoLatent,
    pub eps: Mat,
    pub t: f64,
    pub z_t: VideoLatent,
    pub target: Mat,
}

impl FlowSample {
    pub fn new(z0: VideoLatent, eps: Mat, t: f64) -> Result<Self> {
        let zt = interpolate(&z0.tokens, &eps, t)?;
        let target = eps.zip_map(&z0.tokens, |e, a| e - a)?;
        let z_t = VideoLatent {
            tokens: zt,
            grid: z0.grid,
        };
        Ok(FlowSample {
            z0,
            eps,
            t,
            z_t,
            target,
        })
    }

    /// Draw `eps ~ N(0, I)` and `t ~ U[0, 1]`.
    pub fn draw<R: Rng + ?Sized>(z0: VideoLatent, rng: &mut R) -> Result<Self> {
        let eps = standard_normal(z0.tokens.rows, z0.tokens.cols, rng);
        let t: f64 = rng.random();
        FlowSample::new(z0, eps, t)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

/// Caption and reference conditions after classifier-free-guidance dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatchCondition<C, R> {
    pub caption_kept: bool,
    pub refs_kept: bool,
    pub caption: Option<C>,
    pub refs: Option<R>,
}

pub const P_DROP_CAPTION: f64 = 0.5;
pub const P_DROP_REFS: f64 = 0.33;

/// Two independent Bernoulli drops; dropping refs removes images and labels together.
pub fn dropout_conditions<C, Rf, R: Rng + ?Sized>(
    rng: &mut R,
    caption: C,
    refs: Rf,
    p_caption: f64,
    p_refs: f64,
) -> Result<TrainBatchCondition<C, Rf>> {
    for p in [p_caption, p_refs] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(alloc::format!("drop probability {p} outside [0,1]")));
        }
    }
    let drop_caption = rng.random::<f64>() < p_caption;
    let drop_refs = rng.random::<f64>() < p_refs;
    Ok(TrainBatchCondition {
        caption_kept: !drop_caption,
        refs_kept: !drop_refs,
        caption: (!drop_caption).then_some(caption),
        refs: (!drop_refs).then_some(refs),
    })
}

/// Adam moments for every parameter slot.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|(_, p)| Mat::zeros(p.value.rows, p.value.cols)).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// One update of every unfrozen parameter that has a gradient.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &crate::autodiff::ParamGrads,
        freeze: &FreezePolicy,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (id, grp) in ids {
            if freeze.is_frozen(grp) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// One training example: a flow sample plus its (possibly dropped) conditions.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub flow: FlowSample,
    /// Real-token flags when the clip was padded to the batch geometry.
    pub valid: Option<Vec<bool>>,
    pub caption: Option<Mat>,
    pub concepts: Option<Vec<(DenseVisualTokens, Mat)>>,
}

/// Gradient step on the unfrozen groups. Returns the pre-step mean loss.
/// A non-finite loss or gradient aborts without touching `store` or `adam`.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    adam: &mut Adam,
    batch: &[TrainItem],
    freeze: &FreezePolicy,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut total = 0.0;
    let mut grads: Option<crate::autodiff::ParamGrads> = None;
    for item in batch {
        if !item.flow.z_t.tokens.is_finite() {
            return Err(Error::NonFiniteLoss(f64::NAN));
        }
        let (tape, loss, value) = model.loss_tape(
            store,
            &item.flow.z_t,
            item.flow.t,
            &item.flow.target,
            item.caption.as_ref(),
            item.concepts.as_deref(),
            item.valid.as_deref(),
        )?;
        total += value;
        let g = tape.backward(loss, store)?;
        match grads.as_mut() {
            Some(acc) => acc.accumulate(g),
            None => grads = Some(g),
        }
    }
    let n = batch.len() as f64;
    let loss = total / n;
    let mut grads = grads.expect("non-empty batch");
    grads.scale(1.0 / n);
    if !loss.is_finite() || grads.grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(loss));
    }
    adam.apply(store, &grads, freeze, lr);
    Ok(loss)
}

/// Named dataset weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    pub weights: BTreeMap<String, f64>,
}

impl Default for MixWeights {
    fn default() -> Self {
        let mut weights = BTreeMap::new();
        weights.insert("mcvc".to_string(), 8.0);
        weights.insert("single_image".to_string(), 1.0);
        weights.insert("single_video".to_string(), 1.0);
        MixWeights { weights }
    }
}

/// Draws `(dataset, element)` pairs: dataset `d` with probability
/// `w_d / Σw`, then a uniform element of it.
#[derive(Clone, Debug)]
pub struct MixSampler {
    names: Vec<String>,
    sizes: Vec<usize>,
    dist: WeightedIndex<f64>,
}

impl MixSampler {
    pub fn new(weights: &MixWeights, sizes: &BTreeMap<String, usize>) -> Result<Self> {
        let mut names = Vec::new();
        let mut ws = Vec::new();
        let mut lens = Vec::new();
        for (name, &w) in &weights.weights {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Range(alloc::format!("weight for {name} must be non-negative")));
            }
            let len = sizes.get(name).copied().unwrap_or(0);
            if w > 0.0 && len == 0 {
                return Err(Error::EmptyDataset(name.clone()));
            }
            names.push(name.clone());
            ws.push(w);
            lens.push(len);
        }
        let dist = WeightedIndex::new(&ws).map_err(|_| Error::Range("mix weights are all zero".into()))?;
        Ok(MixSampler {
            names,
            sizes: lens,
            dist,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (&str, usize) {
        let d = self.dist.sample(rng);
        let idx = rng.random_range(0..self.sizes[d]);
        (&self.names[d], idx)
    }

    /// Infinite stream of draws.
    pub fn stream<'a, R: Rng>(&'a self, rng: &'a mut R) -> impl Iterator<Item = (&'a str, usize)> + 'a {
        core::iter::repeat_with(move || {
            let d = self.dist.sample(rng);
            let idx = rng.random_range(0..self.sizes[d]);
            (self.names[d].as_str(), idx)
        })
    }
}

/// `v_uncond + scale·(v_cond − v_uncond)`; scales 1 and 0 return the
/// conditional and unconditional velocities unchanged.
pub fn cfg_velocity(v_cond: &Mat, v_uncond: &Mat, scale: f64) -> Result<Mat> {
    ensure_same_shape(v_cond.shape(), v_uncond.shape(), "cfg_velocity")?;
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_cond.zip_map(v_uncond, |c, u| u + scale * (c - u))
}

/// Anything that predicts a velocity field for the sampler.
pub trait VelocityModel {
    fn velocity(&self, z: &VideoLatent, t: f64, conditional: bool) -> Result<Mat>;
}

/// Backbone with fixed caption/concept conditions; the unconditional branch
/// drops both.
pub struct Guided<'a> {
    pub backbone: &'a Backbone,
    pub store: &'a ParamStore,
    pub caption: Option<Mat>,
    pub concepts: Option<Mat>,
}

impl VelocityModel for Guided<'_> {
    fn velocity(&self, z: &VideoLatent, t: f64, conditional: bool) -> Result<Mat> {
        if conditional {
            self.backbone
                .forward(self.store, z, t, self.caption.as_ref(), self.concepts.as_ref())
        } else {
            self.backbone.forward(self.store, z, t, None, None)
        }
    }
}

pub const DEFAULT_SAMPLE_STEPS: usize = 100;
pub const DEFAULT_CFG_SCALE: f64 = 7.5;

/// Euler integration of the guided velocity from `t = 1` to `t = 0`,
/// starting from `eps ~ N(0, I)` drawn from `rng`.
pub fn sample_latent<V: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &V,
    steps: usize,
    cfg_scale: f64,
    rng: &mut R,
    grid: Grid,
    token_dim: usize,
) -> Result<VideoLatent> {
    if steps == 0 {
        return Err(Error::Range("sampler needs at least one step".into()));
    }
    let eps = standard_normal(grid.tokens(), token_dim, rng);
    integrate(model, VideoLatent::new(eps, grid)?, steps, cfg_scale)
}

/// Euler integration from a given state at `t = 1`.
pub fn integrate<V: VelocityModel + ?Sized>(
    model: &V,
    start: VideoLatent,
    steps: usize,
    cfg_scale: f64,
) -> Result<VideoLatent> {
    if steps == 0 {
        return Err(Error::Range("sampler needs at least one step".into()));
    }
    let mut z = start;
    let dt = 1.0 / steps as f64;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let v_cond = model.velocity(&z, t, true)?;
        let v = if cfg_scale == 1.0 {
            v_cond
        } else {
            let v_uncond = model.velocity(&z, t, false)?;
            cfg_velocity(&v_cond, &v_uncond, cfg_scale)?
        };
        ensure_same_shape(v.shape(), z.tokens.shape(), "velocity")?;
        for (x, d) in z.tokens.data.iter_mut().zip(&v.data) {
            *x -= dt * d;
        }
        if !z.tokens.is_finite() {
            return Err(Error::NonFiniteState { step: steps - k });
        }
    }
    Ok(z)
}

/// Sample a video: [`sample_latent`] followed by `unpatchify`.
pub fn sample<V: VelocityModel + ?Sized, R: Rng + ?Sized>(
    model: &V,
    cfg: &ModelConfig,
    steps: usize,
    cfg_scale: f64,
    rng: &mut R,
    grid: Grid,
) -> Result<Video> {
    let z = sample_latent(model, steps, cfg_scale, rng, grid, cfg.token_dim())?;
    unpatchify(&z, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Mat::randn(3, 4, 1.0, &mut rng);
        let eps = Mat::randn(3, 4, 1.0, &mut rng);
        assert_eq!(interpolate(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &eps, 1.0).unwrap(), eps);
        let mid = interpolate(&Mat::zeros(2, 2), &Mat::filled(2, 2, 2.0), 0.5).unwrap();
        assert_eq!(mid.data, vec![1.0; 4]);
        assert!(matches!(interpolate(&z0, &eps, 1.5), Err(Error::Range(_))));
        assert!(matches!(interpolate(&z0, &Mat::zeros(1, 1), 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn fm_loss_examples() {
        let z0 = Mat::from_rows(&[&[0.5, -1.0], &[2.0, 0.0]]);
        let eps = Mat::from_rows(&[&[1.0, 1.0], &[-1.0, 0.5]]);
        let target = eps.zip_map(&z0, |e, a| e - a).unwrap();
        assert_eq!(fm_loss(&target, &z0, &eps).unwrap(), 0.0);
        let off = target.map(|x| x + 1.0);
        assert_eq!(fm_loss(&off, &z0, &eps).unwrap(), 1.0);
        // hand computation: target = [[0.5, 2], [-3, 0.5]]
        let v = Mat::from_rows(&[&[0.0, 2.0], &[-1.0, 1.5]]);
        let expected = (0.25 + 0.0 + 4.0 + 1.0) / 4.0;
        assert!((fm_loss(&v, &z0, &eps).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn cfg_velocity_examples() {
        let c = Mat::filled(2, 3, 2.0);
        let u = Mat::zeros(2, 3);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(&c, &u, 7.5).unwrap().data, vec![15.0; 6]);
        assert!(cfg_velocity(&c, &Mat::zeros(1, 1), 2.0).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let kept = dropout_conditions(&mut rng, 1, 2, 0.0, 0.0).unwrap();
            assert!(kept.caption_kept && kept.refs_kept);
            assert_eq!((kept.caption, kept.refs), (Some(1), Some(2)));
            let dropped = dropout_conditions(&mut rng, 1, 2, 1.0, 0.0).unwrap();
            assert_eq!(dropped.caption, None);
            assert!(!dropped.caption_kept);
        }
        assert!(dropout_conditions(&mut rng, (), (), 1.2, 0.0).is_err());
    }

    #[test]
    fn adam_matches_closed_form_on_quadratic() {
        // f(p) = p², gradient 2p; first Adam step moves by lr·sign(g).
        let mut store = ParamStore::new();
        let id = store.add("p", crate::params::group::FFN, Mat::filled(1, 1, 3.0));
        let mut adam = Adam::new(&store);
        let lr = 0.1;
        let mut p = 3.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for step in 1..=5 {
            let g = 2.0 * p;
            let grads = crate::autodiff::ParamGrads {
                grads: vec![Some(Mat::filled(1, 1, g))],
            };
            adam.apply(&mut store, &grads, &FreezePolicy::none(), lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((store.value(id).data[0] - p).abs() < 1e-10, "step {step}");
        }
        // first step is lr·sign(g) up to eps
        let mut store = ParamStore::new();
        store.add("p", crate::params::group::FFN, Mat::filled(1, 1, 3.0));
        let mut adam = Adam::new(&store);
        let grads = crate::autodiff::ParamGrads {
            grads: vec![Some(Mat::filled(1, 1, 6.0))],
        };
        adam.apply(&mut store, &grads, &FreezePolicy::none(), lr);
        assert!((store.value(id).data[0] - 2.9).abs() < 1e-8);
    }

    #[test]
    fn mix_sampler_single_and_zero_weight() {
        let mut sizes = BTreeMap::new();
        sizes.insert("a".to_string(), 3);
        sizes.insert("b".to_string(), 5);
        let mut w = MixWeights {
            weights: BTreeMap::new(),
        };
        w.weights.insert("a".into(), 1.0);
        w.weights.insert("b".into(), 0.0);
        let s = MixSampler::new(&w, &sizes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (name, idx) in s.stream(&mut rng).take(500) {
            assert_eq!(name, "a");
            assert!(idx < 3);
        }
        w.weights.insert("c".into(), 1.0);
        assert!(matches!(MixSampler::new(&w, &sizes), Err(Error::EmptyDataset(n)) if n == "c"));
        let mut zero = MixWeights {
            weights: BTreeMap::new(),
        };
        zero.weights.insert("a".into(), 0.0);
        assert!(MixSampler::new(&zero, &sizes).is_err());
    }

    struct Constant(Mat);
    impl VelocityModel for Constant {
        fn velocity(&self, _: &VideoLatent, _: f64, _: bool) -> Result<Mat> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn sampler_rejects_zero_steps_and_non_finite_state() {
        let grid = Grid {
            frames: 1,
            height: 1,
            width: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_latent(&Constant(Mat::zeros(2, 3)), 0, 1.0, &mut rng, grid, 3).is_err());
        let blowup = Constant(Mat::filled(2, 3, f64::INFINITY));
        assert!(matches!(
            sample_latent(&blowup, 3, 1.0, &mut rng, grid, 3),
            Err(Error::NonFiniteState { step: 0 })
        ));
    }
}
