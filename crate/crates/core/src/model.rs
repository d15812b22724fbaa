//! Backbone + conditioning pathway sharing one parameter store.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, ModelConfig, VideoLatent};
use crate::conditioning::{CompositeConceptEmbedding, Conditioner, ConditioningConfig, DenseVisualTokens};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// All learnable tensors of the backbone and the conditioning pathway.
pub type ModelParams = ParamStore;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub conditioner: Conditioner,
}

impl Model {
    /// Register every parameter with seeded initialization.
    pub fn init(model: &ModelConfig, cond: &ConditioningConfig, seed: u64) -> Result<(Model, ModelParams)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::register(model, &mut store, &mut rng)?;
        let conditioner = Conditioner::register(cond, model.concept_dim, &mut store, &mut rng)?;
        Ok((Model { backbone, conditioner }, store))
    }

    /// Rebuild the layout for `values` (e.g. a loaded checkpoint).
    pub fn with_params(
        model: &ModelConfig,
        cond: &ConditioningConfig,
        values: &ParamStore,
    ) -> Result<(Model, ModelParams)> {
        let (m, mut store) = Model::init(model, cond, 0)?;
        store.load_values(values)?;
        Ok((m, store))
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.backbone.cfg
    }

    pub fn composite(
        &self,
        store: &ParamStore,
        encoded: &[(DenseVisualTokens, Mat)],
    ) -> Result<CompositeConceptEmbedding> {
        let mut tape = Tape::new();
        let (c, spans) = self.conditioner.build_tape(&mut tape, store, encoded)?;
        Ok(CompositeConceptEmbedding {
            tokens: tape.value(c).clone(),
            spans,
        })
    }

    /// Rectified-flow loss for one example on a fresh tape; returns the tape,
    /// the loss var and its value.
    pub fn loss_tape(
        &self,
        store: &ParamStore,
        z_t: &VideoLatent,
        t: f64,
        target: &Mat,
        caption: Option<&Mat>,
        concepts: Option<&[(DenseVisualTokens, Mat)]>,
        valid: Option<&[bool]>,
    ) -> Result<(Tape, crate::autodiff::Var, f64)> {
        let mut tape = Tape::new();
        let text = caption.map(|c| tape.leaf(c.clone()));
        let ids = match concepts {
            Some(enc) => Some(self.conditioner.build_tape(&mut tape, store, enc)?.0),
            None => None,
        };
        let v = self.backbone.forward_tape(&mut tape, store, z_t, t, text, ids, valid)?;
        let loss = tape.masked_mse(v, target, valid)?;
        let value = tape.value(loss).data[0];
        Ok((tape, loss, value))
    }
}

/// Flattened parameter values, handy for equality checks.
pub fn flatten(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.value.data.iter().copied()).collect()
}

pub(crate) fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(alloc::format!("t = {t} outside [0,1]")));
    }
    Ok(())
}
