//! The full model: three encoders, their unimodal heads, the fusion module
//! and its classifier, all in one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataeng::Dataset;
use crate::encoders::{
    encode_on, init_encoders, init_unimodal_heads, EncoderConfig, ModalitySample,
};
use crate::error::{Error, Result};
use crate::fusion::{
    classifier_logits_on, fused_feature_on, init_fusion, FusionConfig, UnifiedFeature,
};
use crate::modality::{Modality, ModalityMask};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Base classes seen by the supervised heads.
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.encoder.width != self.fusion.width {
            return Err(Error::Config(format!(
                "encoder width {} != fusion width {}",
                self.encoder.width, self.fusion.width
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Copies token shapes and the base class count from `ds`.
    pub fn fit_to(mut self, ds: &Dataset) -> Result<Self> {
        for m in Modality::ALL {
            let (t, w) = ds.token_shape(m)?;
            let c = self.encoder.modality_mut(m);
            c.tokens = t;
            c.input_width = w;
        }
        self.num_classes = ds.base_classes.len();
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.fusion.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoders(&mut params, &config.encoder, &mut rng)?;
        init_unimodal_heads(
            &mut params,
            config.encoder.width,
            config.num_classes,
            &mut rng,
        )?;
        init_fusion(&mut params, &config.fusion, config.num_classes, &mut rng)?;
        Ok(Model { config, params })
    }

    /// Re-draws every fusion parameter (`fusion.*`, `mlpfuse.*`) from `seed`.
    pub fn reset_fusion(&mut self, seed: u64) -> Result<()> {
        let fresh = Model::new(self.config, seed)?;
        for e in fresh.params.entries() {
            if e.name.starts_with("fusion.") || e.name.starts_with("mlpfuse.") {
                let id = self.params.require(&e.name)?;
                self.params.set(id, e.tensor.clone())?;
            }
        }
        Ok(())
    }

    pub fn embed(&self, samples: &[ModalitySample], mask: ModalityMask) -> Result<UnifiedFeature> {
        let mut g = Graph::new(&self.params);
        let z = embed_on(&mut g, &self.config, samples, mask)?;
        Ok(UnifiedFeature {
            z: g.value(z).clone(),
            mask,
        })
    }

    /// Supervised classifier logits over the base classes.
    pub fn classify(&self, samples: &[ModalitySample], mask: ModalityMask) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let z = embed_on(&mut g, &self.config, samples, mask)?;
        let y = classifier_logits_on(&mut g, z)?;
        Ok(g.value(y).clone())
    }
}

/// Encodes the modalities of `mask` and fuses them into a unified feature.
/// Samples of modalities outside `mask` are ignored; missing ones are an error.
pub fn embed_on(
    g: &mut Graph,
    config: &ModelConfig,
    samples: &[ModalitySample],
    mask: ModalityMask,
) -> Result<Var> {
    mask.ensure_non_empty("embed")?;
    let mut encoded = Vec::with_capacity(mask.len());
    for m in mask.iter() {
        let s = samples
            .iter()
            .find(|s| s.modality == m)
            .ok_or_else(|| Error::Invalid(format!("no {m} sample for mask {mask}")))?;
        let x = g.constant(s.tokens.clone())?;
        encoded.push(encode_on(g, m, x, &config.encoder)?);
    }
    fused_feature_on(g, &encoded, mask, &config.fusion)
}
