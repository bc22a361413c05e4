use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataeng::Dataset;
use crate::encoders::EncoderConfig;
use crate::episodic::FinetuneConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionKind, Pooling};
use crate::losses::{AlignConfig, DistanceMetric};
use crate::modality::{Modality, ModalityMask};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Supervised,
    Fewshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regular,
    Missing,
    Zeroshot,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Supervised => "supervised",
            Setting::Fewshot => "fewshot",
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regular => "regular",
            Task::Missing => "missing",
            Task::Zeroshot => "zeroshot",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Setting::Supervised),
            "fewshot" | "few-shot" => Ok(Setting::Fewshot),
            other => Err(Error::Invalid(format!("unknown setting '{other}'"))),
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Task::Regular),
            "missing" | "missing-modal" => Ok(Task::Missing),
            "zeroshot" | "zero-shot" => Ok(Task::Zeroshot),
            other => Err(Error::Invalid(format!("unknown task '{other}'"))),
        }
    }
}

impl Task {
    /// Whether a (train/support, test/query) mask pair is legal for this task.
    pub fn allows(self, train: ModalityMask, test: ModalityMask) -> bool {
        if train.is_empty() || test.is_empty() {
            return false;
        }
        match self {
            Task::Regular => train == ModalityMask::ALL && test == ModalityMask::ALL,
            Task::Missing => test.is_strict_subset_of(train),
            Task::Zeroshot => !train.intersects(test),
        }
    }

    /// Every legal (support, query) pair, in a fixed order.
    pub fn legal_pairs(self) -> Vec<(ModalityMask, ModalityMask)> {
        let subsets = ModalityMask::ALL.non_empty_subsets();
        let mut out = Vec::new();
        for &s in &subsets {
            for &q in &subsets {
                if self.allows(s, q) {
                    out.push((s, q));
                }
            }
        }
        out
    }
}

/// Model shape; token shapes and class count come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub mlp_ratio: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub fusion_depth: usize,
    pub fusion_heads: usize,
    pub pooling: Pooling,
    pub fusion_kind: FusionKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            width: 64,
            mlp_ratio: 4,
            encoder_depth: 2,
            encoder_heads: 4,
            fusion_depth: 2,
            fusion_heads: 4,
            pooling: Pooling::Mean,
            fusion_kind: FusionKind::Attention,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let mut encoder = EncoderConfig {
            width: self.width,
            mlp_ratio: self.mlp_ratio,
            ..EncoderConfig::default()
        };
        for m in Modality::ALL {
            let c = encoder.modality_mut(m);
            c.depth = self.encoder_depth;
            c.heads = self.encoder_heads;
        }
        let fusion = FusionConfig {
            width: self.width,
            depth: self.fusion_depth,
            heads: self.fusion_heads,
            mlp_ratio: self.mlp_ratio,
            pooling: self.pooling,
            kind: self.fusion_kind,
            mlp_hidden: None,
        };
        let cfg = ModelConfig {
            encoder,
            fusion,
            num_classes: 0,
        }
        .fit_to(ds)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    pub unimodal_epochs: usize,
    pub multimodal_epochs: usize,
    pub unsupervised_epochs: usize,
    pub meta_episodes: usize,
    pub meta_lr: f64,
    pub meta_n_way: usize,
    pub meta_k_shot: usize,
    pub meta_q_queries: usize,
    /// Weight of the alignment term next to cross-entropy.
    pub lambda_align: f64,
    /// Alignment anywhere in the pipeline; off removes the unsupervised
    /// stage and the supervised alignment term.
    pub use_align: bool,
    /// Off skips the meta-train stage of the few-shot pipelines.
    pub use_proto: bool,
    pub align: AlignConfig,
    pub drop_p: f64,
    pub distance: DistanceMetric,
    /// Labeled-data modalities for the supervised zero-shot pipeline.
    pub zeroshot_train_mask: ModalityMask,
    /// Keeps encoder weights fixed in every stage after the first.
    pub freeze_encoders: bool,
    /// Modalities the regular pipelines train and evaluate on; a single
    /// modality gives a unimodal baseline.
    pub modalities: ModalityMask,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 32,
            lr: 1e-3,
            unimodal_epochs: 10,
            multimodal_epochs: 15,
            unsupervised_epochs: 5,
            meta_episodes: 2000,
            meta_lr: 1e-4,
            meta_n_way: 5,
            meta_k_shot: 5,
            meta_q_queries: 5,
            lambda_align: 0.5,
            use_align: true,
            use_proto: true,
            align: AlignConfig::default(),
            drop_p: 0.6,
            distance: DistanceMetric::SqL2,
            zeroshot_train_mask: ModalityMask::from_modalities(&[Modality::Audio, Modality::Imu]),
            freeze_encoders: false,
            modalities: ModalityMask::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub finetune: FinetuneConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: crate::episodic::DESK_SUITE_EPISODES,
            n_way: 5,
            k_shot: 5,
            q_queries: 5,
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Everything that determines a run besides the data and the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(t.lr > 0.0) || !(t.meta_lr > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(t.lambda_align >= 0.0) {
            return Err(Error::Config("lambda_align must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&t.drop_p) {
            return Err(Error::Config(format!("drop_p {} outside [0, 1]", t.drop_p)));
        }
        t.align.validate()?;
        t.zeroshot_train_mask
            .ensure_non_empty("zeroshot_train_mask")?;
        if t.zeroshot_train_mask == ModalityMask::ALL {
            return Err(Error::Config(
                "zeroshot_train_mask must leave a modality out".into(),
            ));
        }
        t.modalities.ensure_non_empty("modalities")?;
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be >= 1".into()));
        }
        self.eval.finetune.validate()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_toml_overrides_fields() {
        let c = RunConfig::from_toml(
            "[train]\nlambda_align = 0.0\nzeroshot_train_mask = [\"imu\"]\n[model]\nwidth = 32\n",
        )
        .unwrap();
        assert_eq!(c.train.lambda_align, 0.0);
        assert_eq!(c.train.zeroshot_train_mask.to_string(), "imu");
        assert_eq!(c.model.width, 32);
        assert_eq!(c.train.batch_size, 32);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[train]\ndrop_p = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[train.align]\ntau = 0.0\n").is_err());
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c;
        d.train.lambda_align = 0.25;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn legal_pairs_per_task() {
        assert_eq!(Task::Regular.legal_pairs().len(), 1);
        // strict non-empty subsets: 3 singletons * 0 + 3 pairs * 2 + full * 6
        assert_eq!(Task::Missing.legal_pairs().len(), 12);
        // disjoint non-empty pairs over three items
        assert_eq!(Task::Zeroshot.legal_pairs().len(), 12);
        for (s, q) in Task::Missing.legal_pairs() {
            assert!(q.is_strict_subset_of(s));
        }
        for (s, q) in Task::Zeroshot.legal_pairs() {
            assert!(!s.intersects(q));
        }
    }
}
