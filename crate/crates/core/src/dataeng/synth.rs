//! Synthetic multimodal data with a shared linear latent.
//!
//! Every example has a latent `u = mu_k + spread * eps + clip_offset`, and
//! modality `m` observes `tokens_m = reshape(A_m u) + offset_m + noise_m * xi`
//! with a fixed random map `A_m` (entries of scale `signal_scale / sqrt(L)`)
//! and a fixed per-token offset, which lets a position-free encoder tell
//! tokens apart. All three modalities carry the same latent, so cross-modal
//! transfer is learnable by construction.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, MultimodalExample, Split};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub tokens: usize,
    pub width: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub examples_per_class: usize,
    pub novel_examples_per_class: usize,
    pub base_test_fraction: f64,
    pub latent_dim: usize,
    pub video: ModalitySpec,
    pub audio: ModalitySpec,
    pub imu: ModalitySpec,
    /// Scale of the class means.
    pub class_separation: f64,
    /// Gain of the latent-to-token maps; token noise is relative to this.
    pub signal_scale: f64,
    /// Within-class latent noise.
    pub class_spread: f64,
    /// Latent offset shared by the examples of one clip.
    pub clip_noise: f64,
    /// Scale of the fixed per-token offsets.
    pub token_offset: f64,
    /// When > 0, modality `i` sees latent dims `j` with `j % 3 == i` through
    /// extra noise of this scale, so each modality misses a third of the latent.
    pub complementary_noise: f64,
    pub unlabeled_pool_size: usize,
    pub clip_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_base_classes: 20,
            num_novel_classes: 8,
            examples_per_class: 60,
            novel_examples_per_class: 40,
            base_test_fraction: 0.25,
            latent_dim: 16,
            video: ModalitySpec {
                tokens: 8,
                width: 16,
                noise: 0.1,
            },
            audio: ModalitySpec {
                tokens: 6,
                width: 12,
                noise: 0.5,
            },
            imu: ModalitySpec {
                tokens: 4,
                width: 6,
                noise: 1.0,
            },
            class_separation: 1.0,
            signal_scale: 0.4,
            class_spread: 0.5,
            clip_noise: 0.3,
            token_offset: 1.0,
            complementary_noise: 0.0,
            unlabeled_pool_size: 2000,
            clip_size: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn modality(&self, m: Modality) -> &ModalitySpec {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Imu => &self.imu,
        }
    }

    pub fn modality_mut(&mut self, m: Modality) -> &mut ModalitySpec {
        match m {
            Modality::Video => &mut self.video,
            Modality::Audio => &mut self.audio,
            Modality::Imu => &mut self.imu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_base_classes < 2 || self.num_novel_classes < 2 {
            return Err(Error::Config(format!(
                "need >= 2 base and novel classes, got {} and {}",
                self.num_base_classes, self.num_novel_classes
            )));
        }
        if self.examples_per_class < 2 || self.novel_examples_per_class < 1 {
            return Err(Error::Config("too few examples per class".into()));
        }
        if !(0.0..1.0).contains(&self.base_test_fraction) {
            return Err(Error::Config("base_test_fraction must be in [0, 1)".into()));
        }
        if self.latent_dim == 0 || self.clip_size == 0 {
            return Err(Error::Config(
                "latent_dim and clip_size must be >= 1".into(),
            ));
        }
        let scales = [
            self.class_separation,
            self.signal_scale,
            self.class_spread,
            self.clip_noise,
            self.token_offset,
            self.complementary_noise,
            self.video.noise,
            self.audio.noise,
            self.imu.noise,
        ];
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config(
                "noise and scale parameters must be >= 0".into(),
            ));
        }
        for m in Modality::ALL {
            let s = self.modality(m);
            if s.tokens == 0 || s.width == 0 {
                return Err(Error::Config(format!("{m} token shape must be non-empty")));
            }
        }
        Ok(())
    }

    pub fn total_examples(&self) -> usize {
        self.num_base_classes * self.examples_per_class
            + self.num_novel_classes * self.novel_examples_per_class
            + self.unlabeled_pool_size
    }
}

/// Generator ground truth: `maps[m]` is `[tokens*width × latent]`,
/// `offsets[m]` is `[tokens × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub class_means: Vec<Vec<f64>>,
    pub maps: [Tensor; 3],
    pub offsets: [Tensor; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub world: SyntheticWorld,
    /// Latent of each example, aligned with `dataset.examples`.
    pub latents: Vec<Vec<f64>>,
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

struct Builder<'a> {
    spec: &'a DatasetSpec,
    world: SyntheticWorld,
    rng: ChaCha8Rng,
    examples: Vec<MultimodalExample>,
    latents: Vec<Vec<f64>>,
    next_clip: usize,
}

impl Builder<'_> {
    fn observe(&mut self, m: Modality, u: &[f64]) -> Result<Tensor> {
        let s = *self.spec.modality(m);
        let l = self.spec.latent_dim;
        let mut seen = u.to_vec();
        if self.spec.complementary_noise > 0.0 {
            for (j, v) in seen.iter_mut().enumerate() {
                if j % 3 == m.index() {
                    *v += self.spec.complementary_noise * self.rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let a = self.world.maps[m.index()].data();
        let off = self.world.offsets[m.index()].data();
        let n = s.tokens * s.width;
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc = off[r];
            for (j, x) in seen.iter().enumerate() {
                acc += a[r * l + j] * x;
            }
            acc += s.noise * self.rng.sample::<f64, _>(StandardNormal);
            // stored as f32 on disk; round here so memory and disk agree
            out.push(f32_round(acc));
        }
        Tensor::new(vec![s.tokens, s.width], out)
    }

    /// Adds `count` examples of `class`, grouped into clips.
    fn add_examples(
        &mut self,
        prefix: &str,
        class: usize,
        label: Option<usize>,
        count: usize,
        split_of_clip: &dyn Fn(usize) -> Split,
    ) -> Result<()> {
        let l = self.spec.latent_dim;
        let clips = count.div_ceil(self.spec.clip_size);
        let mut i = 0;
        for c in 0..clips {
            let clip_id = format!("clip{:05}", self.next_clip);
            self.next_clip += 1;
            let offset = normal_vec(l, self.spec.clip_noise, &mut self.rng);
            let split = split_of_clip(c);
            for _ in 0..self.spec.clip_size.min(count - i) {
                let eps = normal_vec(l, self.spec.class_spread, &mut self.rng);
                let u: Vec<f64> = (0..l)
                    .map(|j| self.world.class_means[class][j] + eps[j] + offset[j])
                    .collect();
                let tokens = [
                    self.observe(Modality::Video, &u)?,
                    self.observe(Modality::Audio, &u)?,
                    self.observe(Modality::Imu, &u)?,
                ];
                let id = match label {
                    Some(_) => format!("{prefix}{class:03}-{i:04}"),
                    None => format!("{prefix}{:05}", self.examples.len()),
                };
                self.examples.push(MultimodalExample {
                    id,
                    clip_id: clip_id.clone(),
                    label,
                    split,
                    tokens,
                });
                self.latents.push(u);
                i += 1;
            }
        }
        Ok(())
    }
}

/// Builds the dataset in memory; a pure function of `spec`.
pub fn synthesize(spec: &DatasetSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    let map_std = spec.signal_scale / (l as f64).sqrt();
    let mut maps = Vec::with_capacity(3);
    let mut offsets = Vec::with_capacity(3);
    for m in Modality::ALL {
        let s = spec.modality(m);
        let n = s.tokens * s.width;
        maps.push(Tensor::new(
            vec![n, l],
            normal_vec(n * l, map_std, &mut rng),
        )?);
        offsets.push(Tensor::new(
            vec![s.tokens, s.width],
            normal_vec(n, spec.token_offset, &mut rng),
        )?);
    }
    let total_classes = spec.num_base_classes + spec.num_novel_classes;
    let class_means = (0..total_classes)
        .map(|_| normal_vec(l, spec.class_separation, &mut rng))
        .collect();
    let to3 = |v: Vec<Tensor>| -> [Tensor; 3] { v.try_into().expect("three modalities") };
    let mut b = Builder {
        spec,
        world: SyntheticWorld {
            class_means,
            maps: to3(maps),
            offsets: to3(offsets),
        },
        rng,
        examples: Vec::with_capacity(spec.total_examples()),
        latents: Vec::with_capacity(spec.total_examples()),
        next_clip: 0,
    };

    let base_clips = spec.examples_per_class.div_ceil(spec.clip_size);
    let test_clips = ((base_clips as f64) * spec.base_test_fraction).round() as usize;
    let test_clips = test_clips.min(base_clips - 1);
    for k in 0..spec.num_base_classes {
        let split = move |c: usize| {
            if c < test_clips {
                Split::BaseTest
            } else {
                Split::BaseTrain
            }
        };
        b.add_examples("b", k, Some(k), spec.examples_per_class, &split)?;
    }
    for k in spec.num_base_classes..total_classes {
        b.add_examples("n", k, Some(k), spec.novel_examples_per_class, &|_| {
            Split::Novel
        })?;
    }
    let mut remaining = spec.unlabeled_pool_size;
    while remaining > 0 {
        let k = b.rng.gen_range(0..spec.num_base_classes);
        let n = remaining.min(spec.clip_size);
        b.add_examples("u", k, None, n, &|_| Split::Unlabeled)?;
        remaining -= n;
    }

    Ok(SyntheticData {
        dataset: Dataset {
            base_classes: (0..spec.num_base_classes).collect(),
            novel_classes: (spec.num_base_classes..total_classes).collect(),
            examples: b.examples,
        },
        world: b.world,
        latents: b.latents,
    })
}

/// Generates the dataset and writes it under `out`.
pub fn generate_synthetic(spec: &DatasetSpec, out: &Path) -> Result<Dataset> {
    let data = synthesize(spec)?;
    data.dataset.write(out)?;
    Ok(data.dataset)
}
