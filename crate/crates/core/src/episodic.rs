//! N-way K-shot episodes with separate support and query modality masks, and
//! the finetune-based few-shot evaluator.
//!
//! Episodes only carry the tokens of their masks' modalities, so no model
//! path can see a forbidden modality. Suites derive one RNG stream per
//! episode index and reduce results in index order, so the outcome does not
//! depend on the number of worker threads.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataeng::{Dataset, Split};
use crate::encoders::{encode, EncodedModality, EncodedVars, ModalitySample};
use crate::error::{shape_err, Error, Result};
use crate::fusion::fused_feature_on;
use crate::modality::ModalityMask;
use crate::model::{embed_on, Model};
use crate::numcore::{
    adam_step, AdamConfig, AdamState, Graph, ParamGrads, ParamStore, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub support_mask: ModalityMask,
    pub query_mask: ModalityMask,
    pub class_pool: Split,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            k_shot: 5,
            q_queries: 5,
            support_mask: ModalityMask::ALL,
            query_mask: ModalityMask::ALL,
            class_pool: Split::Novel,
        }
    }
}

impl EpisodeSpec {
    pub fn with_masks(support: ModalityMask, query: ModalityMask) -> Self {
        EpisodeSpec {
            support_mask: support,
            query_mask: query,
            ..EpisodeSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::Config(format!(
                "episode needs N >= 2, K >= 1, Q >= 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.q_queries
            )));
        }
        self.support_mask.ensure_non_empty("support")?;
        self.query_mask.ensure_non_empty("query")?;
        if self.class_pool == Split::Unlabeled {
            return Err(Error::Config("episodes need a labeled class pool".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    /// Index into the dataset's example list.
    pub example: usize,
    pub id: String,
    /// Label within the episode, `0..N`.
    pub label: usize,
    pub mask: ModalityMask,
    pub samples: Vec<ModalitySample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `classes[j]` is the original label relabeled to `j`.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn relabel(&self, original: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == original)
    }
}

/// Draws N classes, then K + Q examples per class, all without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let need = spec.k_shot + spec.q_queries;
    let by_class = dataset.by_class(spec.class_pool);
    let eligible: Vec<(&usize, &Vec<usize>)> =
        by_class.iter().filter(|(_, ex)| ex.len() >= need).collect();
    if eligible.len() < spec.n_way {
        return Err(Error::Data(format!(
            "{} pool has {} classes with >= {need} examples, episode needs {}",
            spec.class_pool,
            eligible.len(),
            spec.n_way
        )));
    }
    let picked = sample_indices(rng, eligible.len(), spec.n_way);
    let mut classes = Vec::with_capacity(spec.n_way);
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_queries);
    let item = |i: usize, label: usize, mask: ModalityMask| {
        let ex = &dataset.examples[i];
        EpisodeItem {
            example: i,
            id: ex.id.clone(),
            label,
            mask,
            samples: ex.restricted(mask),
        }
    };
    for (new_label, ci) in picked.into_iter().enumerate() {
        let (&class, members) = eligible[ci];
        classes.push(class);
        let chosen = sample_indices(rng, members.len(), need);
        for (j, mi) in chosen.into_iter().enumerate() {
            let i = members[mi];
            if j < spec.k_shot {
                support.push(item(i, new_label, spec.support_mask));
            } else {
                query.push(item(i, new_label, spec.query_mask));
            }
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneScope {
    #[default]
    Head,
    HeadAndFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub scope: FinetuneScope,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 20,
            lr: 1e-2,
            scope: FinetuneScope::Head,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("finetune steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "finetune lr must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub steps_run: usize,
}

const HEAD_W: &str = "episode.head.w";
const HEAD_B: &str = "episode.head.b";

fn head_store(base: &ParamStore, width: usize, n: usize) -> Result<ParamStore> {
    let mut s = base.clone();
    s.insert(HEAD_W, Tensor::zeros(&[width, n]))?;
    s.insert(HEAD_B, Tensor::zeros(&[n]))?;
    Ok(s)
}

fn head_logits(g: &mut Graph, z: Var) -> Result<Var> {
    let w = g.param_named(HEAD_W)?;
    let b = g.param_named(HEAD_B)?;
    g.linear(z, w, Some(b))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean support cross-entropy through `feature`, as one scalar.
fn support_loss(
    g: &mut Graph,
    n: usize,
    labels: &[usize],
    feature: &mut dyn FnMut(&mut Graph, usize) -> Result<Var>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let z = feature(g, i)?;
        let logits = head_logits(g, z)?;
        if g.value(logits).len() != n {
            return Err(shape_err!(
                "head has {} outputs, episode has {n} ways",
                g.value(logits).len()
            ));
        }
        terms.push(g.cross_entropy(logits, y)?);
    }
    let total = g.add_n(&terms)?;
    g.scale(total, 1.0 / labels.len() as f64)
}

/// Trains a zero-initialized linear head on fixed support features and
/// scores the query features.
pub fn finetune_head(
    support: &[(Tensor, usize)],
    query: &[(Tensor, usize)],
    n_way: usize,
    cfg: &FinetuneConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    let width = support
        .first()
        .ok_or_else(|| Error::Invalid("empty support set".into()))?
        .0
        .len();
    if support
        .iter()
        .chain(query)
        .any(|(z, _)| z.dims() != [width])
    {
        return Err(shape_err!("episode features must all be [{width}]"));
    }
    let mut store = head_store(&ParamStore::new(), width, n_way)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&store);
    let labels: Vec<usize> = support.iter().map(|(_, y)| *y).collect();
    for _ in 0..cfg.steps {
        let grads = {
            let mut g = Graph::new(&store);
            let loss = support_loss(&mut g, n_way, &labels, &mut |g, i| {
                g.constant(support[i].0.clone())
            })?;
            g.backward(loss)?.into_params()
        };
        adam_step(&mut store, &grads, &mut state, &adam)?;
    }
    score(&store, query, n_way, state.step as usize, |g, z| {
        g.constant(z.clone())
    })
}

fn score(
    store: &ParamStore,
    query: &[(Tensor, usize)],
    n_way: usize,
    steps_run: usize,
    feature: impl Fn(&mut Graph, &Tensor) -> Result<Var>,
) -> Result<EpisodeResult> {
    let mut correct = 0;
    for (z, y) in query {
        let mut g = Graph::new(store);
        let zv = feature(&mut g, z)?;
        let logits = head_logits(&mut g, zv)?;
        debug_assert_eq!(g.value(logits).len(), n_way);
        if argmax(g.value(logits).data()) == *y {
            correct += 1;
        }
    }
    Ok(EpisodeResult {
        correct,
        total: query.len(),
        accuracy: correct as f64 / query.len().max(1) as f64,
        steps_run,
    })
}

/// Encoder outputs of one item, for fusion-scope finetuning.
fn encoded_items(model: &Model, items: &[EpisodeItem]) -> Result<Vec<Vec<EncodedModality>>> {
    items
        .iter()
        .map(|it| {
            it.samples
                .iter()
                .map(|s| encode(s, &model.params, &model.config.encoder))
                .collect()
        })
        .collect()
}

fn fuse_encoded(
    g: &mut Graph,
    model: &Model,
    enc: &[EncodedModality],
    mask: ModalityMask,
) -> Result<Var> {
    let mut vars = Vec::with_capacity(enc.len());
    for e in enc {
        vars.push(EncodedVars {
            modality: e.modality,
            tokens_out: g.constant(e.tokens_out.clone())?,
            pooled: g.constant(e.pooled.clone())?,
        });
    }
    fused_feature_on(g, &vars, mask, &model.config.fusion)
}

fn finetune_with_fusion(
    model: &Model,
    episode: &Episode,
    cfg: &FinetuneConfig,
) -> Result<EpisodeResult> {
    let n = episode.n_way();
    let mut store = head_store(&model.params, model.config.width(), n)?;
    store.set_all_trainable(false);
    store.set_trainable_prefix("fusion.", true);
    store.set_trainable_prefix("mlpfuse.", true);
    store.set_trainable_prefix("episode.", true);
    let support = encoded_items(model, &episode.support)?;
    let query = encoded_items(model, &episode.query)?;
    let labels: Vec<usize> = episode.support.iter().map(|it| it.label).collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&store);
    for _ in 0..cfg.steps {
        let grads: ParamGrads = {
            let mut g = Graph::new(&store);
            let loss = support_loss(&mut g, n, &labels, &mut |g, i| {
                fuse_encoded(g, model, &support[i], episode.support[i].mask)
            })?;
            g.backward(loss)?.into_params()
        };
        adam_step(&mut store, &grads, &mut state, &adam)?;
    }
    let mut correct = 0;
    for (enc, it) in query.iter().zip(&episode.query) {
        let mut g = Graph::new(&store);
        let z = fuse_encoded(&mut g, model, enc, it.mask)?;
        let logits = head_logits(&mut g, z)?;
        if argmax(g.value(logits).data()) == it.label {
            correct += 1;
        }
    }
    Ok(EpisodeResult {
        correct,
        total: query.len(),
        accuracy: correct as f64 / query.len().max(1) as f64,
        steps_run: state.step as usize,
    })
}

/// Finetunes a fresh N-way head (and optionally the fusion module) on the
/// support set and classifies the query set. `model` is never modified.
pub fn fewshot_finetune_eval(
    model: &Model,
    episode: &Episode,
    cfg: &FinetuneConfig,
) -> Result<EpisodeResult> {
    cfg.validate()?;
    match cfg.scope {
        FinetuneScope::Head => {
            let feats = |items: &[EpisodeItem]| -> Result<Vec<(Tensor, usize)>> {
                items
                    .iter()
                    .map(|it| Ok((model.embed(&it.samples, it.mask)?.z, it.label)))
                    .collect()
            };
            finetune_head(
                &feats(&episode.support)?,
                &feats(&episode.query)?,
                episode.n_way(),
                cfg,
            )
        }
        FinetuneScope::HeadAndFusion => finetune_with_fusion(model, episode, cfg),
    }
}

/// Unified features of examples under fixed masks, computed once per suite.
#[derive(Debug, Default)]
pub struct FeatureCache {
    map: HashMap<(usize, ModalityMask), Tensor>,
}

impl FeatureCache {
    /// Embeds every example of `split` under each mask.
    pub fn build(
        model: &Model,
        dataset: &Dataset,
        split: Split,
        masks: &[ModalityMask],
    ) -> Result<Self> {
        let keys: Vec<(usize, ModalityMask)> = dataset
            .indices(split)
            .into_iter()
            .flat_map(|i| masks.iter().map(move |&m| (i, m)))
            .collect();
        let values: Vec<Tensor> = keys
            .par_iter()
            .map(|&(i, m)| {
                let samples = dataset.examples[i].restricted(m);
                let mut g = Graph::new(&model.params);
                let z = embed_on(&mut g, &model.config, &samples, m)?;
                Ok(g.value(z).clone())
            })
            .collect::<Result<_>>()?;
        Ok(FeatureCache {
            map: keys.into_iter().zip(values).collect(),
        })
    }

    pub fn get(&self, example: usize, mask: ModalityMask) -> Result<&Tensor> {
        self.map.get(&(example, mask)).ok_or_else(|| {
            Error::Invalid(format!(
                "no cached feature for example {example} under {mask}"
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Seed of episode `index` in a suite started from `base_seed`.
pub fn episode_seed(base_seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(base_seed ^ splitmix(index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub episodes: usize,
    pub mean: f64,
    pub std_err: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    /// True when fewer than two episodes ran, so no spread estimate exists.
    pub degenerate: bool,
    pub accuracies: Vec<f64>,
}

impl SuiteResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / n.max(1) as f64;
        let (std_err, degenerate) = if n < 2 {
            (0.0, true)
        } else {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            ((var / n as f64).sqrt(), false)
        };
        SuiteResult {
            episodes: n,
            mean,
            std_err,
            ci95: 1.96 * std_err,
            degenerate,
            accuracies,
        }
    }
}

pub const DEFAULT_SUITE_EPISODES: usize = 10_000;
pub const DESK_SUITE_EPISODES: usize = 500;

/// Runs `num_episodes` independent episodes and reports mean accuracy with
/// a 95% interval. Head-only finetuning reuses cached features.
pub fn run_fewshot_suite(
    model: &Model,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    num_episodes: usize,
    base_seed: u64,
    cfg: &FinetuneConfig,
) -> Result<SuiteResult> {
    spec.validate()?;
    cfg.validate()?;
    if num_episodes == 0 {
        return Err(Error::Invalid("num_episodes must be >= 1".into()));
    }
    let cache = match cfg.scope {
        FinetuneScope::Head => Some(FeatureCache::build(
            model,
            dataset,
            spec.class_pool,
            &[spec.support_mask, spec.query_mask],
        )?),
        FinetuneScope::HeadAndFusion => None,
    };
    let accuracies: Vec<f64> = (0..num_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(base_seed, i));
            let ep = sample_episode(dataset, spec, &mut rng)?;
            let r = match &cache {
                Some(c) => {
                    let feats = |items: &[EpisodeItem]| -> Result<Vec<(Tensor, usize)>> {
                        items
                            .iter()
                            .map(|it| Ok((c.get(it.example, it.mask)?.clone(), it.label)))
                            .collect()
                    };
                    finetune_head(&feats(&ep.support)?, &feats(&ep.query)?, ep.n_way(), cfg)?
                }
                None => fewshot_finetune_eval(model, &ep, cfg)?,
            };
            Ok(r.accuracy)
        })
        .collect::<Result<_>>()?;
    Ok(SuiteResult::from_accuracies(accuracies))
}
