//! The four training stage types.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Task, TrainSection};
use crate::dataeng::{Dataset, Split};
use crate::encoders::{encode_on, unimodal_logits_on, EncodedVars, ModalitySample};
use crate::episodic::{sample_episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fusion::{classifier_logits_on, fused_feature_on, sample_modality_drop, DropConfig};
use crate::losses::{alignment_loss_on, centroid_on, proto_loss_on, AlignTriple};
use crate::modality::ModalityMask;
use crate::model::{embed_on, Model};
use crate::numcore::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    UnimodalSupervisedPretrain,
    MultimodalUnsupervisedPretrain,
    MultimodalSupervisedTrain,
    MultimodalMetaTrain,
}

impl StageKind {
    /// The only split a stage of this kind may train on.
    pub fn split(self) -> Split {
        match self {
            StageKind::MultimodalUnsupervisedPretrain => Split::Unlabeled,
            _ => Split::BaseTrain,
        }
    }

    pub fn is_multimodal(self) -> bool {
        self != StageKind::UnimodalSupervisedPretrain
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::UnimodalSupervisedPretrain => "unimodal-supervised-pretrain",
            StageKind::MultimodalUnsupervisedPretrain => "multimodal-unsupervised-pretrain",
            StageKind::MultimodalSupervisedTrain => "multimodal-supervised-train",
            StageKind::MultimodalMetaTrain => "multimodal-meta-train",
        })
    }
}

/// One stage of a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    pub split: Split,
    /// Modalities the stage may read.
    pub mask: ModalityMask,
    /// Adds the weighted alignment term (supervised train only).
    pub align: bool,
    /// Task whose legal mask pairs meta-train episodes draw from.
    pub meta_task: Option<Task>,
    /// Encoders keep their weights when off.
    pub train_encoders: bool,
}

impl StageSpec {
    pub fn new(kind: StageKind, mask: ModalityMask) -> Self {
        StageSpec {
            kind,
            split: kind.split(),
            mask,
            align: false,
            meta_task: None,
            train_encoders: true,
        }
    }

    /// Short loss-menu name shown in logs, e.g. `multimodal-CE+align`.
    pub fn label(&self) -> &'static str {
        match self.kind {
            StageKind::UnimodalSupervisedPretrain => "unimodal-CE",
            StageKind::MultimodalUnsupervisedPretrain => "unsupervised-align",
            StageKind::MultimodalSupervisedTrain if self.align => "multimodal-CE+align",
            StageKind::MultimodalSupervisedTrain => "multimodal-CE",
            StageKind::MultimodalMetaTrain => "meta-proto",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.split != self.kind.split() {
            return Err(Error::Invalid(format!(
                "{} trains on {}, not {}",
                self.kind,
                self.kind.split(),
                self.split
            )));
        }
        self.mask.ensure_non_empty(self.label())?;
        if self.align && self.kind != StageKind::MultimodalSupervisedTrain {
            return Err(Error::Invalid(format!(
                "{} has no alignment flag",
                self.kind
            )));
        }
        if !self.train_encoders && self.kind == StageKind::UnimodalSupervisedPretrain {
            return Err(Error::Invalid(
                "unimodal pretraining must train the encoders".into(),
            ));
        }
        if (self.kind == StageKind::MultimodalMetaTrain) != self.meta_task.is_some() {
            return Err(Error::Invalid(
                "meta_task is set exactly for meta-train stages".into(),
            ));
        }
        Ok(())
    }
}

/// What a stage read from the dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    /// Splits touched, sorted.
    pub splits: Vec<Split>,
    /// Modalities whose tokens were read from labeled splits.
    pub labeled_modalities: ModalityMask,
    /// Modalities whose tokens were read from the unlabeled pool.
    pub unlabeled_modalities: ModalityMask,
    /// Total example reads.
    pub reads: usize,
}

impl AccessLog {
    fn record(&mut self, split: Split, mask: ModalityMask) {
        if let Err(pos) = self.splits.binary_search(&split) {
            self.splits.insert(pos, split);
        }
        if split == Split::Unlabeled {
            self.unlabeled_modalities = self.unlabeled_modalities.union(mask);
        } else {
            self.labeled_modalities = self.labeled_modalities.union(mask);
        }
        self.reads += 1;
    }

    pub fn merge(&mut self, other: &AccessLog) {
        for &s in &other.splits {
            if let Err(pos) = self.splits.binary_search(&s) {
                self.splits.insert(pos, s);
            }
        }
        self.labeled_modalities = self.labeled_modalities.union(other.labeled_modalities);
        self.unlabeled_modalities = self.unlabeled_modalities.union(other.unlabeled_modalities);
        self.reads += other.reads;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub kind: StageKind,
    pub label: String,
    /// Mean loss per epoch (per tenth of the episodes for meta-train).
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub access: AccessLog,
}

/// All dataset reads of a stage go through here.
struct Reader<'a> {
    ds: &'a Dataset,
    allowed: ModalityMask,
    log: AccessLog,
}

impl<'a> Reader<'a> {
    fn samples(&mut self, i: usize, mask: ModalityMask) -> Result<Vec<ModalitySample>> {
        if !mask.is_subset_of(self.allowed) {
            return Err(Error::Invalid(format!("stage may not read {mask}")));
        }
        let ex = &self.ds.examples[i];
        self.log.record(ex.split, mask);
        Ok(ex.restricted(mask))
    }

    fn label(&self, i: usize) -> Result<usize> {
        let ex = &self.ds.examples[i];
        ex.label
            .and_then(|l| self.ds.base_class_index(l))
            .ok_or_else(|| Error::Data(format!("{} has no base-class label", ex.id)))
    }
}

/// Sets trainable flags for a stage and returns the previous flags.
fn set_trainable(params: &mut ParamStore, stage: &StageSpec) -> Vec<bool> {
    let before: Vec<bool> = params.entries().iter().map(|e| e.trainable).collect();
    params.set_all_trainable(false);
    match stage.kind {
        StageKind::UnimodalSupervisedPretrain => {
            params.set_trainable_prefix("enc.", true);
            params.set_trainable_prefix("head.", true);
        }
        _ => {
            params.set_trainable_prefix("enc.", stage.train_encoders);
            params.set_trainable_prefix("fusion.", true);
            params.set_trainable_prefix("mlpfuse.", true);
        }
    }
    before
}

fn restore_trainable(params: &mut ParamStore, flags: &[bool]) {
    let ids: Vec<_> = params.ids().collect();
    for (id, &t) in ids.into_iter().zip(flags) {
        params.set_trainable(id, t);
    }
}

fn encode_samples(
    g: &mut Graph,
    model: &Model,
    samples: &[ModalitySample],
) -> Result<Vec<EncodedVars>> {
    samples
        .iter()
        .map(|s| {
            let x = g.constant(s.tokens.clone())?;
            encode_on(g, s.modality, x, &model.config.encoder)
        })
        .collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// One optimizer step on the scalar built by `loss`; returns its value.
fn step(
    model: &mut Model,
    state: &mut AdamState,
    adam: &AdamConfig,
    what: &str,
    loss: impl FnOnce(&mut Graph, &Model) -> Result<Var>,
) -> Result<f64> {
    let (value, grads) = {
        let mut g = Graph::new(&model.params);
        let l = loss(&mut g, model)?;
        let value = finite(g.scalar(l)?, what)?;
        (value, g.backward(l)?.into_params())
    };
    adam_step(&mut model.params, &grads, state, adam)?;
    Ok(value)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Runs one stage on `model` in place.
pub fn run_stage(
    stage: &StageSpec,
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainSection,
    rng: &mut ChaCha8Rng,
) -> Result<StageLog> {
    stage.validate()?;
    let mut reader = Reader {
        ds,
        allowed: stage.mask,
        log: AccessLog::default(),
    };
    let flags = set_trainable(&mut model.params, stage);
    let result = match stage.kind {
        StageKind::MultimodalMetaTrain => meta_train(stage, model, &mut reader, cfg, rng),
        _ => epoch_train(stage, model, &mut reader, cfg, rng),
    };
    restore_trainable(&mut model.params, &flags);
    let (epoch_losses, steps) = result?;
    log::info!(
        "{}: {} steps, loss {:.4} -> {:.4}",
        stage.label(),
        steps,
        epoch_losses.first().copied().unwrap_or(f64::NAN),
        epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(StageLog {
        kind: stage.kind,
        label: stage.label().to_string(),
        initial_loss: epoch_losses.first().copied().unwrap_or(0.0),
        final_loss: epoch_losses.last().copied().unwrap_or(0.0),
        epoch_losses,
        steps,
        access: reader.log,
    })
}

fn epoch_train(
    stage: &StageSpec,
    model: &mut Model,
    reader: &mut Reader,
    cfg: &TrainSection,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, u64)> {
    let mut indices = reader.ds.indices(stage.split);
    if indices.is_empty() {
        return Err(Error::Data(format!("{} split is empty", stage.split)));
    }
    let epochs = match stage.kind {
        StageKind::UnimodalSupervisedPretrain => cfg.unimodal_epochs,
        StageKind::MultimodalUnsupervisedPretrain => cfg.unsupervised_epochs,
        _ => cfg.multimodal_epochs,
    };
    let drop = DropConfig::new(cfg.drop_p)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        indices.shuffle(rng);
        let mut batch_losses = Vec::new();
        for batch in indices.chunks(cfg.batch_size) {
            let loss = match stage.kind {
                StageKind::UnimodalSupervisedPretrain => {
                    let data = batch
                        .iter()
                        .map(|&i| Ok((reader.samples(i, stage.mask)?, reader.label(i)?)))
                        .collect::<Result<Vec<_>>>()?;
                    step(model, &mut state, &adam, stage.label(), |g, m| {
                        unimodal_batch_loss(g, m, &data)
                    })?
                }
                StageKind::MultimodalUnsupervisedPretrain => {
                    let data = batch
                        .iter()
                        .map(|&i| reader.samples(i, stage.mask))
                        .collect::<Result<Vec<_>>>()?;
                    step(model, &mut state, &adam, stage.label(), |g, m| {
                        let triples = singleton_triples(g, m, &data)?;
                        alignment_loss_on(g, &triples, &cfg.align)
                    })?
                }
                StageKind::MultimodalSupervisedTrain => {
                    let mut data = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let drop_mask = sample_modality_drop(stage.mask, &drop, rng)?;
                        data.push((reader.samples(i, stage.mask)?, drop_mask, reader.label(i)?));
                    }
                    let lambda = cfg.lambda_align;
                    step(model, &mut state, &adam, stage.label(), |g, m| {
                        supervised_batch_loss(g, m, &data, stage.align.then_some((lambda, cfg)))
                    })?
                }
                StageKind::MultimodalMetaTrain => unreachable!("meta-train is episodic"),
            };
            batch_losses.push(loss);
        }
        epoch_losses.push(mean(&batch_losses));
    }
    Ok((epoch_losses, state.step))
}

/// Cross-entropy of every unimodal head, averaged over examples and modalities.
fn unimodal_batch_loss(
    g: &mut Graph,
    model: &Model,
    data: &[(Vec<ModalitySample>, usize)],
) -> Result<Var> {
    let mut terms = Vec::new();
    for (samples, y) in data {
        for e in encode_samples(g, model, samples)? {
            let logits = unimodal_logits_on(g, e.modality, e.pooled, model.config.num_classes)?;
            terms.push(g.cross_entropy(logits, *y)?);
        }
    }
    let total = g.add_n(&terms)?;
    g.scale(total, 1.0 / terms.len() as f64)
}

/// Unified single-modality features of each example.
fn singleton_triples(
    g: &mut Graph,
    model: &Model,
    data: &[Vec<ModalitySample>],
) -> Result<Vec<AlignTriple<Var>>> {
    let mut out = Vec::with_capacity(data.len());
    for samples in data {
        let enc = encode_samples(g, model, samples)?;
        out.push(singletons(g, model, &enc)?);
    }
    Ok(out)
}

fn singletons(g: &mut Graph, model: &Model, enc: &[EncodedVars]) -> Result<AlignTriple<Var>> {
    let mut t = AlignTriple::default();
    for e in enc {
        let one = std::slice::from_ref(e);
        let z = fused_feature_on(
            g,
            one,
            ModalityMask::single(e.modality),
            &model.config.fusion,
        )?;
        t.set(e.modality, z);
    }
    Ok(t)
}

/// Mean fused cross-entropy under each example's drop mask, plus
/// `lambda * align` over singleton features when alignment is on.
fn supervised_batch_loss(
    g: &mut Graph,
    model: &Model,
    data: &[(Vec<ModalitySample>, ModalityMask, usize)],
    align: Option<(f64, &TrainSection)>,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(data.len());
    let mut triples = Vec::with_capacity(data.len());
    for (samples, drop_mask, y) in data {
        let enc = encode_samples(g, model, samples)?;
        let kept: Vec<EncodedVars> = enc
            .iter()
            .filter(|e| drop_mask.contains(e.modality))
            .map(|e| EncodedVars {
                modality: e.modality,
                tokens_out: e.tokens_out,
                pooled: e.pooled,
            })
            .collect();
        let z = fused_feature_on(g, &kept, *drop_mask, &model.config.fusion)?;
        let logits = classifier_logits_on(g, z)?;
        terms.push(g.cross_entropy(logits, *y)?);
        if align.is_some() {
            triples.push(singletons(g, model, &enc)?);
        }
    }
    let total = g.add_n(&terms)?;
    let ce = g.scale(total, 1.0 / terms.len() as f64)?;
    match align {
        Some((lambda, cfg)) => {
            let a = alignment_loss_on(g, &triples, &cfg.align)?;
            let a = g.scale(a, lambda)?;
            g.add(ce, a)
        }
        None => Ok(ce),
    }
}

fn meta_train(
    stage: &StageSpec,
    model: &mut Model,
    reader: &mut Reader,
    cfg: &TrainSection,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, u64)> {
    let task = stage.meta_task.expect("validated");
    // regular episodes see every modality the stage may read
    let pairs: Vec<_> = if task == Task::Regular {
        vec![(stage.mask, stage.mask)]
    } else {
        task.legal_pairs()
            .into_iter()
            .filter(|(s, q)| s.union(*q).is_subset_of(stage.mask))
            .collect()
    };
    if pairs.is_empty() {
        return Err(Error::Config(format!(
            "no legal {task} mask pairs within {}",
            stage.mask
        )));
    }
    let adam = AdamConfig {
        lr: cfg.meta_lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&model.params);
    let chunk = cfg.meta_episodes.div_ceil(10).max(1);
    let mut epoch_losses = Vec::new();
    let mut losses = Vec::with_capacity(chunk);
    for e in 0..cfg.meta_episodes {
        let (support_mask, query_mask) = pairs[rng.gen_range(0..pairs.len())];
        let spec = EpisodeSpec {
            n_way: cfg.meta_n_way,
            k_shot: cfg.meta_k_shot,
            q_queries: cfg.meta_q_queries,
            support_mask,
            query_mask,
            class_pool: stage.split,
        };
        let ep = sample_episode(reader.ds, &spec, rng)?;
        for it in ep.support.iter().chain(&ep.query) {
            reader
                .log
                .record(reader.ds.examples[it.example].split, it.mask);
        }
        let metric = cfg.distance;
        let loss = step(model, &mut state, &adam, stage.label(), |g, m| {
            let mut by_class: Vec<Vec<Var>> = vec![Vec::new(); ep.n_way()];
            for it in &ep.support {
                by_class[it.label].push(embed_on(g, &m.config, &it.samples, it.mask)?);
            }
            let centroids = by_class
                .iter()
                .map(|f| centroid_on(g, f))
                .collect::<Result<Vec<_>>>()?;
            let mut terms = Vec::with_capacity(ep.query.len());
            for it in &ep.query {
                let q = embed_on(g, &m.config, &it.samples, it.mask)?;
                terms.push(proto_loss_on(g, q, &centroids, it.label, metric)?);
            }
            let total = g.add_n(&terms)?;
            g.scale(total, 1.0 / terms.len() as f64)
        })?;
        losses.push(loss);
        if losses.len() == chunk || e + 1 == cfg.meta_episodes {
            epoch_losses.push(mean(&losses));
            losses.clear();
        }
    }
    Ok((epoch_losses, state.step))
}
