//! Training objectives: cross-entropy, video-anchored contrastive alignment
//! and the cross-modal prototypical loss.
//!
//! Each objective has a graph form (`*_on`) used for training and a plain
//! form on tensors that builds a throwaway graph, so both share one code path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fusion::UnifiedFeature;
use crate::modality::{Modality, ModalityMask};
use crate::numcore::{Graph, Tensor, Var};

/// Floor applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-30;

/// `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut g = Graph::detached();
    let l = g.constant(logits.clone())?;
    let loss = g.cross_entropy(l, label)?;
    g.scalar(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub tau: f64,
    /// Adds the reverse (modality-anchored) direction and averages the two.
    #[serde(default)]
    pub symmetric: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tau: 0.07,
            symmetric: false,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Features of one temporal location; `None` marks an absent modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTriple<T> {
    pub video: Option<T>,
    pub audio: Option<T>,
    pub imu: Option<T>,
}

impl<T> Default for AlignTriple<T> {
    fn default() -> Self {
        AlignTriple {
            video: None,
            audio: None,
            imu: None,
        }
    }
}

impl<T> AlignTriple<T> {
    pub fn get(&self, m: Modality) -> Option<&T> {
        match m {
            Modality::Video => self.video.as_ref(),
            Modality::Audio => self.audio.as_ref(),
            Modality::Imu => self.imu.as_ref(),
        }
    }

    pub fn set(&mut self, m: Modality, v: T) {
        match m {
            Modality::Video => self.video = Some(v),
            Modality::Audio => self.audio = Some(v),
            Modality::Imu => self.imu = Some(v),
        }
    }

    pub fn mask(&self) -> ModalityMask {
        Modality::ALL
            .into_iter()
            .filter(|m| self.get(*m).is_some())
            .fold(ModalityMask::EMPTY, ModalityMask::with)
    }
}

pub type AlignBatch = Vec<AlignTriple<Tensor>>;

const PAIRS: [Modality; 2] = [Modality::Audio, Modality::Imu];

/// Mean over anchors of `-log softmax(cos(anchor, candidates)/tau)[positive]`,
/// where the candidates are the `other` features at every temporal index.
fn directional_term(
    g: &mut Graph,
    batch: &[AlignTriple<Var>],
    anchor: Modality,
    other: Modality,
    tau: f64,
) -> Result<Option<Var>> {
    let candidates: Vec<(usize, Var)> = batch
        .iter()
        .enumerate()
        .filter_map(|(t, tr)| tr.get(other).map(|v| (t, *v)))
        .collect();
    let mut terms = Vec::new();
    for (t, tr) in batch.iter().enumerate() {
        let (Some(a), Some(_)) = (tr.get(anchor), tr.get(other)) else {
            continue;
        };
        let mut sims = Vec::with_capacity(candidates.len());
        let mut pos = 0;
        for (i, (s, c)) in candidates.iter().enumerate() {
            if *s == t {
                pos = i;
            }
            sims.push(g.cosine(*a, *c)?);
        }
        let logits = g.stack(&sims)?;
        let logits = g.scale(logits, 1.0 / tau)?;
        terms.push(g.cross_entropy(logits, pos)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let n = terms.len();
    let total = g.add_n(&terms)?;
    Ok(Some(g.scale(total, 1.0 / n as f64)?))
}

/// Contrastive alignment anchored on video, summed over the audio and IMU pairs.
///
/// Positives are the same temporal index, negatives every other index in the
/// batch. Triples lacking video or the paired modality contribute no anchor
/// for that pair; a batch with no usable anchor has loss 0.
pub fn alignment_loss_on(
    g: &mut Graph,
    batch: &[AlignTriple<Var>],
    cfg: &AlignConfig,
) -> Result<Var> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("alignment batch is empty".into()));
    }
    let mut pair_terms = Vec::new();
    for m in PAIRS {
        let forward = directional_term(g, batch, Modality::Video, m, cfg.tau)?;
        let term = if cfg.symmetric {
            let backward = directional_term(g, batch, m, Modality::Video, cfg.tau)?;
            match (forward, backward) {
                (Some(f), Some(b)) => {
                    let s = g.add(f, b)?;
                    Some(g.scale(s, 0.5)?)
                }
                (f, b) => f.or(b),
            }
        } else {
            forward
        };
        pair_terms.extend(term);
    }
    if pair_terms.is_empty() {
        return g.constant(Tensor::scalar(0.0));
    }
    g.add_n(&pair_terms)
}

pub fn alignment_loss(batch: &AlignBatch, cfg: &AlignConfig) -> Result<f64> {
    let mut g = Graph::detached();
    let mut vars = Vec::with_capacity(batch.len());
    for tr in batch {
        let mut v = AlignTriple::default();
        for m in Modality::ALL {
            if let Some(t) = tr.get(m) {
                v.set(m, g.constant(t.clone())?);
            }
        }
        vars.push(v);
    }
    let loss = alignment_loss_on(&mut g, &vars, cfg)?;
    g.scalar(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    SqL2,
    L2,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::SqL2 => "sq_l2",
            DistanceMetric::L2 => "l2",
        }
    }

    pub fn on(self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        match self {
            DistanceMetric::SqL2 => g.sq_l2(a, b),
            DistanceMetric::L2 => g.l2(a, b),
        }
    }
}

/// Support features of one class; `mask` is the union of their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportGroup {
    pub class: usize,
    pub mask: ModalityMask,
    pub features: Vec<Tensor>,
}

impl SupportGroup {
    pub fn from_features(class: usize, features: &[UnifiedFeature]) -> Self {
        SupportGroup {
            class,
            mask: features
                .iter()
                .fold(ModalityMask::EMPTY, |acc, f| acc.union(f.mask)),
            features: features.iter().map(|f| f.z.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub mask: ModalityMask,
    pub centroid: Tensor,
}

/// One centroid per class: the mean of every support feature of that class,
/// whichever modalities produced them. Groups sharing a class are merged.
pub fn prototypes(groups: &[SupportGroup]) -> Result<Vec<Prototype>> {
    if groups.is_empty() {
        return Err(Error::Invalid("no support groups".into()));
    }
    let mut by_class: BTreeMap<usize, (ModalityMask, Vec<&Tensor>)> = BTreeMap::new();
    for grp in groups {
        if grp.features.is_empty() {
            return Err(Error::Invalid(format!(
                "empty support group for class {}",
                grp.class
            )));
        }
        let e = by_class
            .entry(grp.class)
            .or_insert((ModalityMask::EMPTY, Vec::new()));
        e.0 = e.0.union(grp.mask);
        e.1.extend(grp.features.iter());
    }
    let mut g = Graph::detached();
    let mut out = Vec::with_capacity(by_class.len());
    for (class, (mask, feats)) in by_class {
        let vars = feats
            .into_iter()
            .map(|f| g.constant(f.clone()))
            .collect::<Result<Vec<_>>>()?;
        let c = centroid_on(&mut g, &vars)?;
        out.push(Prototype {
            class,
            mask,
            centroid: g.value(c).clone(),
        });
    }
    Ok(out)
}

/// Mean of `[D]` features.
pub fn centroid_on(g: &mut Graph, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Invalid("centroid of an empty support set".into()));
    }
    if g.value(features[0]).rank() != 1 {
        return Err(shape_err!("support features must be vectors"));
    }
    let stacked = g.stack(features)?;
    g.mean_rows(stacked)
}

/// `-d(query, c_k)` for each centroid, in the given order.
pub fn proto_logits_on(
    g: &mut Graph,
    query: Var,
    centroids: &[Var],
    metric: DistanceMetric,
) -> Result<Var> {
    if centroids.is_empty() {
        return Err(Error::Invalid("no prototypes".into()));
    }
    let mut neg = Vec::with_capacity(centroids.len());
    for c in centroids {
        let d = metric.on(g, query, *c)?;
        neg.push(g.neg(d)?);
    }
    g.stack(&neg)
}

/// `-log max(P_y, floor)` with `P = softmax(-d)`.
pub fn proto_loss_on(
    g: &mut Graph,
    query: Var,
    centroids: &[Var],
    label: usize,
    metric: DistanceMetric,
) -> Result<Var> {
    if label >= centroids.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} prototypes",
            centroids.len()
        )));
    }
    let logits = proto_logits_on(g, query, centroids, metric)?;
    let p = g.softmax(logits)?;
    let py = g.pick(p, label)?;
    let lp = g.log(py, PROB_FLOOR)?;
    g.neg(lp)
}

/// Class probabilities, validated non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("invalid probabilities {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("probabilities sum to {s}")));
        }
        Ok(ProbVector(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    }
}

/// Softmax over negative distances to prototypes of classes `0..num_classes`.
pub fn proto_probabilities(
    query: &UnifiedFeature,
    protos: &[Prototype],
    num_classes: usize,
    metric: DistanceMetric,
) -> Result<ProbVector> {
    let mut ordered: Vec<Option<&Prototype>> = vec![None; num_classes];
    for p in protos {
        let slot = ordered.get_mut(p.class).ok_or_else(|| {
            Error::Invalid(format!("prototype class {} >= {num_classes}", p.class))
        })?;
        if slot.is_some() {
            return Err(Error::Invalid(format!(
                "duplicate prototype for class {}",
                p.class
            )));
        }
        *slot = Some(p);
    }
    let mut g = Graph::detached();
    let q = g.constant(query.z.clone())?;
    let mut cs = Vec::with_capacity(num_classes);
    for (k, p) in ordered.into_iter().enumerate() {
        let p = p.ok_or_else(|| Error::Invalid(format!("missing prototype for class {k}")))?;
        cs.push(g.constant(p.centroid.clone())?);
    }
    let logits = proto_logits_on(&mut g, q, &cs, metric)?;
    let p = g.softmax(logits)?;
    ProbVector::new(g.value(p).data().to_vec())
}

pub fn proto_loss(probs: &ProbVector, label: usize) -> Result<f64> {
    let p = *probs
        .0
        .get(label)
        .ok_or_else(|| Error::Invalid(format!("label {label} out of range")))?;
    if p < PROB_FLOOR {
        log::warn!("probability {p:e} below floor; clamping to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}
