//! Transformer fusion over modality tokens, the unimodal path into the
//! unified space, modality dropout and the MLP fusion baseline.
//!
//! Fused forward pass: the token sequences of the masked-in modalities get
//! their modality embedding added per token, are concatenated in canonical
//! modality order, run through pre-norm blocks and a final layer norm, then
//! mean pooled (or read from a single learned CLS token). There are no
//! positional encodings, so mean pooling makes the output invariant to token
//! order. Masked-out modalities are removed from the sequence entirely.
//!
//! Parameter names: `fusion.emb.<modality>`, `fusion.block<i>.*`,
//! `fusion.ln.{g,b}`, optional `fusion.cls`, the supervised classifier
//! `fusion.head.{w,b}`, and the MLP baseline under `mlpfuse.`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncodedModality, EncodedVars};
use crate::error::{shape_err, Error, Result};
use crate::modality::{Modality, ModalityMask};
use crate::numcore::init::{gaussian, INIT_STD};
use crate::numcore::layers::{
    block_on, block_param_count, init_block, init_layer_norm, init_linear, layer_norm_on, linear_on,
};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Attention,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub kind: FusionKind,
    /// Hidden width of the MLP baseline; `None` matches the transformer's parameter count.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            pooling: Pooling::Mean,
            kind: FusionKind::Attention,
            mlp_hidden: None,
        }
    }
}

impl FusionConfig {
    /// Full-scale shape: two layers, twelve heads, width 768.
    pub fn full_scale() -> Self {
        FusionConfig {
            width: 768,
            depth: 2,
            heads: 12,
            ..FusionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "fusion depth, width and mlp_ratio must be >= 1".into(),
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "fusion width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Scalar count of the transformer fusion module (embeddings, blocks, final norm, CLS).
    pub fn transformer_param_count(&self) -> usize {
        let d = self.width;
        let cls = if self.pooling == Pooling::Cls { d } else { 0 };
        3 * d + self.depth * block_param_count(d, self.mlp_ratio * d) + 2 * d + cls
    }

    pub fn mlp_hidden_width(&self) -> usize {
        self.mlp_hidden.unwrap_or_else(|| {
            let d = self.width;
            let target = self.transformer_param_count().saturating_sub(d);
            ((target as f64) / (4 * d + 1) as f64).round().max(1.0) as usize
        })
    }

    /// Scalar count of the MLP baseline: `3D -> H -> D`.
    pub fn mlp_param_count(&self) -> usize {
        let d = self.width;
        let h = self.mlp_hidden_width();
        3 * d * h + h + h * d + d
    }
}

/// A feature in the unified space plus the mask that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedFeature {
    pub z: Tensor,
    pub mask: ModalityMask,
}

pub fn embedding_name(m: Modality) -> String {
    format!("fusion.emb.{}", m.name())
}

pub(crate) fn init_fusion<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &FusionConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    for m in Modality::ALL {
        store.insert(embedding_name(m), gaussian(&[d], INIT_STD, rng))?;
    }
    for i in 0..cfg.depth {
        init_block(
            store,
            &format!("fusion.block{i}"),
            d,
            cfg.mlp_ratio * d,
            rng,
        )?;
    }
    init_layer_norm(store, "fusion.ln", d)?;
    if cfg.pooling == Pooling::Cls {
        store.insert("fusion.cls", gaussian(&[d], INIT_STD, rng))?;
    }
    let h = cfg.mlp_hidden_width();
    init_linear(store, "mlpfuse", "l1.w", "l1.b", 3 * d, h, rng)?;
    init_linear(store, "mlpfuse", "l2.w", "l2.b", h, d, rng)?;
    init_linear(store, "fusion.head", "w", "b", d, num_classes, rng)?;
    Ok(())
}

fn find(inputs: &[(Modality, Var)], m: Modality) -> Result<&Var> {
    inputs
        .iter()
        .find(|(im, _)| *im == m)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::Invalid(format!("modality {m} is in the mask but not in the input")))
}

/// Transformer fusion of the masked-in token sequences (`[t_m × D]` each).
pub fn fuse_on(
    g: &mut Graph,
    inputs: &[(Modality, Var)],
    mask: ModalityMask,
    cfg: &FusionConfig,
) -> Result<Var> {
    mask.ensure_non_empty("fuse")?;
    let mut parts = Vec::with_capacity(mask.len() + 1);
    if cfg.pooling == Pooling::Cls {
        let cls = g.param_named("fusion.cls")?;
        parts.push(g.stack(&[cls])?);
    }
    for m in mask.iter() {
        let tokens = *find(inputs, m)?;
        let (_, w) = g.value(tokens).shape2()?;
        if w != cfg.width {
            return Err(shape_err!(
                "{m} tokens width {w} != fusion width {}",
                cfg.width
            ));
        }
        let emb = g.param_named(&embedding_name(m))?;
        parts.push(g.add_row(tokens, emb)?);
    }
    let mut x = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    for i in 0..cfg.depth {
        x = block_on(g, x, &format!("fusion.block{i}"), cfg.heads)?;
    }
    let x = layer_norm_on(g, x, "fusion.ln")?;
    match cfg.pooling {
        Pooling::Mean => g.mean_rows(x),
        Pooling::Cls => g.row(x, 0),
    }
}

/// MLP baseline: pooled vectors in canonical order, zeros for masked-out slots.
pub fn mlp_fuse_on(
    g: &mut Graph,
    pooled: &[(Modality, Var)],
    mask: ModalityMask,
    cfg: &FusionConfig,
) -> Result<Var> {
    mask.ensure_non_empty("mlp_fuse")?;
    let d = cfg.width;
    let l1 = g.param_named("mlpfuse.l1.w")?;
    if g.value(l1).shape2()?.0 != 3 * d {
        return Err(shape_err!("mlp fusion input width must be 3*{d}"));
    }
    let mut slots = Vec::with_capacity(3);
    for m in Modality::ALL {
        if mask.contains(m) {
            let v = *find(pooled, m)?;
            if g.value(v).dims() != [d] {
                return Err(shape_err!(
                    "{m} pooled dims {:?} != [{d}]",
                    g.value(v).dims()
                ));
            }
            slots.push(v);
        } else {
            slots.push(g.constant(Tensor::zeros(&[d]))?);
        }
    }
    let stacked = g.stack(&slots)?;
    let flat = g.reshape(stacked, &[3 * d])?;
    let h = linear_on(g, flat, "mlpfuse", "l1.w", "l1.b")?;
    let h = g.gelu(h)?;
    linear_on(g, h, "mlpfuse", "l2.w", "l2.b")
}

/// Fused feature of the selected kind from encoder outputs.
pub fn fused_feature_on(
    g: &mut Graph,
    encoded: &[EncodedVars],
    mask: ModalityMask,
    cfg: &FusionConfig,
) -> Result<Var> {
    match cfg.kind {
        FusionKind::Attention => {
            let inputs: Vec<_> = encoded.iter().map(|e| (e.modality, e.tokens_out)).collect();
            fuse_on(g, &inputs, mask, cfg)
        }
        FusionKind::Mlp => {
            let inputs: Vec<_> = encoded.iter().map(|e| (e.modality, e.pooled)).collect();
            mlp_fuse_on(g, &inputs, mask, cfg)
        }
    }
}

pub fn classifier_logits_on(g: &mut Graph, z: Var) -> Result<Var> {
    linear_on(g, z, "fusion.head", "w", "b")
}

pub fn fuse(
    encoded: &[EncodedModality],
    mask: ModalityMask,
    params: &ParamStore,
    cfg: &FusionConfig,
) -> Result<UnifiedFeature> {
    let mut g = Graph::new(params);
    let mut inputs = Vec::with_capacity(encoded.len());
    for e in encoded.iter().filter(|e| mask.contains(e.modality)) {
        inputs.push((e.modality, g.constant(e.tokens_out.clone())?));
    }
    let z = fuse_on(&mut g, &inputs, mask, cfg)?;
    Ok(UnifiedFeature {
        z: g.value(z).clone(),
        mask,
    })
}

/// Single-modality feature in the unified space: fusion with a singleton mask.
pub fn unimodal_project(
    encoded: &EncodedModality,
    params: &ParamStore,
    cfg: &FusionConfig,
) -> Result<UnifiedFeature> {
    fuse(
        std::slice::from_ref(encoded),
        ModalityMask::single(encoded.modality),
        params,
        cfg,
    )
}

pub fn mlp_fuse(
    encoded: &[EncodedModality],
    mask: ModalityMask,
    params: &ParamStore,
    cfg: &FusionConfig,
) -> Result<UnifiedFeature> {
    let mut g = Graph::new(params);
    let mut inputs = Vec::with_capacity(encoded.len());
    for e in encoded.iter().filter(|e| mask.contains(e.modality)) {
        inputs.push((e.modality, g.constant(e.pooled.clone())?));
    }
    let z = mlp_fuse_on(&mut g, &inputs, mask, cfg)?;
    Ok(UnifiedFeature {
        z: g.value(z).clone(),
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    pub p: f64,
    pub keep_at_least_one: bool,
}

impl Default for DropConfig {
    fn default() -> Self {
        DropConfig {
            p: 0.6,
            keep_at_least_one: true,
        }
    }
}

impl DropConfig {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "drop probability {p} outside [0, 1]"
            )));
        }
        Ok(DropConfig {
            p,
            keep_at_least_one: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropOutcome {
    pub mask: ModalityMask,
    /// Modalities that survived the independent per-modality draws.
    pub independent_keep: ModalityMask,
    /// True when every modality dropped and a survivor was resampled.
    pub resampled: bool,
}

/// Drops each present modality independently with probability `p`; if all
/// drop, one member of the input mask is kept, chosen uniformly.
pub fn sample_modality_drop_detailed<R: Rng + ?Sized>(
    mask: ModalityMask,
    cfg: &DropConfig,
    rng: &mut R,
) -> Result<DropOutcome> {
    mask.ensure_non_empty("modality drop")?;
    let mut kept = ModalityMask::EMPTY;
    for m in mask.iter() {
        let u: f64 = rng.gen();
        if u >= cfg.p {
            kept = kept.with(m);
        }
    }
    let independent_keep = kept;
    let resampled = kept.is_empty();
    if resampled {
        let members: Vec<Modality> = mask.iter().collect();
        kept = ModalityMask::single(members[rng.gen_range(0..members.len())]);
    }
    Ok(DropOutcome {
        mask: kept,
        independent_keep,
        resampled,
    })
}

pub fn sample_modality_drop<R: Rng + ?Sized>(
    mask: ModalityMask,
    cfg: &DropConfig,
    rng: &mut R,
) -> Result<ModalityMask> {
    Ok(sample_modality_drop_detailed(mask, cfg, rng)?.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncodedModality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FusionConfig {
        FusionConfig {
            width: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            ..FusionConfig::default()
        }
    }

    fn store(cfg: &FusionConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_fusion(&mut s, cfg, 5, &mut rng).unwrap();
        s
    }

    fn encoded(m: Modality, t: usize, d: usize, rng: &mut ChaCha8Rng) -> EncodedModality {
        let tokens_out = gaussian(&[t, d], 1.0, rng);
        let mut g = Graph::detached();
        let tv = g.constant(tokens_out.clone()).unwrap();
        let p = g.mean_rows(tv).unwrap();
        EncodedModality {
            modality: m,
            pooled: g.value(p).clone(),
            tokens_out,
        }
    }

    fn all_encoded(d: usize, seed: u64) -> Vec<EncodedModality> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            encoded(Modality::Video, 4, d, &mut rng),
            encoded(Modality::Audio, 3, d, &mut rng),
            encoded(Modality::Imu, 2, d, &mut rng),
        ]
    }

    #[test]
    fn singleton_fuse_equals_unimodal_project() {
        let c = cfg();
        let s = store(&c, 1);
        let enc = all_encoded(8, 2);
        for e in &enc {
            let a = fuse(&enc, ModalityMask::single(e.modality), &s, &c).unwrap();
            let b = unimodal_project(e, &s, &c).unwrap();
            assert!(a.z.bit_eq(&b.z));
        }
    }

    #[test]
    fn empty_mask_and_missing_input_are_errors() {
        let c = cfg();
        let s = store(&c, 1);
        let enc = all_encoded(8, 2);
        assert!(fuse(&enc, ModalityMask::EMPTY, &s, &c).is_err());
        assert!(fuse(&enc[..1], ModalityMask::ALL, &s, &c).is_err());
    }

    #[test]
    fn embeddings_disambiguate_identical_tokens() {
        let c = cfg();
        let mut s = store(&c, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let video = encoded(Modality::Video, 3, 8, &mut rng);
        let audio = EncodedModality {
            modality: Modality::Audio,
            ..video.clone()
        };
        let zv = unimodal_project(&video, &s, &c).unwrap();
        let za = unimodal_project(&audio, &s, &c).unwrap();
        assert!(!zv.z.bit_eq(&za.z));
        for m in Modality::ALL {
            let id = s.require(&embedding_name(m)).unwrap();
            s.set(id, Tensor::zeros(&[8])).unwrap();
        }
        let zv = unimodal_project(&video, &s, &c).unwrap();
        let za = unimodal_project(&audio, &s, &c).unwrap();
        assert!(zv.z.bit_eq(&za.z));
    }

    #[test]
    fn mlp_fuse_zero_slot_and_bias_path() {
        let c = cfg();
        let s = store(&c, 5);
        let enc = all_encoded(8, 6);
        let mask = ModalityMask::parse_list("audio,imu").unwrap();
        // the video slot is zero: result must equal an explicit zero video input
        let mut zero_video = enc.clone();
        zero_video[0].pooled = Tensor::zeros(&[8]);
        let a = mlp_fuse(&enc, mask, &s, &c).unwrap();
        let b = mlp_fuse(&zero_video, ModalityMask::ALL, &s, &c).unwrap();
        assert!(a.z.bit_eq(&b.z));

        let zeros: Vec<EncodedModality> = enc
            .iter()
            .map(|e| EncodedModality {
                pooled: Tensor::zeros(&[8]),
                ..e.clone()
            })
            .collect();
        let z = mlp_fuse(&zeros, ModalityMask::ALL, &s, &c).unwrap();
        let b1 = s.by_name("mlpfuse.l1.b").unwrap();
        let w2 = s.by_name("mlpfuse.l2.w").unwrap();
        let b2 = s.by_name("mlpfuse.l2.b").unwrap();
        let h = w2.shape2().unwrap().0;
        for o in 0..8 {
            let mut expect = b2.data()[o];
            for j in 0..h {
                expect += crate::numcore::kernels::gelu(b1.data()[j]) * w2.data()[j * 8 + o];
            }
            assert!((z.z.data()[o] - expect).abs() < 1e-12);
        }
        assert!(mlp_fuse(&enc, ModalityMask::EMPTY, &s, &c).is_err());
    }

    #[test]
    fn mlp_param_count_within_ten_percent() {
        for c in [FusionConfig::default(), cfg(), FusionConfig::full_scale()] {
            let t = c.transformer_param_count() as f64;
            let m = c.mlp_param_count() as f64;
            assert!((m - t).abs() / t <= 0.10, "{m} vs {t}");
        }
        let c = FusionConfig::default();
        let s = store(&c, 0);
        let transformer = s.count_prefix("fusion.emb.")
            + s.count_prefix("fusion.block")
            + s.count_prefix("fusion.ln.");
        assert_eq!(transformer, c.transformer_param_count());
        assert_eq!(s.count_prefix("mlpfuse."), c.mlp_param_count());
    }

    #[test]
    fn full_scale_shape() {
        let c = FusionConfig::full_scale();
        assert_eq!((c.depth, c.heads, c.width), (2, 12, 768));
        c.validate().unwrap();
    }

    #[test]
    fn cls_pooling_reads_the_cls_row() {
        let c = FusionConfig {
            pooling: Pooling::Cls,
            ..cfg()
        };
        let s = store(&c, 8);
        let enc = all_encoded(8, 9);
        let z = fuse(&enc, ModalityMask::ALL, &s, &c).unwrap();
        assert_eq!(z.z.dims(), &[8]);
        let mean = fuse(&enc, ModalityMask::ALL, &s, &cfg());
        assert!(mean.is_err() || !mean.unwrap().z.bit_eq(&z.z));
    }

    #[test]
    fn fuse_snapshot_is_stable() {
        let c = cfg();
        let s = store(&c, 77);
        let enc = all_encoded(8, 78);
        let z = fuse(&enc, ModalityMask::ALL, &s, &c).unwrap();
        let golden = crate::testutil::golden::FUSE_ALL;
        assert_eq!(z.z.len(), golden.len(), "{:?}", z.z.data());
        for (x, y) in z.z.data().iter().zip(golden) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn drop_p_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DropConfig::new(0.0).unwrap();
        for mask in ModalityMask::ALL.non_empty_subsets() {
            for _ in 0..100 {
                assert_eq!(sample_modality_drop(mask, &cfg, &mut rng).unwrap(), mask);
            }
        }
    }

    #[test]
    fn drop_p_one_keeps_exactly_one_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DropConfig::new(1.0).unwrap();
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let m = sample_modality_drop(ModalityMask::ALL, &cfg, &mut rng).unwrap();
            assert_eq!(m.len(), 1);
            counts[m.iter().next().unwrap().index()] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.015, "{f}");
        }
    }

    #[test]
    fn drop_rejects_bad_p() {
        assert!(DropConfig::new(1.5).is_err());
        assert!(DropConfig::new(-0.1).is_err());
    }

    #[test]
    fn drop_survival_rates_match_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DropConfig::default();
        assert_eq!(cfg.p, 0.6);
        let n = 100_000;
        let (mut raw, mut cond, mut cond_n, mut final_keep) = (0usize, 0usize, 0usize, 0usize);
        for _ in 0..n {
            let o = sample_modality_drop_detailed(ModalityMask::ALL, &cfg, &mut rng).unwrap();
            let v = Modality::Video;
            raw += o.independent_keep.contains(v) as usize;
            final_keep += o.mask.contains(v) as usize;
            if !o.resampled {
                cond_n += 1;
                cond += o.mask.contains(v) as usize;
            }
        }
        let q: f64 = 1.0 - cfg.p;
        let all_drop = cfg.p.powi(3);
        // independent draw: 1 - p
        assert!((raw as f64 / n as f64 - q).abs() < 0.01);
        // given no resample: (1 - p) / (1 - p^3)
        assert!((cond as f64 / cond_n as f64 - q / (1.0 - all_drop)).abs() < 0.01);
        // overall, with the uniform survivor: (1 - p) + p^3 / 3
        assert!((final_keep as f64 / n as f64 - (q + all_drop / 3.0)).abs() < 0.01);
    }

    #[test]
    fn masked_out_modalities_get_zero_gradient() {
        let c = cfg();
        let s = store(&c, 10);
        let enc = all_encoded(8, 11);
        let mut g = Graph::new(&s);
        let inputs: Vec<(Modality, Var)> = enc
            .iter()
            .map(|e| (e.modality, g.constant(e.tokens_out.clone()).unwrap()))
            .collect();
        let mask = ModalityMask::parse_list("video,imu").unwrap();
        let z = fuse_on(&mut g, &inputs, mask, &c).unwrap();
        let loss = g.sum(z).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(inputs[1].1).is_none());
        assert!(grads
            .param(s.require(&embedding_name(Modality::Audio)).unwrap())
            .is_none());
        assert!(grads.wrt(inputs[0].1).is_some());
    }
}
