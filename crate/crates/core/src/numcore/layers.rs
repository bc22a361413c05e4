//! Transformer building blocks on top of [`Graph`].
//!
//! Parameters live in the [`ParamStore`] under dotted names. A block at
//! `prefix` owns `prefix.ln1.{g,b}`, `prefix.attn.{wq,bq,wk,bk,wv,bv,wo,bo}`,
//! `prefix.ln2.{g,b}` and `prefix.mlp.{w1,b1,w2,b2}`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::init::{gaussian, INIT_STD};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub fn mhsa_on(g: &mut Graph, x: Var, p: &AttnVars, heads: usize) -> Result<Var> {
    let q = g.linear(x, p.wq, Some(p.bq))?;
    let k = g.linear(x, p.wk, Some(p.bk))?;
    let v = g.linear(x, p.wv, Some(p.bv))?;
    let a = g.attention(q, k, v, heads)?;
    g.linear(a, p.wo, Some(p.bo))
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    w: &str,
    b: &str,
    inputs: usize,
    outputs: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.{w}"),
        gaussian(&[inputs, outputs], INIT_STD, rng),
    )?;
    store.insert(format!("{prefix}.{b}"), Tensor::zeros(&[outputs]))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, width: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::filled(&[width], 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[width]))?;
    Ok(())
}

/// Pre-norm transformer block parameters.
pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    mlp_hidden: usize,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), width)?;
    let attn = format!("{prefix}.attn");
    for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
        init_linear(store, &attn, w, b, width, width, rng)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), width)?;
    let mlp = format!("{prefix}.mlp");
    init_linear(store, &mlp, "w1", "b1", width, mlp_hidden, rng)?;
    init_linear(store, &mlp, "w2", "b2", mlp_hidden, width, rng)?;
    Ok(())
}

/// Closed-form scalar count of one block.
pub fn block_param_count(width: usize, mlp_hidden: usize) -> usize {
    2 * width
        + 4 * (width * width + width)
        + 2 * width
        + width * mlp_hidden
        + mlp_hidden
        + mlp_hidden * width
        + width
}

pub fn layer_norm_on(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param_named(&format!("{prefix}.g"))?;
    let bias = g.param_named(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

pub fn linear_on(g: &mut Graph, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
    let wv = g.param_named(&format!("{prefix}.{w}"))?;
    let bv = g.param_named(&format!("{prefix}.{b}"))?;
    g.linear(x, wv, Some(bv))
}

/// `h = x + attn(ln1(x)); out = h + mlp(ln2(h))`.
pub fn block_on(g: &mut Graph, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let n1 = layer_norm_on(g, x, &format!("{prefix}.ln1"))?;
    let a = format!("{prefix}.attn");
    let vars = AttnVars {
        wq: g.param_named(&format!("{a}.wq"))?,
        bq: g.param_named(&format!("{a}.bq"))?,
        wk: g.param_named(&format!("{a}.wk"))?,
        bk: g.param_named(&format!("{a}.bk"))?,
        wv: g.param_named(&format!("{a}.wv"))?,
        bv: g.param_named(&format!("{a}.bv"))?,
        wo: g.param_named(&format!("{a}.wo"))?,
        bo: g.param_named(&format!("{a}.bo"))?,
    };
    let attn = mhsa_on(g, n1, &vars, heads)?;
    let h = g.add(x, attn)?;
    let n2 = layer_norm_on(g, h, &format!("{prefix}.ln2"))?;
    let mlp = format!("{prefix}.mlp");
    let hidden = linear_on(g, n2, &mlp, "w1", "b1")?;
    let act = g.gelu(hidden)?;
    let out = linear_on(g, act, &mlp, "w2", "b2")?;
    g.add(h, out)
}
