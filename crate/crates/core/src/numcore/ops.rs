//! Pure tensor functions. Each one validates its input and returns a fresh tensor.

use super::graph::{cosine_value, sq_l2_value, Graph};
use super::kernels as k;
use super::layers::{mhsa_on, AttnVars};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    let dims = x.dims();
    if axis >= dims.len().max(1) {
        return Err(Error::Invalid(format!(
            "axis {axis} invalid for dims {dims:?}"
        )));
    }
    if dims.is_empty() {
        return Ok(Tensor::scalar(1.0));
    }
    let outer = dims[..axis].iter().product();
    let n = dims[axis];
    let inner = dims[axis + 1..].iter().product();
    let out = k::softmax_strided(x.data(), outer, n, inner);
    Ok(Tensor::from_parts_unchecked(dims.to_vec(), out))
}

/// Row-wise `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    x.ensure_finite("layer_norm input")?;
    let mut g = Graph::detached();
    let xv = g.constant(x.clone())?;
    let gv = g.constant(gain.clone())?;
    let bv = g.constant(bias.clone())?;
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_finite("cosine input")?;
    b.ensure_finite("cosine input")?;
    if a.dims() != b.dims() {
        return Err(shape_err!("cosine {:?} vs {:?}", a.dims(), b.dims()));
    }
    cosine_value(a.data(), b.data())
}

pub fn sq_l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_finite("distance input")?;
    b.ensure_finite("distance input")?;
    if a.dims() != b.dims() {
        return Err(shape_err!("distance {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(sq_l2_value(a.data(), b.data()))
}

/// Weights of one self-attention layer. Projections are `[d × d]`, biases `[d]`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

/// Multi-head self-attention over `tokens` (`[t × d]`), without positional encoding.
pub fn multi_head_self_attention(
    tokens: &Tensor,
    params: &AttentionParams,
    heads: usize,
) -> Result<Tensor> {
    let (_, d) = tokens.shape2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let mut g = Graph::detached();
    let x = g.constant(tokens.clone())?;
    let vars = AttnVars {
        wq: g.constant(params.wq.clone())?,
        bq: g.constant(params.bq.clone())?,
        wk: g.constant(params.wk.clone())?,
        bk: g.constant(params.bk.clone())?,
        wv: g.constant(params.wv.clone())?,
        bv: g.constant(params.bv.clone())?,
        wo: g.constant(params.wo.clone())?,
        bo: g.constant(params.bo.clone())?,
    };
    let y = mhsa_on(&mut g, x, &vars, heads)?;
    Ok(g.value(y).clone())
}
