//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node whose value is computed eagerly. Nodes only
//! reference earlier nodes, so the node list is already a topological order
//! and [`Graph::backward`] walks it in reverse.

use std::collections::HashMap;

use super::kernels as k;
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

static EMPTY_STORE: ParamStore = ParamStore::new();

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<usize>),
    Stack(Vec<usize>),
    MeanRows(usize),
    Row(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy {
        logits: usize,
        label: usize,
    },
    Cosine(usize, usize),
    SqL2(usize, usize),
    L2(usize, usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, usize),
    Log {
        x: usize,
        floor: f64,
    },
    AddN(Vec<usize>),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::ConcatRows(_) => "concat_rows",
            Op::Stack(_) => "stack",
            Op::MeanRows(_) => "mean_rows",
            Op::Row(..) => "row",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Cosine(..) => "cosine",
            Op::SqL2(..) => "sq_l2",
            Op::L2(..) => "l2",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pick(..) => "pick",
            Op::Log { .. } => "log",
            Op::AddN(_) => "add_n",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
}

/// Computation graph over a borrowed [`ParamStore`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    params: ParamGrads,
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable parameter, `None` if it did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }

    /// Gradient w.r.t. any node of the graph.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }
}

fn as_rows(t: &Tensor) -> (usize, usize) {
    match t.dims() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, t.len()),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    /// Graph with no parameters; only constants feed it.
    pub fn detached() -> Graph<'static> {
        Graph::new(&EMPTY_STORE)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v.0)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn val(&self, i: usize) -> &Tensor {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        value.ensure_finite(op.name())?;
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var(i);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Value::Param(id),
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(id, i);
        Var(i)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.val(a.0).shape2()?;
        let (kb, n) = self.val(b.0).shape2()?;
        if ka != kb {
            return Err(shape_err!("matmul [{m}x{ka}] x [{kb}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        k::matmul_acc(
            self.val(a.0).data(),
            self.val(b.0).data(),
            m,
            ka,
            n,
            &mut out,
        );
        self.push(
            Op::MatMul(a.0, b.0),
            Tensor::from_parts_unchecked(vec![m, n], out),
        )
    }

    /// `x·w + b` for `x` of shape `[t × i]` or `[i]`, `w` of shape `[i × o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.val(x.0);
        let (rows, i) = as_rows(xt);
        let (wi, o) = self.val(w.0).shape2()?;
        if xt.rank() > 2 || i != wi {
            return Err(shape_err!("linear: x {:?} w [{wi}x{o}]", xt.dims()));
        }
        if let Some(b) = b {
            if self.val(b.0).dims() != [o] {
                return Err(shape_err!(
                    "linear bias {:?} != [{o}]",
                    self.val(b.0).dims()
                ));
            }
        }
        let mut out = vec![0.0; rows * o];
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(bd);
            }
        }
        k::matmul_acc(xt.data(), self.val(w.0).data(), rows, i, o, &mut out);
        let dims = if xt.rank() == 1 {
            vec![o]
        } else {
            vec![rows, o]
        };
        self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            Tensor::from_parts_unchecked(dims, out),
        )
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a.0).dims() != self.val(b.0).dims() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.val(a.0).dims(),
                self.val(b.0).dims()
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_parts_unchecked(ta.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(Op::Add(a.0, b.0), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a.0).scaled(c);
        self.push(Op::Scale(a.0, c), t)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds vector `v` (`[d]`) to every row of `x` (`[t × d]`).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (rows, d) = self.val(x.0).shape2()?;
        if self.val(v.0).dims() != [d] {
            return Err(shape_err!(
                "add_row: [{rows}x{d}] + {:?}",
                self.val(v.0).dims()
            ));
        }
        let vd = self.val(v.0).data();
        let mut out = self.val(x.0).data().to_vec();
        for r in 0..rows {
            for (o, b) in out[r * d..(r + 1) * d].iter_mut().zip(vd) {
                *o += b;
            }
        }
        self.push(
            Op::AddRow(x.0, v.0),
            Tensor::from_parts_unchecked(vec![rows, d], out),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(k::gelu);
        self.push(Op::Gelu(a.0), t)
    }

    /// Row-wise layer normalization with affine gain and bias (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps {eps} must be > 0")));
        }
        let xt = self.val(x.0);
        let (rows, d) = as_rows(xt);
        if self.val(gain.0).dims() != [d] || self.val(bias.0).dims() != [d] {
            return Err(shape_err!("layer_norm affine params must be [{d}]"));
        }
        let out = k::layer_norm_forward(
            xt.data(),
            rows,
            d,
            self.val(gain.0).data(),
            self.val(bias.0).data(),
            eps,
        );
        let dims = xt.dims().to_vec();
        self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            Tensor::from_parts_unchecked(dims, out),
        )
    }

    /// Multi-head scaled dot-product attention over already projected q, k, v.
    pub fn attention(&mut self, q: Var, kv: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, d) = self.val(q.0).shape2()?;
        let (tk, dk) = self.val(kv.0).shape2()?;
        if self.val(v.0).dims() != [tk, dk] || dk != d {
            return Err(shape_err!("attention q [{tq}x{d}] k [{tk}x{dk}]"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = k::attention_forward(
            self.val(q.0).data(),
            self.val(kv.0).data(),
            self.val(v.0).data(),
            tq,
            tk,
            d,
            heads,
        );
        self.push(
            Op::Attention {
                q: q.0,
                k: kv.0,
                v: v.0,
                heads,
                probs,
            },
            Tensor::from_parts_unchecked(vec![tq, d], out),
        )
    }

    /// Concatenates `[t_i × d]` matrices along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let d = self.val(first.0).shape2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.val(p.0).shape2()?;
            if c != d {
                return Err(shape_err!("concat_rows widths {d} vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.val(p.0).data());
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            Tensor::from_parts_unchecked(vec![rows, d], data),
        )
    }

    /// Stacks same-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("stack of nothing"))?;
        let inner = self.val(first.0).dims().to_vec();
        let mut data = Vec::new();
        for p in parts {
            if self.val(p.0).dims() != inner.as_slice() {
                return Err(shape_err!(
                    "stack dims {:?} vs {:?}",
                    inner,
                    self.val(p.0).dims()
                ));
            }
            data.extend_from_slice(self.val(p.0).data());
        }
        let mut dims = vec![parts.len()];
        dims.extend(inner);
        self.push(
            Op::Stack(parts.iter().map(|v| v.0).collect()),
            Tensor::from_parts_unchecked(dims, data),
        )
    }

    /// Mean over rows of `[t × d]`, giving `[d]`. Invariant under row permutation.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.val(x.0).shape2()?;
        let out = k::mean_rows(self.val(x.0).data(), rows, d);
        self.push(
            Op::MeanRows(x.0),
            Tensor::from_parts_unchecked(vec![d], out),
        )
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (rows, d) = self.val(x.0).shape2()?;
        if i >= rows {
            return Err(shape_err!("row {i} of {rows}"));
        }
        let r = self.val(x.0).row(i).to_vec();
        self.push(Op::Row(x.0, i), Tensor::from_parts_unchecked(vec![d], r))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let n = *t.dims().last().unwrap_or(&1);
        let out = k::softmax_strided(t.data(), t.len() / n, n, 1);
        let dims = t.dims().to_vec();
        self.push(Op::Softmax(x.0), Tensor::from_parts_unchecked(dims, out))
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        if t.rank() != 1 {
            return Err(shape_err!(
                "log_softmax expects a vector, got {:?}",
                t.dims()
            ));
        }
        let lse = k::log_sum_exp(t.data());
        let out = t.map(|v| v - lse);
        self.push(Op::LogSoftmax(x.0), out)
    }

    /// `logsumexp(logits) - logits[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.val(logits.0);
        if t.rank() != 1 {
            return Err(shape_err!(
                "cross_entropy expects a vector, got {:?}",
                t.dims()
            ));
        }
        if label >= t.len() {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {} classes",
                t.len()
            )));
        }
        let loss = k::log_sum_exp(t.data()) - t.data()[label];
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                label,
            },
            Tensor::scalar(loss.max(0.0)),
        )
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "cosine")?;
        let c = cosine_value(self.val(a.0).data(), self.val(b.0).data())?;
        self.push(Op::Cosine(a.0, b.0), Tensor::scalar(c))
    }

    pub fn sq_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sq_l2")?;
        let d = sq_l2_value(self.val(a.0).data(), self.val(b.0).data());
        self.push(Op::SqL2(a.0, b.0), Tensor::scalar(d))
    }

    pub fn l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "l2")?;
        let d = sq_l2_value(self.val(a.0).data(), self.val(b.0).data()).sqrt();
        self.push(Op::L2(a.0, b.0), Tensor::scalar(d))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x.0).data().iter().fold(0.0, |a, v| a + v);
        self.push(Op::Sum(x.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0);
        let s = t.data().iter().fold(0.0, |a, v| a + v) / t.len() as f64;
        self.push(Op::Mean(x.0), Tensor::scalar(s))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.val(x.0);
        if i >= t.len() {
            return Err(shape_err!("pick {i} of {}", t.len()));
        }
        let v = t.data()[i];
        self.push(Op::Pick(x.0, i), Tensor::scalar(v))
    }

    /// Natural log, with inputs below `floor` clamped to `floor`.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.val(x.0);
        if t.data().iter().any(|&v| v < floor) {
            log::warn!("log input below floor {floor:e}; clamping");
        }
        let out = t.map(|v| v.max(floor).ln());
        self.push(Op::Log { x: x.0, floor }, out)
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("add_n of nothing"))?;
        let mut acc = self.val(first.0).clone();
        for p in &parts[1..] {
            acc.add_assign(self.val(p.0))?;
        }
        self.push(Op::AddN(parts.iter().map(|v| v.0).collect()), acc)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.val(x.0).clone().reshape(dims.to_vec())?;
        self.push(Op::Reshape(x.0), t)
    }

    /// Gradients of a scalar output w.r.t. every node and trainable parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let t = self.value(output);
        if t.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar output, got dims {:?}",
                t.dims()
            ));
        }
        let seed = Tensor::from_parts_unchecked(t.dims().to_vec(), vec![1.0]);
        self.backward_seeded(&[(output, seed)])
    }

    /// Vector-Jacobian product: propagates the given upstream gradients.
    ///
    /// Seeds on several nodes are summed, which is how a loss assembled outside
    /// this graph is pushed back through it.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = ParamGrads::zeros_like(self.params);
        for (v, g) in seeds {
            if g.dims() != self.value(*v).dims() && g.len() != self.value(*v).len() {
                return Err(shape_err!(
                    "seed dims {:?} vs node dims {:?}",
                    g.dims(),
                    self.value(*v).dims()
                ));
            }
            accum(&mut adj, v.0, g.data());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let g = g.with_dims_unchecked(self.val(i).dims());
            self.backprop_node(i, &g, &mut adj, &mut params)?;
            adj[i] = Some(g);
        }
        params.ensure_finite()?;
        Ok(Gradients {
            params,
            adjoints: adj,
        })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        params: &mut ParamGrads,
    ) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                if self.params.is_trainable(*id) {
                    params.accumulate(*id, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, kk) = self.val(*a).shape2()?;
                let n = self.val(*b).shape2()?.1;
                k::matmul_bt_acc(gd, self.val(*b).data(), m, kk, n, slot(adj, *a, m * kk));
                k::matmul_at_acc(self.val(*a).data(), gd, m, kk, n, slot(adj, *b, kk * n));
            }
            Op::Linear { x, w, b } => {
                let (rows, inw) = as_rows(self.val(*x));
                let o = self.val(*w).shape2()?.1;
                k::matmul_bt_acc(
                    gd,
                    self.val(*w).data(),
                    rows,
                    inw,
                    o,
                    slot(adj, *x, rows * inw),
                );
                k::matmul_at_acc(
                    self.val(*x).data(),
                    gd,
                    rows,
                    inw,
                    o,
                    slot(adj, *w, inw * o),
                );
                if let Some(b) = b {
                    let db = slot(adj, *b, o);
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                accum(adj, *a, gd);
                accum(adj, *b, gd);
            }
            Op::Sub(a, b) => {
                accum(adj, *a, gd);
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                accum(adj, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                let da: Vec<f64> = gd.iter().zip(tb).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gd.iter().zip(ta).map(|(g, x)| g * x).collect();
                accum(adj, *a, &da);
                accum(adj, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = gd.iter().map(|g| g * c).collect();
                accum(adj, *a, &da);
            }
            Op::AddRow(x, v) => {
                accum(adj, *x, gd);
                let (rows, d) = self.val(*x).shape2()?;
                let mut dv = vec![0.0; d];
                for r in 0..rows {
                    for (a, gv) in dv.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += gv;
                    }
                }
                accum(adj, *v, &dv);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(g, x)| g * k::gelu_grad(*x))
                    .collect();
                accum(adj, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xt = self.val(*x);
                let (rows, d) = as_rows(xt);
                let gain_d = self.val(*gain).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xt.data()[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let (mean, rstd) = k::row_stats(row, *eps);
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = grow[c] * gain_d[c];
                        dgain[c] += grow[c] * xhat[c];
                        dbias[c] += grow[c];
                    }
                    let m1 = dxhat.iter().fold(0.0, |a, v| a + v) / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).fold(0.0, |a, (u, v)| a + u * v) / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                accum(adj, *x, &dx);
                accum(adj, *gain, &dgain);
                accum(adj, *bias, &dbias);
            }
            Op::Attention {
                q,
                k: kk,
                v,
                heads,
                probs,
            } => {
                let (tq, d) = self.val(*q).shape2()?;
                let tk = self.val(*kk).shape2()?.0;
                let (dq, dk, dv) = k::attention_backward(
                    self.val(*q).data(),
                    self.val(*kk).data(),
                    self.val(*v).data(),
                    probs,
                    gd,
                    tq,
                    tk,
                    d,
                    *heads,
                );
                accum(adj, *q, &dq);
                accum(adj, *kk, &dk);
                accum(adj, *v, &dv);
            }
            Op::ConcatRows(parts) | Op::Stack(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    accum(adj, *p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::MeanRows(x) => {
                let (rows, d) = self.val(*x).shape2()?;
                let inv = 1.0 / rows as f64;
                let mut dx = vec![0.0; rows * d];
                for r in 0..rows {
                    for c in 0..d {
                        dx[r * d + c] = gd[c] * inv;
                    }
                }
                accum(adj, *x, &dx);
            }
            Op::Row(x, r) => {
                let (rows, d) = self.val(*x).shape2()?;
                let mut dx = vec![0.0; rows * d];
                dx[r * d..(r + 1) * d].copy_from_slice(gd);
                accum(adj, *x, &dx);
            }
            Op::Softmax(x) => {
                let y = self.val(i).data();
                let n = *self.val(*x).dims().last().unwrap_or(&1);
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(n).zip(gd.chunks(n)).enumerate() {
                    let inner = k::dot(yr, gr);
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - inner);
                    }
                }
                accum(adj, *x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = self.val(i).data();
                let total = gd.iter().fold(0.0, |a, v| a + v);
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(y)
                    .map(|(g, ly)| g - ly.exp() * total)
                    .collect();
                accum(adj, *x, &dx);
            }
            Op::CrossEntropy { logits, label } => {
                let l = self.val(*logits).data();
                let n = l.len();
                let p = k::softmax_strided(l, 1, n, 1);
                let mut dx: Vec<f64> = p.iter().map(|pk| pk * gd[0]).collect();
                dx[*label] -= gd[0];
                accum(adj, *logits, &dx);
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let na = k::dot(ad, ad).sqrt();
                let nb = k::dot(bd, bd).sqrt();
                let c = k::dot(ad, bd) / (na * nb);
                let da: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| gd[0] * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let db: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| gd[0] * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                accum(adj, *a, &da);
                accum(adj, *b, &db);
            }
            Op::SqL2(a, b) | Op::L2(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let factor = match &self.nodes[i].op {
                    Op::SqL2(..) => 2.0 * gd[0],
                    _ => {
                        let dist = self.val(i).data()[0];
                        if dist == 0.0 {
                            0.0
                        } else {
                            gd[0] / dist
                        }
                    }
                };
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| factor * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                accum(adj, *a, &da);
                accum(adj, *b, &db);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                accum(adj, *x, &vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                accum(adj, *x, &vec![gd[0] / n as f64; n]);
            }
            Op::Pick(x, idx) => {
                let mut dx = vec![0.0; self.val(*x).len()];
                dx[*idx] = gd[0];
                accum(adj, *x, &dx);
            }
            Op::Log { x, floor } => {
                let dx: Vec<f64> = gd
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(g, v)| if *v > *floor { g / v } else { 0.0 })
                    .collect();
                accum(adj, *x, &dx);
            }
            Op::AddN(parts) => {
                for p in parts {
                    accum(adj, *p, gd);
                }
            }
            Op::Reshape(x) => accum(adj, *x, gd),
        }
        Ok(())
    }
}

/// Adjoint buffer of node `idx`, zero-initialized on first use.
fn slot(adj: &mut [Option<Tensor>], idx: usize, len: usize) -> &mut [f64] {
    adj[idx]
        .get_or_insert_with(|| Tensor::from_parts_unchecked(vec![len], vec![0.0; len]))
        .data_mut()
}

fn accum(adj: &mut [Option<Tensor>], idx: usize, g: &[f64]) {
    match &mut adj[idx] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts_unchecked(vec![g.len()], g.to_vec()));
        }
    }
}

pub(crate) fn cosine_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = k::dot(a, a).sqrt();
    let nb = k::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid(
            "cosine similarity of a zero vector is undefined".into(),
        ));
    }
    Ok((k::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn sq_l2_value(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}
