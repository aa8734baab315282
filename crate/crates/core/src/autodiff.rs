//! A small reverse-mode automatic differentiation tape over row-major
//! `f64` matrices.
//!
//! Every model in this crate is expressed as a sequence of [`Graph`] ops.
//! Parameters live in a [`ParamStore`]; a store can be marked frozen, in
//! which case its tensors enter the graph as constants and no gradient is
//! ever recorded for them. That is how the EMA target encoders and the
//! frozen dynamics model are kept out of every backward pass.
//!
//! Batched token tensors use a sample-major layout: a batch of `G` samples
//! with `N` tokens each is a `(G * N) x H` matrix whose row `g * N + n` is
//! token `n` of sample `g`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis};
use sha2::{Digest, Sha256};

pub type Tensor = Array2<f64>;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors.
///
/// Cloning a store yields an independent store with a new identity, so
/// gradients computed against the clone can never be confused with
/// gradients of the original.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    frozen: bool,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            frozen: self.frozen,
            names: self.names.clone(),
            values: self.values.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            frozen: false,
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Registers a tensor. Panics on a duplicate name: model construction
    /// bugs are not recoverable.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads, in
    /// registration order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupConcat {
        parts: Vec<(Var, usize)>,
        groups: usize,
    },
    Tile(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    GroupMean(Var, usize),
    GroupMax(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    RowL2Normalize(Var, Vec<f64>),
    Square(Var),
    Abs(Var),
    SumAll(Var),
    MaskRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
}

#[derive(Clone, Copy, Debug)]
struct AttnShape {
    groups: usize,
    nq: usize,
    nk: usize,
    heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    store_uid: Option<u64>,
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Identity of the only store that received gradients, if any did.
    pub fn store_uid(&self) -> Option<u64> {
        self.store_uid
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all parameter gradients so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in self.params.values_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        norm
    }
}

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Recording tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_store: Option<u64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Constant, false)
    }

    /// A leaf that records its gradient, for checks with respect to inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Input, true)
    }

    /// Brings a parameter into the graph. Parameters of a frozen store are
    /// plain constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).clone();
        if store.is_frozen() {
            return self.push(value, Op::Constant, false);
        }
        match self.grad_store {
            None => self.grad_store = Some(store.uid()),
            Some(uid) => assert_eq!(
                uid,
                store.uid(),
                "a graph may only train parameters of a single store"
            ),
        }
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} @ {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(self.shape(bias).0, 1);
        assert_eq!(self.shape(a).1, self.shape(bias).1);
        let v = self.value(a) + self.value(bias);
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with a `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.dim();
        assert_eq!(self.shape(gain), (1, n));
        assert_eq!(self.shape(bias), (1, n));
        let mut xhat = Tensor::zeros((rows, n));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (o, &x) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (x - mean) * inv;
            }
        }
        let v = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape must preserve element count");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(s![.., start..start + len])
            .to_owned();
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    /// Per-sample concatenation along the token axis. Each part is given
    /// with its token count per group.
    pub fn group_concat(&mut self, parts: &[(Var, usize)], groups: usize) -> Var {
        let cols = self.shape(parts[0].0).1;
        for &(p, n) in parts {
            assert_eq!(self.shape(p), (groups * n, cols), "group_concat part shape");
        }
        let per: usize = parts.iter().map(|p| p.1).sum();
        let mut v = Tensor::zeros((groups * per, cols));
        for g in 0..groups {
            let mut row = g * per;
            for &(p, n) in parts {
                v.slice_mut(s![row..row + n, ..])
                    .assign(&self.value(p).slice(s![g * n..(g + 1) * n, ..]));
                row += n;
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            v,
            Op::GroupConcat {
                parts: parts.to_vec(),
                groups,
            },
            ng,
        )
    }

    /// Repeats all rows of `a` `times` times along the row axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let views: Vec<_> = (0..times).map(|_| av.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("tile");
        let ng = self.ng(a);
        self.push(v, Op::Tile(a, times), ng)
    }

    /// Multi-head scaled dot-product attention, independently per group:
    /// `q` is `(groups * nq) x d`, `k` and `v` are `(groups * nk) x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        assert_eq!(self.shape(v), (kr, kd));
        assert_eq!(d, kd, "attention width");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        assert_eq!(qr % groups, 0);
        assert_eq!(kr % groups, 0);
        let shape = AttnShape {
            groups,
            nq: qr / groups,
            nk: kr / groups,
            heads,
        };
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), shape);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        )
    }

    /// Softmax rows of an attention node, laid out as
    /// `[group][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over each consecutive block of `group_size` rows.
    pub fn group_mean(&mut self, a: Var, group_size: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.dim();
        assert_eq!(rows % group_size, 0);
        let groups = rows / group_size;
        let v = av
            .to_shape((groups, group_size, cols))
            .expect("group_mean")
            .mean_axis(Axis(1))
            .expect("non-empty groups");
        let ng = self.ng(a);
        self.push(v, Op::GroupMean(a, group_size), ng)
    }

    /// Elementwise max over each consecutive block of `group_size` rows.
    pub fn group_max(&mut self, a: Var, group_size: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.dim();
        assert_eq!(rows % group_size, 0);
        let groups = rows / group_size;
        let mut v = Tensor::zeros((groups, cols));
        let mut arg = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group_size;
                for r in g * group_size..(g + 1) * group_size {
                    if av[[r, c]] > av[[best, c]] {
                        best = r;
                    }
                }
                v[[g, c]] = av[[best, c]];
                arg[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::GroupMax(a, arg), ng)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut v = Tensor::zeros((idx.len(), tv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&tv.row(i));
        }
        let ng = self.ng(table);
        self.push(v, Op::Gather(table, idx.to_vec()), ng)
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .outer_iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut v = av.clone();
        for (mut row, &n) in v.outer_iter_mut().zip(&norms) {
            row.mapv_inplace(|x| x / n);
        }
        let ng = self.ng(a);
        self.push(v, Op::RowL2Normalize(a, norms), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    /// Replaces row `i` of `x` with the `1 x n` `token` wherever `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(mask.len(), rows);
        assert_eq!(self.shape(token), (1, cols));
        let mut v = self.value(x).clone();
        let tv = self.value(token).row(0).to_owned();
        for (mut row, &m) in v.outer_iter_mut().zip(mask) {
            if m {
                row.assign(&tv);
            }
        }
        let ng = self.ng(x) || self.ng(token);
        self.push(
            v,
            Op::MaskRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut out = Gradients {
            store_uid: self.grad_store,
            ..Default::default()
        };
        if !self.ng(loss) {
            out.store_uid = None;
            return out;
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(existing) => *existing += &t,
                        slot => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*a, g);
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(*b, -&g);
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(*a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*bias) {
                        acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gain) {
                        acc(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gain);
                        let n = xhat.ncols() as f64;
                        let mut dx = Tensor::zeros(xhat.dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh = dh.sum();
                            let sum_dh_xh = dh.dot(&xh);
                            let inv = inv_std[r];
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = inv / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        acc(*x, dx);
                    }
                }
                Op::Reshape(a) => {
                    let dim = self.shape(*a);
                    acc(*a, g.into_shape_with_order(dim).expect("reshape back"));
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.ng(p) {
                            acc(p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Tensor::zeros(self.shape(*a));
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::GroupConcat { parts, groups } => {
                    let per: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, n) in parts {
                        if self.ng(p) {
                            let mut d = Tensor::zeros(self.shape(p));
                            for gi in 0..*groups {
                                let src = gi * per + offset;
                                d.slice_mut(s![gi * n..(gi + 1) * n, ..])
                                    .assign(&g.slice(s![src..src + n, ..]));
                            }
                            acc(p, d);
                        }
                        offset += n;
                    }
                }
                Op::Tile(a, times) => {
                    let rows = self.shape(*a).0;
                    let mut d = Tensor::zeros(self.shape(*a));
                    for t in 0..*times {
                        d += &g.slice(s![t * rows..(t + 1) * rows, ..]);
                    }
                    acc(*a, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                        *shape,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::GroupMean(a, size) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Tensor::zeros((rows, cols));
                    let inv = 1.0 / *size as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            d[[r, c]] = g[[r / size, c]] * inv;
                        }
                    }
                    acc(*a, d);
                }
                Op::GroupMax(a, arg) => {
                    let mut d = Tensor::zeros(self.shape(*a));
                    let cols = g.ncols();
                    for (i, &r) in arg.iter().enumerate() {
                        d[[r, i % cols]] += g[[i / cols, i % cols]];
                    }
                    acc(*a, d);
                }
                Op::Gather(t, idx) => {
                    let mut d = Tensor::zeros(self.shape(*t));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(*t, d);
                }
                Op::RowL2Normalize(a, norms) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let proj = y.row(r).dot(&g.row(r));
                        for c in 0..y.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * proj) / norms[r];
                        }
                    }
                    acc(*a, d);
                }
                Op::Square(a) => acc(*a, &g * &(self.value(*a) * 2.0)),
                Op::Abs(a) => {
                    let sign = self.value(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(*a, &g * &sign);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(*a, Tensor::from_elem(self.shape(*a), s));
                }
                Op::MaskRows { x, token, mask } => {
                    if self.ng(*token) {
                        let mut dt = Tensor::zeros((1, g.ncols()));
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                let mut row = dt.row_mut(0);
                                row += &g.row(r);
                            }
                        }
                        acc(*token, dt);
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for (mut row, &m) in dx.outer_iter_mut().zip(mask) {
                            if m {
                                row.fill(0.0);
                            }
                        }
                        acc(*x, dx);
                    }
                }
            }
        }
        if out.params.is_empty() {
            out.store_uid = None;
        }
        out
    }
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, sh: AttnShape) -> (Tensor, Vec<f64>) {
    let d = q.ncols();
    let hd = d / sh.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let qs = q.as_slice().expect("row-major");
    let ks = k.as_slice().expect("row-major");
    let vs = v.as_slice().expect("row-major");
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; sh.groups * sh.heads * sh.nq * sh.nk];
    let mut scores = vec![0.0; sh.nk];
    for g in 0..sh.groups {
        for h in 0..sh.heads {
            let c0 = h * hd;
            for i in 0..sh.nq {
                let qrow = (g * sh.nq + i) * d + c0;
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let krow = (g * sh.nk + j) * d + c0;
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += qs[qrow + c] * ks[krow + c];
                    }
                    *sc = dot * scale;
                    max = max.max(*sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let pbase = ((g * sh.heads + h) * sh.nq + i) * sh.nk;
                for (j, sc) in scores.iter().enumerate() {
                    let p = sc / z;
                    probs[pbase + j] = p;
                    let vrow = (g * sh.nk + j) * d + c0;
                    for c in 0..hd {
                        out[qrow + c] += p * vs[vrow + c];
                    }
                }
            }
        }
    }
    (
        Tensor::from_shape_vec(q.dim(), out).expect("attention output"),
        probs,
    )
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    dout: &Tensor,
    sh: AttnShape,
) -> (Tensor, Tensor, Tensor) {
    let d = q.ncols();
    let hd = d / sh.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let qs = q.as_slice().expect("row-major");
    let ks = k.as_slice().expect("row-major");
    let vs = v.as_slice().expect("row-major");
    let dos = dout.as_slice().expect("row-major");
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; sh.nk];
    for g in 0..sh.groups {
        for h in 0..sh.heads {
            let c0 = h * hd;
            for i in 0..sh.nq {
                let qrow = (g * sh.nq + i) * d + c0;
                let pbase = ((g * sh.heads + h) * sh.nq + i) * sh.nk;
                let mut weighted = 0.0;
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vrow = (g * sh.nk + j) * d + c0;
                    let p = probs[pbase + j];
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += dos[qrow + c] * vs[vrow + c];
                        dv[vrow + c] += p * dos[qrow + c];
                    }
                    *dpj = dot;
                    weighted += p * dot;
                }
                for (j, dpj) in dp.iter().enumerate() {
                    let ds = probs[pbase + j] * (dpj - weighted) * scale;
                    let krow = (g * sh.nk + j) * d + c0;
                    for c in 0..hd {
                        dq[qrow + c] += ds * ks[krow + c];
                        dk[krow + c] += ds * qs[qrow + c];
                    }
                }
            }
        }
    }
    (
        Tensor::from_shape_vec(q.dim(), dq).expect("dq"),
        Tensor::from_shape_vec(k.dim(), dk).expect("dk"),
        Tensor::from_shape_vec(v.dim(), dv).expect("dv"),
    )
}
