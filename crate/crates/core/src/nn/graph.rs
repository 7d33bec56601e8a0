//! Tape-based reverse-mode differentiation over a fixed op vocabulary.
//!
//! A [`Graph`] records one forward evaluation against a borrowed
//! [`ParamStore`]. Nodes are appended in evaluation order, so the reverse of
//! insertion order is a valid topological order for the backward sweep.

use std::collections::HashMap;

use super::linalg::{col2im, gemm, im2col, Layout, Window};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which key positions a query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees only key `i`; used to switch token mixing off for diagnostics.
    SelfOnly,
}

impl AttnMask {
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => key <= query,
            AttnMask::SelfOnly => key == query,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, win: Window, out_ch: usize },
    ConvT2d { x: NodeId, w: NodeId, b: Option<NodeId>, win: Window, in_ch: usize },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Concat(Vec<NodeId>),
    Broadcast { v: NodeId },
    Reindex { x: NodeId, map: Vec<usize> },
    GatherRows { table: NodeId, idx: Vec<usize> },
    StraightThrough { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<f64> },
    ExpertLinear { x: NodeId, w: NodeId, b: NodeId, route: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    MeanAbs(NodeId, NodeId),
    MeanSq(NodeId, NodeId),
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a graph node (typically an input leaf); `None` when no gradient reached it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Add every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                store.param_mut(ParamId(i)).grad.add_assign(g);
            }
        }
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, trainable: None, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    /// Graph in which only parameters flagged in `trainable` receive gradients.
    pub fn with_trainable(store: &'p ParamStore, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), store.len());
        Self { store, trainable: Some(trainable), nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
    }

    /// Leaf that receives a gradient (e.g. an input whose sensitivity is inspected).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, no backward path.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let trainable = self.trainable.map_or(true, |t| t[id.0]);
        let n = self.push(self.store.value(id).clone(), Op::Param, trainable);
        self.param_nodes.insert(id, n);
        n
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut v = self.value(x).clone();
        v.scale_assign(s);
        let ng = self.needs(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let src = self.value(x);
        let v = Tensor::from_fn(src.shape(), |i| f(src.data()[i]));
        let ng = self.needs(x);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// 2-D convolution of `x[C,H,W]` with `w[O,C,k,k]` and optional bias `b[O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv2d: input {xs:?}, weight {ws:?}"));
        }
        let out_ch = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return shape_err(format!("conv2d bias {:?}", self.shape(b)));
            }
        }
        let win = Window::conv(xs[0], xs[1], xs[2], ws[2], stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {} larger than padded input {xs:?}", ws[2])))?;
        let mut cols = vec![0.0; win.rows() * win.cols()];
        im2col(self.value(x).data(), &win, &mut cols);
        let mut out = vec![0.0; out_ch * win.cols()];
        gemm(out_ch, win.rows(), win.cols(), self.value(w).data(), Layout::Normal, &cols, Layout::Normal, &mut out, 0.0);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, plane) in out.chunks_mut(win.cols()).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let v = Tensor::new(vec![out_ch, win.out_h, win.out_w], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, win, out_ch }, ng))
    }

    /// Transposed convolution of `x[C,H,W]` with `w[C,O,k,k]`; output side is
    /// `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return shape_err(format!("conv_transpose2d: input {xs:?}, weight {ws:?}"));
        }
        let (in_ch, out_ch, k) = (ws[0], ws[1], ws[2]);
        let out_h = ((xs[1] - 1) * stride + k).checked_sub(2 * pad);
        let out_w = ((xs[2] - 1) * stride + k).checked_sub(2 * pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return shape_err(format!("conv_transpose2d: padding {pad} too large"));
        };
        let win = Window::conv(out_ch, out_h, out_w, k, stride, pad)
            .filter(|w| w.out_h == xs[1] && w.out_w == xs[2])
            .ok_or_else(|| Error::shape("conv_transpose2d: inconsistent geometry".to_string()))?;
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return shape_err(format!("conv_transpose2d bias {:?}", self.shape(b)));
            }
        }
        let mut cols = vec![0.0; win.rows() * win.cols()];
        gemm(win.rows(), in_ch, win.cols(), self.value(w).data(), Layout::Transposed, self.value(x).data(), Layout::Normal, &mut cols, 0.0);
        let mut out = vec![0.0; out_ch * out_h * out_w];
        col2im(&cols, &win, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, plane) in out.chunks_mut(out_h * out_w).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let v = Tensor::new(vec![out_ch, out_h, out_w], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::ConvT2d { x, w, b, win, in_ch }, ng))
    }

    /// `x[N,D] @ w[D,O] + b[O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return shape_err(format!("linear: input {xs:?}, weight {ws:?}"));
        }
        let (n, d, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err(format!("linear bias {:?}", self.shape(b)));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, d, o, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Normal, &mut out, 1.0);
        let v = Tensor::new(vec![n, o], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::Linear { x, w, b }, ng))
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing".to_string());
        };
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return shape_err(format!("concat: {:?} vs trailing {tail:?}", s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Spatial broadcast of `v[D]` to `[D,H,W]`.
    pub fn broadcast(&mut self, v: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let vs = self.shape(v);
        if vs.len() != 1 {
            return shape_err(format!("broadcast expects a vector, got {vs:?}"));
        }
        let d = vs[0];
        let src = self.value(v).data();
        let hw = height * width;
        let t = Tensor::from_fn(&[d, height, width], |i| src[i / hw]);
        let ng = self.needs(v);
        Ok(self.push(t, Op::Broadcast { v }, ng))
    }

    /// `out[i] = x[map[i]]` with the given output shape. Covers reshape,
    /// transposes and patch rearrangements.
    pub fn reindex(&mut self, x: NodeId, map: Vec<usize>, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if map.len() != n || map.iter().any(|&i| i >= src.len()) {
            return shape_err(format!("reindex to {shape:?} from {:?}", self.shape(x)));
        }
        let t = Tensor::new(shape.to_vec(), map.iter().map(|&i| src[i]).collect())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reindex { x, map }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n = self.value(x).len();
        self.reindex(x, (0..n).collect(), shape)
    }

    /// `[C,H,W]` to `[H*W, C]`.
    pub fn chw_to_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err(format!("chw_to_rows on {s:?}"));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let map = (0..hw * c).map(|i| (i % c) * hw + i / c).collect();
        self.reindex(x, map, &[hw, c])
    }

    /// `[H*W, C]` to `[C,H,W]`.
    pub fn rows_to_chw(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != height * width {
            return shape_err(format!("rows_to_chw {s:?} -> {height}x{width}"));
        }
        let (hw, c) = (s[0], s[1]);
        let map = (0..hw * c).map(|i| (i % hw) * c + i / hw).collect();
        self.reindex(x, map, &[c, height, width])
    }

    /// Rows of `table[K,D]` selected by `idx`, giving `[len(idx), D]`.
    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return shape_err(format!("gather_rows from {s:?}"));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor::new(vec![idx.len(), d], data)?, Op::GatherRows { table, idx: idx.to_vec() }, ng))
    }

    /// Forward value of `quantized`; the gradient arriving here is copied to
    /// `pre_quant` unchanged and nothing flows into `quantized`.
    pub fn straight_through(&mut self, pre_quant: NodeId, quantized: NodeId) -> Result<NodeId> {
        self.binary_same_shape(pre_quant, quantized, "straight_through")?;
        let v = self.value(quantized).clone();
        let ng = self.needs(pre_quant);
        Ok(self.push(v, Op::StraightThrough { x: pre_quant }, ng))
    }

    /// Row-wise layer normalization of `x[N,D]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return shape_err(format!("layer_norm on {s:?}"));
        }
        let (n, d) = (s[0], s[1]);
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), n, d);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = Tensor::from_fn(&s, |i| xhat[i] * g[i % d] + b[i % d]);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Group normalization of `x[C,H,W]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || s[0] % groups != 0 || self.shape(gamma) != [s[0]] || self.shape(beta) != [s[0]] {
            return shape_err(format!("group_norm({groups}) on {s:?}"));
        }
        let hw = s[1] * s[2];
        let per_group = s[0] / groups * hw;
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), groups, per_group);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = Tensor::from_fn(&s, |i| xhat[i] * g[i / hw] + b[i / hw]);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, ng))
    }

    /// Scaled dot-product attention over `[N,D]` queries/keys/values split into `heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: AttnMask) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs || self.shape(v) != qs {
            return shape_err(format!("attention: q {qs:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)));
        }
        let (n, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("attention: dim {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if mask.allows(i, j) {
                        let s: f64 = (0..dh).map(|t| qv[i * d + off + t] * kv[j * d + off + t]).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                }
                let mut z = 0.0;
                for j in 0..n {
                    row[j] = if mask.allows(i, j) { (row[j] - max).exp() } else { 0.0 };
                    z += row[j];
                }
                for j in 0..n {
                    row[j] /= z;
                    if row[j] != 0.0 {
                        for t in 0..dh {
                            out[i * d + off + t] += row[j] * vv[j * d + off + t];
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Attention probabilities of an attention node, `[heads, N, N]` flattened.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row `n` of `x[N,D]` multiplied by expert `route[n]` of `w[E,D,K]`, plus `b[E,K]`.
    pub fn expert_linear(&mut self, x: NodeId, w: NodeId, b: NodeId, route: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[1] || self.shape(b) != [ws[0], ws[2]] || route.len() != xs[0] {
            return shape_err(format!("expert_linear: x {xs:?}, w {ws:?}, route len {}", route.len()));
        }
        let (e, d, k) = (ws[0], ws[1], ws[2]);
        if let Some(&bad) = route.iter().find(|&&r| r >= e) {
            return Err(Error::UnknownTextureId(bad));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xs[0] * k];
        for (n, &r) in route.iter().enumerate() {
            let o = &mut out[n * k..(n + 1) * k];
            o.copy_from_slice(&bv[r * k..(r + 1) * k]);
            gemm(1, d, k, &xv[n * d..(n + 1) * d], Layout::Normal, &wv[r * d * k..(r + 1) * d * k], Layout::Normal, o, 1.0);
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(vec![xs[0], k], out)?, Op::ExpertLinear { x, w, b, route: route.to_vec() }, ng))
    }

    /// Mean softmax cross-entropy of `logits[N,K]` over rows with a target.
    /// Returns a zero scalar when no row is scored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || targets.iter().flatten().any(|&t| t >= s[1]) {
            return shape_err(format!("cross_entropy on {s:?} with {} targets", targets.len()));
        }
        let k = s[1];
        let probs = softmax_rows(self.value(logits).data(), k);
        let count = targets.iter().flatten().count();
        let mut loss = 0.0;
        for (n, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                loss -= probs[n * k + t].max(1e-300).ln();
            }
        }
        if count > 0 {
            loss /= count as f64;
        }
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, ng))
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mean_abs")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let m = va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum::<f64>() / va.len().max(1) as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(m), Op::MeanAbs(a, b), ng))
    }

    /// `mean((a - b)^2)`.
    pub fn mean_sq(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mean_sq")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let m = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len().max(1) as f64;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(m), Op::MeanSq(a, b), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        if !self.value(loss).is_finite() || (cfg!(debug_assertions) && !self.all_finite()) {
            return Err(Error::NonFiniteObjective);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, nid) in &self.param_nodes {
            if self.nodes[nid.0].needs_grad {
                params[pid.0] = grads[nid.0].clone();
            }
        }
        if cfg!(debug_assertions) && !grads.iter().flatten().all(Tensor::is_finite) {
            return Err(Error::NonFiniteObjective);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backward_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| d.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * vb[i]));
                self.acc(grads, *b, |d| d.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * va[i]));
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| axpy(d, g, *s)),
            Op::Relu(x) => {
                let v = self.value(*x).data();
                self.acc(grads, *x, |d| d.iter_mut().enumerate().for_each(|(i, o)| if v[i] > 0.0 { *o += g[i] }));
            }
            Op::Gelu(x) => {
                let v = self.value(*x).data();
                self.acc(grads, *x, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o += g[i] * gelu_grad(v[i])));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                self.acc(grads, *x, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o += g[i] * y[i] * (1.0 - y[i])));
            }
            Op::Conv2d { x, w, b, win, out_ch } => {
                let (out_ch, cols_n, rows) = (*out_ch, win.cols(), win.rows());
                if self.needs(*w) {
                    let mut cols = vec![0.0; rows * cols_n];
                    im2col(self.value(*x).data(), win, &mut cols);
                    self.acc(grads, *w, |d| gemm(out_ch, cols_n, rows, g, Layout::Normal, &cols, Layout::Transposed, d, 1.0));
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for (o, plane) in g.chunks(cols_n).enumerate() {
                            d[o] += plane.iter().sum::<f64>();
                        }
                    });
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * cols_n];
                    gemm(rows, out_ch, cols_n, self.value(*w).data(), Layout::Transposed, g, Layout::Normal, &mut dcols, 0.0);
                    self.acc(grads, *x, |d| col2im(&dcols, win, d));
                }
            }
            Op::ConvT2d { x, w, b, win, in_ch } => {
                let (in_ch, cols_n, rows) = (*in_ch, win.cols(), win.rows());
                let mut dcols = vec![0.0; rows * cols_n];
                im2col(g, win, &mut dcols);
                if self.needs(*w) {
                    self.acc(grads, *w, |d| gemm(in_ch, cols_n, rows, self.value(*x).data(), Layout::Normal, &dcols, Layout::Transposed, d, 1.0));
                }
                if let Some(b) = b {
                    let plane_len = win.height * win.width;
                    self.acc(grads, *b, |d| {
                        for (o, plane) in g.chunks(plane_len).enumerate() {
                            d[o] += plane.iter().sum::<f64>();
                        }
                    });
                }
                if self.needs(*x) {
                    self.acc(grads, *x, |d| gemm(in_ch, rows, cols_n, self.value(*w).data(), Layout::Normal, &dcols, Layout::Normal, d, 1.0));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                if self.needs(*x) {
                    self.acc(grads, *x, |d| gemm(n, dout, din, g, Layout::Normal, self.value(*w).data(), Layout::Transposed, d, 1.0));
                }
                if self.needs(*w) {
                    self.acc(grads, *w, |d| gemm(din, n, dout, self.value(*x).data(), Layout::Transposed, g, Layout::Normal, d, 1.0));
                }
                if let Some(b) = b {
                    self.acc(grads, *b, |d| {
                        for row in g.chunks(dout) {
                            axpy(d, row, 1.0);
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.acc(grads, *p, |d| axpy(d, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::Broadcast { v } => {
                let d_len = self.value(*v).len();
                let hw = g.len() / d_len.max(1);
                self.acc(grads, *v, |d| {
                    for (c, plane) in g.chunks(hw).enumerate() {
                        d[c] += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::Reindex { x, map } => {
                self.acc(grads, *x, |d| {
                    for (i, &src) in map.iter().enumerate() {
                        d[src] += g[i];
                    }
                });
            }
            Op::GatherRows { table, idx: rows } => {
                let dim = self.shape(*table)[1];
                self.acc(grads, *table, |d| {
                    for (n, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * dim..(r + 1) * dim], &g[n * dim..(n + 1) * dim], 1.0);
                    }
                });
            }
            Op::StraightThrough { x } => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let dim = self.shape(*x)[1];
                let gm = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| g.iter().enumerate().for_each(|(i, gi)| d[i % dim] += gi * xhat[i]));
                self.acc(grads, *beta, |d| g.iter().enumerate().for_each(|(i, gi)| d[i % dim] += gi));
                if self.needs(*x) {
                    let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * gm[i % dim]).collect();
                    self.acc(grads, *x, |d| normalize_backward(&dxhat, xhat, inv_std, dim, d));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let per_group = s[0] / groups * hw;
                let gm = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| g.iter().enumerate().for_each(|(i, gi)| d[i / hw] += gi * xhat[i]));
                self.acc(grads, *beta, |d| g.iter().enumerate().for_each(|(i, gi)| d[i / hw] += gi));
                if self.needs(*x) {
                    let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * gm[i / hw]).collect();
                    self.acc(grads, *x, |d| normalize_backward(&dxhat, xhat, inv_std, per_group, d));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.shape(*q);
                let (n, d) = (s[0], s[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        for j in 0..n {
                            dp[j] = (0..dh).map(|t| g[i * d + off + t] * vv[j * d + off + t]).sum();
                            if p[j] != 0.0 {
                                for t in 0..dh {
                                    dv[j * d + off + t] += p[j] * g[i * d + off + t];
                                }
                            }
                        }
                        let dot: f64 = (0..n).map(|j| p[j] * dp[j]).sum();
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds != 0.0 {
                                for t in 0..dh {
                                    dq[i * d + off + t] += ds * kv[j * d + off + t];
                                    dk[j * d + off + t] += ds * qv[i * d + off + t];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, |o| axpy(o, &dq, 1.0));
                self.acc(grads, *k, |o| axpy(o, &dk, 1.0));
                self.acc(grads, *v, |o| axpy(o, &dv, 1.0));
            }
            Op::ExpertLinear { x, w, b, route } => {
                let ws = self.shape(*w);
                let (dim, k) = (ws[1], ws[2]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if self.needs(*x) {
                    self.acc(grads, *x, |d| {
                        for (n, &r) in route.iter().enumerate() {
                            gemm(1, k, dim, &g[n * k..(n + 1) * k], Layout::Normal, &wv[r * dim * k..(r + 1) * dim * k], Layout::Transposed, &mut d[n * dim..(n + 1) * dim], 1.0);
                        }
                    });
                }
                if self.needs(*w) {
                    self.acc(grads, *w, |d| {
                        for (n, &r) in route.iter().enumerate() {
                            gemm(dim, 1, k, &xv[n * dim..(n + 1) * dim], Layout::Normal, &g[n * k..(n + 1) * k], Layout::Normal, &mut d[r * dim * k..(r + 1) * dim * k], 1.0);
                        }
                    });
                }
                self.acc(grads, *b, |d| {
                    for (n, &r) in route.iter().enumerate() {
                        axpy(&mut d[r * k..(r + 1) * k], &g[n * k..(n + 1) * k], 1.0);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let k = self.shape(*logits)[1];
                let s = g[0] / *count as f64;
                self.acc(grads, *logits, |d| {
                    for (n, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for j in 0..k {
                                d[n * k + j] += s * probs[n * k + j];
                            }
                            d[n * k + t] -= s;
                        }
                    }
                });
            }
            Op::MeanAbs(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0] / va.len().max(1) as f64;
                let sign = |i: usize| {
                    let diff = va[i] - vb[i];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.acc(grads, *a, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o += s * sign(i)));
                self.acc(grads, *b, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o -= s * sign(i)));
            }
            Op::MeanSq(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / va.len().max(1) as f64;
                self.acc(grads, *a, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o += s * (va[i] - vb[i])));
                self.acc(grads, *b, |d| d.iter_mut().enumerate().for_each(|(i, o)| *o -= s * (va[i] - vb[i])));
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0])),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.needs(id) {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(slot.data_mut());
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

const NORM_EPS: f64 = 1e-5;

fn normalize_groups(x: &[f64], groups: usize, size: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; groups];
    for gi in 0..groups {
        let seg = &x[gi * size..(gi + 1) * size];
        let mean = seg.iter().sum::<f64>() / size as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[gi] = is;
        for (o, v) in xhat[gi * size..(gi + 1) * size].iter_mut().zip(seg) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], size: usize, dx: &mut [f64]) {
    for (gi, is) in inv_std.iter().enumerate() {
        let r = gi * size..(gi + 1) * size;
        let dh = &dxhat[r.clone()];
        let xh = &xhat[r.clone()];
        let mean_dh = dh.iter().sum::<f64>() / size as f64;
        let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / size as f64;
        for ((o, a), b) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o += is * (a - mean_dh - b * mean_dhx);
        }
    }
}

/// Numerically stable softmax over consecutive rows of length `k`.
pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
