//! Layer vocabulary: each layer owns parameter handles and knows how to
//! append its forward computation to a [`Graph`].

use rand::Rng;

use super::graph::{AttnMask, Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution with a 4×4 kernel: doubles both spatial sides.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upsample2x {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // Each output pixel receives 4 taps per input channel.
        let fan_in = (cin * 4) as f64;
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[cin, cout, 4, 4], (2.0 / fan_in).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let mut l = Self::without_bias(store, name, din, dout, rng);
        l.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout])));
        l
    }

    pub fn without_bias<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[din, dout], (1.0 / din as f64).sqrt(), rng));
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    /// Apply to a single vector `[D]`, returning `[O]`.
    pub fn forward_vec(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let d = g.shape(x)[0];
        let row = g.reshape(x, &[1, d])?;
        let y = self.forward(g, row)?;
        let o = g.shape(y)[1];
        g.reshape(y, &[o])
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab, dim], std, rng));
        Self { table, vocab }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<NodeId> {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.group_norm(x, self.groups, gm, bt)
    }
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            // A key bias only shifts every score in a row equally, which softmax ignores.
            key: Linear::without_bias(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: AttnMask) -> Result<NodeId> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, a)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: AttnMask) -> Result<NodeId> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// One linear classifier per expert; each row is scored by the expert named in its route.
#[derive(Clone, Debug)]
pub struct ExpertHeads {
    pub weight: ParamId,
    pub bias: ParamId,
    pub experts: usize,
    pub classes: usize,
}

impl ExpertHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, experts: usize, dim: usize, classes: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[experts, dim, classes], (1.0 / dim as f64).sqrt(), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[experts, classes]));
        Self { weight, bias, experts, classes }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, route: &[usize]) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.expert_linear(x, w, b, route)
    }
}
