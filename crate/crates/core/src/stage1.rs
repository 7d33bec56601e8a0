//! Stage I: attribute-conditioned translation of a pose map into a parsing map.
//!
//! Shape attributes are embedded per attribute, fused into one vector
//! `f_shape`, and spatially broadcast into every encoder level of a U-Net
//! whose decoder sees it only through the skip connections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::layers::{Conv2d, Embedding, Linear, Upsample2x};
use crate::nn::train::{train_minibatch, TrainLog, TrainOptions};
use crate::nn::{softmax_rows, Checkpoint, Graph, NodeId, ParamStore, Tensor};
use crate::synth::{class, gen_sample, part, AttributeSet, AttributeSpec, ParsingMap, PoseMap, Sample, SHAPE_CLASS_COUNTS};

pub const CHECKPOINT_KIND: &str = "stage1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Width of each per-attribute embedding.
    pub embed_dim: usize,
    /// Width of the fused shape vector.
    pub shape_dim: usize,
    /// Output channels of the stride-2 encoder levels; `n` levels need sides divisible by `2^n`.
    pub widths: Vec<usize>,
    /// Channels of the full-resolution output block.
    pub out_width: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { embed_dim: 32, shape_dim: 64, widths: vec![24, 32, 48, 64], out_width: 16 }
    }
}

impl Stage1Config {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.shape_dim == 0 || self.out_width == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid stage1 config {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel class scores `[L, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsingLogits(pub Tensor);

impl ParsingLogits {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Per-pixel softmax, `[L, H, W]`.
    pub fn probabilities(&self) -> Tensor {
        let s = self.0.shape();
        let (l, hw) = (s[0], s[1] * s[2]);
        let rows: Vec<f64> = (0..hw * l).map(|i| self.0.data()[(i % l) * hw + i / l]).collect();
        let p = softmax_rows(&rows, l);
        Tensor::from_fn(s, |i| p[(i % hw) * l + i / hw])
    }

    /// Argmax per pixel, ties to the lower class.
    pub fn argmax(&self) -> ParsingMap {
        let s = self.0.shape();
        let (l, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let data = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..l {
                    if self.0.data()[c * hw + p] > self.0.data()[best * hw + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        ParsingMap::new(LabelGrid::new(h, w, data).expect("sized")).expect("labels < L")
    }
}

/// Append `f_shape[D]` to every spatial position of `feature[C,H,W]`, giving `[C+D,H,W]`.
pub fn broadcast_concat(g: &mut Graph, feature: NodeId, f_shape: NodeId) -> Result<NodeId> {
    let s = g.shape(feature).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("broadcast_concat on {s:?}")));
    }
    let b = g.broadcast(f_shape, s[1], s[2])?;
    g.concat(&[feature, b])
}

/// One training item: pose, shape attributes and target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Example {
    pub pose: PoseMap,
    pub shape: [usize; 3],
    pub target: ParsingMap,
}

impl Stage1Example {
    pub fn from_sample(s: &Sample) -> Self {
        Self { pose: s.pose.clone(), shape: s.attrs.shape(), target: s.parsing.clone() }
    }
}

#[derive(Clone, Debug)]
struct Net {
    config: Stage1Config,
    embedders: Vec<Embedding>,
    fusion: Linear,
    enc: Vec<Conv2d>,
    bottleneck: Conv2d,
    ups: Vec<Upsample2x>,
    dec: Vec<Conv2d>,
    out_up: Upsample2x,
    out_conv: Conv2d,
    head: Conv2d,
}

impl Net {
    fn new(store: &mut ParamStore, config: Stage1Config, rng: &mut ChaCha8Rng) -> Self {
        let embedders = SHAPE_CLASS_COUNTS
            .iter()
            .enumerate()
            .map(|(i, &n)| Embedding::new(store, &format!("stage1.embed{i}"), n, config.embed_dim, 1.0, rng))
            .collect();
        let fusion = Linear::without_bias(store, "stage1.fusion", 3 * config.embed_dim, config.shape_dim, rng);
        let w = config.widths.clone();
        let n = w.len();
        let d = config.shape_dim;
        let mut enc = Vec::new();
        let mut cin = part::COUNT;
        for (i, &c) in w.iter().enumerate() {
            enc.push(Conv2d::new(store, &format!("stage1.enc{i}"), cin + d, c, 3, 2, rng));
            cin = c;
        }
        let bottleneck = Conv2d::new(store, "stage1.bottleneck", w[n - 1], w[n - 1], 3, 1, rng);
        // Decoder level i upsamples from encoder level i+1's resolution to level i's and merges its skip.
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        let mut below = w[n - 1];
        for i in (0..n - 1).rev() {
            ups.push(Upsample2x::new(store, &format!("stage1.up{i}"), below, w[i], rng));
            dec.push(Conv2d::new(store, &format!("stage1.dec{i}"), 2 * w[i], w[i], 3, 1, rng));
            below = w[i];
        }
        let out_up = Upsample2x::new(store, "stage1.out_up", below, config.out_width, rng);
        let out_conv = Conv2d::new(store, "stage1.out_conv", config.out_width + part::COUNT, config.out_width, 3, 1, rng);
        let head = Conv2d::new(store, "stage1.head", config.out_width, class::COUNT, 1, 1, rng);
        Self { config, embedders, fusion, enc, bottleneck, ups, dec, out_up, out_conv, head }
    }

    fn embed(&self, g: &mut Graph, shape: [usize; 3]) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(3);
        for (i, (&a, e)) in shape.iter().zip(&self.embedders).enumerate() {
            if a >= e.vocab {
                return Err(Error::InvalidAttribute(format!("shape attribute {i} = {a} (expected < {})", e.vocab)));
            }
            let row = e.forward(g, &[a])?;
            parts.push(g.reshape(row, &[self.config.embed_dim])?);
        }
        let cat = g.concat(&parts)?;
        self.fusion.forward_vec(g, cat)
    }

    /// Logits `[L,H,W]` from a one-hot pose `[7,H,W]`.
    fn forward(&self, g: &mut Graph, pose: &Tensor, shape: [usize; 3]) -> Result<NodeId> {
        let s = pose.shape();
        let unit = 1 << self.enc.len();
        if s.len() != 3 || s[0] != part::COUNT || s[1] % unit != 0 || s[2] % unit != 0 {
            return Err(Error::shape(format!("pose {s:?}: expected [{}, H, W] with sides divisible by {unit}", part::COUNT)));
        }
        let f_shape = self.embed(g, shape)?;
        let x0 = g.constant(pose.clone());
        let mut skips = Vec::new();
        let mut x = x0;
        for conv in &self.enc {
            let inp = broadcast_concat(g, x, f_shape)?;
            let y = conv.forward(g, inp)?;
            x = g.relu(y);
            skips.push(x);
        }
        let y = self.bottleneck.forward(g, x)?;
        x = g.relu(y);
        for (k, (up, conv)) in self.ups.iter().zip(&self.dec).enumerate() {
            let skip = skips[skips.len() - 2 - k];
            let u = up.forward(g, x)?;
            let u = g.relu(u);
            let cat = g.concat(&[u, skip])?;
            let y = conv.forward(g, cat)?;
            x = g.relu(y);
        }
        let u = self.out_up.forward(g, x)?;
        let u = g.relu(u);
        let cat = g.concat(&[u, x0])?;
        let y = self.out_conv.forward(g, cat)?;
        let y = g.relu(y);
        self.head.forward(g, y)
    }

    fn loss(&self, g: &mut Graph, pose: &Tensor, shape: [usize; 3], target: &LabelGrid) -> Result<NodeId> {
        let logits = self.forward(g, pose, shape)?;
        if g.shape(logits)[1..] != [target.height(), target.width()] {
            return Err(Error::shape("pose and parsing sizes differ"));
        }
        let rows = g.chw_to_rows(logits)?;
        let targets: Vec<Option<usize>> = target.data().iter().map(|&l| Some(l as usize)).collect();
        g.cross_entropy(rows, &targets)
    }
}

/// Pose-to-parsing network with its parameters.
#[derive(Clone, Debug)]
pub struct PoseToParsing {
    net: Net,
    store: ParamStore,
}

impl PoseToParsing {
    pub fn new(config: Stage1Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, config, &mut rng);
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.net.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `f_shape` for a shape-attribute triple (sleeve, lower length, neckline).
    pub fn embed_attributes(&self, shape: [usize; 3]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.net.embed(&mut g, shape)?;
        Ok(g.value(v).clone())
    }

    pub fn predict_logits(&self, pose: &PoseMap, shape: [usize; 3]) -> Result<ParsingLogits> {
        let mut g = Graph::new(&self.store);
        let y = self.net.forward(&mut g, &pose.one_hot(), shape)?;
        Ok(ParsingLogits(g.value(y).clone()))
    }

    pub fn predict(&self, pose: &PoseMap, attrs: &AttributeSet) -> Result<ParsingMap> {
        attrs.validate()?;
        Ok(self.predict_logits(pose, attrs.shape())?.argmax())
    }

    /// Mean per-pixel cross-entropy of one example, built on `g`.
    pub fn loss(&self, g: &mut Graph, ex: &Stage1Example) -> Result<NodeId> {
        self.net.loss(g, &ex.pose.one_hot(), ex.shape, ex.target.grid())
    }

    /// Same loss on a raw one-hot pose of any size the encoder depth allows;
    /// used to exercise miniature copies of the network.
    pub fn loss_on(&self, g: &mut Graph, pose_one_hot: &Tensor, shape: [usize; 3], target: &LabelGrid) -> Result<NodeId> {
        self.net.loss(g, pose_one_hot, shape, target)
    }

    pub fn train(&mut self, examples: &[Stage1Example], opts: TrainOptions) -> Result<TrainLog> {
        let ids: Vec<_> = self.store.ids().collect();
        let net = self.net.clone();
        train_minibatch(&mut self.store, &ids, examples, opts, "stage1", |store, mask, ex, _| {
            let mut g = Graph::with_trainable(store, mask);
            let loss = net.loss(&mut g, &ex.pose.one_hot(), ex.shape, ex.target.grid())?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        })
    }

    /// Fraction of pixels whose predicted class matches the target.
    pub fn pixel_accuracy(&self, examples: &[Stage1Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for ex in examples {
            let pred = self.predict_logits(&ex.pose, ex.shape)?.argmax();
            hit += pred.grid().data().iter().zip(ex.target.grid().data()).filter(|(a, b)| a == b).count();
            total += pred.grid().data().len();
        }
        Ok(hit as f64 / total as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, json!({ "config": &self.net.config }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: Stage1Config = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// Upper-garment pixels inside the arm parts of `pose`.
pub fn upper_on_arms(pose: &PoseMap, parsing: &ParsingMap) -> usize {
    pose.grid()
        .data()
        .iter()
        .zip(parsing.grid().data())
        .filter(|(&p, &l)| part::is_arm(p) && l == class::UPPER)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SleeveProbe {
    pub seed: u64,
    pub sleeveless: usize,
    pub long_sleeve: usize,
    pub increased: bool,
}

/// For each seed, predict the same pose with sleeveless and long-sleeve
/// attributes and compare upper-garment area over the arms.
pub fn sleeve_probe(model: &PoseToParsing, seeds: &[u64]) -> Result<Vec<SleeveProbe>> {
    seeds
        .iter()
        .map(|&seed| {
            let g = gen_sample(seed, &AttributeSpec::default())?;
            let mut shape = g.attrs.shape();
            shape[0] = 0;
            let bare = upper_on_arms(&g.pose, &model.predict_logits(&g.pose, shape)?.argmax());
            shape[0] = SHAPE_CLASS_COUNTS[0] - 1;
            let long = upper_on_arms(&g.pose, &model.predict_logits(&g.pose, shape)?.argmax());
            Ok(SleeveProbe { seed, sleeveless: bare, long_sleeve: long, increased: long > bare })
        })
        .collect()
}
