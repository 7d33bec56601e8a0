//! Fine-level index inference.
//!
//! [`IndexNet`] maps quantized top features to bottom-level patch indices in a
//! single forward pass. [`ArBaseline`] is the comparison oracle: a causal
//! transformer that samples the same indices one position at a time in
//! raster order.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::layers::{Conv2d, Embedding, ExpertHeads, LayerNorm, Linear, TransformerBlock, Upsample2x};
use crate::nn::train::{train_minibatch, TrainLog, TrainOptions};
use crate::nn::{softmax_rows, AttnMask, Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::synth::TEXTURE_IDS;
use crate::vq::{patch_mask, HierVq, TokenGrid, VqExample};

pub const CHECKPOINT_KIND: &str = "indexnet";
pub const AR_CHECKPOINT_KIND: &str = "ar_baseline";

/// Quantized top features with their ground-truth fine indices.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexExample {
    /// `[c_z, h, w]`, already quantized.
    pub feat_top: Tensor,
    /// Ground-truth bottom patch indices; `textures` route each position.
    pub target: TokenGrid,
}

impl IndexExample {
    /// Encode an example through both trained VQ levels.
    pub fn from_vq(vq: &HierVq, ex: &VqExample) -> Result<Self> {
        let (feat_top, _) = vq.quantize_top(&vq.encode_top(&ex.image)?, &ex.top_mask)?;
        let (_, target) = vq.quantize_bottom(&vq.encode_bottom(&ex.image)?, &ex.bottom_mask)?;
        Ok(Self { feat_top, target })
    }

    pub fn tex_mask(&self) -> LabelGrid {
        self.target.texture_grid()
    }
}

/// Texture ids per fine patch from a texture mask at bottom-feature resolution.
pub fn fine_texture_mask(bottom_mask: &LabelGrid) -> Result<LabelGrid> {
    patch_mask(bottom_mask, bottom_mask.height(), bottom_mask.width())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexNetConfig {
    pub c_z: usize,
    pub width: usize,
    pub textures: usize,
    /// Codebook partitions (1 for a shared codebook) and entries per partition.
    pub partitions: usize,
    pub entries: usize,
    pub mixture: bool,
}

impl Default for IndexNetConfig {
    fn default() -> Self {
        Self { c_z: 32, width: 64, textures: TEXTURE_IDS, partitions: TEXTURE_IDS, entries: 64, mixture: true }
    }
}

impl IndexNetConfig {
    /// Configuration matching a VQ model's bottom codebook.
    pub fn for_vq(vq: &HierVq) -> Self {
        let (_, layout) = vq.bottom_codebook();
        Self { c_z: vq.config().c_z, partitions: layout.partitions, entries: layout.entries, ..Self::default() }
    }

    fn experts(&self) -> usize {
        if self.mixture {
            self.textures
        } else {
            1
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c_z == 0 || self.width == 0 || self.entries == 0 || self.textures == 0 || !(self.partitions == 1 || self.partitions == self.textures) {
            return Err(Error::Config(format!("invalid index net config {self:?}")));
        }
        Ok(())
    }
}

fn route(mixture: bool, textures: usize, tex: &[u8]) -> Result<Vec<usize>> {
    tex.iter()
        .map(|&t| match t as usize {
            t if t >= textures => Err(Error::UnknownTextureId(t)),
            t => Ok(if mixture { t } else { 0 }),
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn targets_of(target: &TokenGrid) -> Result<Vec<Option<usize>>> {
    if !target.is_complete() {
        return Err(Error::shape("training target has masked positions"));
    }
    Ok(target.indices.iter().map(|&i| Some(i as usize)).collect())
}

/// Held-out top-1 accuracy, overall and per texture id (`None` if absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexAccuracy {
    pub overall: f64,
    pub per_texture: Vec<Option<f64>>,
}

fn accuracy<F>(examples: &[IndexExample], textures: usize, mut predict: F) -> Result<IndexAccuracy>
where
    F: FnMut(&IndexExample) -> Result<TokenGrid>,
{
    let mut per = vec![(0usize, 0usize); textures];
    for ex in examples {
        let pred = predict(ex)?;
        for p in 0..pred.len() {
            let t = ex.target.textures[p] as usize;
            per[t].0 += usize::from(pred.indices[p] == ex.target.indices[p]);
            per[t].1 += 1;
        }
    }
    let (hit, total) = per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(IndexAccuracy {
        overall: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
        per_texture: per.iter().map(|&(h, n)| (n > 0).then(|| h as f64 / n as f64)).collect(),
    })
}

#[derive(Clone, Debug)]
struct Trunk {
    config: IndexNetConfig,
    stem: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    up: Upsample2x,
    fuse: Conv2d,
    heads: ExpertHeads,
}

impl Trunk {
    fn new(store: &mut ParamStore, config: IndexNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = config.width;
        Self {
            config,
            stem: Conv2d::new(store, "indexnet.stem", config.c_z, w, 3, 1, rng),
            down: Conv2d::new(store, "indexnet.down", w, 2 * w, 3, 2, rng),
            mid: Conv2d::new(store, "indexnet.mid", 2 * w, 2 * w, 3, 1, rng),
            up: Upsample2x::new(store, "indexnet.up", 2 * w, w, rng),
            fuse: Conv2d::new(store, "indexnet.fuse", 2 * w, w, 3, 1, rng),
            heads: ExpertHeads::new(store, "indexnet.experts", config.experts(), w, config.entries, rng),
        }
    }

    /// Per-position logits `[h*w, entries]`.
    fn forward(&self, g: &mut Graph, feat_top: &Tensor, tex: &LabelGrid) -> Result<NodeId> {
        let s = feat_top.shape();
        if s.len() != 3 || s[0] != self.config.c_z || s[1] % 2 != 0 || s[2] % 2 != 0 || (s[1], s[2]) != tex.dims() {
            return Err(Error::shape(format!("index net input {s:?} with texture grid {:?}", tex.dims())));
        }
        let r = route(self.config.mixture, self.config.textures, tex.data())?;
        let x = g.constant(feat_top.clone());
        let y = self.stem.forward(g, x)?;
        let s0 = g.relu(y);
        let y = self.down.forward(g, s0)?;
        let y = g.relu(y);
        let y = self.mid.forward(g, y)?;
        let y = g.relu(y);
        let y = self.up.forward(g, y)?;
        let y = g.relu(y);
        let cat = g.concat(&[y, s0])?;
        let y = self.fuse.forward(g, cat)?;
        let y = g.relu(y);
        let rows = g.chw_to_rows(y)?;
        self.heads.forward(g, rows, &r)
    }
}

/// Feed-forward fine-index predictor.
#[derive(Debug)]
pub struct IndexNet {
    trunk: Trunk,
    store: ParamStore,
    trained: bool,
    passes: AtomicUsize,
}

impl Clone for IndexNet {
    fn clone(&self) -> Self {
        Self { trunk: self.trunk.clone(), store: self.store.clone(), trained: self.trained, passes: AtomicUsize::new(0) }
    }
}

impl IndexNet {
    pub fn new(config: IndexNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, config, &mut rng);
        Ok(Self { trunk, store, trained: false, passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &IndexNetConfig {
        &self.trunk.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn expert_params(&self) -> (ParamId, ParamId) {
        (self.trunk.heads.weight, self.trunk.heads.bias)
    }

    /// Trunk forward passes run by prediction calls so far.
    pub fn forward_count(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn loss(&self, g: &mut Graph, ex: &IndexExample) -> Result<NodeId> {
        let logits = self.trunk.forward(g, &ex.feat_top, &ex.tex_mask())?;
        g.cross_entropy(logits, &targets_of(&ex.target)?)
    }

    /// Cross-entropy of a single position, for isolation checks.
    pub fn loss_at(&self, g: &mut Graph, ex: &IndexExample, pos: usize) -> Result<NodeId> {
        let logits = self.trunk.forward(g, &ex.feat_top, &ex.tex_mask())?;
        let mut targets = targets_of(&ex.target)?;
        for (p, t) in targets.iter_mut().enumerate() {
            if p != pos {
                *t = None;
            }
        }
        g.cross_entropy(logits, &targets)
    }

    pub fn train(&mut self, examples: &[IndexExample], opts: TrainOptions) -> Result<TrainLog> {
        let ids: Vec<_> = self.store.ids().collect();
        let trunk = self.trunk.clone();
        let log = train_minibatch(&mut self.store, &ids, examples, opts, "indexnet", |store, mask, ex, _| {
            let mut g = Graph::with_trainable(store, mask);
            let logits = trunk.forward(&mut g, &ex.feat_top, &ex.tex_mask())?;
            let loss = g.cross_entropy(logits, &targets_of(&ex.target)?)?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        })?;
        self.trained = true;
        Ok(log)
    }

    fn logits(&self, feat_top: &Tensor, tex: &LabelGrid) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::Misuse("index net has not been trained".into()));
        }
        let mut g = Graph::new(&self.store);
        let y = self.trunk.forward(&mut g, feat_top, tex)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(g.value(y).clone())
    }

    /// Greedy fine indices from quantized top features in one trunk pass.
    pub fn predict(&self, feat_top: &Tensor, tex: &LabelGrid) -> Result<TokenGrid> {
        let logits = self.logits(feat_top, tex)?;
        let k = self.trunk.config.entries;
        let mut out = TokenGrid::masked(tex);
        for (p, i) in out.indices.iter_mut().enumerate() {
            *i = argmax(&logits.data()[p * k..(p + 1) * k]) as i64;
        }
        Ok(out)
    }

    /// Sampling variant of [`IndexNet::predict`]: each position is drawn from its softmax at `temperature`.
    pub fn predict_sampled(&self, feat_top: &Tensor, tex: &LabelGrid, seed: u64, temperature: f64) -> Result<TokenGrid> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        let logits = self.logits(feat_top, tex)?;
        let k = self.trunk.config.entries;
        let scaled: Vec<f64> = logits.data().iter().map(|l| l / temperature).collect();
        let probs = softmax_rows(&scaled, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = TokenGrid::masked(tex);
        for (p, i) in out.indices.iter_mut().enumerate() {
            *i = draw(&probs[p * k..(p + 1) * k], &mut rng)? as i64;
        }
        Ok(out)
    }

    pub fn accuracy(&self, examples: &[IndexExample]) -> Result<IndexAccuracy> {
        accuracy(examples, self.trunk.config.textures, |ex| self.predict(&ex.feat_top, &ex.tex_mask()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, json!({ "config": self.trunk.config, "trained": self.trained }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: IndexNetConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        model.trained = ck.meta["trained"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Config(format!("degenerate sampling distribution: {e}")))?;
    Ok(dist.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub c_z: usize,
    /// Grid the positional table covers.
    pub grid_h: usize,
    pub grid_w: usize,
    pub textures: usize,
    pub partitions: usize,
    pub entries: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub temperature: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            c_z: 32,
            grid_h: 4,
            grid_w: 2,
            textures: TEXTURE_IDS,
            partitions: TEXTURE_IDS,
            entries: 64,
            dim: 64,
            heads: 4,
            blocks: 2,
            hidden: 128,
            temperature: 1.0,
        }
    }
}

impl ArConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.c_z > 0
            && self.grid_h * self.grid_w > 0
            && self.textures > 0
            && self.entries > 0
            && (self.partitions == 1 || self.partitions == self.textures)
            && self.heads > 0
            && self.dim % self.heads == 0
            && self.temperature > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid autoregressive config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ArNet {
    config: ArConfig,
    feat: Linear,
    code: Embedding,
    tex: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    heads: ExpertHeads,
}

impl ArNet {
    fn new(store: &mut ParamStore, config: ArConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let n = config.grid_h * config.grid_w;
        Self {
            config,
            feat: Linear::new(store, "ar.feat", config.c_z, d, rng),
            // The last row is the start-of-sequence token.
            code: Embedding::new(store, "ar.emb_code", config.partitions * config.entries + 1, d, 0.02, rng),
            tex: Embedding::new(store, "ar.emb_tex", config.textures, d, 0.02, rng),
            pos: store.add("ar.emb_pos", Tensor::randn(&[n, d], 0.02, rng)),
            blocks: (0..config.blocks).map(|i| TransformerBlock::new(store, &format!("ar.block{i}"), d, config.heads, config.hidden, rng)).collect(),
            norm: LayerNorm::new(store, "ar.norm", d),
            heads: ExpertHeads::new(store, "ar.experts", config.textures, d, config.entries, rng),
        }
    }

    fn check(&self, feat_top: &Tensor, tex: &LabelGrid) -> Result<()> {
        let s = feat_top.shape();
        let c = &self.config;
        if s.len() != 3 || s[0] != c.c_z || (s[1], s[2]) != tex.dims() || (s[1], s[2]) != (c.grid_h, c.grid_w) {
            return Err(Error::shape(format!("autoregressive input {s:?} for a {}x{} grid", c.grid_h, c.grid_w)));
        }
        Ok(())
    }

    /// Logits for the first `len` raster positions given the tokens before each.
    fn forward(&self, g: &mut Graph, feat_top: &Tensor, tokens: &TokenGrid, len: usize) -> Result<NodeId> {
        let c = &self.config;
        let hw = tokens.len();
        let rows: Vec<f64> = (0..len).flat_map(|p| (0..c.c_z).map(move |ch| (p, ch))).map(|(p, ch)| feat_top.data()[ch * hw + p]).collect();
        let x = g.constant(Tensor::new(vec![len, c.c_z], rows)?);
        let f = self.feat.forward(g, x)?;
        let bos = c.partitions * c.entries;
        let prev: Vec<usize> = (0..len)
            .map(|p| match p.checked_sub(1).and_then(|q| tokens.index(q).map(|k| (q, k))) {
                None => bos,
                Some((q, k)) => {
                    let part = if c.partitions == 1 { 0 } else { tokens.textures[q] as usize };
                    part * c.entries + k
                }
            })
            .collect();
        let code = self.code.forward(g, &prev)?;
        let tex_ids: Vec<usize> = tokens.textures[..len].iter().map(|&t| t as usize).collect();
        let tex = self.tex.forward(g, &tex_ids)?;
        let pos_table = g.param(self.pos);
        let pos = g.reindex(pos_table, (0..len * c.dim).collect(), &[len, c.dim])?;
        let mut h = g.add(f, code)?;
        h = g.add(h, tex)?;
        h = g.add(h, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h, AttnMask::Causal)?;
        }
        let h = self.norm.forward(g, h)?;
        let r = route(true, c.textures, &tokens.textures[..len])?;
        self.heads.forward(g, h, &r)
    }
}

/// Raster-order autoregressive fine-index sampler.
#[derive(Debug)]
pub struct ArBaseline {
    net: ArNet,
    store: ParamStore,
    trained: bool,
    passes: AtomicUsize,
}

impl Clone for ArBaseline {
    fn clone(&self) -> Self {
        Self { net: self.net.clone(), store: self.store.clone(), trained: self.trained, passes: AtomicUsize::new(0) }
    }
}

impl ArBaseline {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = ArNet::new(&mut store, config, &mut rng);
        Ok(Self { net, store, trained: false, passes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ArConfig {
        &self.net.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn forward_count(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    /// Teacher-forced logits `[n, entries]`: row `p` conditions on the tokens before `p`.
    pub fn logits(&self, feat_top: &Tensor, tokens: &TokenGrid) -> Result<Tensor> {
        self.net.check(feat_top, &tokens.texture_grid())?;
        let mut g = Graph::new(&self.store);
        let y = self.net.forward(&mut g, feat_top, tokens, tokens.len())?;
        Ok(g.value(y).clone())
    }

    /// Teacher-forced cross-entropy over every position.
    pub fn loss(&self, g: &mut Graph, ex: &IndexExample) -> Result<NodeId> {
        self.net.check(&ex.feat_top, &ex.tex_mask())?;
        let logits = self.net.forward(g, &ex.feat_top, &ex.target, ex.target.len())?;
        g.cross_entropy(logits, &targets_of(&ex.target)?)
    }

    pub fn train(&mut self, examples: &[IndexExample], opts: TrainOptions) -> Result<TrainLog> {
        let ids: Vec<_> = self.store.ids().collect();
        let net = self.net.clone();
        let log = train_minibatch(&mut self.store, &ids, examples, opts, "ar baseline", |store, mask, ex, _| {
            net.check(&ex.feat_top, &ex.tex_mask())?;
            let mut g = Graph::with_trainable(store, mask);
            let logits = net.forward(&mut g, &ex.feat_top, &ex.target, ex.target.len())?;
            let loss = g.cross_entropy(logits, &targets_of(&ex.target)?)?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        })?;
        self.trained = true;
        Ok(log)
    }

    /// Sample positions one at a time in raster order; position `p` is drawn
    /// from a forward pass over the prefix `0..=p`.
    pub fn sample(&self, feat_top: &Tensor, tex: &LabelGrid, seed: u64) -> Result<TokenGrid> {
        if !self.trained {
            return Err(Error::Misuse("autoregressive baseline has not been trained".into()));
        }
        self.net.check(feat_top, tex)?;
        let k = self.net.config.entries;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = TokenGrid::masked(tex);
        for p in 0..tokens.len() {
            let mut g = Graph::new(&self.store);
            let y = self.net.forward(&mut g, feat_top, &tokens, p + 1)?;
            self.passes.fetch_add(1, Ordering::Relaxed);
            let row: Vec<f64> = g.value(y).data()[p * k..(p + 1) * k].iter().map(|l| l / self.net.config.temperature).collect();
            tokens.indices[p] = draw(&softmax_rows(&row, k), &mut rng)? as i64;
        }
        Ok(tokens)
    }

    pub fn accuracy(&self, examples: &[IndexExample], seed: u64) -> Result<IndexAccuracy> {
        accuracy(examples, self.net.config.textures, |ex| self.sample(&ex.feat_top, &ex.tex_mask(), seed))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(AR_CHECKPOINT_KIND, json!({ "config": self.net.config, "trained": self.trained }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != AR_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {AR_CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: ArConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        model.trained = ck.meta["trained"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

/// Tile `rows × cols` examples of equal size into one larger grid, row-major.
pub fn tile_examples(parts: &[&IndexExample], rows: usize, cols: usize) -> Result<IndexExample> {
    let Some(first) = parts.first() else {
        return Err(Error::EmptyCorpus);
    };
    if parts.len() != rows * cols {
        return Err(Error::shape(format!("{} tiles for a {rows}x{cols} mosaic", parts.len())));
    }
    let s = first.feat_top.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    if parts.iter().any(|p| p.feat_top.shape() != s || (p.target.height, p.target.width) != (h, w)) {
        return Err(Error::shape("mosaic tiles differ in size"));
    }
    let (bh, bw) = (rows * h, cols * w);
    let mut feat = Tensor::zeros(&[c, bh, bw]);
    let mut target = TokenGrid { height: bh, width: bw, indices: vec![0; bh * bw], textures: vec![0; bh * bw] };
    for (t, part) in parts.iter().enumerate() {
        let (tr, tc) = (t / cols, t % cols);
        for r in 0..h {
            for col in 0..w {
                let dst = (tr * h + r) * bw + tc * w + col;
                for ch in 0..c {
                    feat.data_mut()[ch * bh * bw + dst] = part.feat_top.data()[(ch * h + r) * w + col];
                }
                target.indices[dst] = part.target.indices[r * w + col];
                target.textures[dst] = part.target.textures[r * w + col];
            }
        }
    }
    Ok(IndexExample { feat_top: feat, target })
}

/// Inverse of [`tile_examples`] for a token grid: the `h×w` tile at `(tr, tc)`.
pub fn tile_of(grid: &TokenGrid, h: usize, w: usize, tr: usize, tc: usize) -> TokenGrid {
    let mut out = TokenGrid { height: h, width: w, indices: Vec::with_capacity(h * w), textures: Vec::with_capacity(h * w) };
    for r in 0..h {
        for c in 0..w {
            let src = (tr * h + r) * grid.width + tc * w + c;
            out.indices.push(grid.indices[src]);
            out.textures.push(grid.textures[src]);
        }
    }
    out
}
