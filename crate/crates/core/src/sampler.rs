//! Coarse-level index sampler: a bidirectional transformer over the top
//! token grid, conditioned on segmentation and texture tokens, with one
//! classifier head per texture id. Sampling starts from an all-MASK grid and
//! commits a fixed quota of positions per step.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::layers::{Embedding, ExpertHeads, LayerNorm, TransformerBlock};
use crate::nn::train::{train_minibatch, TrainOptions};
use crate::nn::{softmax_rows, AttnMask, Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::synth::{class, AttributeSet, ParsingMap, TEXTURE_IDS};
use crate::vq::{latent_texture_mask, BookLayout, TokenGrid, MASK, TOP_GRID};

pub const CHECKPOINT_KIND: &str = "sampler";
pub const MIN_MASK_RATIO: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Texture ids, i.e. codebook partitions seen by the sampler.
    pub textures: usize,
    /// Codebook partitions and entries per partition the logits range over.
    pub partitions: usize,
    pub entries: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// One head per texture id; `false` shares a single head across textures.
    pub mixture: bool,
    pub steps: usize,
    pub temperature: f64,
    /// Commit a random subset of masked positions instead of the most confident ones.
    pub random_order: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            grid_h: TOP_GRID.0,
            grid_w: TOP_GRID.1,
            textures: TEXTURE_IDS,
            partitions: TEXTURE_IDS,
            entries: 32,
            dim: 128,
            heads: 4,
            blocks: 4,
            hidden: 256,
            mixture: true,
            steps: 8,
            temperature: 1.0,
            random_order: false,
        }
    }
}

impl SamplerConfig {
    pub fn positions(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn experts(&self) -> usize {
        if self.mixture {
            self.textures
        } else {
            1
        }
    }

    /// Codebook layout the logits index into (dimension unused).
    pub fn layout(&self) -> BookLayout {
        BookLayout { partitions: self.partitions, entries: self.entries, dim: 0 }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.positions() > 0
            && self.textures > 0
            && self.entries > 0
            && (self.partitions == 1 || self.partitions == self.textures)
            && self.heads > 0
            && self.dim % self.heads == 0
            && self.hidden > 0
            && self.steps >= 1
            && self.temperature >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid sampler config {self:?}")));
        }
        Ok(())
    }
}

/// Segmentation and texture tokens at token-grid resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionTokens {
    pub seg: LabelGrid,
    pub tex: LabelGrid,
}

/// Majority-pool the parsing to `h×w` for `seg`; `tex` carries the garment
/// texture ids of the pooled labels, 0 elsewhere.
pub fn tokenize_conditions_at(parsing: &ParsingMap, attrs: &AttributeSet, h: usize, w: usize) -> Result<ConditionTokens> {
    Ok(ConditionTokens { seg: parsing.grid().majority_pool(h, w)?, tex: latent_texture_mask(parsing, attrs, h, w)? })
}

pub fn tokenize_conditions(parsing: &ParsingMap, attrs: &AttributeSet) -> Result<ConditionTokens> {
    tokenize_conditions_at(parsing, attrs, TOP_GRID.0, TOP_GRID.1)
}

/// Ground-truth top indices plus their conditions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerExample {
    pub target: TokenGrid,
    pub cond: ConditionTokens,
}

/// Per-epoch mean cross-entropy, overall and per expert head (`None` when a head saw no position).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrainLog {
    pub epoch_losses: Vec<f64>,
    pub expert_losses: Vec<Vec<Option<f64>>>,
    pub steps: usize,
}

#[derive(Clone, Debug)]
struct Net {
    config: SamplerConfig,
    code: Embedding,
    seg: Embedding,
    tex: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    heads: ExpertHeads,
}

impl Net {
    fn new(store: &mut ParamStore, config: SamplerConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        // The last code row is the MASK embedding.
        let code = Embedding::new(store, "sampler.emb_code", config.partitions * config.entries + 1, d, 0.02, rng);
        let seg = Embedding::new(store, "sampler.emb_seg", class::COUNT, d, 0.02, rng);
        let tex = Embedding::new(store, "sampler.emb_tex", config.textures, d, 0.02, rng);
        let pos = store.add("sampler.emb_pos", Tensor::randn(&[config.positions(), d], 0.02, rng));
        let blocks = (0..config.blocks)
            .map(|i| TransformerBlock::new(store, &format!("sampler.block{i}"), d, config.heads, config.hidden, rng))
            .collect();
        let norm = LayerNorm::new(store, "sampler.norm", d);
        let heads = ExpertHeads::new(store, "sampler.experts", config.experts(), d, config.entries, rng);
        Self { config, code, seg, tex, pos, blocks, norm, heads }
    }

    fn route(&self, cond: &ConditionTokens) -> Vec<usize> {
        cond.tex.data().iter().map(|&t| if self.config.mixture { t as usize } else { 0 }).collect()
    }

    fn check(&self, tokens: &TokenGrid, cond: &ConditionTokens) -> Result<()> {
        let c = &self.config;
        let dims = (c.grid_h, c.grid_w);
        if (tokens.height, tokens.width) != dims || cond.seg.dims() != dims || cond.tex.dims() != dims {
            return Err(Error::shape(format!("sampler expects {}x{} grids", c.grid_h, c.grid_w)));
        }
        if let Some(&t) = cond.tex.data().iter().find(|&&t| t as usize >= c.textures) {
            return Err(Error::UnknownTextureId(t as usize));
        }
        if cond.seg.max_label() as usize >= class::COUNT {
            return Err(Error::InvalidLabels(format!("segmentation token {} >= {}", cond.seg.max_label(), class::COUNT)));
        }
        if tokens.textures != cond.tex.data() {
            return Err(Error::shape("token grid textures differ from texture tokens"));
        }
        if tokens.indices.iter().any(|&i| i != MASK && (i < 0 || i as usize >= c.entries)) {
            return Err(Error::shape("token index outside its partition"));
        }
        Ok(())
    }

    fn code_ids(&self, tokens: &TokenGrid) -> Vec<usize> {
        let c = &self.config;
        let mask_row = c.partitions * c.entries;
        (0..tokens.len())
            .map(|p| match tokens.index(p) {
                None => mask_row,
                Some(k) => {
                    let part = if c.partitions == 1 { 0 } else { tokens.textures[p] as usize };
                    part * c.entries + k
                }
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph, tokens: &TokenGrid, cond: &ConditionTokens, mask: AttnMask) -> Result<NodeId> {
        self.check(tokens, cond)?;
        let code = self.code.forward(g, &self.code_ids(tokens))?;
        let seg_ids: Vec<usize> = cond.seg.data().iter().map(|&s| s as usize).collect();
        let seg = self.seg.forward(g, &seg_ids)?;
        let tex_ids: Vec<usize> = cond.tex.data().iter().map(|&t| t as usize).collect();
        let tex = self.tex.forward(g, &tex_ids)?;
        let pos = g.param(self.pos);
        let mut x = g.add(code, seg)?;
        x = g.add(x, tex)?;
        x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, mask)?;
        }
        let x = self.norm.forward(g, x)?;
        self.heads.forward(g, x, &self.route(cond))
    }
}

/// One forward's per-position logits `[n, entries]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerLogits(pub Tensor);

/// Every intermediate grid of a sampling run; `grids[t]` is the state after step `t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub grids: Vec<TokenGrid>,
}

#[derive(Clone, Debug)]
pub struct MoeSampler {
    net: Net,
    store: ParamStore,
}

impl MoeSampler {
    pub fn new(config: SamplerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, config, &mut rng);
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.net.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter holding all expert heads' weights `[E, D, K]`, and their biases `[E, K]`.
    pub fn expert_params(&self) -> (ParamId, ParamId) {
        (self.net.heads.weight, self.net.heads.bias)
    }

    pub fn forward(&self, tokens: &TokenGrid, cond: &ConditionTokens, mask: AttnMask) -> Result<SamplerLogits> {
        let mut g = Graph::new(&self.store);
        let y = self.net.forward(&mut g, tokens, cond, mask)?;
        Ok(SamplerLogits(g.value(y).clone()))
    }

    /// Cross-entropy of `target` at the masked positions of `input`.
    pub fn loss(&self, g: &mut Graph, input: &TokenGrid, target: &TokenGrid, cond: &ConditionTokens) -> Result<NodeId> {
        let logits = self.net.forward(g, input, cond, AttnMask::Full)?;
        let targets = masked_targets(input, target)?;
        g.cross_entropy(logits, &targets)
    }

    pub fn train(&mut self, examples: &[SamplerExample], opts: TrainOptions) -> Result<SamplerTrainLog> {
        let ids: Vec<_> = self.store.ids().collect();
        let net = self.net.clone();
        let experts = net.config.experts();
        let per_epoch = examples.len();
        let mut sums = vec![(0.0, 0usize); experts];
        let mut seen = 0;
        let mut expert_losses = Vec::new();
        let log = train_minibatch(&mut self.store, &ids, examples, opts, "sampler", |store, mask, ex, rng| {
            let input = random_mask(&ex.target, rng);
            let mut g = Graph::with_trainable(store, mask);
            let logits = net.forward(&mut g, &input, &ex.cond, AttnMask::Full)?;
            let targets = masked_targets(&input, &ex.target)?;
            let k = net.config.entries;
            let probs = softmax_rows(g.value(logits).data(), k);
            let route = net.route(&ex.cond);
            for (p, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    let s = &mut sums[route[p]];
                    s.0 -= probs[p * k + t].max(1e-300).ln();
                    s.1 += 1;
                }
            }
            seen += 1;
            if seen % per_epoch == 0 {
                expert_losses.push(sums.iter().map(|&(l, n)| (n > 0).then(|| l / n as f64)).collect());
                sums.iter_mut().for_each(|s| *s = (0.0, 0));
            }
            let loss = g.cross_entropy(logits, &targets)?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        })?;
        Ok(SamplerTrainLog { epoch_losses: log.epoch_losses, expert_losses, steps: log.steps })
    }

    /// Accuracy of greedy predictions at masked positions, using a seeded random mask per example.
    pub fn masked_accuracy(&self, examples: &[SamplerExample], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hit, mut total) = (0, 0);
        for ex in examples {
            let input = random_mask(&ex.target, &mut rng);
            let logits = self.forward(&input, &ex.cond, AttnMask::Full)?;
            let k = self.net.config.entries;
            for (p, t) in masked_targets(&input, &ex.target)?.iter().enumerate() {
                if let Some(t) = t {
                    let row = &logits.0.data()[p * k..(p + 1) * k];
                    hit += usize::from(argmax(row) == *t);
                    total += 1;
                }
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    pub fn sample(&self, cond: &ConditionTokens, steps: usize, seed: u64, temperature: f64) -> Result<TokenGrid> {
        Ok(self.sample_traced(cond, steps, seed, temperature)?.grids.pop().expect("at least one step"))
    }

    /// Iterative unmasking from an all-MASK grid. Each step runs one forward
    /// pass and commits `ceil(n / steps)` still-masked positions; committed
    /// positions are never revisited.
    pub fn sample_traced(&self, cond: &ConditionTokens, steps: usize, seed: u64, temperature: f64) -> Result<SampleTrace> {
        if steps < 1 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(Error::Config(format!("temperature {temperature} must be finite and non-negative")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = TokenGrid::masked(&cond.tex);
        let n = grid.len();
        let quota = n.div_ceil(steps);
        let k = self.net.config.entries;
        let mut grids = Vec::with_capacity(steps);
        for _ in 0..steps {
            let masked: Vec<usize> = (0..n).filter(|&p| grid.index(p).is_none()).collect();
            if !masked.is_empty() {
                let logits = self.forward(&grid, cond, AttnMask::Full)?;
                let scaled: Vec<f64> = if temperature > 0.0 {
                    logits.0.data().iter().map(|l| l / temperature).collect()
                } else {
                    logits.0.data().to_vec()
                };
                let probs = softmax_rows(&scaled, k);
                let chosen: Vec<usize> = if self.net.config.random_order {
                    let mut c: Vec<usize> = sample(&mut rng, masked.len(), quota.min(masked.len())).into_iter().map(|i| masked[i]).collect();
                    c.sort_unstable();
                    c
                } else {
                    let conf = |p: usize| probs[p * k..(p + 1) * k].iter().cloned().fold(0.0, f64::max);
                    let mut order = masked.clone();
                    order.sort_by(|&a, &b| conf(b).total_cmp(&conf(a)).then(a.cmp(&b)));
                    order.truncate(quota);
                    order.sort_unstable();
                    order
                };
                for p in chosen {
                    let row = &probs[p * k..(p + 1) * k];
                    let idx = if temperature == 0.0 { argmax(row) } else { draw(row, &mut rng)? };
                    grid.indices[p] = idx as i64;
                }
            }
            grids.push(grid.clone());
        }
        Ok(SampleTrace { grids })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, json!({ "config": self.net.config }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: SamplerConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
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

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Config(format!("degenerate sampling distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Mask a uniformly drawn fraction in `[0.15, 1]` of the positions (at least one).
pub fn random_mask<R: Rng + ?Sized>(target: &TokenGrid, rng: &mut R) -> TokenGrid {
    let n = target.len();
    let ratio: f64 = rng.random_range(MIN_MASK_RATIO..=1.0);
    let m = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut input = target.clone();
    for p in sample(rng, n, m) {
        input.indices[p] = MASK;
    }
    input
}

fn masked_targets(input: &TokenGrid, target: &TokenGrid) -> Result<Vec<Option<usize>>> {
    if input.len() != target.len() || !target.is_complete() {
        return Err(Error::shape("training target must be a complete grid of the input's size"));
    }
    Ok((0..input.len()).map(|p| input.index(p).is_none().then(|| target.indices[p] as usize)).collect())
}
