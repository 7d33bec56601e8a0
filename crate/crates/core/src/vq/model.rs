use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::quantize::{
    lookup_patches, lookup_vectors, partition_of, patch_map, patch_mask, quantize_nearest, quantize_patch, unpatch_map, BookLayout, TokenGrid,
};
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::layers::{Conv2d, Upsample2x};
use crate::nn::train::{train_minibatch, TrainLog, TrainOptions};
use crate::nn::{Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::synth::{ParsingMap, Sample, AttributeSet, HEIGHT, WIDTH};

pub const CHECKPOINT_KIND: &str = "vq";

/// Codebook entries only move when selected, so they get a larger step to
/// keep pace with the encoder.
const CODEBOOK_LR_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Bottom,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Level::Top),
            "bottom" => Ok(Level::Bottom),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub c_z: usize,
    pub k_top: usize,
    pub k_bot: usize,
    /// Texture ids, including the non-garment id 0.
    pub partitions: usize,
    /// Base channel width of encoders and decoders.
    pub width: usize,
    pub beta: f64,
    /// One codebook for every texture, with the same total number of entries.
    pub shared_codebook: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { c_z: 32, k_top: 32, k_bot: 64, partitions: 5, width: 32, beta: 0.25, shared_codebook: false }
    }
}

impl VqConfig {
    pub fn top_layout(&self) -> BookLayout {
        self.layout(self.k_top, self.c_z)
    }

    pub fn bottom_layout(&self) -> BookLayout {
        self.layout(self.k_bot, 4 * self.c_z)
    }

    fn layout(&self, k: usize, dim: usize) -> BookLayout {
        if self.shared_codebook {
            BookLayout { partitions: 1, entries: k * self.partitions, dim }
        } else {
            BookLayout { partitions: self.partitions, entries: k, dim }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c_z == 0 || self.k_top == 0 || self.k_bot == 0 || self.partitions == 0 || self.width < 2 || self.width % 2 != 0 {
            return Err(Error::Config(format!("invalid vq config {self:?}")));
        }
        Ok(())
    }
}

/// Texture ids at latent resolution: the parsing is majority-pooled to `h×w`,
/// then garment classes are replaced by their texture ids and everything else by 0.
pub fn latent_texture_mask(parsing: &ParsingMap, attrs: &AttributeSet, h: usize, w: usize) -> Result<LabelGrid> {
    Ok(parsing.grid().majority_pool(h, w)?.map(|l| attrs.texture_of_class(l)))
}

pub const TOP_GRID: (usize, usize) = (HEIGHT / 16, WIDTH / 16);
pub const BOTTOM_GRID: (usize, usize) = (HEIGHT / 8, WIDTH / 8);

/// One training/evaluation item: image tensor plus texture masks at both latent resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct VqExample {
    pub image: Tensor,
    pub top_mask: LabelGrid,
    pub bottom_mask: LabelGrid,
}

impl VqExample {
    pub fn new(image: Tensor, parsing: &ParsingMap, attrs: &AttributeSet) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 {
            return Err(Error::shape(format!("image {s:?}: sides must be divisible by 16")));
        }
        let (h, w) = (s[1], s[2]);
        Ok(Self {
            top_mask: latent_texture_mask(parsing, attrs, h / 16, w / 16)?,
            bottom_mask: latent_texture_mask(parsing, attrs, h / 8, w / 8)?,
            image,
        })
    }

    pub fn from_sample(s: &Sample) -> Result<Self> {
        Self::new(s.image.to_tensor(), &s.parsing, &s.attrs)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, widths: &[usize], c_z: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), cin, w, 3, 2, rng));
            cin = w;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), cin, c_z, 1, 1, rng);
        Self { convs, head }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
            h = g.relu(h);
        }
        self.head.forward(g, h)
    }
}

/// D_top: `[c_z, H/16, W/16]` to `[c_z, H/8, W/8]`.
#[derive(Clone, Debug)]
struct TopDecoder {
    conv: Conv2d,
    up: Upsample2x,
    head: Conv2d,
}

impl TopDecoder {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(g, x)?;
        let h = g.relu(h);
        let h = self.up.forward(g, h)?;
        let h = g.relu(h);
        self.head.forward(g, h)
    }
}

/// D_bot: `[c_z, H/8, W/8]` to an RGB image in `(0, 1)`.
#[derive(Clone, Debug)]
struct BottomDecoder {
    conv: Conv2d,
    ups: Vec<Upsample2x>,
}

impl BottomDecoder {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = self.conv.forward(g, x)?;
        for up in &self.ups {
            h = g.relu(h);
            h = up.forward(g, h)?;
        }
        Ok(g.sigmoid(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopRecon {
    pub feat_top: Tensor,
    pub tokens: TokenGrid,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullRecon {
    pub feat_top: Tensor,
    pub top_tokens: TokenGrid,
    pub feat_bot: Tensor,
    pub bottom_tokens: TokenGrid,
    pub image: Tensor,
}

/// Per-partition selection counts; entries with zero count are dead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionUsage {
    pub partition: usize,
    pub counts: Vec<usize>,
    pub dead: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub level: Level,
    pub partitions: Vec<PartitionUsage>,
    /// Fraction of entries selected at least once, over partitions that saw any position.
    pub used_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub level: Level,
    pub log: TrainLog,
    pub usage: UsageReport,
}

/// Loss terms of one example, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct VqLossNodes {
    pub total: NodeId,
    pub recon: NodeId,
    pub codebook: NodeId,
    pub commitment: NodeId,
}

/// `mean|I - Î| + mean(sg(ẑ) - z_q)² + beta·mean(ẑ - sg(z_q))²`.
pub fn vq_loss(g: &mut Graph, image: NodeId, recon: NodeId, z_e: NodeId, z_q: NodeId, beta: f64) -> Result<VqLossNodes> {
    let rec = g.mean_abs(recon, image)?;
    let z_e_sg = g.detach(z_e);
    let z_q_sg = g.detach(z_q);
    let codebook = g.mean_sq(z_e_sg, z_q)?;
    let commit = g.mean_sq(z_e, z_q_sg)?;
    let commitment = g.scale(commit, beta);
    let t = g.add(rec, codebook)?;
    let total = g.add(t, commitment)?;
    Ok(VqLossNodes { total, recon: rec, codebook, commitment })
}

/// Layer handles of the autoencoder; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
struct VqNet {
    config: VqConfig,
    e_top: Encoder,
    d_top: TopDecoder,
    e_bot: Encoder,
    d_bot: BottomDecoder,
    z_top: ParamId,
    z_bot: ParamId,
}

impl VqNet {
    fn layout(&self, level: Level) -> BookLayout {
        match level {
            Level::Top => self.config.top_layout(),
            Level::Bottom => self.config.bottom_layout(),
        }
    }

    fn encode(&self, store: &ParamStore, level: Level, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(format!("image {s:?}: sides must be divisible by 16")));
        }
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let z = match level {
            Level::Top => self.e_top.forward(&mut g, x)?,
            Level::Bottom => self.e_bot.forward(&mut g, x)?,
        };
        Ok(g.value(z).clone())
    }

    fn quantize(&self, store: &ParamStore, level: Level, z: &Tensor, mask: &LabelGrid) -> Result<(Tensor, TokenGrid)> {
        match level {
            Level::Top => quantize_nearest(z, mask, store.value(self.z_top), &self.config.top_layout()),
            Level::Bottom => quantize_patch(z, mask, store.value(self.z_bot), &self.config.bottom_layout()),
        }
    }

    /// Decode `feat_top`, adding `feat_bot` to D_top's output when given.
    fn decode(&self, store: &ParamStore, feat_top: &Tensor, feat_bot: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let x = g.constant(feat_top.clone());
        let mut h = self.d_top.forward(&mut g, x)?;
        if let Some(b) = feat_bot {
            let b = g.constant(b.clone());
            h = g.add(h, b)?;
        }
        let out = self.d_bot.forward(&mut g, h)?;
        Ok(g.value(out).clone())
    }

    fn stage_loss(&self, store: &ParamStore, g: &mut Graph, level: Level, ex: &VqExample) -> Result<VqLossNodes> {
        let x = g.constant(ex.image.clone());
        let layout = self.layout(level);
        match level {
            Level::Top => {
                let z = self.e_top.forward(g, x)?;
                let (_, tokens) = self.quantize(store, level, g.value(z), &ex.top_mask)?;
                let idx = global_indices(&tokens, &layout)?;
                let z_rows = g.chw_to_rows(z)?;
                let table = g.param(self.z_top);
                let q_rows = g.gather_rows(table, &idx)?;
                let st = g.straight_through(z_rows, q_rows)?;
                let feat = g.rows_to_chw(st, tokens.height, tokens.width)?;
                let y = self.d_top.forward(g, feat)?;
                let out = self.d_bot.forward(g, y)?;
                vq_loss(g, x, out, z_rows, q_rows, self.config.beta)
            }
            Level::Bottom => {
                // The frozen top level enters as a constant.
                let zt = self.encode(store, Level::Top, &ex.image)?;
                let (feat_top, _) = self.quantize(store, Level::Top, &zt, &ex.top_mask)?;
                let mut tg = Graph::new(store);
                let ft = tg.constant(feat_top);
                let coarse = self.d_top.forward(&mut tg, ft)?;
                let coarse = g.constant(tg.value(coarse).clone());

                let z = self.e_bot.forward(g, x)?;
                let (_, tokens) = self.quantize(store, level, g.value(z), &ex.bottom_mask)?;
                let idx = global_indices(&tokens, &layout)?;
                let s = g.shape(z).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let z_rows = g.reindex(z, patch_map(c, h, w), &[tokens.len(), layout.dim])?;
                let table = g.param(self.z_bot);
                let q_rows = g.gather_rows(table, &idx)?;
                let st = g.straight_through(z_rows, q_rows)?;
                let feat = g.reindex(st, unpatch_map(c, h, w), &[c, h, w])?;
                let sum = g.add(coarse, feat)?;
                let out = self.d_bot.forward(g, sum)?;
                vq_loss(g, x, out, z_rows, q_rows, self.config.beta)
            }
        }
    }
}

/// Two-level texture-aware VQ autoencoder.
#[derive(Clone, Debug)]
pub struct HierVq {
    net: VqNet,
    store: ParamStore,
    top_frozen: bool,
    bottom_trained: bool,
}

impl HierVq {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, c) = (config.width, config.c_z);
        let e_top = Encoder::new(&mut store, "vq.e_top", &[w / 2, w, 2 * w, 2 * w], c, &mut rng);
        let d_top = TopDecoder {
            conv: Conv2d::new(&mut store, "vq.d_top.conv", c, 2 * w, 3, 1, &mut rng),
            up: Upsample2x::new(&mut store, "vq.d_top.up", 2 * w, 2 * w, &mut rng),
            head: Conv2d::new(&mut store, "vq.d_top.head", 2 * w, c, 1, 1, &mut rng),
        };
        let e_bot = Encoder::new(&mut store, "vq.e_bot", &[w / 2, w, 2 * w], c, &mut rng);
        // A small initial residual keeps the bottom stage close to the top-only solution.
        store.value_mut(e_bot.head.weight).scale_assign(0.1);
        let d_bot = BottomDecoder {
            conv: Conv2d::new(&mut store, "vq.d_bot.conv", c, 2 * w, 3, 1, &mut rng),
            ups: vec![
                Upsample2x::new(&mut store, "vq.d_bot.up0", 2 * w, w, &mut rng),
                Upsample2x::new(&mut store, "vq.d_bot.up1", w, w / 2, &mut rng),
                Upsample2x::new(&mut store, "vq.d_bot.up2", w / 2, 3, &mut rng),
            ],
        };
        let (lt, lb) = (config.top_layout(), config.bottom_layout());
        let z_top = store.add("vq.z_top", Tensor::randn(&[lt.partitions * lt.entries, lt.dim], 1.0, &mut rng));
        let z_bot = store.add("vq.z_bot", Tensor::randn(&[lb.partitions * lb.entries, lb.dim], 0.1, &mut rng));
        for id in [z_top, z_bot] {
            store.param_mut(id).lr_scale = CODEBOOK_LR_SCALE;
        }
        let net = VqNet { config, e_top, d_top, e_bot, d_bot, z_top, z_bot };
        Ok(Self { net, store, top_frozen: false, bottom_trained: false })
    }

    pub fn config(&self) -> &VqConfig {
        &self.net.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_top_frozen(&self) -> bool {
        self.top_frozen
    }

    pub fn is_bottom_trained(&self) -> bool {
        self.bottom_trained
    }

    /// Mark the top stage as trained and frozen (e.g. for externally prepared weights).
    pub fn freeze_top(&mut self) {
        self.top_frozen = true;
    }

    pub fn top_codebook(&self) -> (&Tensor, BookLayout) {
        (self.store.value(self.net.z_top), self.net.config.top_layout())
    }

    pub fn bottom_codebook(&self) -> (&Tensor, BookLayout) {
        (self.store.value(self.net.z_bot), self.net.config.bottom_layout())
    }

    pub fn codebook_id(&self, level: Level) -> ParamId {
        match level {
            Level::Top => self.net.z_top,
            Level::Bottom => self.net.z_bot,
        }
    }

    /// Parameters of E_top, D_top and Z_top.
    pub fn top_level_ids(&self) -> Vec<ParamId> {
        let mut ids = self.store.ids_with_prefix("vq.e_top.");
        ids.extend(self.store.ids_with_prefix("vq.d_top."));
        ids.push(self.net.z_top);
        ids
    }

    /// Parameters of E_bot and Z_bot.
    pub fn bottom_level_ids(&self) -> Vec<ParamId> {
        let mut ids = self.store.ids_with_prefix("vq.e_bot.");
        ids.push(self.net.z_bot);
        ids
    }

    pub fn bottom_decoder_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("vq.d_bot.")
    }

    /// Parameters updated by a stage: its encoder and codebook plus D_bot.
    pub fn stage_ids(&self, level: Level) -> Vec<ParamId> {
        let mut ids = match level {
            Level::Top => self.top_level_ids(),
            Level::Bottom => self.bottom_level_ids(),
        };
        ids.extend(self.bottom_decoder_ids());
        ids
    }

    /// Raw top encoder output ẑ_top `[c_z, H/16, W/16]`.
    pub fn encode_top(&self, image: &Tensor) -> Result<Tensor> {
        self.net.encode(&self.store, Level::Top, image)
    }

    /// Raw bottom encoder output ẑ_bot `[c_z, H/8, W/8]`.
    pub fn encode_bottom(&self, image: &Tensor) -> Result<Tensor> {
        self.net.encode(&self.store, Level::Bottom, image)
    }

    pub fn quantize_top(&self, z: &Tensor, mask: &LabelGrid) -> Result<(Tensor, TokenGrid)> {
        self.net.quantize(&self.store, Level::Top, z, mask)
    }

    pub fn quantize_bottom(&self, z: &Tensor, mask: &LabelGrid) -> Result<(Tensor, TokenGrid)> {
        self.net.quantize(&self.store, Level::Bottom, z, mask)
    }

    pub fn feat_top_from_tokens(&self, tokens: &TokenGrid) -> Result<Tensor> {
        let (t, l) = self.top_codebook();
        lookup_vectors(tokens, t, &l)
    }

    pub fn feat_bot_from_tokens(&self, tokens: &TokenGrid) -> Result<Tensor> {
        let (t, l) = self.bottom_codebook();
        lookup_patches(tokens, t, &l)
    }

    /// Î_top = D_bot(D_top(feat_top)).
    pub fn decode_top_only(&self, feat_top: &Tensor) -> Result<Tensor> {
        self.net.decode(&self.store, feat_top, None)
    }

    /// Î = D_bot(D_top(feat_top) + feat_bot).
    pub fn decode_full(&self, feat_top: &Tensor, feat_bot: &Tensor) -> Result<Tensor> {
        self.net.decode(&self.store, feat_top, Some(feat_bot))
    }

    pub fn encode_decode_top(&self, image: &Tensor, top_mask: &LabelGrid) -> Result<TopRecon> {
        let z = self.encode_top(image)?;
        let (feat_top, tokens) = self.quantize_top(&z, top_mask)?;
        let image = self.decode_top_only(&feat_top)?;
        Ok(TopRecon { feat_top, tokens, image })
    }

    pub fn encode_decode_full(&self, image: &Tensor, top_mask: &LabelGrid, bottom_mask: &LabelGrid) -> Result<FullRecon> {
        if !self.top_frozen {
            return Err(Error::Misuse("full reconstruction needs a trained, frozen top stage".into()));
        }
        let z = self.encode_top(image)?;
        let (feat_top, top_tokens) = self.quantize_top(&z, top_mask)?;
        let zb = self.encode_bottom(image)?;
        let (feat_bot, bottom_tokens) = self.quantize_bottom(&zb, bottom_mask)?;
        let out = self.decode_full(&feat_top, &feat_bot)?;
        Ok(FullRecon { feat_top, top_tokens, feat_bot, bottom_tokens, image: out })
    }

    /// Loss graph of one example for a stage, built on `g` (which may restrict trainable parameters).
    pub fn stage_loss(&self, g: &mut Graph, level: Level, ex: &VqExample) -> Result<VqLossNodes> {
        self.net.stage_loss(g.store(), g, level, ex)
    }

    /// Seed each partition's entries with encoder outputs of positions routed to it.
    fn init_codebook_from_data(&mut self, level: Level, examples: &[VqExample], rng: &mut ChaCha8Rng) -> Result<()> {
        let layout = self.net.layout(level);
        let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layout.partitions];
        for ex in examples.iter().take(256) {
            let z = self.net.encode(&self.store, level, &ex.image)?;
            let s = z.shape().to_vec();
            let (rows, mask) = match level {
                Level::Top => (rows_of(&z), ex.top_mask.clone()),
                Level::Bottom => {
                    let map = patch_map(s[0], s[1], s[2]);
                    let rows = map.chunks(layout.dim).map(|c| c.iter().map(|&o| z.data()[o]).collect()).collect();
                    (rows, patch_mask(&ex.bottom_mask, s[1], s[2])?)
                }
            };
            for (v, &t) in rows.into_iter().zip(mask.data()) {
                pools[partition_of(&layout, t)?].push(v);
            }
        }
        let table = self.store.value_mut(self.codebook_id(level));
        for (p, pool) in pools.iter().enumerate().filter(|(_, pool)| !pool.is_empty()) {
            for (k, v) in kmeans_pp_seeds(pool, layout.entries, rng).into_iter().enumerate() {
                let row = layout.global(p, k);
                for (d, x) in v.iter().enumerate() {
                    let jitter: f64 = rng.random_range(-1e-3..1e-3);
                    table.data_mut()[row * layout.dim + d] = x + jitter;
                }
            }
        }
        Ok(())
    }

    /// Train one stage. The bottom stage requires the top stage to be frozen and
    /// leaves E_top, D_top and Z_top untouched.
    pub fn train_stage(&mut self, level: Level, examples: &[VqExample], opts: TrainOptions) -> Result<StageReport> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if level == Level::Bottom && !self.top_frozen {
            return Err(Error::Misuse("bottom stage needs a trained top stage (missing top checkpoint)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_c0de);
        self.init_codebook_from_data(level, examples, &mut rng)?;
        let trainable = self.stage_ids(level);
        let net = self.net.clone();
        let label = match level {
            Level::Top => "vq top",
            Level::Bottom => "vq bottom",
        };
        let log = train_minibatch(&mut self.store, &trainable, examples, opts, label, |store, mask, ex, _| {
            let mut g = Graph::with_trainable(store, mask);
            let loss = net.stage_loss(store, &mut g, level, ex)?;
            let v = g.value(loss.total).item();
            Ok((v, g.backward(loss.total)?))
        })?;
        match level {
            Level::Top => self.top_frozen = true,
            Level::Bottom => self.bottom_trained = true,
        }
        let usage = self.usage(level, examples)?;
        Ok(StageReport { level, log, usage })
    }

    /// Selection histogram of a level's codebook over `examples`.
    pub fn usage(&self, level: Level, examples: &[VqExample]) -> Result<UsageReport> {
        let layout = self.net.layout(level);
        let mut counts = vec![vec![0usize; layout.entries]; layout.partitions];
        for ex in examples {
            let z = self.net.encode(&self.store, level, &ex.image)?;
            let mask = match level {
                Level::Top => &ex.top_mask,
                Level::Bottom => &ex.bottom_mask,
            };
            let (_, tokens) = self.net.quantize(&self.store, level, &z, mask)?;
            for (pos, &t) in tokens.textures.iter().enumerate() {
                counts[partition_of(&layout, t)?][tokens.index(pos).expect("quantized")] += 1;
            }
        }
        let (mut used, mut total) = (0, 0);
        let partitions: Vec<PartitionUsage> = counts
            .into_iter()
            .enumerate()
            .map(|(partition, counts)| {
                if counts.iter().any(|&c| c > 0) {
                    used += counts.iter().filter(|&&c| c > 0).count();
                    total += counts.len();
                }
                let dead = counts.iter().enumerate().filter(|(_, &c)| c == 0).map(|(k, _)| k).collect();
                PartitionUsage { partition, counts, dead }
            })
            .collect();
        Ok(UsageReport { level, partitions, used_fraction: if total == 0 { 0.0 } else { used as f64 / total as f64 } })
    }

    pub fn to_checkpoint(&self, usage: &[UsageReport]) -> Checkpoint {
        let meta = json!({
            "config": self.net.config,
            "top_frozen": self.top_frozen,
            "bottom_trained": self.bottom_trained,
            "usage": usage,
        });
        Checkpoint::from_store(CHECKPOINT_KIND, meta, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: VqConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        model.top_frozen = ck.meta["top_frozen"].as_bool().unwrap_or(false);
        model.bottom_trained = ck.meta["bottom_trained"].as_bool().unwrap_or(false);
        Ok(model)
    }

    /// Usage reports stored with a checkpoint.
    pub fn checkpoint_usage(ck: &Checkpoint) -> Result<Vec<UsageReport>> {
        Ok(serde_json::from_value(ck.meta.get("usage").cloned().unwrap_or(json!([])))?)
    }
}

fn global_indices(tokens: &TokenGrid, layout: &BookLayout) -> Result<Vec<usize>> {
    (0..tokens.len())
        .map(|pos| {
            let p = partition_of(layout, tokens.textures[pos])?;
            Ok(layout.global(p, tokens.index(pos).expect("quantized")))
        })
        .collect()
}

/// k-means++ seeding: each new seed is drawn with probability proportional to
/// its squared distance from the seeds chosen so far; repeats once the pool is exhausted.
fn kmeans_pp_seeds(pool: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut seeds = vec![pool[rng.random_range(0..pool.len())].clone()];
    let mut d2: Vec<f64> = pool.iter().map(|v| dist(v, &seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            d2.iter().position(|&d| {
                r -= d;
                r < 0.0
            })
            .unwrap_or(pool.len() - 1)
        } else {
            rng.random_range(0..pool.len())
        };
        seeds.push(pool[pick].clone());
        for (d, v) in d2.iter_mut().zip(pool) {
            *d = d.min(dist(v, &pool[pick]));
        }
    }
    seeds
}

fn rows_of(z: &Tensor) -> Vec<Vec<f64>> {
    let s = z.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    (0..hw).map(|p| (0..c).map(|ch| z.data()[ch * hw + p]).collect()).collect()
}
