//! Texture attribute predictor: a small CNN over garment-masked images, used
//! to score whether generated garments carry the requested texture.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::train::{train_minibatch, TrainLog, TrainOptions};
use crate::nn::{softmax_rows, Checkpoint, Graph, NodeId, ParamStore, Tensor};
use crate::synth::{class, FigureImage, ParsingMap, Sample, TextureKind};

pub const CHECKPOINT_KIND: &str = "predictor";
pub const KINDS: usize = 4;
const CONTRAST: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub height: usize,
    pub width: usize,
    pub widths: [usize; 4],
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { height: crate::synth::HEIGHT, width: crate::synth::WIDTH, widths: [16, 32, 32, 32] }
    }
}

/// Garment RGB minus the garment's mean colour (zero outside), plus the mask:
/// `[4, H, W]`. Centering makes the input independent of the colour pair, so
/// only the pattern is left to classify.
pub fn masked_input(image: &FigureImage, parsing: &ParsingMap, garment: u8) -> Result<Tensor> {
    let (h, w) = parsing.grid().dims();
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::shape(format!("image {}×{} vs parsing {h}×{w}", image.height(), image.width())));
    }
    let region = parsing.region(garment);
    if !region.iter().any(|&r| r) {
        return Err(Error::InvalidLabels(format!("no pixels of class {garment}")));
    }
    let rgb = image.to_tensor();
    let hw = h * w;
    let area = region.iter().filter(|&&r| r).count() as f64;
    let mean: Vec<f64> = (0..3).map(|c| (0..hw).filter(|&p| region[p]).map(|p| rgb.data()[c * hw + p]).sum::<f64>() / area).collect();
    Ok(Tensor::from_fn(&[4, h, w], |i| {
        let (c, p) = (i / hw, i % hw);
        match (c, region[p]) {
            (_, false) => 0.0,
            (3, true) => 1.0,
            (c, true) => CONTRAST * (rgb.data()[c * hw + p] - mean[c]),
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorExample {
    pub input: Tensor,
    pub texture: TextureKind,
}

impl PredictorExample {
    /// One example per garment of a corpus sample.
    pub fn from_sample(s: &Sample) -> Result<Vec<Self>> {
        [(class::UPPER, s.attrs.upper_texture), (class::LOWER, s.attrs.lower_texture)]
            .into_iter()
            .map(|(garment, t)| Ok(Self { input: masked_input(&s.image, &s.parsing, garment)?, texture: TextureKind::from_id(t)? }))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TexturePrediction {
    pub texture: TextureKind,
    /// Probabilities over solid, stripe, plaid, dots.
    pub probs: [f64; KINDS],
}

impl TexturePrediction {
    pub fn prob(&self, kind: TextureKind) -> f64 {
        self.probs[kind.id() as usize - 1]
    }
}

/// Rows are true textures, columns predicted, both in id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self { labels: TextureKind::ALL.iter().map(|k| k.name().to_string()).collect(), counts: vec![vec![0; KINDS]; KINDS] }
    }

    pub fn record(&mut self, truth: TextureKind, predicted: TextureKind) {
        self.counts[truth.id() as usize - 1][predicted.id() as usize - 1] += 1;
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let hit: usize = (0..KINDS).map(|i| self.counts[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    /// Recall of one true texture; `None` if it never occurred.
    pub fn recall(&self, kind: TextureKind) -> Option<f64> {
        let row = &self.counts[kind.id() as usize - 1];
        let n: usize = row.iter().sum();
        (n > 0).then(|| row[kind.id() as usize - 1] as f64 / n as f64)
    }
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Garment mask block-averaged to `h×w`, normalised to sum to one: `[h*w, 1]`.
fn mask_weights(input: &Tensor, h: usize, w: usize) -> Tensor {
    let (ih, iw) = (input.shape()[1], input.shape()[2]);
    let (bh, bw) = (ih / h, iw / w);
    let mask = &input.data()[3 * ih * iw..];
    let mut out = vec![0.0; h * w];
    for r in 0..ih {
        for c in 0..iw {
            out[(r / bh) * w + c / bw] += mask[r * iw + c];
        }
    }
    let total: f64 = out.iter().sum();
    Tensor::new(vec![h * w, 1], out.into_iter().map(|x| x / total).collect()).expect("sizes agree")
}

#[derive(Clone, Debug)]
struct Net {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Net {
    fn new(store: &mut ParamStore, config: &PredictorConfig, rng: &mut ChaCha8Rng) -> Self {
        let w = config.widths;
        let convs = vec![
            Conv2d::new(store, "predictor.conv0", 4, w[0], 3, 1, rng),
            Conv2d::new(store, "predictor.conv1", w[0], w[1], 3, 2, rng),
            Conv2d::new(store, "predictor.conv2", w[1], w[2], 3, 2, rng),
            Conv2d::new(store, "predictor.conv3", w[2], w[3], 3, 2, rng),
        ];
        Self { convs, head: Linear::new(store, "predictor.head", w[3], KINDS, rng) }
    }

    fn forward(&self, g: &mut Graph, input: &Tensor) -> Result<NodeId> {
        let mut x = g.constant(input.clone());
        for c in &self.convs {
            let y = c.forward(g, x)?;
            x = g.relu(y);
        }
        // Textures are stationary: average the final features over the garment.
        let s = g.shape(x).to_vec();
        let weights = mask_weights(input, s[1], s[2]);
        let rows = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let w = g.constant(weights);
        let pooled = g.linear(rows, w, None)?;
        let pooled = g.reshape(pooled, &[s[0]])?;
        self.head.forward_vec(g, pooled)
    }
}

#[derive(Clone, Debug)]
pub struct AttributePredictor {
    config: PredictorConfig,
    net: Net,
    store: ParamStore,
}

impl AttributePredictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        if config.height % 8 != 0 || config.width % 8 != 0 || config.widths.contains(&0) {
            return Err(Error::Config(format!("invalid predictor config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, &config, &mut rng);
        Ok(Self { config, net, store })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        if input.shape() != [4, self.config.height, self.config.width] {
            return Err(Error::shape(format!("predictor input {:?}", input.shape())));
        }
        Ok(())
    }

    pub fn loss(&self, g: &mut Graph, ex: &PredictorExample) -> Result<NodeId> {
        self.check(&ex.input)?;
        let logits = self.net.forward(g, &ex.input)?;
        let rows = g.reshape(logits, &[1, KINDS])?;
        g.cross_entropy(rows, &[Some(ex.texture.id() as usize - 1)])
    }

    pub fn train(&mut self, examples: &[PredictorExample], opts: TrainOptions) -> Result<TrainLog> {
        let ids: Vec<_> = self.store.ids().collect();
        let model = self.clone();
        train_minibatch(&mut self.store, &ids, examples, opts, "predictor", |store, mask, ex, _| {
            let mut g = Graph::with_trainable(store, mask);
            let loss = model.loss(&mut g, ex)?;
            let v = g.value(loss).item();
            Ok((v, g.backward(loss)?))
        })
    }

    pub fn predict_input(&self, input: &Tensor) -> Result<TexturePrediction> {
        self.check(input)?;
        let mut g = Graph::new(&self.store);
        let logits = self.net.forward(&mut g, input)?;
        let p = softmax_rows(g.value(logits).data(), KINDS);
        let mut best = 0;
        for k in 1..KINDS {
            if p[k] > p[best] {
                best = k;
            }
        }
        Ok(TexturePrediction { texture: TextureKind::ALL[best], probs: [p[0], p[1], p[2], p[3]] })
    }

    /// Texture of one garment class of an image.
    pub fn predict(&self, image: &FigureImage, parsing: &ParsingMap, garment: u8) -> Result<TexturePrediction> {
        self.predict_input(&masked_input(image, parsing, garment)?)
    }

    pub fn evaluate(&self, examples: &[PredictorExample]) -> Result<ConfusionMatrix> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut m = ConfusionMatrix::new();
        for ex in examples {
            m.record(ex.texture, self.predict_input(&ex.input)?.texture);
        }
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, json!({ "config": &self.config }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: PredictorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}
