use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indexnet::{ArConfig, IndexNetConfig};
use crate::nn::train::TrainOptions;
use crate::predictor::PredictorConfig;
use crate::sampler::SamplerConfig;
use crate::stage1::Stage1Config;
use crate::synth::{default_texture_weights, class, SHAPE_CLASS_COUNTS, TEXTURE_IDS};
use crate::vq::VqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub size: usize,
    /// Relative frequencies of solid, stripe, plaid, dots.
    pub texture_weights: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub stage1: usize,
    pub vq_top: usize,
    pub vq_bottom: usize,
    pub sampler: usize,
    pub indexnet: usize,
    pub predictor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub corpus: u64,
    pub stage1: u64,
    pub vq: u64,
    pub sampler: u64,
    pub indexnet: u64,
    pub predictor: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
}

/// Everything needed to build the corpus, train every stage and generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub height: usize,
    pub width: usize,
    pub parsing_classes: usize,
    pub shape_classes: [usize; 3],
    pub textures: usize,
    pub corpus: CorpusConfig,
    pub stage1: Stage1Config,
    pub vq: VqConfig,
    pub sampler: SamplerConfig,
    pub indexnet: IndexNetConfig,
    pub ar: ArConfig,
    pub predictor: PredictorConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: Epochs,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let vq = VqConfig::default();
        Self {
            height: crate::synth::HEIGHT,
            width: crate::synth::WIDTH,
            parsing_classes: class::COUNT,
            shape_classes: SHAPE_CLASS_COUNTS,
            textures: TEXTURE_IDS,
            corpus: CorpusConfig { size: 1000, texture_weights: default_texture_weights() },
            stage1: Stage1Config::default(),
            sampler: SamplerConfig { entries: vq.k_top, ..SamplerConfig::default() },
            indexnet: IndexNetConfig { c_z: vq.c_z, entries: vq.k_bot, ..IndexNetConfig::default() },
            ar: ArConfig { c_z: vq.c_z, entries: vq.k_bot, grid_h: 16, grid_w: 8, ..ArConfig::default() },
            vq,
            predictor: PredictorConfig::default(),
            lr: 1e-4,
            batch_size: 8,
            epochs: Epochs { stage1: 30, vq_top: 20, vq_bottom: 20, sampler: 40, indexnet: 20, predictor: 10 },
            seeds: Seeds { corpus: 0, stage1: 1, vq: 2, sampler: 3, indexnet: 4, predictor: 5 },
            paths: Paths { corpus: "corpus".into(), checkpoints: "checkpoints".into() },
        }
    }
}

impl PipelineConfig {
    /// Faster profile for a single desktop core: a 10× learning rate with
    /// shorter schedules. Everything else matches the default.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            epochs: Epochs { stage1: 12, vq_top: 10, vq_bottom: 10, sampler: 40, indexnet: 20, predictor: 8 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad(format!("image {}×{}: sides must be positive multiples of 16", self.height, self.width));
        }
        if self.parsing_classes != class::COUNT || self.shape_classes != SHAPE_CLASS_COUNTS || self.textures != TEXTURE_IDS {
            return bad("class counts must match the synthetic corpus".into());
        }
        if self.corpus.size < 10 || self.corpus.texture_weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.corpus.texture_weights.iter().sum::<f64>() <= 0.0 {
            return bad(format!("invalid corpus config {:?}", self.corpus));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.batch_size == 0 {
            return bad(format!("lr {} / batch size {}", self.lr, self.batch_size));
        }
        let e = &self.epochs;
        if [e.stage1, e.vq_top, e.vq_bottom, e.sampler, e.indexnet, e.predictor].contains(&0) {
            return bad("every stage needs at least one epoch".into());
        }
        let (top, bottom) = (self.vq.top_layout(), self.vq.bottom_layout());
        let s = &self.sampler;
        if (s.grid_h, s.grid_w) != (self.height / 16, self.width / 16) || (s.partitions, s.entries) != (top.partitions, top.entries) || s.textures != self.textures {
            return bad(format!("sampler config {s:?} does not match the top codebook"));
        }
        let n = &self.indexnet;
        if n.c_z != self.vq.c_z || (n.partitions, n.entries) != (bottom.partitions, bottom.entries) || n.textures != self.textures {
            return bad(format!("index net config {n:?} does not match the bottom codebook"));
        }
        let a = &self.ar;
        if a.c_z != self.vq.c_z || (a.partitions, a.entries) != (bottom.partitions, bottom.entries) {
            return bad(format!("AR config {a:?} does not match the bottom codebook"));
        }
        if (self.predictor.height, self.predictor.width) != (self.height, self.width) {
            return bad("predictor dims differ from the image dims".into());
        }
        Ok(())
    }

    /// Switch both codebooks to a single shared partition and the sampler /
    /// index net to a single head, keeping every budget unchanged.
    pub fn without_texture_experts(&self) -> Self {
        let mut c = self.clone();
        c.vq.shared_codebook = true;
        let (top, bottom) = (c.vq.top_layout(), c.vq.bottom_layout());
        c.sampler.mixture = false;
        (c.sampler.partitions, c.sampler.entries) = (top.partitions, top.entries);
        c.indexnet.mixture = false;
        (c.indexnet.partitions, c.indexnet.entries) = (bottom.partitions, bottom.entries);
        (c.ar.partitions, c.ar.entries) = (bottom.partitions, bottom.entries);
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn train_options(&self, epochs: usize, seed: u64) -> TrainOptions {
        TrainOptions { epochs, batch_size: self.batch_size, lr: self.lr, seed }
    }
}
