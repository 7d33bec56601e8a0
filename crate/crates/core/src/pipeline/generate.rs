//! End-to-end generation: texts → attributes → parsing → top tokens → fine
//! indices → image, with a provenance record that reproduces the result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::indexnet::{fine_texture_mask, IndexNet};
use crate::nn::Checkpoint;
use crate::sampler::{tokenize_conditions_at, MoeSampler};
use crate::stage1::PoseToParsing;
use crate::synth::{AttributeSet, FigureImage, ParsingMap, PoseMap};
use crate::textattr::{Lexicon, ShapeText, TextureText};
use crate::vq::{latent_texture_mask, HierVq, TokenGrid};

pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const VQ_FILE: &str = "vq.ckpt";
pub const SAMPLER_FILE: &str = "sampler.ckpt";
pub const INDEXNET_FILE: &str = "indexnet.ckpt";
pub const PREDICTOR_FILE: &str = "predictor.ckpt";

pub const PROVENANCE_FORMAT: u32 = 1;

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest(ck: &Checkpoint) -> Result<String> {
    Ok(sha256_hex(&ck.to_bytes()?))
}

/// Independent stream seed for one pipeline stage.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(stage.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Bit-level digest of an image's floating-point pixels.
pub fn image_digest(image: &FigureImage) -> String {
    let bytes: Vec<u8> = image.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// SHA-256 of every frozen model, so a record can only be replayed against the same weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDigests {
    pub stage1: String,
    pub vq: String,
    pub sampler: String,
    pub indexnet: String,
    pub lexicon: String,
}

/// The frozen models generation needs.
#[derive(Debug)]
pub struct Models {
    pub stage1: PoseToParsing,
    pub vq: HierVq,
    pub sampler: MoeSampler,
    pub indexnet: IndexNet,
    pub lexicon: Lexicon,
    digests: ModelDigests,
}

impl Models {
    pub fn new(stage1: PoseToParsing, vq: HierVq, sampler: MoeSampler, indexnet: IndexNet, lexicon: Lexicon) -> Result<Self> {
        let (top, bottom) = (vq.top_codebook().1, vq.bottom_codebook().1);
        let s = sampler.config();
        if (s.partitions, s.entries) != (top.partitions, top.entries) {
            return Err(Error::Config(format!("sampler logits {}×{} do not match the top codebook", s.partitions, s.entries)));
        }
        let n = indexnet.config();
        if (n.partitions, n.entries, n.c_z) != (bottom.partitions, bottom.entries, vq.config().c_z) {
            return Err(Error::Config("index net does not match the bottom codebook".into()));
        }
        if !vq.is_bottom_trained() || !indexnet.is_trained() {
            return Err(Error::Misuse("generation needs trained VQ and index-net checkpoints".into()));
        }
        let digests = ModelDigests {
            stage1: digest(&stage1.to_checkpoint())?,
            vq: digest(&vq.to_checkpoint(&[]))?,
            sampler: digest(&sampler.to_checkpoint())?,
            indexnet: digest(&indexnet.to_checkpoint())?,
            lexicon: sha256_hex(lexicon.to_json().as_bytes()),
        };
        Ok(Self { stage1, vq, sampler, indexnet, lexicon, digests })
    }

    pub fn checkpoint_paths(dir: &Path) -> [PathBuf; 4] {
        [STAGE1_FILE, VQ_FILE, SAMPLER_FILE, INDEXNET_FILE].map(|f| dir.join(f))
    }

    /// Load every checkpoint from `dir`; a missing file is reported by name.
    pub fn load(dir: &Path, lexicon: Lexicon) -> Result<Self> {
        let [s1, vq, sampler, index] = Self::checkpoint_paths(dir);
        Self::new(
            PoseToParsing::from_checkpoint(&Checkpoint::load(&s1)?)?,
            HierVq::from_checkpoint(&Checkpoint::load(&vq)?)?,
            MoeSampler::from_checkpoint(&Checkpoint::load(&sampler)?)?,
            IndexNet::from_checkpoint(&Checkpoint::load(&index)?)?,
            lexicon,
        )
    }

    /// Write the four checkpoints `load` reads.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let [s1, vq, sampler, index] = Self::checkpoint_paths(dir);
        self.stage1.to_checkpoint().save(&s1)?;
        self.vq.to_checkpoint(&[]).save(&vq)?;
        self.sampler.to_checkpoint().save(&sampler)?;
        self.indexnet.to_checkpoint().save(&index)?;
        Ok(())
    }

    pub fn digests(&self) -> &ModelDigests {
        &self.digests
    }

    /// Stage I: shape text → attributes → parsing (argmax).
    pub fn parse(&self, pose: &PoseMap, shape_text: &str) -> Result<(ParsingMap, ShapeText)> {
        let shape = self.lexicon.shape_attributes(shape_text)?;
        let parsing = self.stage1.predict_logits(pose, shape.shape())?.argmax();
        Ok((parsing, shape))
    }

    /// Stage II on a fixed parsing.
    pub fn render(&self, parsing: &ParsingMap, attrs: &AttributeSet, sampler_seed: u64, steps: usize, temperature: f64) -> Result<Rendered> {
        render_stage2(&self.vq, &self.sampler, &self.indexnet, parsing, attrs, sampler_seed, steps, temperature)
    }

    /// Full generation. `parsing_override` replaces the Stage I output (a
    /// palette-edited parsing); the shape text is still classified and recorded.
    pub fn generate(&self, pose: &PoseMap, shape_text: &str, texture_text: &str, seed: u64, parsing_override: Option<ParsingMap>) -> Result<Generation> {
        let steps = self.sampler.config().steps;
        let temperature = self.sampler.config().temperature;
        self.generate_with(pose, shape_text, texture_text, seed, parsing_override, steps, temperature)
    }

    #[allow(clippy::too_many_arguments)]
    fn generate_with(
        &self,
        pose: &PoseMap,
        shape_text: &str,
        texture_text: &str,
        seed: u64,
        parsing_override: Option<ParsingMap>,
        steps: usize,
        temperature: f64,
    ) -> Result<Generation> {
        let (attrs, shape, texture) = self.lexicon.attributes_from_text(shape_text, texture_text)?;
        let (parsing, source) = match parsing_override {
            Some(p) => {
                if p.grid().dims() != pose.grid().dims() {
                    return Err(Error::InvalidLabels(format!("parsing {:?} vs pose {:?}", p.grid().dims(), pose.grid().dims())));
                }
                (p, ParsingSource::Override)
            }
            None => (self.stage1.predict_logits(pose, shape.shape())?.argmax(), ParsingSource::Stage1),
        };
        let sampler_seed = derive_seed(seed, "sampler");
        let r = self.render(&parsing, &attrs, sampler_seed, steps, temperature)?;
        let provenance = Provenance {
            format: PROVENANCE_FORMAT,
            seed,
            sampler_seed,
            steps,
            temperature,
            shape_text: shape_text.to_string(),
            texture_text: texture_text.to_string(),
            attributes: attrs,
            shape,
            texture,
            pose: EncodedGrid::from(pose.grid()),
            parsing_source: source,
            parsing: EncodedGrid::from(parsing.grid()),
            top_tokens: r.top_tokens,
            bottom_tokens: r.bottom_tokens,
            models: self.digests.clone(),
            image_sha256: image_digest(&r.image),
        };
        Ok(Generation { parsing, image: r.image, provenance })
    }

    /// Replay a provenance record. Fails if the models differ from the ones
    /// that produced it or if the replay does not reproduce the image digest.
    pub fn regenerate(&self, p: &Provenance) -> Result<Generation> {
        if p.format != PROVENANCE_FORMAT {
            return Err(Error::Config(format!("provenance format {} (expected {PROVENANCE_FORMAT})", p.format)));
        }
        if p.models != self.digests {
            return Err(Error::Checkpoint("provenance was produced by different model checkpoints".into()));
        }
        let pose = PoseMap::new(p.pose.decode()?)?;
        let parsing_override = match p.parsing_source {
            ParsingSource::Override => Some(ParsingMap::new(p.parsing.decode()?)?),
            ParsingSource::Stage1 => None,
        };
        let g = self.generate_with(&pose, &p.shape_text, &p.texture_text, p.seed, parsing_override, p.steps, p.temperature)?;
        if g.provenance.image_sha256 != p.image_sha256 {
            return Err(Error::Misuse("replay did not reproduce the recorded image".into()));
        }
        Ok(g)
    }
}

/// Stage II: sampled top tokens, feed-forward fine indices, two-level decode.
#[allow(clippy::too_many_arguments)]
pub fn render_stage2(
    vq: &HierVq,
    sampler: &MoeSampler,
    indexnet: &IndexNet,
    parsing: &ParsingMap,
    attrs: &AttributeSet,
    sampler_seed: u64,
    steps: usize,
    temperature: f64,
) -> Result<Rendered> {
    let (h, w) = parsing.grid().dims();
    let cfg = sampler.config();
    if (h / 16, w / 16) != (cfg.grid_h, cfg.grid_w) || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::shape(format!("parsing {h}×{w} does not match the sampler grid {}×{}", cfg.grid_h, cfg.grid_w)));
    }
    let cond = tokenize_conditions_at(parsing, attrs, h / 16, w / 16)?;
    let top_tokens = sampler.sample(&cond, steps, sampler_seed, temperature)?;
    let feat_top = vq.feat_top_from_tokens(&top_tokens)?;
    let fine = fine_texture_mask(&latent_texture_mask(parsing, attrs, h / 8, w / 8)?)?;
    let bottom_tokens = indexnet.predict(&feat_top, &fine)?;
    let feat_bot = vq.feat_bot_from_tokens(&bottom_tokens)?;
    let image = FigureImage::from_tensor(&vq.decode_full(&feat_top, &feat_bot)?)?;
    Ok(Rendered { top_tokens, bottom_tokens, image })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub top_tokens: TokenGrid,
    pub bottom_tokens: TokenGrid,
    pub image: FigureImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub parsing: ParsingMap,
    pub image: FigureImage,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParsingSource {
    Stage1,
    Override,
}

/// A label grid as hex-encoded raw labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedGrid {
    pub height: usize,
    pub width: usize,
    pub labels: String,
}

impl From<&LabelGrid> for EncodedGrid {
    fn from(g: &LabelGrid) -> Self {
        Self { height: g.height(), width: g.width(), labels: hex::encode(g.data()) }
    }
}

impl EncodedGrid {
    pub fn decode(&self) -> Result<LabelGrid> {
        let data = hex::decode(&self.labels).map_err(|e| Error::InvalidLabels(format!("label hex: {e}")))?;
        LabelGrid::new(self.height, self.width, data)
    }
}

/// Everything needed to regenerate an image bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub format: u32,
    pub seed: u64,
    pub sampler_seed: u64,
    pub steps: usize,
    pub temperature: f64,
    pub shape_text: String,
    pub texture_text: String,
    pub attributes: AttributeSet,
    pub shape: ShapeText,
    pub texture: TextureText,
    pub pose: EncodedGrid,
    pub parsing_source: ParsingSource,
    pub parsing: EncodedGrid,
    pub top_tokens: TokenGrid,
    pub bottom_tokens: TokenGrid,
    pub models: ModelDigests,
    pub image_sha256: String,
}
