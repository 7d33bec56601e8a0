//! Stage-by-stage training drivers with their held-out evaluations.

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::generate::Models;
use crate::error::{Error, Result};
use crate::indexnet::{IndexAccuracy, IndexExample, IndexNet};
use crate::predictor::{AttributePredictor, ConfusionMatrix, PredictorExample};
use crate::sampler::{tokenize_conditions_at, MoeSampler, SamplerExample};
use crate::stage1::{sleeve_probe, PoseToParsing, SleeveProbe, Stage1Example};
use crate::synth::{Corpus, Sample, Split};
use crate::textattr::Lexicon;
use crate::vq::{HierVq, Level, UsageReport, VqExample};

/// Seeds of the poses probed for sleeve-length monotonicity.
pub const PROBE_SEEDS: [u64; 10] = [1001, 1002, 1003, 1004, 1005, 1006, 1007, 1008, 1009, 1010];

fn split(corpus: &Corpus, s: Split) -> Result<&[Sample]> {
    let samples = corpus.samples(s);
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub epoch_losses: Vec<f64>,
    pub test_pixel_accuracy: f64,
    pub sleeve_probe: Vec<SleeveProbe>,
}

impl Stage1Report {
    pub fn probes_passed(&self) -> usize {
        self.sleeve_probe.iter().filter(|p| p.increased).count()
    }
}

pub fn stage1_examples(samples: &[Sample]) -> Vec<Stage1Example> {
    samples.iter().map(Stage1Example::from_sample).collect()
}

pub fn evaluate_stage1(model: &PoseToParsing, corpus: &Corpus) -> Result<(f64, Vec<SleeveProbe>)> {
    let acc = model.pixel_accuracy(&stage1_examples(split(corpus, Split::Test)?))?;
    Ok((acc, sleeve_probe(model, &PROBE_SEEDS)?))
}

pub fn train_stage1(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(PoseToParsing, Stage1Report)> {
    let mut model = PoseToParsing::new(cfg.stage1.clone(), cfg.seeds.stage1)?;
    let log = model.train(&stage1_examples(split(corpus, Split::Train)?), cfg.train_options(cfg.epochs.stage1, cfg.seeds.stage1))?;
    let (test_pixel_accuracy, sleeve_probe) = evaluate_stage1(&model, corpus)?;
    Ok((model, Stage1Report { epoch_losses: log.epoch_losses, test_pixel_accuracy, sleeve_probe }))
}

pub fn vq_examples(samples: &[Sample]) -> Result<Vec<VqExample>> {
    samples.iter().map(VqExample::from_sample).collect()
}

/// Mean absolute pixel error of reconstructions, top-only or through both levels.
pub fn recon_loss(vq: &HierVq, examples: &[VqExample], full: bool) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for ex in examples {
        let img = if full {
            vq.encode_decode_full(&ex.image, &ex.top_mask, &ex.bottom_mask)?.image
        } else {
            vq.encode_decode_top(&ex.image, &ex.top_mask)?.image
        };
        total += img.data().iter().zip(ex.image.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqReport {
    pub top_losses: Vec<f64>,
    pub bottom_losses: Vec<f64>,
    pub steps: usize,
    pub usage: Vec<UsageReport>,
    pub test_recon_top_only: f64,
    pub test_recon_full: f64,
}

/// Top level to convergence, freeze, then the residual bottom level.
pub fn train_vq(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(HierVq, VqReport)> {
    let train = vq_examples(split(corpus, Split::Train)?)?;
    let test = vq_examples(split(corpus, Split::Test)?)?;
    let mut vq = HierVq::new(cfg.vq, cfg.seeds.vq)?;
    let top = vq.train_stage(Level::Top, &train, cfg.train_options(cfg.epochs.vq_top, cfg.seeds.vq))?;
    let test_recon_top_only = recon_loss(&vq, &test, false)?;
    let bottom = vq.train_stage(Level::Bottom, &train, cfg.train_options(cfg.epochs.vq_bottom, cfg.seeds.vq + 1))?;
    let report = VqReport {
        top_losses: top.log.epoch_losses,
        bottom_losses: bottom.log.epoch_losses,
        steps: top.log.steps + bottom.log.steps,
        usage: vec![top.usage, bottom.usage],
        test_recon_top_only,
        test_recon_full: recon_loss(&vq, &test, true)?,
    };
    Ok((vq, report))
}

/// Top-level tokens of each sample under a trained VQ, with their conditions.
pub fn sampler_examples(vq: &HierVq, samples: &[Sample]) -> Result<Vec<SamplerExample>> {
    samples
        .iter()
        .map(|s| {
            let ex = VqExample::from_sample(s)?;
            let (_, target) = vq.quantize_top(&vq.encode_top(&ex.image)?, &ex.top_mask)?;
            let cond = tokenize_conditions_at(&s.parsing, &s.attrs, target.height, target.width)?;
            Ok(SamplerExample { target, cond })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub epoch_losses: Vec<f64>,
    pub expert_losses: Vec<Option<f64>>,
    pub steps: usize,
    pub test_masked_accuracy: f64,
}

pub fn train_sampler(cfg: &PipelineConfig, vq: &HierVq, corpus: &Corpus) -> Result<(MoeSampler, SamplerReport)> {
    let train = sampler_examples(vq, split(corpus, Split::Train)?)?;
    let test = sampler_examples(vq, split(corpus, Split::Test)?)?;
    let mut sampler = MoeSampler::new(cfg.sampler, cfg.seeds.sampler)?;
    let log = sampler.train(&train, cfg.train_options(cfg.epochs.sampler, cfg.seeds.sampler))?;
    let report = SamplerReport {
        epoch_losses: log.epoch_losses,
        expert_losses: log.expert_losses.last().cloned().unwrap_or_default(),
        steps: log.steps,
        test_masked_accuracy: sampler.masked_accuracy(&test, cfg.seeds.sampler)?,
    };
    Ok((sampler, report))
}

pub fn index_examples(vq: &HierVq, samples: &[Sample]) -> Result<Vec<IndexExample>> {
    samples.iter().map(|s| IndexExample::from_vq(vq, &VqExample::from_sample(s)?)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub test_accuracy: IndexAccuracy,
}

pub fn train_indexnet(cfg: &PipelineConfig, vq: &HierVq, corpus: &Corpus) -> Result<(IndexNet, IndexReport)> {
    let train = index_examples(vq, split(corpus, Split::Train)?)?;
    let test = index_examples(vq, split(corpus, Split::Test)?)?;
    let mut net = IndexNet::new(cfg.indexnet, cfg.seeds.indexnet)?;
    let log = net.train(&train, cfg.train_options(cfg.epochs.indexnet, cfg.seeds.indexnet))?;
    let report = IndexReport { epoch_losses: log.epoch_losses, steps: log.steps, test_accuracy: net.accuracy(&test)? };
    Ok((net, report))
}

pub fn predictor_examples(samples: &[Sample]) -> Result<Vec<PredictorExample>> {
    Ok(samples.iter().map(PredictorExample::from_sample).collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn train_predictor(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(AttributePredictor, PredictorReport)> {
    let train = predictor_examples(split(corpus, Split::Train)?)?;
    let test = predictor_examples(split(corpus, Split::Test)?)?;
    let mut p = AttributePredictor::new(cfg.predictor.clone(), cfg.seeds.predictor)?;
    let log = p.train(&train, cfg.train_options(cfg.epochs.predictor, cfg.seeds.predictor))?;
    let confusion = p.evaluate(&test)?;
    Ok((p, PredictorReport { epoch_losses: log.epoch_losses, test_accuracy: confusion.accuracy(), confusion }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub stage1: Stage1Report,
    pub vq: VqReport,
    pub sampler: SamplerReport,
    pub indexnet: IndexReport,
}

/// Every generation stage in order: Stage I, the VQ levels, then the sampler
/// and index net on the frozen VQ.
pub fn train_models(cfg: &PipelineConfig, corpus: &Corpus, lexicon: Lexicon) -> Result<(Models, TrainingSummary)> {
    cfg.validate()?;
    let (stage1, s1) = train_stage1(cfg, corpus)?;
    log::info!("stage I: test pixel accuracy {:.3}", s1.test_pixel_accuracy);
    let (vq, v) = train_vq(cfg, corpus)?;
    log::info!("vq: test recon top-only {:.4}, full {:.4}", v.test_recon_top_only, v.test_recon_full);
    let (sampler, s) = train_sampler(cfg, &vq, corpus)?;
    log::info!("sampler: masked accuracy {:.3}", s.test_masked_accuracy);
    let (indexnet, i) = train_indexnet(cfg, &vq, corpus)?;
    let models = Models::new(stage1, vq, sampler, indexnet, lexicon)?;
    Ok((models, TrainingSummary { stage1: s1, vq: v, sampler: s, indexnet: i }))
}
