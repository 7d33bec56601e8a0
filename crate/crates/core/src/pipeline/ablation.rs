//! Paired variant/baseline experiments. Both arms of an ablation see the same
//! corpus, seeds and optimizer-step budget; the reports carry the budgets so
//! the harness can check that.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::generate::{derive_seed, render_stage2};
use super::train::{index_examples, recon_loss, train_indexnet, train_predictor, train_sampler, train_vq, vq_examples};
use crate::error::{Error, Result};
use crate::indexnet::{tile_examples, tile_of, ArBaseline, IndexExample, IndexNet};
use crate::predictor::{AttributePredictor, ConfusionMatrix};
use crate::synth::{class, Corpus, FigureImage, Sample, Split, TextureKind};
use crate::vq::{HierVq, Level};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationName {
    Hier,
    Moe,
    Ffpred,
}

impl FromStr for AblationName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hier" => Ok(Self::Hier),
            "moe" => Ok(Self::Moe),
            "ffpred" => Ok(Self::Ffpred),
            other => Err(Error::UnknownAblation(other.to_string())),
        }
    }
}

/// What an arm was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub train_samples: usize,
    pub seed: u64,
    pub steps: usize,
}

fn check_fair(a: &Budget, b: &Budget) -> Result<()> {
    if a != b {
        return Err(Error::Misuse(format!("ablation arms have different budgets: {a:?} vs {b:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconArm {
    pub model: String,
    pub test_recon_loss: f64,
    pub budget: Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierReport {
    pub variant: ReconArm,
    pub baseline: ReconArm,
    /// `1 - variant / baseline`.
    pub relative_improvement: f64,
}

/// Two-level model against a top-only model given the same total number of
/// optimizer steps (the top-only model spends the bottom stage's epochs on
/// its single level). Returns the trained two-level model for reuse.
pub fn hier(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(HierReport, HierVq)> {
    let (vq, report) = train_vq(cfg, corpus)?;
    let train = vq_examples(corpus.samples(Split::Train))?;
    let test = vq_examples(corpus.samples(Split::Test))?;
    let mut top_only = HierVq::new(cfg.vq, cfg.seeds.vq)?;
    let r = top_only.train_stage(Level::Top, &train, cfg.train_options(cfg.epochs.vq_top + cfg.epochs.vq_bottom, cfg.seeds.vq))?;
    let variant = ReconArm {
        model: "two-level".into(),
        test_recon_loss: report.test_recon_full,
        budget: Budget { train_samples: train.len(), seed: cfg.seeds.vq, steps: report.steps },
    };
    let baseline = ReconArm {
        model: "top-only".into(),
        test_recon_loss: recon_loss(&top_only, &test, false)?,
        budget: Budget { train_samples: train.len(), seed: cfg.seeds.vq, steps: r.log.steps },
    };
    check_fair(&variant.budget, &baseline.budget)?;
    let relative_improvement = 1.0 - variant.test_recon_loss / baseline.test_recon_loss;
    Ok((HierReport { variant, baseline, relative_improvement }, vq))
}

/// One row of the per-texture table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureRow {
    pub texture: String,
    pub garments: usize,
    pub without_moe: f64,
    pub with_moe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeArm {
    pub model: String,
    pub confusion: ConfusionMatrix,
    pub budget: Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeReport {
    pub rows: Vec<TextureRow>,
    pub variant: MoeArm,
    pub baseline: MoeArm,
    pub draws_per_condition: usize,
}

impl MoeReport {
    pub fn row(&self, kind: TextureKind) -> &TextureRow {
        &self.rows[kind.id() as usize - 1]
    }
}

pub const MOE_DRAWS: usize = 2;

/// The Stage II models of one ablation arm.
#[derive(Clone, Debug)]
pub struct StageTwo {
    pub vq: HierVq,
    pub sampler: crate::sampler::MoeSampler,
    pub indexnet: IndexNet,
    pub steps: usize,
}

fn train_stage_two(cfg: &PipelineConfig, corpus: &Corpus, vq: Option<&HierVq>) -> Result<StageTwo> {
    let vq = match vq {
        Some(v) => v.clone(),
        None => train_vq(cfg, corpus)?.0,
    };
    let (sampler, s) = train_sampler(cfg, &vq, corpus)?;
    let (indexnet, i) = train_indexnet(cfg, &vq, corpus)?;
    let steps = s.steps + i.steps;
    Ok(StageTwo { vq, sampler, indexnet, steps })
}

/// Render every test condition (ground-truth parsing and attributes) and
/// label each garment with the predictor.
fn garment_confusion(two: &StageTwo, cfg: &PipelineConfig, test: &[Sample], predictor: &AttributePredictor, draws: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new();
    for (i, s) in test.iter().enumerate() {
        for d in 0..draws {
            let seed = derive_seed((i * draws + d) as u64, "moe-ablation");
            let r = render_stage2(&two.vq, &two.sampler, &two.indexnet, &s.parsing, &s.attrs, seed, cfg.sampler.steps, cfg.sampler.temperature)?;
            for (garment, t) in [(class::UPPER, s.attrs.upper_texture), (class::LOWER, s.attrs.lower_texture)] {
                if s.parsing.grid().count(garment) > 0 {
                    m.record(TextureKind::from_id(t)?, predictor.predict(&r.image, &s.parsing, garment)?.texture);
                }
            }
        }
    }
    Ok(m)
}

/// Texture-aware codebooks with per-texture expert heads against one shared
/// codebook with a single head; everything else identical. Also returns the
/// variant's models.
pub fn moe(cfg: &PipelineConfig, corpus: &Corpus, predictor: &AttributePredictor, texture_vq: Option<&HierVq>) -> Result<(MoeReport, StageTwo)> {
    let test = corpus.samples(Split::Test);
    let n_train = corpus.samples(Split::Train).len();
    let with = train_stage_two(cfg, corpus, texture_vq)?;
    let shared_cfg = cfg.without_texture_experts();
    let without = train_stage_two(&shared_cfg, corpus, None)?;
    let variant = MoeArm {
        model: "texture-aware codebook + MoE heads".into(),
        confusion: garment_confusion(&with, cfg, test, predictor, MOE_DRAWS)?,
        budget: Budget { train_samples: n_train, seed: cfg.seeds.sampler, steps: with.steps },
    };
    let baseline = MoeArm {
        model: "shared codebook + single head".into(),
        confusion: garment_confusion(&without, &shared_cfg, test, predictor, MOE_DRAWS)?,
        budget: Budget { train_samples: n_train, seed: shared_cfg.seeds.sampler, steps: without.steps },
    };
    check_fair(&variant.budget, &baseline.budget)?;
    let rows = TextureKind::ALL
        .iter()
        .map(|&k| TextureRow {
            texture: k.name().into(),
            garments: variant.confusion.counts[k.id() as usize - 1].iter().sum(),
            without_moe: baseline.confusion.recall(k).unwrap_or(0.0),
            with_moe: variant.confusion.recall(k).unwrap_or(0.0),
        })
        .collect();
    Ok((MoeReport { rows, variant, baseline, draws_per_condition: MOE_DRAWS }, with))
}

/// Timing and decoded pixel error of one fine-index method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: String,
    pub grid: [usize; 2],
    /// Mean wall-clock per grid.
    pub wall_ms: f64,
    pub pixel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfpredReport {
    pub variant: BenchResult,
    pub baseline: BenchResult,
    pub speedup: f64,
    pub error_ratio: f64,
    pub mosaics: usize,
    pub budget: Budget,
}

pub const MOSAIC: (usize, usize) = (4, 4);
pub const BENCH_MOSAICS: usize = 50;

/// `rows × cols` figures per mosaic, drawn in seeded shuffles of the training set.
fn train_mosaics(examples: &[IndexExample], passes: usize, seed: u64) -> Result<Vec<IndexExample>> {
    let per = MOSAIC.0 * MOSAIC.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..passes {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(per) {
            let parts: Vec<&IndexExample> = chunk.iter().map(|&i| &examples[i]).collect();
            out.push(tile_examples(&parts, MOSAIC.0, MOSAIC.1)?);
        }
    }
    Ok(out)
}

/// Test mosaic `j` holds test figures `j, j+1, …, j+15` (mod n).
fn test_mosaic_members(j: usize, n: usize) -> Vec<usize> {
    (0..MOSAIC.0 * MOSAIC.1).map(|t| (j + t) % n).collect()
}

/// Decode each tile of a predicted mosaic with its figure's own top features
/// and compare to the figure's image.
fn mosaic_pixel_error(vq: &HierVq, predicted: &crate::vq::TokenGrid, members: &[usize], test: &[IndexExample], images: &[FigureImage]) -> Result<f64> {
    let (h, w) = (test[0].target.height, test[0].target.width);
    let mut total = 0.0;
    for (t, &m) in members.iter().enumerate() {
        let tile = tile_of(predicted, h, w, t / MOSAIC.1, t % MOSAIC.1);
        let img = vq.decode_full(&test[m].feat_top, &vq.feat_bot_from_tokens(&tile)?)?;
        total += FigureImage::from_tensor(&img)?.mean_abs_diff(&images[m]);
    }
    Ok(total / members.len() as f64)
}

/// Feed-forward index prediction against the raster-order AR baseline on
/// mosaics of test figures; both trained on the same training mosaics.
pub fn ffpred(cfg: &PipelineConfig, corpus: &Corpus, vq: &HierVq) -> Result<FfpredReport> {
    let train = index_examples(vq, corpus.samples(Split::Train))?;
    let test = index_examples(vq, corpus.samples(Split::Test))?;
    let images: Vec<FigureImage> = corpus.samples(Split::Test).iter().map(|s| s.image.clone()).collect();
    if test.is_empty() || train.len() < MOSAIC.0 * MOSAIC.1 {
        return Err(Error::EmptyCorpus);
    }
    let (th, tw) = (test[0].target.height * MOSAIC.0, test[0].target.width * MOSAIC.1);
    if (cfg.ar.grid_h, cfg.ar.grid_w) != (th, tw) {
        return Err(Error::Config(format!("AR grid {}×{} must match the {th}×{tw} mosaic", cfg.ar.grid_h, cfg.ar.grid_w)));
    }
    let mosaics = train_mosaics(&train, 4, cfg.seeds.indexnet)?;
    let opts = cfg.train_options(cfg.epochs.indexnet, cfg.seeds.indexnet);
    let mut ff = IndexNet::new(cfg.indexnet, cfg.seeds.indexnet)?;
    let ff_log = ff.train(&mosaics, opts)?;
    let mut ar = ArBaseline::new(cfg.ar, cfg.seeds.indexnet)?;
    let ar_log = ar.train(&mosaics, opts)?;
    let budget = Budget { train_samples: mosaics.len(), seed: cfg.seeds.indexnet, steps: ff_log.steps };
    check_fair(&budget, &Budget { steps: ar_log.steps, ..budget.clone() })?;

    let bench: Vec<(Vec<usize>, IndexExample)> = (0..BENCH_MOSAICS)
        .map(|j| {
            let members = test_mosaic_members(j, test.len());
            let parts: Vec<&IndexExample> = members.iter().map(|&m| &test[m]).collect();
            Ok((members, tile_examples(&parts, MOSAIC.0, MOSAIC.1)?))
        })
        .collect::<Result<_>>()?;

    let run = |method: &str, predict: &mut dyn FnMut(usize, &IndexExample) -> Result<crate::vq::TokenGrid>| -> Result<BenchResult> {
        let mut elapsed = 0.0;
        let mut err = 0.0;
        for (j, (members, m)) in bench.iter().enumerate() {
            let t = Instant::now();
            let pred = predict(j, m)?;
            elapsed += t.elapsed().as_secs_f64();
            err += mosaic_pixel_error(vq, &pred, members, &test, &images)?;
        }
        Ok(BenchResult { method: method.into(), grid: [th, tw], wall_ms: 1e3 * elapsed / bench.len() as f64, pixel_err: err / bench.len() as f64 })
    };
    let variant = run("feedforward", &mut |_, m| ff.predict(&m.feat_top, &m.tex_mask()))?;
    let baseline = run("autoregressive", &mut |j, m| ar.sample(&m.feat_top, &m.tex_mask(), derive_seed(j as u64, "ar-bench")))?;
    Ok(FfpredReport {
        speedup: baseline.wall_ms / variant.wall_ms,
        error_ratio: variant.pixel_err / baseline.pixel_err,
        variant,
        baseline,
        mosaics: bench.len(),
        budget,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ablation", rename_all = "lowercase")]
pub enum AblationReport {
    Hier(HierReport),
    Moe(MoeReport),
    Ffpred(FfpredReport),
}

/// Train everything an ablation needs from scratch and run it.
pub fn run_ablation(name: &str, cfg: &PipelineConfig, corpus: &Corpus) -> Result<AblationReport> {
    match name.parse::<AblationName>()? {
        AblationName::Hier => Ok(AblationReport::Hier(hier(cfg, corpus)?.0)),
        AblationName::Moe => {
            let (predictor, _) = train_predictor(cfg, corpus)?;
            Ok(AblationReport::Moe(moe(cfg, corpus, &predictor, None)?.0))
        }
        AblationName::Ffpred => {
            let (vq, _) = train_vq(cfg, corpus)?;
            Ok(AblationReport::Ffpred(ffpred(cfg, corpus, &vq)?))
        }
    }
}
