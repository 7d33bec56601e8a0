//! `figuregen` subcommands. Results go to the writer as JSON, logs to stderr.
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use figuregen::indexnet::IndexNet;
use figuregen::io::{load_labels, save_image, save_labels};
use figuregen::nn::Checkpoint;
use figuregen::pipeline::ablation::{ffpred, run_ablation};
use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::generate::{Provenance, INDEXNET_FILE, PREDICTOR_FILE, SAMPLER_FILE, STAGE1_FILE, VQ_FILE};
use figuregen::pipeline::train::{
    evaluate_stage1, index_examples, recon_loss, train_indexnet, train_predictor, train_sampler, train_stage1, train_vq, vq_examples,
};
use figuregen::pipeline::Models;
use figuregen::predictor::AttributePredictor;
use figuregen::sampler::{tokenize_conditions, MoeSampler};
use figuregen::stage1::PoseToParsing;
use figuregen::synth::{dataset_build, AttributeSet, Corpus, ParsingMap, PoseMap, Split};
use figuregen::textattr::Lexicon;
use figuregen::vq::HierVq;
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "figuregen", version, about = "Text-driven human figure generation on a synthetic paper-doll corpus")]
struct Cli {
    /// Pipeline config (JSON); defaults to the built-in profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Default)]
    profile: Profile,
    /// Seed of the command's own stage (training) or of the draw (sampling, generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Lexicon file replacing the shipped one.
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
    /// Overrides `paths.corpus`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Overrides `paths.checkpoints`.
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Default,
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpus.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Pose → parsing.
    Stage1 {
        #[command(subcommand)]
        cmd: Stage1Cmd,
    },
    /// Two-level texture-aware quantizer.
    Vq {
        #[command(subcommand)]
        cmd: VqCmd,
    },
    /// Coarse-token sampler.
    Sampler {
        #[command(subcommand)]
        cmd: SamplerCmd,
    },
    /// Fine-index predictor.
    Indexnet {
        #[command(subcommand)]
        cmd: IndexCmd,
    },
    /// Texture classifier used to score generated garments.
    Predictor {
        #[command(subcommand)]
        cmd: PredictorCmd,
    },
    /// Generate parsing.png, image.png and provenance.json from a pose and two texts.
    Generate(GenerateArgs),
    /// Regenerate the image of a provenance record and check it bit for bit.
    Replay {
        #[arg(long)]
        provenance: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Paired variant/baseline experiment.
    Ablate {
        #[arg(long, value_parser = ["hier", "moe", "ffpred"])]
        name: String,
    },
    /// Print the effective config.
    Config,
    /// Serve the studio HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    Build {
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum Stage1Cmd {
    Train,
    Eval,
    Infer {
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long, default_value = "parsing.png")]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum VqCmd {
    Train,
    Eval,
    /// Per-partition codebook usage recorded at training time.
    Inspect,
}

#[derive(Subcommand, Debug)]
enum SamplerCmd {
    Train,
    Sample {
        #[arg(long)]
        parsing: PathBuf,
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum IndexCmd {
    Train,
    Eval,
    /// Feed-forward vs autoregressive fine prediction on 16×8 mosaics.
    Bench,
}

#[derive(Subcommand, Debug)]
enum PredictorCmd {
    Train,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    shape_text: String,
    #[arg(long)]
    texture_text: String,
    /// Edited parsing replacing the Stage I output.
    #[arg(long)]
    parsing: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Parse `args` (program name first) and run. Never panics on bad input.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    return 0;
                }
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    seed: Option<u64>,
    lexicon: Option<PathBuf>,
}

impl Ctx {
    fn ckpt(&self, file: &str) -> PathBuf {
        self.cfg.paths.checkpoints.join(file)
    }

    fn save(&self, ck: &Checkpoint, file: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.cfg.paths.checkpoints)?;
        let path = self.ckpt(file);
        ck.save(&path)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn load(&self, file: &str) -> Result<Checkpoint> {
        Ok(Checkpoint::load(&self.ckpt(file))?)
    }

    fn vq(&self) -> Result<HierVq> {
        Ok(HierVq::from_checkpoint(&self.load(VQ_FILE)?)?)
    }

    fn lexicon(&self) -> Result<Lexicon> {
        Ok(match &self.lexicon {
            Some(p) => Lexicon::load(p).with_context(|| format!("lexicon {}", p.display()))?,
            None => Lexicon::shipped(),
        })
    }

    /// The built corpus, or the same corpus synthesized in memory if none is on disk.
    fn corpus(&self) -> Result<Corpus> {
        let root = &self.cfg.paths.corpus;
        if root.join("manifest.json").exists() {
            log::info!("loading corpus from {}", root.display());
            return Corpus::load(root).with_context(|| format!("corpus {}", root.display()));
        }
        log::warn!("no corpus at {}; synthesizing {} samples in memory", root.display(), self.cfg.corpus.size);
        Ok(Corpus::synthesize(self.cfg.corpus.size, self.cfg.seeds.corpus, self.cfg.corpus.texture_weights)?)
    }

    fn seeded(&self, stage: &mut u64) {
        if let Some(s) = self.seed {
            *stage = s;
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_attrs(path: &Path) -> Result<AttributeSet> {
    let a: AttributeSet = read_json(path)?;
    a.validate()?;
    Ok(a)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => match cli.profile {
            Profile::Default => PipelineConfig::default(),
            Profile::Desk => PipelineConfig::desk(),
        },
    };
    if let Some(p) = cli.corpus {
        cfg.paths.corpus = p;
    }
    if let Some(p) = cli.checkpoints {
        cfg.paths.checkpoints = p;
    }
    cfg.validate()?;
    let mut ctx = Ctx { cfg, seed: cli.seed, lexicon: cli.lexicon };

    match cli.command {
        Command::Config => emit(out, &ctx.cfg),
        Command::Corpus { cmd: CorpusCmd::Build { size } } => {
            let n = size.unwrap_or(ctx.cfg.corpus.size);
            let mut seed = ctx.cfg.seeds.corpus;
            ctx.seeded(&mut seed);
            let c = dataset_build(&ctx.cfg.paths.corpus, n, seed, ctx.cfg.corpus.texture_weights)?;
            let all = || c.train.iter().chain(&c.test);
            let mut upper = [0usize; 4];
            let mut lower = [0usize; 4];
            for s in all() {
                upper[s.attrs.upper_texture as usize - 1] += 1;
                lower[s.attrs.lower_texture as usize - 1] += 1;
            }
            emit(
                out,
                &json!({
                    "root": ctx.cfg.paths.corpus, "n": n, "seed": seed, "train": c.train.len(), "test": c.test.len(),
                    "texture_labels": ["solid", "stripe", "plaid", "dots"], "upper_counts": upper, "lower_counts": lower,
                }),
            )
        }
        Command::Stage1 { cmd } => match cmd {
            Stage1Cmd::Train => {
                let mut seed = ctx.cfg.seeds.stage1;
                ctx.seeded(&mut seed);
                ctx.cfg.seeds.stage1 = seed;
                let (m, report) = train_stage1(&ctx.cfg, &ctx.corpus()?)?;
                ctx.save(&m.to_checkpoint(), STAGE1_FILE)?;
                emit(out, &report)
            }
            Stage1Cmd::Eval => {
                let m = PoseToParsing::from_checkpoint(&ctx.load(STAGE1_FILE)?)?;
                let (acc, probe) = evaluate_stage1(&m, &ctx.corpus()?)?;
                let passed = probe.iter().filter(|p| p.increased).count();
                emit(out, &json!({ "test_pixel_accuracy": acc, "probes_passed": passed, "sleeve_probe": probe }))
            }
            Stage1Cmd::Infer { pose, attrs, out: dest } => {
                let m = PoseToParsing::from_checkpoint(&ctx.load(STAGE1_FILE)?)?;
                let pose = PoseMap::new(load_labels(&pose)?)?;
                let attrs = read_attrs(&attrs)?;
                let parsing = m.predict(&pose, &attrs)?;
                save_labels(&dest, parsing.grid())?;
                emit(out, &json!({ "parsing": dest, "attributes": attrs }))
            }
        },
        Command::Vq { cmd } => match cmd {
            VqCmd::Train => {
                let mut seed = ctx.cfg.seeds.vq;
                ctx.seeded(&mut seed);
                ctx.cfg.seeds.vq = seed;
                let (vq, report) = train_vq(&ctx.cfg, &ctx.corpus()?)?;
                ctx.save(&vq.to_checkpoint(&report.usage), VQ_FILE)?;
                emit(out, &report)
            }
            VqCmd::Eval => {
                let vq = ctx.vq()?;
                let test = vq_examples(ctx.corpus()?.samples(Split::Test))?;
                emit(out, &json!({ "test_recon_top_only": recon_loss(&vq, &test, false)?, "test_recon_full": recon_loss(&vq, &test, true)? }))
            }
            VqCmd::Inspect => emit(out, &HierVq::checkpoint_usage(&ctx.load(VQ_FILE)?)?),
        },
        Command::Sampler { cmd } => match cmd {
            SamplerCmd::Train => {
                let mut seed = ctx.cfg.seeds.sampler;
                ctx.seeded(&mut seed);
                ctx.cfg.seeds.sampler = seed;
                let (s, report) = train_sampler(&ctx.cfg, &ctx.vq()?, &ctx.corpus()?)?;
                ctx.save(&s.to_checkpoint(), SAMPLER_FILE)?;
                emit(out, &report)
            }
            SamplerCmd::Sample { parsing, attrs, steps, temperature } => {
                let s = MoeSampler::from_checkpoint(&ctx.load(SAMPLER_FILE)?)?;
                let parsing = ParsingMap::new(load_labels(&parsing)?)?;
                let attrs = read_attrs(&attrs)?;
                let seed = ctx.seed.unwrap_or(0);
                let steps = steps.unwrap_or(s.config().steps);
                let tokens = s.sample(&tokenize_conditions(&parsing, &attrs)?, steps, seed, temperature.unwrap_or(s.config().temperature))?;
                emit(out, &json!({ "grid": [tokens.height, tokens.width], "textures": tokens.textures, "indices": tokens.indices, "seed": seed, "steps": steps }))
            }
        },
        Command::Indexnet { cmd } => match cmd {
            IndexCmd::Train => {
                let mut seed = ctx.cfg.seeds.indexnet;
                ctx.seeded(&mut seed);
                ctx.cfg.seeds.indexnet = seed;
                let (n, report) = train_indexnet(&ctx.cfg, &ctx.vq()?, &ctx.corpus()?)?;
                ctx.save(&n.to_checkpoint(), INDEXNET_FILE)?;
                emit(out, &report)
            }
            IndexCmd::Eval => {
                let n = IndexNet::from_checkpoint(&ctx.load(INDEXNET_FILE)?)?;
                let test = index_examples(&ctx.vq()?, ctx.corpus()?.samples(Split::Test))?;
                emit(out, &n.accuracy(&test)?)
            }
            IndexCmd::Bench => {
                let r = ffpred(&ctx.cfg, &ctx.corpus()?, &ctx.vq()?)?;
                emit(out, &[r.variant, r.baseline])
            }
        },
        Command::Predictor { cmd: PredictorCmd::Train } => {
            let mut seed = ctx.cfg.seeds.predictor;
            ctx.seeded(&mut seed);
            ctx.cfg.seeds.predictor = seed;
            let (p, report): (AttributePredictor, _) = train_predictor(&ctx.cfg, &ctx.corpus()?)?;
            ctx.save(&p.to_checkpoint(), PREDICTOR_FILE)?;
            emit(out, &report)
        }
        Command::Generate(a) => {
            let models = Models::load(&ctx.cfg.paths.checkpoints, ctx.lexicon()?)?;
            let pose = PoseMap::new(load_labels(&a.pose).with_context(|| format!("pose {}", a.pose.display()))?)?;
            let edited = a.parsing.as_deref().map(|p| Ok::<_, anyhow::Error>(ParsingMap::new(load_labels(p)?)?)).transpose()?;
            let g = models.generate(&pose, &a.shape_text, &a.texture_text, ctx.seed.unwrap_or(0), edited)?;
            std::fs::create_dir_all(&a.out)?;
            let (pp, ip, vp) = (a.out.join("parsing.png"), a.out.join("image.png"), a.out.join("provenance.json"));
            save_labels(&pp, g.parsing.grid())?;
            save_image(&ip, &g.image)?;
            std::fs::write(&vp, serde_json::to_vec_pretty(&g.provenance)?)?;
            emit(out, &json!({ "parsing": pp, "image": ip, "provenance": vp, "attributes": g.provenance.attributes, "image_sha256": g.provenance.image_sha256 }))
        }
        Command::Replay { provenance, out: dir } => {
            let models = Models::load(&ctx.cfg.paths.checkpoints, ctx.lexicon()?)?;
            let p: Provenance = read_json(&provenance)?;
            let g = models.regenerate(&p)?;
            std::fs::create_dir_all(&dir)?;
            let ip = dir.join("image.png");
            save_image(&ip, &g.image)?;
            emit(out, &json!({ "image": ip, "image_sha256": g.provenance.image_sha256, "reproduced": true }))
        }
        Command::Ablate { name } => {
            emit(out, &run_ablation(&name, &ctx.cfg, &ctx.corpus()?)?)
        }
        Command::Serve { port, host } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("address {host}:{port}"))?;
            let state = figuregen_studio::AppState::from_checkpoints(&ctx.cfg.paths.checkpoints, ctx.lexicon()?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(figuregen_studio::serve(addr, state))?;
            Ok(())
        }
    }
}
