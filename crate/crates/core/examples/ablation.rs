//! Run one ablation (hier, moe or ffpred) at a reduced budget and print its
//! JSON report. The full-budget runs live in the acceptance suite.

use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::run_ablation;
use figuregen::synth::Corpus;

fn main() -> anyhow::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "hier".into());
    let mut cfg = PipelineConfig::desk();
    cfg.epochs = figuregen::pipeline::config::Epochs { stage1: 2, vq_top: 2, vq_bottom: 2, sampler: 4, indexnet: 4, predictor: 4 };
    let corpus = Corpus::synthesize(120, 0, cfg.corpus.texture_weights)?;
    let report = run_ablation(&name, &cfg, &corpus)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
