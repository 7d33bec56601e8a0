//! Garment texture classifier used to score generated images.

use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::train::train_predictor;
use figuregen::synth::Corpus;

fn main() -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::desk();
    cfg.epochs.predictor = 6;
    let corpus = Corpus::synthesize(300, 0, [0.25; 4])?;
    let (_, report) = train_predictor(&cfg, &corpus)?;
    println!("test accuracy {:.3}", report.test_accuracy);
    println!("{}", serde_json::to_string(&report.confusion)?);
    Ok(())
}
