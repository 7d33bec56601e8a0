//! Feed-forward fine-index prediction: given the coarse features, predict
//! every bottom-level index in one pass and decode.

use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::train::{train_indexnet, train_vq};
use figuregen::synth::Corpus;

fn main() -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::desk();
    (cfg.epochs.vq_top, cfg.epochs.vq_bottom, cfg.epochs.indexnet) = (2, 2, 5);
    let corpus = Corpus::synthesize(100, 0, cfg.corpus.texture_weights)?;
    let (vq, _) = train_vq(&cfg, &corpus)?;
    let (_, report) = train_indexnet(&cfg, &vq, &corpus)?;
    println!("held-out index accuracy {:.3}", report.test_accuracy.overall);
    for (tex, acc) in report.test_accuracy.per_texture.iter().enumerate() {
        if let Some(a) = acc {
            println!("  texture id {tex}: {a:.3}");
        }
    }
    Ok(())
}
