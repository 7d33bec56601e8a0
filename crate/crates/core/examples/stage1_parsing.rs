//! Train pose → parsing on a small corpus, then flip the sleeve attribute on
//! an unseen pose and write both parsings.

use figuregen::io::save_labels;
use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::train::train_stage1;
use figuregen::synth::{gen_sample, AttributeSpec, Corpus};

fn main() -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::desk();
    cfg.epochs.stage1 = 4;
    let corpus = Corpus::synthesize(200, 0, cfg.corpus.texture_weights)?;
    let (model, report) = train_stage1(&cfg, &corpus)?;
    println!("test pixel accuracy {:.3}, sleeve probe {}/10", report.test_pixel_accuracy, report.probes_passed());
    let pose = gen_sample(4242, &AttributeSpec::default())?.pose;
    for (sleeve, name) in [(0, "sleeveless"), (2, "long")] {
        let parsing = model.predict_logits(&pose, [sleeve, 1, 0])?.argmax();
        save_labels(format!("parsing_{name}.png").as_ref(), parsing.grid())?;
    }
    println!("wrote parsing_sleeveless.png and parsing_long.png (label ids as grey levels)");
    Ok(())
}
