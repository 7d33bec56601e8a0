//! Two-level texture-aware quantizer: top level first, then the residual
//! bottom level; compare reconstructions and dump one example.

use figuregen::io::save_image;
use figuregen::pipeline::config::PipelineConfig;
use figuregen::pipeline::train::{train_vq, vq_examples};
use figuregen::synth::{Corpus, FigureImage, Split};

fn main() -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::desk();
    (cfg.epochs.vq_top, cfg.epochs.vq_bottom) = (3, 3);
    let corpus = Corpus::synthesize(120, 0, cfg.corpus.texture_weights)?;
    let (vq, report) = train_vq(&cfg, &corpus)?;
    println!("test recon (mean |error|): top-only {:.4}, two-level {:.4}", report.test_recon_top_only, report.test_recon_full);
    for u in &report.usage {
        println!("{:?} codebook: {:.0}% of entries used", u.level, 100.0 * u.used_fraction);
    }
    let ex = &vq_examples(&corpus.samples(Split::Test)[..1])?[0];
    let full = vq.encode_decode_full(&ex.image, &ex.top_mask, &ex.bottom_mask)?;
    save_image("recon_top.png".as_ref(), &FigureImage::from_tensor(&vq.decode_top_only(&full.feat_top)?)?)?;
    save_image("recon_full.png".as_ref(), &FigureImage::from_tensor(&full.image)?)?;
    Ok(())
}
