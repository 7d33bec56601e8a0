//! Build a small paper-doll corpus on disk and summarise its texture balance.
//!
//!     cargo run --example corpus -- /tmp/dolls 60

use figuregen::synth::{dataset_build, default_texture_weights, TextureKind};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().unwrap_or_else(|| "corpus".into());
    let n: usize = args.next().map_or(Ok(60), |s| s.parse())?;
    let corpus = dataset_build(root.as_ref(), n, 0, default_texture_weights())?;
    let mut counts = [0usize; 4];
    for s in corpus.train.iter().chain(&corpus.test) {
        counts[s.attrs.upper_texture as usize - 1] += 1;
        counts[s.attrs.lower_texture as usize - 1] += 1;
    }
    println!("{root}: {} train / {} test", corpus.train.len(), corpus.test.len());
    for (k, c) in TextureKind::ALL.iter().zip(counts) {
        println!("  {:>6}: {c} garments", k.name());
    }
    Ok(())
}
