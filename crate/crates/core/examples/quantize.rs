//! Texture-partitioned nearest-neighbour quantization: each position only
//! searches the codebook partition of its texture id.

use figuregen::grid::LabelGrid;
use figuregen::nn::Tensor;
use figuregen::vq::{quantize_nearest, BookLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layout = BookLayout { partitions: 5, entries: 4, dim: 3 };
    let table = Tensor::randn(&[layout.partitions * layout.entries, layout.dim], 1.0, &mut rng);
    let features = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
    let mask = LabelGrid::new(4, 2, vec![0, 0, 1, 1, 3, 3, 4, 2])?;
    let (_, tokens) = quantize_nearest(&features, &mask, &table, &layout)?;
    for (pos, (&idx, &tex)) in tokens.indices.iter().zip(&tokens.textures).enumerate() {
        println!("position {pos}: texture {tex} → entry {idx} (global row {})", layout.global(tex as usize, idx as usize));
    }
    Ok(())
}
