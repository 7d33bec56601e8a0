//! The masked-token sampler's schedule: every step commits a fixed number of
//! positions and none stays masked after the last step. Runs untrained.

use figuregen::sampler::{tokenize_conditions, MoeSampler, SamplerConfig};
use figuregen::synth::{gen_sample, AttributeSpec};

fn main() -> anyhow::Result<()> {
    let s = gen_sample(7, &AttributeSpec { upper_texture: Some(3), ..Default::default() })?;
    let sampler = MoeSampler::new(SamplerConfig::default(), 0)?;
    let cond = tokenize_conditions(&s.parsing, &s.attrs)?;
    let trace = sampler.sample_traced(&cond, 4, 11, 1.0)?;
    for (t, grid) in trace.grids.iter().enumerate() {
        let cells: Vec<String> = grid.indices.iter().map(|&i| if i < 0 { "·".into() } else { i.to_string() }).collect();
        println!("step {}: masked {} | {}", t + 1, grid.masked_count(), cells.join(" "));
    }
    println!("texture ids: {:?}", trace.grids[0].textures);
    Ok(())
}
