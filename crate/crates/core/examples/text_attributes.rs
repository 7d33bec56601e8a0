//! Map free text to attribute classes with the shipped lexicon.
//!
//!     cargo run --example text_attributes -- "short sleeved tee, long pants" "striped top, dotted skirt"

use figuregen::textattr::{paraphrase_accuracy, shipped_paraphrases, Lexicon};

fn main() -> anyhow::Result<()> {
    let lex = Lexicon::shipped();
    let mut args = std::env::args().skip(1);
    let shape = args.next().unwrap_or_else(|| "long sleeves, shorts, v neck".into());
    let texture = args.next().unwrap_or_else(|| "plaid shirt, solid trousers".into());
    let (attrs, shape_text, texture_text) = lex.attributes_from_text(&shape, &texture)?;
    println!("{}", serde_json::to_string_pretty(&shape_text)?);
    println!("{}", serde_json::to_string_pretty(&texture_text)?);
    println!("attributes: {attrs:?}");
    println!("lexicon self-classification: {:.3}", lex.self_classification()?);
    let r = paraphrase_accuracy(&lex, &shipped_paraphrases())?;
    println!("paraphrase accuracy: {:.3} ({} misses)", r.accuracy, r.misses.len());
    Ok(())
}
