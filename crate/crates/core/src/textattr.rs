//! Text → attribute mapping.
//!
//! Phrases are embedded by averaging seeded hash vectors of their stemmed
//! content tokens; an attribute is classified as the class of the most
//! cosine-similar predefined phrase.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{AttributeSet, SHAPE_CLASS_COUNTS};

pub const EMBED_DIM: usize = 64;

pub const SLEEVE_LENGTH: &str = "sleeve_length";
pub const LOWER_LENGTH: &str = "lower_length";
pub const NECKLINE: &str = "neckline";
/// Shared by both garments; classes are texture ids.
pub const TEXTURE: &str = "texture";

const SHIPPED_LEXICON: &str = include_str!("../assets/lexicon.json");
const SHIPPED_PARAPHRASES: &str = include_str!("../assets/paraphrases.json");

const HASH_KEY: &[u8] = b"figuregen/token/v1";

const STOPWORDS: [&str; 30] = [
    "a", "an", "the", "and", "or", "of", "on", "in", "at", "to", "for", "with", "by", "from", "is", "are", "be", "it",
    "its", "this", "that", "these", "she", "he", "they", "wears", "wearing", "has", "have", "very",
];

fn strip<'a>(w: &'a str, suffix: &str, min_stem: usize) -> Option<&'a str> {
    w.strip_suffix(suffix).filter(|s| s.len() >= min_stem)
}

/// Suffix stemmer: plural and verbal endings, then a trailing `e`.
/// Short words (≤ 3 chars) pass through, so "v", "tee" and "dot" survive.
pub fn stem(word: &str) -> String {
    if word.len() <= 3 {
        return word.to_string();
    }
    let mut w = word.to_string();
    if let Some(s) = strip(&w, "sses", 1) {
        w = format!("{s}ss");
    } else if let Some(s) = strip(&w, "ies", 2) {
        w = format!("{s}y");
    } else if !w.ends_with("ss") && !w.ends_with("us") {
        if let Some(s) = strip(&w, "s", 3) {
            w = s.to_string();
        }
    }
    let verbal = strip(&w, "ing", 3).or_else(|| strip(&w, "ed", 3)).map(str::to_string);
    if let Some(s) = verbal {
        w = s;
        let b = w.as_bytes();
        let n = b.len();
        if n >= 2 && b[n - 1] == b[n - 2] && b"bdgmnprt".contains(&b[n - 1]) {
            w.pop();
        }
    }
    for (suffix, min) in [("ly", 3), ("ful", 3)] {
        if let Some(s) = strip(&w, suffix, min) {
            w = s.to_string();
        }
    }
    if let Some(s) = strip(&w, "e", 3) {
        w = s.to_string();
    }
    if let Some(s) = strip(&w, "our", 1) {
        w = format!("{s}or");
    }
    w
}

/// Lowercase, split on non-alphanumerics, drop stopwords, stem.
pub fn tokenize(phrase: &str) -> Vec<String> {
    phrase
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .map(|t| stem(&t))
        .collect()
}

/// Uniform in [-1, 1) per coordinate, from SHA-256 so it is identical on every platform.
fn token_vector(token: &str) -> [f64; EMBED_DIM] {
    let mut v = [0.0; EMBED_DIM];
    for (chunk, out) in v.chunks_mut(8).enumerate() {
        let digest = Sha256::new().chain_update(HASH_KEY).chain_update([chunk as u8]).chain_update(token.as_bytes()).finalize();
        for (o, b) in out.iter_mut().zip(digest.chunks(4)) {
            let u = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            *o = u as f64 / 2f64.powi(31) - 1.0;
        }
    }
    v
}

/// Unit-length phrase embedding.
pub fn embed_text(phrase: &str) -> Result<Vec<f64>> {
    let tokens = tokenize(phrase);
    if tokens.is_empty() {
        return Err(Error::NoContentTokens);
    }
    let mut v = vec![0.0; EMBED_DIM];
    for t in &tokens {
        for (a, b) in v.iter_mut().zip(token_vector(t)) {
            *a += b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub attribute: String,
    pub class: u8,
    pub score: f64,
    /// The predefined phrase that won.
    pub matched: String,
}

#[derive(Clone, Debug)]
struct Entry {
    class: u8,
    phrase: String,
    vector: Vec<f64>,
}

/// Predefined phrases per attribute class, with their embeddings cached.
#[derive(Clone, Debug)]
pub struct Lexicon {
    phrases: BTreeMap<String, BTreeMap<u8, Vec<String>>>,
    entries: BTreeMap<String, Vec<Entry>>,
    threshold: Option<f64>,
}

impl Lexicon {
    /// Phrases as `attribute → class → phrases`; every class needs ≥ 2 phrases.
    pub fn new(phrases: BTreeMap<String, BTreeMap<u8, Vec<String>>>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (attr, classes) in &phrases {
            if classes.is_empty() {
                return Err(Error::Config(format!("lexicon attribute {attr} has no classes")));
            }
            let mut list = Vec::new();
            for (&class, ps) in classes {
                if ps.len() < 2 {
                    return Err(Error::Config(format!("lexicon {attr}/{class} needs at least 2 phrases")));
                }
                for p in ps {
                    list.push(Entry { class, phrase: p.clone(), vector: embed_text(p)? });
                }
            }
            entries.insert(attr.clone(), list);
        }
        Ok(Self { phrases, entries, threshold: None })
    }

    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_LEXICON).expect("shipped lexicon is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.phrases).expect("lexicon serializes")
    }

    /// Reject classifications scoring below `threshold`. Off by default.
    pub fn with_threshold(mut self, threshold: Option<f64>) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.phrases.keys().map(String::as_str)
    }

    pub fn phrases(&self, attribute: &str) -> Option<&BTreeMap<u8, Vec<String>>> {
        self.phrases.get(attribute)
    }

    /// Nearest predefined phrase; ties go to the lower class id.
    pub fn classify(&self, phrase: &str, attribute: &str) -> Result<Classification> {
        let list = self.entries.get(attribute).ok_or_else(|| Error::InvalidAttribute(format!("lexicon has no attribute {attribute:?}")))?;
        let v = embed_text(phrase)?;
        let mut best: Option<(&Entry, f64)> = None;
        for e in list {
            let s = cosine(&v, &e.vector);
            let better = match best {
                None => true,
                Some((b, bs)) => s > bs || (s == bs && e.class < b.class),
            };
            if better {
                best = Some((e, s));
            }
        }
        let (e, score) = best.expect("attributes have phrases");
        if let Some(t) = self.threshold {
            if score < t {
                return Err(Error::LowSimilarity { attribute: attribute.to_string(), score, threshold: t });
            }
        }
        Ok(Classification { attribute: attribute.to_string(), class: e.class, score, matched: e.phrase.clone() })
    }

    /// Best classification over comma-separated clauses.
    fn classify_clauses(&self, clauses: &[&str], attribute: &str) -> Result<Classification> {
        let mut best: Option<Classification> = None;
        for c in clauses {
            let r = self.classify(c, attribute)?;
            if best.as_ref().is_none_or(|b| r.score > b.score) {
                best = Some(r);
            }
        }
        best.ok_or(Error::NoContentTokens)
    }

    /// Sleeve length, lower length and neckline from free text. Each
    /// attribute takes the comma clause that matches it best, so
    /// "long sleeves, shorts" sets both lengths.
    pub fn shape_attributes(&self, text: &str) -> Result<ShapeText> {
        let clauses = clauses(text)?;
        let mut out = Vec::new();
        for (attr, n) in [SLEEVE_LENGTH, LOWER_LENGTH, NECKLINE].into_iter().zip(SHAPE_CLASS_COUNTS) {
            let c = self.classify_clauses(&clauses, attr)?;
            if c.class as usize >= n {
                return Err(Error::InvalidAttribute(format!("lexicon maps {attr} to class {} (expected < {n})", c.class)));
            }
            out.push(c);
        }
        Ok(ShapeText { sleeve_length: out[0].clone(), lower_length: out[1].clone(), neckline: out[2].clone() })
    }

    /// Upper and lower textures. The first clause binds the upper garment and
    /// the second the lower; a single clause dresses both.
    pub fn texture_attributes(&self, text: &str) -> Result<TextureText> {
        let clauses = clauses(text)?;
        if clauses.len() > 2 {
            return Err(Error::InvalidAttribute(format!("texture text has {} clauses (expected 1 or 2)", clauses.len())));
        }
        let upper = self.classify(clauses[0], TEXTURE)?;
        let lower = match clauses.get(1) {
            Some(c) => self.classify(c, TEXTURE)?,
            None => upper.clone(),
        };
        for c in [&upper, &lower] {
            crate::synth::TextureKind::from_id(c.class)?;
        }
        Ok(TextureText { upper, lower })
    }

    pub fn attributes_from_text(&self, shape_text: &str, texture_text: &str) -> Result<(AttributeSet, ShapeText, TextureText)> {
        let shape = self.shape_attributes(shape_text)?;
        let texture = self.texture_attributes(texture_text)?;
        let attrs = AttributeSet {
            sleeve_length: shape.sleeve_length.class,
            lower_length: shape.lower_length.class,
            neckline: shape.neckline.class,
            upper_texture: texture.upper.class,
            lower_texture: texture.lower.class,
        };
        attrs.validate()?;
        Ok((attrs, shape, texture))
    }

    /// Fraction of predefined phrases that classify to their own class.
    pub fn self_classification(&self) -> Result<f64> {
        let mut hit = 0;
        let mut total = 0;
        for (attr, classes) in &self.phrases {
            for (&class, ps) in classes {
                for p in ps {
                    hit += usize::from(self.classify(p, attr)?.class == class);
                    total += 1;
                }
            }
        }
        Ok(hit as f64 / total as f64)
    }
}

fn clauses(text: &str) -> Result<Vec<&str>> {
    let c: Vec<&str> = text.split(',').filter(|c| !tokenize(c).is_empty()).collect();
    if c.is_empty() {
        return Err(Error::NoContentTokens);
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeText {
    pub sleeve_length: Classification,
    pub lower_length: Classification,
    pub neckline: Classification,
}

impl ShapeText {
    pub fn shape(&self) -> [usize; 3] {
        [self.sleeve_length.class as usize, self.lower_length.class as usize, self.neckline.class as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureText {
    pub upper: Classification,
    pub lower: Classification,
}

/// A labelled phrase not present in the lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paraphrase {
    pub attribute: String,
    pub text: String,
    pub class: u8,
}

pub fn shipped_paraphrases() -> Vec<Paraphrase> {
    serde_json::from_str(SHIPPED_PARAPHRASES).expect("shipped paraphrases are valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseReport {
    pub accuracy: f64,
    pub misses: Vec<(Paraphrase, Classification)>,
}

pub fn paraphrase_accuracy(lexicon: &Lexicon, list: &[Paraphrase]) -> Result<ParaphraseReport> {
    let mut misses = Vec::new();
    for p in list {
        let c = lexicon.classify(&p.text, &p.attribute)?;
        if c.class != p.class {
            misses.push((p.clone(), c));
        }
    }
    let accuracy = if list.is_empty() { 0.0 } else { 1.0 - misses.len() as f64 / list.len() as f64 };
    Ok(ParaphraseReport { accuracy, misses })
}
