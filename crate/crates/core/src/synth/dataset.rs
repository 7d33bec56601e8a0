use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gen_sample, AttributeSet, AttributeSpec, FigureImage, ParsingMap, PoseMap, TextureKind};
use crate::error::{Error, Result};
use crate::io;

pub const MIN_SAMPLES: usize = 20;
const TRAIN_FRACTION: f64 = 0.9;

/// Relative frequencies of solid, stripe, plaid, dots; plaid is kept rare.
pub fn default_texture_weights() -> [f64; 4] {
    [0.4, 0.25, 0.1, 0.25]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n: usize,
    pub weights: [f64; 4],
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub pose: PoseMap,
    pub parsing: ParsingMap,
    pub attrs: AttributeSet,
    pub image: FigureImage,
}

/// A corpus held in memory, split into train and test samples.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Largest-remainder allocation of `n` items to the given weights.
fn stratified_counts(n: usize, weights: &[f64; 4]) -> Result<[usize; 4]> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(Error::Config(format!("invalid texture weights {weights:?}")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(missing) {
        counts[k] += 1;
    }
    Ok(counts)
}

fn texture_slots(n: usize, weights: &[f64; 4], rng: &mut ChaCha8Rng) -> Result<Vec<u8>> {
    let counts = stratified_counts(n, weights)?;
    let mut slots: Vec<u8> = TextureKind::ALL.iter().zip(counts).flat_map(|(k, c)| std::iter::repeat_n(k.id(), c)).collect();
    slots.shuffle(rng);
    Ok(slots)
}

impl Corpus {
    /// Generate the corpus `dataset_build` would write, without touching disk.
    pub fn synthesize(n: usize, seed: u64, weights: [f64; 4]) -> Result<Self> {
        if n < MIN_SAMPLES {
            return Err(Error::Config(format!("corpus needs at least {MIN_SAMPLES} samples, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper = texture_slots(n, &weights, &mut rng)?;
        let lower = texture_slots(n, &weights, &mut rng)?;
        let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
        let mut split = vec![Split::Test; n];
        for &i in &order[..n_train] {
            split[i] = Split::Train;
        }

        let mut manifest = Manifest { seed, n, weights, entries: Vec::with_capacity(n) };
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for i in 0..n {
            let spec = AttributeSpec { upper_texture: Some(upper[i]), lower_texture: Some(lower[i]), ..Default::default() };
            let g = gen_sample(seeds[i], &spec)?;
            let id = format!("s{i:05}");
            manifest.entries.push(ManifestEntry { id: id.clone(), split: split[i], seed: seeds[i] });
            let sample = Sample { id, seed: seeds[i], pose: g.pose, parsing: g.parsing, attrs: g.attrs, image: g.image };
            match split[i] {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Self { manifest, train, test })
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Write the on-disk layout: `<root>/{train,test}/<id>/` plus `manifest.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let tagged = self.train.iter().map(|s| (Split::Train, s)).chain(self.test.iter().map(|s| (Split::Test, s)));
        for (split, sample) in tagged {
            let dir = sample_dir(root, split, &sample.id);
            fs::create_dir_all(&dir)?;
            io::save_image(&dir.join("image.png"), &sample.image)?;
            io::save_labels(&dir.join("pose.png"), sample.pose.grid())?;
            io::save_labels(&dir.join("parsing.png"), sample.parsing.grid())?;
            fs::write(dir.join("attrs.json"), serde_json::to_vec_pretty(&sample.attrs)?)?;
        }
        fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for e in &manifest.entries {
            let dir = sample_dir(root, e.split, &e.id);
            let attrs: AttributeSet = serde_json::from_slice(&fs::read(dir.join("attrs.json"))?)?;
            attrs.validate()?;
            let sample = Sample {
                id: e.id.clone(),
                seed: e.seed,
                pose: PoseMap::new(io::load_labels(&dir.join("pose.png"))?)?,
                parsing: ParsingMap::new(io::load_labels(&dir.join("parsing.png"))?)?,
                attrs,
                image: io::load_image(&dir.join("image.png"))?,
            };
            match e.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { manifest, train, test })
    }
}

fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.dir()).join(id)
}

/// Generate `n` samples with the given texture weights and write them under `root`.
pub fn dataset_build(root: &Path, n: usize, seed: u64, weights: [f64; 4]) -> Result<Corpus> {
    let corpus = Corpus::synthesize(n, seed, weights)?;
    fs::create_dir_all(root)?;
    corpus.write(root)?;
    Ok(corpus)
}
