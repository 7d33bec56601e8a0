//! Integer label grids and the majority pooling used to bring them to latent resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major grid of small integer labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} grid needs {} labels, got {}", height * width, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, data: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.data[row * self.width + col] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn map(&self, f: impl Fn(u8) -> u8) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&l| f(l)).collect() }
    }

    /// Most frequent label in each `(height/out_h) x (width/out_w)` block;
    /// ties go to the smaller label.
    pub fn majority_pool(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || self.height % out_h != 0 || self.width % out_w != 0 {
            return Err(Error::shape(format!("cannot pool {}x{} to {out_h}x{out_w}", self.height, self.width)));
        }
        let (bh, bw) = (self.height / out_h, self.width / out_w);
        let mut out = Vec::with_capacity(out_h * out_w);
        let mut counts = [0usize; 256];
        for br in 0..out_h {
            for bc in 0..out_w {
                counts.fill(0);
                for r in br * bh..(br + 1) * bh {
                    for c in bc * bw..(bc + 1) * bw {
                        counts[self.get(r, c) as usize] += 1;
                    }
                }
                out.push(argmax_lowest(&counts) as u8);
            }
        }
        Ok(Self { height: out_h, width: out_w, data: out })
    }
}

/// Index of the largest count, lowest index on ties.
pub fn argmax_lowest(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}
