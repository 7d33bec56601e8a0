//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use figuregen::grid::LabelGrid;
use figuregen::nn::Tensor;

/// Exhaustive nearest code for every position of `features[C,H,W]`:
/// all squared distances are listed, then the first minimum is taken.
pub fn brute_force_top(features: &Tensor, mask: &LabelGrid, table: &Tensor, entries: usize) -> Vec<usize> {
    let s = features.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    for r in 0..h {
        for col in 0..w {
            let part = mask.get(r, col) as usize;
            let x: Vec<f64> = (0..c).map(|ch| features.data()[(ch * h + r) * w + col]).collect();
            let dists: Vec<f64> = (0..entries)
                .map(|k| (0..c).map(|ch| (table.data()[(part * entries + k) * c + ch] - x[ch]).powi(2)).sum())
                .collect();
            out.push(first_min(&dists));
        }
    }
    out
}

/// Exhaustive nearest patch code over each 2×2 patch. `mask` is at patch resolution.
pub fn brute_force_patch(features: &Tensor, mask: &LabelGrid, table: &Tensor, entries: usize) -> Vec<usize> {
    let s = features.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = 4 * c;
    let mut out = Vec::new();
    for pr in 0..h / 2 {
        for pc in 0..w / 2 {
            let part = mask.get(pr, pc) as usize;
            let mut x = Vec::with_capacity(d);
            for ch in 0..c {
                for dy in 0..2 {
                    for dx in 0..2 {
                        x.push(features.data()[(ch * h + 2 * pr + dy) * w + 2 * pc + dx]);
                    }
                }
            }
            let dists: Vec<f64> = (0..entries)
                .map(|k| (0..d).map(|j| (table.data()[(part * entries + k) * d + j] - x[j]).powi(2)).sum())
                .collect();
            out.push(first_min(&dists));
        }
    }
    out
}

fn first_min(d: &[f64]) -> usize {
    let m = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v == m).unwrap()
}

pub fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}
