//! Nearest-neighbour quantization against texture-partitioned codebooks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::nn::Tensor;

/// Placeholder for a position whose index has not been decided.
pub const MASK: i64 = -1;

/// Grid of partition-local codebook indices plus the texture id fixing each position's partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<i64>,
    pub textures: Vec<u8>,
}

impl TokenGrid {
    pub fn masked(textures: &LabelGrid) -> Self {
        let (height, width) = textures.dims();
        Self { height, width, indices: vec![MASK; height * width], textures: textures.data().to_vec() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn texture_grid(&self) -> LabelGrid {
        LabelGrid::new(self.height, self.width, self.textures.clone()).expect("token grid dims")
    }

    pub fn is_complete(&self) -> bool {
        self.indices.iter().all(|&i| i != MASK)
    }

    pub fn masked_count(&self) -> usize {
        self.indices.iter().filter(|&&i| i == MASK).count()
    }

    /// Local index at `pos`, or `None` while masked.
    pub fn index(&self, pos: usize) -> Option<usize> {
        (self.indices[pos] != MASK).then(|| self.indices[pos] as usize)
    }
}

/// Shape of a partitioned code table stored as `[partitions * entries, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookLayout {
    pub partitions: usize,
    pub entries: usize,
    pub dim: usize,
}

impl BookLayout {
    pub fn check(&self, table: &Tensor) -> Result<()> {
        if self.entries == 0 || self.partitions == 0 {
            return Err(Error::Config("codebook partition has no entries".into()));
        }
        if table.shape() != [self.partitions * self.entries, self.dim] {
            return Err(Error::shape(format!("codebook {:?} does not match {self:?}", table.shape())));
        }
        Ok(())
    }

    pub fn global(&self, partition: usize, local: usize) -> usize {
        partition * self.entries + local
    }

    pub fn entry<'a>(&self, table: &'a Tensor, partition: usize, local: usize) -> &'a [f64] {
        table.row(self.global(partition, local))
    }
}

/// Closest entry of one partition to `x` under squared L2, lowest index on ties.
pub fn nearest_in_partition(table: &Tensor, layout: &BookLayout, partition: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..layout.entries {
        let e = layout.entry(table, partition, k);
        let d: f64 = e.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Partition used for texture id `t`. A single-partition book serves every texture.
pub fn partition_of(layout: &BookLayout, texture: u8) -> Result<usize> {
    if layout.partitions == 1 {
        return Ok(0);
    }
    let t = texture as usize;
    if t >= layout.partitions {
        return Err(Error::UnknownTextureId(t));
    }
    Ok(t)
}

/// Quantize `features[C,H,W]` position-wise within the partition named by `mask[H,W]`.
pub fn quantize_nearest(features: &Tensor, mask: &LabelGrid, table: &Tensor, layout: &BookLayout) -> Result<(Tensor, TokenGrid)> {
    layout.check(table)?;
    let s = features.shape();
    if s.len() != 3 || s[0] != layout.dim || mask.dims() != (s[1], s[2]) {
        return Err(Error::shape(format!("features {s:?} vs mask {:?} and code dim {}", mask.dims(), layout.dim)));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = Tensor::zeros(s);
    let mut tokens = TokenGrid::masked(mask);
    let mut x = vec![0.0; c];
    for pos in 0..hw {
        for (ch, v) in x.iter_mut().enumerate() {
            *v = features.data()[ch * hw + pos];
        }
        let p = partition_of(layout, mask.data()[pos])?;
        let (k, _) = nearest_in_partition(table, layout, p, &x);
        for (ch, v) in layout.entry(table, p, k).iter().enumerate() {
            out.data_mut()[ch * hw + pos] = *v;
        }
        tokens.indices[pos] = k as i64;
    }
    Ok((out, tokens))
}

/// Flat offsets into `[C,H,W]` of each 2×2 patch vector, patch-major; within
/// a patch the order is channel, then row, then column.
pub fn patch_map(channels: usize, height: usize, width: usize) -> Vec<usize> {
    let (ph, pw) = (height / 2, width / 2);
    let mut map = Vec::with_capacity(channels * height * width);
    for pr in 0..ph {
        for pc in 0..pw {
            for ch in 0..channels {
                for dy in 0..2 {
                    for dx in 0..2 {
                        map.push((ch * height + 2 * pr + dy) * width + 2 * pc + dx);
                    }
                }
            }
        }
    }
    map
}

/// Inverse permutation of [`patch_map`].
pub fn unpatch_map(channels: usize, height: usize, width: usize) -> Vec<usize> {
    let fwd = patch_map(channels, height, width);
    let mut inv = vec![0; fwd.len()];
    for (i, &j) in fwd.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Texture id of each 2×2 patch: majority of its positions, ties to the smaller id.
/// A mask already at patch resolution is returned unchanged.
pub fn patch_mask(mask: &LabelGrid, height: usize, width: usize) -> Result<LabelGrid> {
    if mask.dims() == (height / 2, width / 2) {
        return Ok(mask.clone());
    }
    if mask.dims() != (height, width) {
        return Err(Error::shape(format!("mask {:?} for {height}x{width} features", mask.dims())));
    }
    mask.majority_pool(height / 2, width / 2)
}

/// Quantize `features[C,H,W]` in non-overlapping 2×2 patches, each against the
/// partition of the patch's texture id. Codebook rows have `4C` entries.
pub fn quantize_patch(features: &Tensor, mask: &LabelGrid, table: &Tensor, layout: &BookLayout) -> Result<(Tensor, TokenGrid)> {
    layout.check(table)?;
    let s = features.shape();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 || 4 * s[0] != layout.dim {
        return Err(Error::shape(format!("patch quantization of {s:?} with code dim {}", layout.dim)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let pmask = patch_mask(mask, h, w)?;
    let map = patch_map(c, h, w);
    let d = layout.dim;
    let mut out = Tensor::zeros(s);
    let mut tokens = TokenGrid::masked(&pmask);
    let mut x = vec![0.0; d];
    for patch in 0..pmask.data().len() {
        let offs = &map[patch * d..(patch + 1) * d];
        for (v, &o) in x.iter_mut().zip(offs) {
            *v = features.data()[o];
        }
        let p = partition_of(layout, pmask.data()[patch])?;
        let (k, _) = nearest_in_partition(table, layout, p, &x);
        for (v, &o) in layout.entry(table, p, k).iter().zip(offs) {
            out.data_mut()[o] = *v;
        }
        tokens.indices[patch] = k as i64;
    }
    Ok((out, tokens))
}

/// Feature grid `[C,H,W]` assembled from a complete top-level token grid.
pub fn lookup_vectors(tokens: &TokenGrid, table: &Tensor, layout: &BookLayout) -> Result<Tensor> {
    layout.check(table)?;
    let hw = tokens.len();
    let c = layout.dim;
    let mut out = Tensor::zeros(&[c, tokens.height, tokens.width]);
    for pos in 0..hw {
        let (p, k) = resolve(tokens, layout, pos)?;
        for (ch, v) in layout.entry(table, p, k).iter().enumerate() {
            out.data_mut()[ch * hw + pos] = *v;
        }
    }
    Ok(out)
}

/// Feature grid `[C,2h,2w]` assembled from a complete patch token grid.
pub fn lookup_patches(tokens: &TokenGrid, table: &Tensor, layout: &BookLayout) -> Result<Tensor> {
    layout.check(table)?;
    let c = layout.dim / 4;
    let (h, w) = (tokens.height * 2, tokens.width * 2);
    let map = patch_map(c, h, w);
    let mut out = Tensor::zeros(&[c, h, w]);
    for patch in 0..tokens.len() {
        let (p, k) = resolve(tokens, layout, patch)?;
        for (v, &o) in layout.entry(table, p, k).iter().zip(&map[patch * layout.dim..]) {
            out.data_mut()[o] = *v;
        }
    }
    Ok(out)
}

fn resolve(tokens: &TokenGrid, layout: &BookLayout, pos: usize) -> Result<(usize, usize)> {
    let p = partition_of(layout, tokens.textures[pos])?;
    let k = tokens.index(pos).ok_or_else(|| Error::Misuse(format!("position {pos} is still masked")))?;
    if k >= layout.entries {
        return Err(Error::shape(format!("index {k} outside partition of {}", layout.entries)));
    }
    Ok((p, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[[f64; 2]]) -> (Tensor, BookLayout) {
        let data = rows.iter().flatten().copied().collect();
        (Tensor::new(vec![rows.len(), 2], data).unwrap(), BookLayout { partitions: 1, entries: rows.len(), dim: 2 })
    }

    fn point(x: f64, y: f64) -> (Tensor, LabelGrid) {
        (Tensor::new(vec![2, 1, 1], vec![x, y]).unwrap(), LabelGrid::filled(1, 1, 0))
    }

    #[test]
    fn two_entry_brute_force() {
        let (t, l) = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let (f, m) = point(0.2, 0.1);
        let (q, tok) = quantize_nearest(&f, &m, &t, &l).unwrap();
        assert_eq!(tok.indices, vec![0]);
        assert_eq!(q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_entry_maps_to_itself() {
        let rows: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, -(i as f64)]).collect();
        let (t, l) = book(&rows);
        let (f, m) = point(5.0, -5.0);
        let (q, tok) = quantize_nearest(&f, &m, &t, &l).unwrap();
        assert_eq!(tok.indices, vec![5]);
        assert_eq!(q.data(), &[5.0, -5.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let (t, l) = book(&[[9.0, 9.0], [1.0, 0.0], [7.0, 7.0], [-1.0, 0.0]]);
        let (f, m) = point(0.0, 0.0);
        assert_eq!(quantize_nearest(&f, &m, &t, &l).unwrap().1.indices, vec![1]);
    }

    #[test]
    fn empty_partition_is_config_error() {
        let t = Tensor::zeros(&[0, 2]);
        let l = BookLayout { partitions: 1, entries: 0, dim: 2 };
        let (f, m) = point(0.0, 0.0);
        assert!(matches!(quantize_nearest(&f, &m, &t, &l), Err(Error::Config(_))));
    }

    #[test]
    fn single_entry_patch_partition_takes_everything() {
        let table = Tensor::from_fn(&[2, 8], |i| i as f64);
        let layout = BookLayout { partitions: 2, entries: 1, dim: 8 };
        let feats = Tensor::from_fn(&[2, 4, 2], |i| (i * 7 % 5) as f64);
        let mask = LabelGrid::filled(4, 2, 1);
        let (q, tok) = quantize_patch(&feats, &mask, &table, &layout).unwrap();
        assert_eq!(tok.indices, vec![0, 0]);
        let back = lookup_patches(&tok, &table, &layout).unwrap();
        assert_eq!(back, q);
        assert_eq!(&q.data()[..2], &[8.0, 9.0]);
    }

    #[test]
    fn patch_maps_are_inverse() {
        let m = patch_map(3, 4, 6);
        let inv = unpatch_map(3, 4, 6);
        for (i, &j) in m.iter().enumerate() {
            assert_eq!(inv[j], i);
        }
    }
}
