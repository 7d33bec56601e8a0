use serde::{Deserialize, Serialize};

use super::{FigureImage, Rgb, TextureKind};
use crate::error::{Error, Result};

/// Colours, period and phase of a procedural garment texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextureParams {
    pub color_a: Rgb,
    pub color_b: Rgb,
    pub period: usize,
    pub phase_row: usize,
    pub phase_col: usize,
}

impl TextureParams {
    pub fn new(color_a: Rgb, color_b: Rgb, period: usize) -> Self {
        Self { color_a, color_b, period, phase_row: 0, phase_col: 0 }
    }

    /// Texture colour at canvas position `(row, col)`.
    pub fn color_at(&self, kind: TextureKind, row: usize, col: usize) -> Rgb {
        let p = self.period;
        let (r, c) = (row + self.phase_row, col + self.phase_col);
        match kind {
            TextureKind::Solid => self.color_a,
            TextureKind::Stripe => {
                if (r / p) % 2 == 0 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            TextureKind::Plaid => {
                // Where a row band crosses a column band the two colours blend.
                let s = ((r / p) % 2 + (c / p) % 2) as u16;
                let mut out = [0u8; 3];
                for k in 0..3 {
                    out[k] = ((self.color_a[k] as u16 * (2 - s) + self.color_b[k] as u16 * s) / 2) as u8;
                }
                out
            }
            TextureKind::Dots => {
                let radius = p as f64 / 4.0;
                let dr = (r % p) as f64 - (p / 2) as f64;
                let dc = (c % p) as f64 - (p / 2) as f64;
                if dr * dr + dc * dc <= radius * radius {
                    self.color_b
                } else {
                    self.color_a
                }
            }
        }
    }
}

/// Paint texture `kind` over the pixels selected by `mask`; other pixels are untouched.
pub fn render_texture(kind: u8, params: &TextureParams, mask: &[bool], image: &mut FigureImage) -> Result<()> {
    let kind = TextureKind::from_id(kind)?;
    if params.period < 2 {
        return Err(Error::Config(format!("texture period {} < 2", params.period)));
    }
    if mask.len() != image.height() * image.width() {
        return Err(Error::shape(format!("mask of {} pixels for {}x{} image", mask.len(), image.height(), image.width())));
    }
    let w = image.width();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / w, i % w);
        image.set_pixel(r, c, params.color_at(kind, r, c));
    }
    Ok(())
}
