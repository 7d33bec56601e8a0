//! PNG encoding of images and label grids.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::synth::FigureImage;

pub fn image_to_png(img: &FigureImage) -> Result<Vec<u8>> {
    encode(&img.to_rgb8(), img.width(), img.height(), ExtendedColorType::Rgb8)
}

/// Labels are stored as raw ids in an 8-bit greyscale PNG.
pub fn labels_to_png(grid: &LabelGrid) -> Result<Vec<u8>> {
    encode(grid.data(), grid.width(), grid.height(), ExtendedColorType::L8)
}

fn encode(bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(bytes, width as u32, height as u32, color)?;
    Ok(out)
}

pub fn image_from_png(bytes: &[u8]) -> Result<FigureImage> {
    let img = ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png).decode()?.into_rgb8();
    FigureImage::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

pub fn labels_from_png(bytes: &[u8]) -> Result<LabelGrid> {
    let img = ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png).decode()?;
    if img.color().has_color() {
        return Err(Error::InvalidLabels("label PNG must be single-channel".into()));
    }
    let g = img.into_luma8();
    LabelGrid::new(g.height() as usize, g.width() as usize, g.into_raw())
}

pub fn save_image(path: &Path, img: &FigureImage) -> Result<()> {
    std::fs::write(path, image_to_png(img)?)?;
    Ok(())
}

pub fn save_labels(path: &Path, grid: &LabelGrid) -> Result<()> {
    std::fs::write(path, labels_to_png(grid)?)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<FigureImage> {
    image_from_png(&std::fs::read(path)?)
}

pub fn load_labels(path: &Path) -> Result<LabelGrid> {
    labels_from_png(&std::fs::read(path)?)
}
