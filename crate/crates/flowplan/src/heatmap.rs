//! Grayscale PNG renderings of spectrograms for inspection.

use std::path::Path;

use image::{GrayImage, Luma};

use flowplan_core::Tensor;

/// Pixels per spectrogram cell.
const SCALE: u32 = 4;
/// Intensity mapped to white.
const WHITE: f64 = 1.2;

/// Time runs left to right, channel 0 at the bottom.
pub fn render(spec: &Tensor) -> GrayImage {
    let (frames, channels) = (spec.rows() as u32, spec.cols() as u32);
    GrayImage::from_fn(frames * SCALE, channels * SCALE, |x, y| {
        let f = (x / SCALE) as usize;
        let c = (channels - 1 - y / SCALE) as usize;
        let v = spec.row(f)[c].clamp(0.0, WHITE) / WHITE;
        Luma([(v * 255.0).round() as u8])
    })
}

pub fn save(spec: &Tensor, path: &Path) -> image::ImageResult<()> {
    render(spec).save(path)
}
