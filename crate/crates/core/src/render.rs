//! 8-bit grayscale PNG output for projections and scatter plots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Image2D;

/// Display window in HU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub level: f32,
    pub width: f32,
}

impl Default for Window {
    /// Bone window.
    fn default() -> Self {
        Window {
            level: 400.0,
            width: 1800.0,
        }
    }
}

impl Window {
    pub fn map(&self, v: f32) -> u8 {
        let lo = self.level - self.width / 2.0;
        let t = ((v - lo) / self.width).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }
}

/// Renders an image to gray levels. Rows are flipped so the last volume row
/// (most superior for sagittal/coronal projections) is at the top.
pub fn to_gray(img: &Image2D, window: Window) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.width * img.height);
    for r in (0..img.height).rev() {
        for c in 0..img.width {
            out.push(window.map(img.get(c, r)));
        }
    }
    out
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()?;
    Ok(())
}

pub fn write_mip_png(path: &Path, img: &Image2D, window: Window) -> Result<()> {
    write_gray_png(path, img.width, img.height, &to_gray(img, window))
}

/// Square scatter plot of `(x, y)` pairs with the identity line drawn in gray.
pub fn write_scatter_png(path: &Path, points: &[(f64, f64)], size: usize) -> Result<()> {
    let size = size.max(16);
    let mut px = vec![255u8; size * size];
    if !points.is_empty() {
        let lo = points
            .iter()
            .flat_map(|&(x, y)| [x, y])
            .fold(f64::INFINITY, f64::min);
        let hi = points
            .iter()
            .flat_map(|&(x, y)| [x, y])
            .fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(1e-9);
        let (lo, hi) = (lo - pad, hi + pad);
        let to_px = |v: f64| (((v - lo) / (hi - lo)) * (size - 1) as f64).round() as usize;
        for t in 0..size {
            px[(size - 1 - t) * size + t] = 180;
        }
        for &(x, y) in points {
            let (cx, cy) = (to_px(x), size - 1 - to_px(y));
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let (u, v) = (cx as i64 + dx, cy as i64 + dy);
                    if (0..size as i64).contains(&u) && (0..size as i64).contains(&v) {
                        px[v as usize * size + u as usize] = 0;
                    }
                }
            }
        }
    }
    write_gray_png(path, size, size, &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_to_full_range() {
        let w = Window {
            level: 0.0,
            width: 200.0,
        };
        assert_eq!(w.map(-100.0), 0);
        assert_eq!(w.map(100.0), 255);
        assert_eq!(w.map(-5000.0), 0);
        assert_eq!(w.map(0.0), 128);
    }

    #[test]
    fn png_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image2D {
            width: 3,
            height: 2,
            data: vec![-1000.0, 0.0, 500.0, 1000.0, 2000.0, 300.0],
        };
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        write_mip_png(&a, &img, Window::default()).unwrap();
        write_mip_png(&b, &img, Window::default()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(&std::fs::read(&a).unwrap()[1..4], b"PNG");
    }
}
