//! Netpbm writers for diagnostic images.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Binary PGM (P5) of a `[height, width]` map with values in `[0, 1]`.
pub fn pgm_bytes(map: &Array2<f64>) -> Vec<u8> {
    let (h, w) = map.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Binary PPM (P6) of a `[height, width, 3]` image.
pub fn ppm_bytes(image: &Array3<u8>) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.iter().copied());
    out
}

pub fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<()> {
    fs::write(path, pgm_bytes(map)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Array3<u8>) -> Result<()> {
    fs::write(path, ppm_bytes(image)).map_err(|e| Error::io(path, e))
}

/// Scatter plot of labelled 2-D point sets on a white square canvas.
pub fn scatter(sets: &[(&[[f64; 2]], [u8; 3])], size: usize) -> Array3<u8> {
    let mut canvas = Array3::from_elem((size, size, 3), 255u8);
    let all = sets.iter().flat_map(|(pts, _)| pts.iter());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if !lo[0].is_finite() {
        return canvas;
    }
    let margin = 4.0;
    let span = (size as f64 - 1.0 - 2.0 * margin).max(1.0);
    let to_px = |v: f64, d: usize| {
        let range = (hi[d] - lo[d]).max(1e-12);
        (margin + (v - lo[d]) / range * span).round() as i64
    };
    for (pts, color) in sets {
        for p in pts.iter() {
            let (cx, cy) = (to_px(p[0], 0), size as i64 - 1 - to_px(p[1], 1));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (x, y) = (cx + dx, cy + dy);
                    if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                        for c in 0..3 {
                            canvas[[y as usize, x as usize, c]] = color[c];
                        }
                    }
                }
            }
        }
    }
    canvas
}
