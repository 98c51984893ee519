//! Reference images: PNG input/output and a procedural scene generator for
//! building corpora without external data.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

/// Decodes any supported file to a `3 × H × W` RGB array in [0, 1].
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Writes an 8-bit lossless PNG.
pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Image files in a corpus directory, sorted by file name.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// A synthetic natural-ish scene: a shaded background with overlapping flat
/// shapes, gratings and thin lines, so that every distortion has both edges
/// and flat regions to act on.
pub fn procedural_reference(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f32;
    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = Array3::from_shape_fn((3, side, side), |(c, y, x)| {
        let t = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = rng.random_range(6..12);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let rx = rng.random_range(0.08 * s..0.35 * s);
        let ry = rng.random_range(0.08 * s..0.35 * s);
        let kind = rng.random_range(0..4);
        let freq = rng.random_range(0.15f32..0.6);
        let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let shade = rng.random_range(-0.3f32..0.3);
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f32 - cx, y as f32 - cy);
                let inside = match kind {
                    0 => fx.abs() <= rx && fy.abs() <= ry,
                    1 | 2 => (fx / rx).powi(2) + (fy / ry).powi(2) <= 1.0,
                    _ => (fx * theta.sin() - fy * theta.cos()).abs() <= 1.0 && fx.abs() <= rx,
                };
                if !inside {
                    continue;
                }
                let gain = match kind {
                    2 => 1.0 + 0.5 * (freq * (fx * theta.cos() + fy * theta.sin())).sin(),
                    _ => 1.0 + shade * (fy / ry.max(1.0)),
                };
                for c in 0..3 {
                    img[[c, y, x]] = (color[c] * gain).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Writes `count` procedural references named `ref000.png`, `ref001.png`, ...
pub fn generate_corpus(dir: &Path, count: usize, side: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("ref{i:03}.png"));
            save_image(&path, &procedural_reference(side, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = procedural_reference(40, 1).mapv(|v| (v * 255.0).round() / 255.0);
        let path = dir.path().join("x.png");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.dim(), (3, 40, 40));
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scenes_differ_by_seed_and_have_content() {
        let a = procedural_reference(64, 1);
        let b = procedural_reference(64, 2);
        assert_ne!(a, b);
        assert_eq!(a, procedural_reference(64, 1));
        let mean = a.mean().unwrap();
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.len() as f32;
        assert!(var > 1e-3);
    }

    #[test]
    fn corpus_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 3, 32, 5).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let files = list_corpus(dir.path()).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
        assert_eq!(names, vec!["ref000.png", "ref001.png", "ref002.png"]);
    }

    #[test]
    fn undecodable_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        fs::write(&path, b"not a png").unwrap();
        let err = load_image(&path).unwrap_err().to_string();
        assert!(err.contains("broken.png"));
    }
}
