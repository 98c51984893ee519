//! PNG renderings: predicted-vs-true scatter panels and feature-map montages.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Result};
use ndarray::{s, Array3, ArrayView2, Axis};
use qualnet::distort::{load_image, save_image};
use qualnet::eval::EvalReport;
use qualnet::Model;

const PANEL: usize = 160;
const MARGIN: usize = 8;
const GAP: usize = 1;
const MIN_TILE: usize = 32;

fn fill(img: &mut Array3<f32>, y: usize, x: usize, rgb: [f32; 3]) {
    let (_, h, w) = img.dim();
    if y < h && x < w {
        for (c, v) in rgb.into_iter().enumerate() {
            img[[c, y, x]] = v;
        }
    }
}

/// One panel per distortion type, predicted score on x and true score on y,
/// sharing axis ranges. Returns the number of panels.
pub fn scatter(report: &EvalReport, out: &Path) -> Result<usize> {
    if report.predictions.is_empty() {
        bail!("report has no predictions to plot");
    }
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for p in &report.predictions {
        groups.entry(&p.distortion_true).or_default().push((p.score_pred, p.score_true));
    }
    let range = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) }
    };
    let (x_lo, x_hi) = range(&mut report.predictions.iter().map(|p| p.score_pred));
    let (y_lo, y_hi) = range(&mut report.predictions.iter().map(|p| p.score_true));
    let n = groups.len();
    let width = n * PANEL + (n - 1) * GAP;
    let mut img = Array3::<f32>::from_elem((3, PANEL, width), 1.0);
    let inner = (PANEL - 2 * MARGIN - 1) as f64;
    for (i, points) in groups.values().enumerate() {
        let left = i * (PANEL + GAP);
        if i > 0 {
            img.slice_mut(s![.., .., left - 1]).fill(0.6);
        }
        // axes along the bottom and left edges of the plotting area
        for t in 0..PANEL - 2 * MARGIN {
            fill(&mut img, PANEL - MARGIN - 1, left + MARGIN + t, [0.0; 3]);
            fill(&mut img, MARGIN + t, left + MARGIN, [0.0; 3]);
        }
        for &(px, py) in points {
            let cx = left + MARGIN + ((px - x_lo) / (x_hi - x_lo) * inner).round() as usize;
            let cy = PANEL - MARGIN - 1 - ((py - y_lo) / (y_hi - y_lo) * inner).round() as usize;
            for dy in 0..3 {
                for dx in 0..3 {
                    fill(&mut img, (cy + dy).saturating_sub(1), (cx + dx).saturating_sub(1), [0.85, 0.2, 0.1]);
                }
            }
        }
    }
    save_image(out, &img)?;
    Ok(n)
}

/// Channels ranked by mean activation, highest first, capped at `k`.
fn top_channels(maps: &Array3<f32>, k: usize) -> Vec<usize> {
    let means: Vec<f32> = maps.axis_iter(Axis(0)).map(|c| c.mean().unwrap_or(0.0)).collect();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Single row of per-channel tiles, each min-max normalized and upscaled
/// by nearest neighbour to at least `MIN_TILE` pixels.
fn montage(maps: &Array3<f32>, channels: &[usize]) -> Array3<f32> {
    let (_, h, w) = maps.dim();
    let scale = MIN_TILE.div_ceil(h.max(w)).max(1);
    let (th, tw) = (h * scale, w * scale);
    let k = channels.len();
    let mut img = Array3::<f32>::from_elem((3, th, k * tw + (k - 1) * GAP), 1.0);
    for (i, &c) in channels.iter().enumerate() {
        let tile: ArrayView2<f32> = maps.index_axis(Axis(0), c);
        let (lo, hi) = tile.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..th {
            for x in 0..tw {
                let v = (tile[[y / scale, x / scale]] - lo) / span;
                fill(&mut img, y, i * (tw + GAP) + x, [v; 3]);
            }
        }
    }
    img
}

/// Renders first-conv and tap-4 montages for the centre crop of `image`.
/// Returns `(file name, channel count)` per montage.
pub fn montages(model: &Model<f32>, image: &Path, top_k: usize, dir: &Path) -> Result<Vec<(String, usize)>> {
    if top_k == 0 {
        bail!("--top-k must be at least 1");
    }
    let pixels = load_image(image)?;
    let side = model.config().patch_side;
    let (_, h, w) = pixels.dim();
    if h < side || w < side {
        bail!("{}: image {w}x{h} is smaller than the {side}x{side} patch", image.display());
    }
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let crop = pixels.slice(s![.., y0..y0 + side, x0..x0 + side]).to_owned();
    let stage1 = model.first_conv_activation(&crop)?;
    let t4 = model.forward_backbone(&crop)?.t4;
    let mut written = Vec::new();
    for (name, maps) in [("montage_stage1.png", stage1), ("montage_tap4.png", t4)] {
        let channels = top_channels(&maps, top_k);
        save_image(&dir.join(name), &montage(&maps, &channels))?;
        written.push((name.to_string(), channels.len()));
    }
    Ok(written)
}
