use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionType {
    GaussianBlur,
    WhiteNoise,
    Jpeg,
    ContrastChange,
    BlockCorruption,
}

impl DistortionType {
    pub const ALL: [DistortionType; 5] = [
        Self::GaussianBlur,
        Self::WhiteNoise,
        Self::Jpeg,
        Self::ContrastChange,
        Self::BlockCorruption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlur => "gaussian_blur",
            Self::WhiteNoise => "white_noise",
            Self::Jpeg => "jpeg",
            Self::ContrastChange => "contrast_change",
            Self::BlockCorruption => "block_corruption",
        }
    }

    /// Parameter per severity level 1..=4. Blur sigma and noise std grow,
    /// JPEG quality and contrast gain shrink, block fraction grows.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            Self::GaussianBlur => vec![0.5, 1.0, 2.0, 4.0],
            Self::WhiteNoise => vec![0.02, 0.05, 0.1, 0.2],
            Self::Jpeg => vec![0.9, 0.7, 0.4, 0.15],
            Self::ContrastChange => vec![0.8, 0.6, 0.4, 0.25],
            Self::BlockCorruption => vec![0.02, 0.05, 0.1, 0.2],
        }
    }

    /// Whether a larger parameter means a stronger distortion.
    pub fn increasing(self) -> bool {
        !matches!(self, Self::Jpeg | Self::ContrastChange)
    }

    /// Parameter value that leaves the image untouched.
    pub fn identity_parameter(self) -> f64 {
        match self {
            Self::GaussianBlur | Self::WhiteNoise | Self::BlockCorruption => 0.0,
            Self::Jpeg | Self::ContrastChange => 1.0,
        }
    }

    /// Applies the distortion with an explicit strength parameter.
    pub fn apply_parameter(self, image: &Image, param: f64, seed: u64) -> Image {
        let out = match self {
            Self::GaussianBlur => gaussian_blur(image, param),
            Self::WhiteNoise => white_noise(image, param, seed),
            Self::Jpeg => jpeg_like(image, param),
            Self::ContrastChange => contrast(image, param),
            Self::BlockCorruption => block_corruption(image, param, seed),
        };
        out.mapv(|v| v.clamp(0.0, 1.0))
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown distortion type `{s}`")))
    }
}

/// One distortion class: a single type, or a composite of several types
/// applied in order at the same severity level.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DistortionClass {
    parts: Vec<DistortionType>,
}

impl DistortionClass {
    pub fn single(t: DistortionType) -> Self {
        Self { parts: vec![t] }
    }

    pub fn composite(parts: Vec<DistortionType>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Config("empty composite distortion".into()));
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[DistortionType] {
        &self.parts
    }

    pub fn name(&self) -> String {
        self.parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
    }
}

impl fmt::Display for DistortionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for DistortionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::composite(s.split('+').map(str::parse).collect::<Result<_>>()?)
    }
}

/// Severity-level → parameter tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTables {
    pub levels: usize,
    pub tables: Vec<(DistortionType, Vec<f64>)>,
}

impl LevelTables {
    pub fn defaults() -> Self {
        Self {
            levels: 4,
            tables: DistortionType::ALL.iter().map(|&t| (t, t.default_levels())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("need at least one severity level".into()));
        }
        for (t, table) in &self.tables {
            if table.len() != self.levels {
                return Err(Error::Config(format!(
                    "{t}: {} parameters for {} levels",
                    table.len(),
                    self.levels
                )));
            }
            let monotone = table.windows(2).all(|w| if t.increasing() { w[1] > w[0] } else { w[1] < w[0] });
            if !monotone || table.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{t}: parameters must be strictly monotone in severity")));
            }
        }
        Ok(())
    }

    /// Parameter for `level` in `1..=levels`; level 0 is the identity probe.
    pub fn parameter(&self, t: DistortionType, level: usize) -> Result<f64> {
        if level == 0 {
            return Ok(t.identity_parameter());
        }
        if level > self.levels {
            return Err(Error::Config(format!("severity level {level} outside 1..={}", self.levels)));
        }
        self.tables
            .iter()
            .find(|(tt, _)| *tt == t)
            .map(|(_, table)| table[level - 1])
            .ok_or_else(|| Error::Config(format!("no parameter table for {t}")))
    }
}

/// Applies a (possibly composite) distortion class at a severity level.
/// Deterministic in `(image, class, level, seed)`; output clipped to [0, 1].
pub fn apply_distortion(image: &Image, class: &DistortionClass, level: usize, tables: &LevelTables, seed: u64) -> Result<Image> {
    let mut out = image.clone();
    for (i, &t) in class.parts().iter().enumerate() {
        let param = tables.parameter(t, level)?;
        out = t.apply_parameter(&out, param, seed.wrapping_add(i as u64 * 0x5851_F42D_4C95_7F2D));
    }
    Ok(out)
}

/// DMOS-like proxy score: `100 * level / levels` (0 = pristine, 100 = worst).
pub fn severity_to_score(level: usize, levels: usize) -> f64 {
    100.0 * level as f64 / levels as f64
}

/// Normalized sampled Gaussian, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return image.clone();
    }
    let r = (k.len() / 2) as i64;
    let (c, h, w) = image.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * image[[ci, y, reflect(x as i64 + j as i64 - r, w)]] as f64)
                    .sum();
                tmp[[ci, y, x]] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[[ci, reflect(y as i64 + j as i64 - r, h), x]] as f64)
                    .sum();
                out[[ci, y, x]] = acc as f32;
            }
        }
    }
    out
}

fn white_noise(image: &Image, std: f64, seed: u64) -> Image {
    if std <= 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image.mapv(|v| v + normal.sample(&mut rng) as f32)
}

fn contrast(image: &Image, gain: f64) -> Image {
    if gain == 1.0 {
        return image.clone();
    }
    let (_, h, w) = image.dim();
    let n = (h * w) as f64;
    // blend toward the mean luminance
    let lum: f64 = image
        .outer_iter()
        .zip([0.299, 0.587, 0.114])
        .map(|(ch, wt)| wt * ch.iter().map(|&v| v as f64).sum::<f64>() / n)
        .sum();
    image.mapv(|v| (lum + gain * (v as f64 - lum)) as f32)
}

fn block_corruption(image: &Image, fraction: f64, seed: u64) -> Image {
    const BLOCK: usize = 16;
    let (_, h, w) = image.dim();
    let (by, bx) = (h / BLOCK, w / BLOCK);
    let total = by * bx;
    if fraction <= 0.0 || total == 0 {
        return image.clone();
    }
    let count = ((fraction * total as f64).ceil() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<usize> = (0..total).collect();
    blocks.shuffle(&mut rng);
    let mut out = image.clone();
    for &b in &blocks[..count] {
        let (y0, x0) = ((b / bx) * BLOCK, (b % bx) * BLOCK);
        for mut ch in out.outer_iter_mut() {
            let v: f32 = rng.random_range(0.0..1.0);
            ch.slice_mut(ndarray::s![y0..y0 + BLOCK, x0..x0 + BLOCK]).fill(v);
        }
    }
    out
}

/// Baseline luminance quantization table (JPEG Annex K).
const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69.,
    56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81.,
    104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled for a quality factor in (0, 1] with the IJG
/// convention.
pub fn quant_table(quality: f64) -> [f64; 64] {
    let q = (quality * 100.0).clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (dst, &base) in t.iter_mut().zip(LUMA_Q.iter()) {
        *dst = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> Array2<f64> {
    Array2::from_shape_fn((8, 8), |(u, x)| {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos()
    })
}

/// Block-DCT quantize/dequantize in YCbCr. The DC term of each block is
/// kept, so flat regions survive exactly up to round-off.
fn jpeg_like(image: &Image, quality: f64) -> Image {
    if quality >= 1.0 {
        return image.clone();
    }
    let table = quant_table(quality);
    let basis = dct_basis();
    let (_, h, w) = image.dim();
    let to_ycc = [
        [0.299, 0.587, 0.114],
        [-0.168_736, -0.331_264, 0.5],
        [0.5, -0.418_688, -0.081_312],
    ];
    let mut ycc = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = [0, 1, 2].map(|c| image[[c, y, x]] as f64 * 255.0);
            for (k, row) in to_ycc.iter().enumerate() {
                let v: f64 = row.iter().zip(rgb).map(|(a, b)| a * b).sum();
                ycc[[k, y, x]] = if k == 0 { v - 128.0 } else { v };
            }
        }
    }
    let mut block = Array2::<f64>::zeros((8, 8));
    for mut plane in ycc.outer_iter_mut() {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // edge-replicate partial blocks
                for i in 0..8 {
                    for j in 0..8 {
                        block[[i, j]] = plane[[(by + i).min(h - 1), (bx + j).min(w - 1)]];
                    }
                }
                let mut coeff = basis.dot(&block).dot(&basis.t());
                for (idx, c) in coeff.iter_mut().enumerate().skip(1) {
                    *c = (*c / table[idx]).round() * table[idx];
                }
                let rec = basis.t().dot(&coeff).dot(&basis);
                for i in 0..8.min(h - by) {
                    for j in 0..8.min(w - bx) {
                        plane[[by + i, bx + j]] = rec[[i, j]];
                    }
                }
            }
        }
    }
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let yy = ycc[[0, y, x]] + 128.0;
            let cb = ycc[[1, y, x]];
            let cr = ycc[[2, y, x]];
            let rgb = [yy + 1.402 * cr, yy - 0.344_136 * cb - 0.714_136 * cr, yy + 1.772 * cb];
            for (c, v) in rgb.into_iter().enumerate() {
                out[[c, y, x]] = (v / 255.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use crate::distort::corpus::procedural_reference;

    fn channel_mean(image: &Image, c: usize) -> f64 {
        let ch = image.index_axis(Axis(0), c);
        ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64
    }

    fn tables() -> LevelTables {
        LevelTables::defaults()
    }

    #[test]
    fn identity_probes() {
        let img = procedural_reference(48, 3);
        for t in DistortionType::ALL {
            let out = t.apply_parameter(&img, t.identity_parameter(), 9);
            assert_eq!(out, img, "{t}");
            let lvl0 = apply_distortion(&img, &DistortionClass::single(t), 0, &tables(), 9).unwrap();
            assert_eq!(lvl0, img, "{t}");
        }
    }

    #[test]
    fn blur_of_impulse_is_the_kernel() {
        let mut img = Array3::<f32>::zeros((3, 41, 41));
        img[[0, 20, 20]] = 1.0;
        let out = DistortionType::GaussianBlur.apply_parameter(&img, 2.0, 0);
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = 6;
        for dy in 0..13 {
            for dx in 0..13 {
                let got = out[[0, 20 + dy - r, 20 + dx - r]] as f64;
                assert!((got - k[dy] * k[dx]).abs() < 1e-6);
            }
        }
        assert!((out.index_axis(Axis(0), 0).sum() as f64 - 1.0).abs() < 1e-5);
        assert!(out.index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jpeg_keeps_constant_images() {
        let img = Array3::from_elem((3, 32, 40), 0.37f32);
        let out = apply_distortion(&img, &DistortionClass::single(DistortionType::Jpeg), 4, &tables(), 0).unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() <= 1e-3));
    }

    #[test]
    fn jpeg_removes_detail() {
        let img = procedural_reference(64, 11);
        let mild = DistortionType::Jpeg.apply_parameter(&img, 0.9, 0);
        let harsh = DistortionType::Jpeg.apply_parameter(&img, 0.15, 0);
        let mse = |a: &Image| a.iter().zip(img.iter()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
        assert!(mse(&harsh) > mse(&mild));
        assert!(mse(&mild) > 0.0);
    }

    #[test]
    fn noise_energy_grows_with_level() {
        let img = Array3::from_elem((3, 64, 64), 0.5f32);
        let class = DistortionClass::single(DistortionType::WhiteNoise);
        let mut last = 0.0;
        for level in 1..=4 {
            let out = apply_distortion(&img, &class, level, &tables(), 1234).unwrap();
            let mse = out.iter().map(|&v| ((v - 0.5) as f64).powi(2)).sum::<f64>() / out.len() as f64;
            assert!(mse > last, "level {level}");
            last = mse;
        }
    }

    #[test]
    fn outputs_stay_in_range_and_are_deterministic() {
        let img = procedural_reference(48, 5);
        for t in DistortionType::ALL {
            let class = DistortionClass::single(t);
            for level in 1..=4 {
                let a = apply_distortion(&img, &class, level, &tables(), 77).unwrap();
                let b = apply_distortion(&img, &class, level, &tables(), 77).unwrap();
                assert_eq!(a, b);
                assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn bad_level_is_a_config_error() {
        let img = procedural_reference(32, 1);
        let class = DistortionClass::single(DistortionType::Jpeg);
        assert!(matches!(apply_distortion(&img, &class, 5, &tables(), 0), Err(Error::Config(_))));
        assert!("sharpen".parse::<DistortionType>().is_err());
    }

    #[test]
    fn contrast_shrinks_spread() {
        let img = procedural_reference(48, 2);
        let out = DistortionType::ContrastChange.apply_parameter(&img, 0.25, 0);
        let spread = |a: &Image| {
            let m = channel_mean(a, 1);
            a.index_axis(Axis(0), 1).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>()
        };
        assert!(spread(&out) < 0.1 * spread(&img));
    }

    #[test]
    fn block_corruption_counts() {
        let img = Array3::from_elem((3, 64, 64), 0.5f32);
        // 16 blocks, 5% → ceil(0.8) = 1 block changed
        let out = DistortionType::BlockCorruption.apply_parameter(&img, 0.05, 3);
        let changed = out.iter().zip(img.iter()).filter(|(a, b)| a != b).count();
        assert!(changed > 0 && changed <= 3 * 256);
    }

    #[test]
    fn scores() {
        assert_eq!(severity_to_score(0, 4), 0.0);
        assert_eq!(severity_to_score(2, 4), 50.0);
        for l in 0..4 {
            assert!(severity_to_score(l + 1, 4) > severity_to_score(l, 4));
        }
    }

    #[test]
    fn composite_names_round_trip() {
        let c: DistortionClass = "jpeg+white_noise".parse().unwrap();
        assert_eq!(c.parts(), &[DistortionType::Jpeg, DistortionType::WhiteNoise]);
        assert_eq!(c.name(), "jpeg+white_noise");
    }

    #[test]
    fn level_tables_validate_monotonicity() {
        let mut t = LevelTables::defaults();
        t.validate().unwrap();
        t.tables[0].1 = vec![1.0, 0.5, 2.0, 4.0];
        assert!(t.validate().is_err());
    }
}
