//! Patching, label inheritance, flip augmentation, reference-disjoint
//! splitting and the per-epoch training order.

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distort::{load_image, Dataset, DatasetManifest, Image};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Offsets along one axis: multiples of `stride` from 0, plus one patch
/// flush with the far edge when the stride does not land on it.
pub fn patch_origins(side: usize, patch: usize, stride: usize) -> Vec<usize> {
    if side < patch || stride == 0 {
        return Vec::new();
    }
    let last = side - patch;
    let mut origins: Vec<usize> = (0..=last / stride).map(|i| i * stride).collect();
    if last % stride != 0 {
        origins.push(last);
    }
    origins
}

/// Patches per axis for the rule above.
pub fn patch_count(side: usize, patch: usize, stride: usize) -> usize {
    if side < patch {
        return 0;
    }
    (side - patch) / stride + 1 + usize::from((side - patch) % stride != 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub side: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(side: usize, stride: usize) -> Result<Self> {
        if side == 0 || stride == 0 {
            return Err(Error::Config(format!("patch side and stride must be positive ({side}, {stride})")));
        }
        Ok(Self { side, stride })
    }
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { side: 128, stride: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub pixels: Array3<f32>,
    /// Index of the source record in the manifest the patch set was built from.
    pub source: usize,
    /// Grid coordinates (row, column).
    pub grid: (usize, usize),
    pub flipped: bool,
    /// Inherited 1-based distortion class.
    pub class: usize,
    /// Inherited proxy score.
    pub score: f64,
}

/// Cuts a `3 × H × W` image into `side × side` patches on the stride grid.
/// `name` identifies the image in the error when it is too small.
pub fn extract_patches(image: &Image, name: &str, geometry: PatchGeometry) -> Result<Vec<(usize, usize, Array3<f32>)>> {
    let (_, h, w) = image.dim();
    let p = geometry.side;
    if h < p || w < p {
        return Err(Error::Data(format!("{name}: image {w}×{h} is smaller than the {p}×{p} patch")));
    }
    let ys = patch_origins(h, p, geometry.stride);
    let xs = patch_origins(w, p, geometry.stride);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for (gy, &y) in ys.iter().enumerate() {
        for (gx, &x) in xs.iter().enumerate() {
            out.push((gy, gx, image.slice(s![.., y..y + p, x..x + p]).to_owned()));
        }
    }
    Ok(out)
}

pub fn hflip(pixels: &Array3<f32>) -> Array3<f32> {
    let mut out = pixels.clone();
    out.invert_axis(Axis(2));
    out.as_standard_layout().into_owned()
}

/// When enabled, appends a mirrored copy of every patch with the same labels.
pub fn hflip_augment(mut patches: Vec<PatchRecord>, enabled: bool) -> Vec<PatchRecord> {
    if !enabled {
        return patches;
    }
    let mirrored: Vec<PatchRecord> = patches
        .iter()
        .map(|p| PatchRecord {
            pixels: hflip(&p.pixels),
            flipped: !p.flipped,
            ..p.clone()
        })
        .collect();
    patches.extend(mirrored);
    patches
}

/// Loads every image of a dataset and cuts it into labeled patches.
/// Evaluation sets never carry flips.
pub fn load_patches(dataset: &Dataset, geometry: PatchGeometry, exec: Exec) -> Result<Vec<PatchRecord>> {
    let records = &dataset.manifest.records;
    let per_image: Vec<Result<Vec<PatchRecord>>> = exec.map_range(records.len(), |i| {
        let r = &records[i];
        let path = dataset.image_path(r);
        let image = load_image(&path)?;
        Ok(extract_patches(&image, &path.display().to_string(), geometry)?
            .into_iter()
            .map(|(gy, gx, pixels)| PatchRecord {
                pixels,
                source: i,
                grid: (gy, gx),
                flipped: false,
                class: r.distortion_index,
                score: r.score,
            })
            .collect())
    });
    let mut out = Vec::new();
    for p in per_image {
        out.extend(p?);
    }
    Ok(out)
}

/// Training patches: all grid patches plus, when `augment` is set, their
/// mirrored copies.
pub fn training_patches(dataset: &Dataset, geometry: PatchGeometry, augment: bool, exec: Exec) -> Result<Vec<PatchRecord>> {
    Ok(hflip_augment(load_patches(dataset, geometry, exec)?, augment))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Shuffles reference ids with the seed and sends the first
/// `ceil(fraction · R)` (capped at `R - 1`) to training; every record
/// follows its reference.
pub fn split_by_reference(manifest: &DatasetManifest, spec: SplitSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {}", spec.train_fraction)));
    }
    let mut ids = manifest.reference_ids();
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "cannot form a reference-disjoint split from {} reference(s)",
            ids.len()
        )));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_train = ((spec.train_fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len() - 1);
    let train_ids = &ids[..n_train];
    let (train, test): (Vec<_>, Vec<_>) =
        manifest.records.iter().cloned().partition(|r| train_ids.contains(&r.reference_id));
    Ok((manifest.with_records(train), manifest.with_records(test)))
}

/// Seeded visiting order for one epoch (1-based), fresh per `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mix = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

/// Batches of patch indices for one epoch.
pub fn iterate_training(len: usize, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Vec<usize>> {
    let order = epoch_order(len, seed, epoch);
    let bs = batch_size.max(1);
    (0..order.len().div_ceil(bs)).map(move |b| order[b * bs..((b + 1) * bs).min(order.len())].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distort::{ClassEntry, ImageRecord};
    use proptest::prelude::*;

    fn manifest_with_refs(n: usize) -> DatasetManifest {
        let records = (0..n)
            .flat_map(|r| {
                (1..=2).map(move |l| ImageRecord {
                    path: format!("r{r}_{l}.png"),
                    reference_id: format!("r{r:02}"),
                    distortion_index: 1,
                    severity_level: l,
                    score: 50.0 * l as f64,
                })
            })
            .collect();
        DatasetManifest {
            classes: vec![ClassEntry {
                name: "jpeg".into(),
                parameters: vec![vec![0.9, 0.4]],
            }],
            levels: 2,
            seed: 0,
            records,
        }
    }

    #[test]
    fn patch_count_examples() {
        assert_eq!(patch_count(256, 128, 64), 3);
        assert_eq!(patch_count(128, 128, 64), 1);
        assert_eq!(patch_origins(200, 128, 64), vec![0, 64, 72]);
        let img = Array3::<f32>::zeros((3, 128, 200));
        let patches = extract_patches(&img, "x", PatchGeometry::default()).unwrap();
        assert_eq!(patches.len(), 3);
        assert_eq!(extract_patches(&Array3::zeros((3, 256, 256)), "y", PatchGeometry::default()).unwrap().len(), 9);
    }

    #[test]
    fn too_small_image_is_named() {
        let err = extract_patches(&Array3::zeros((3, 100, 300)), "tiny.png", PatchGeometry::default()).unwrap_err();
        assert!(err.to_string().contains("tiny.png"));
    }

    #[test]
    fn flips() {
        let px = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f32);
        assert_eq!(hflip(&hflip(&px)), px);
        assert_eq!(hflip(&px)[[1, 2, 0]], px[[1, 2, 3]]);
        let rec = PatchRecord {
            pixels: px,
            source: 0,
            grid: (0, 0),
            flipped: false,
            class: 2,
            score: 75.0,
        };
        let aug = hflip_augment(vec![rec.clone(), rec.clone()], true);
        assert_eq!(aug.len(), 4);
        assert!(aug[2].flipped && aug[2].class == 2 && aug[2].score == 75.0);
        assert_eq!(hflip_augment(vec![rec], false).len(), 1);
    }

    #[test]
    fn ten_refs_split_eight_two() {
        let m = manifest_with_refs(10);
        let (train, test) = split_by_reference(&m, SplitSpec { train_fraction: 0.8, seed: 3 }).unwrap();
        assert_eq!(train.reference_ids().len(), 8);
        assert_eq!(test.reference_ids().len(), 2);
        let again = split_by_reference(&m, SplitSpec { train_fraction: 0.8, seed: 3 }).unwrap();
        assert_eq!(again.0, train);
    }

    #[test]
    fn single_reference_cannot_split() {
        assert!(split_by_reference(&manifest_with_refs(1), SplitSpec::default()).is_err());
    }

    #[test]
    fn epoch_orders() {
        let e1 = epoch_order(50, 7, 1);
        let e2 = epoch_order(50, 7, 2);
        assert_ne!(e1, e2);
        let mut sorted = e1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let batches: Vec<_> = iterate_training(5, 1, 7, 1).collect();
        assert_eq!(batches.len(), 5);
        assert!(batches.iter().all(|b| b.len() == 1));
        assert_eq!(iterate_training(5, 2, 7, 1).map(|b| b.len()).collect::<Vec<_>>(), vec![2, 2, 1]);
    }

    proptest! {
        #[test]
        fn count_formula_and_coverage(patch in 1usize..64, extra in 0usize..100, stride in 1usize..64) {
            let side = patch + extra;
            let origins = patch_origins(side, patch, stride);
            prop_assert_eq!(origins.len(), patch_count(side, patch, stride));
            prop_assert_eq!(origins[0], 0);
            prop_assert_eq!(*origins.last().unwrap() + patch, side);
            let mut covered = vec![false; side];
            for o in &origins {
                for c in covered.iter_mut().skip(*o).take(patch) {
                    *c = true;
                }
            }
            if stride <= patch {
                prop_assert!(covered.iter().all(|&c| c));
            }
        }

        #[test]
        fn split_is_disjoint_and_covering(seed in any::<u64>(), refs in 2usize..30) {
            let m = manifest_with_refs(refs);
            let (train, test) = split_by_reference(&m, SplitSpec { train_fraction: 0.8, seed }).unwrap();
            let tr = train.reference_ids();
            let te = test.reference_ids();
            prop_assert!(tr.iter().all(|r| !te.contains(r)));
            prop_assert_eq!(tr.len() + te.len(), refs);
            prop_assert_eq!(train.records.len() + test.records.len(), m.records.len());
        }
    }
}
