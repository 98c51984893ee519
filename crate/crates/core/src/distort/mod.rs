//! Labeled synthetic datasets: distortion kernels, reference corpora and the
//! dataset builder.

pub mod corpus;
mod kinds;
mod manifest;

use std::path::Path;

use ndarray::Array3;

pub use corpus::{generate_corpus, list_corpus, load_image, procedural_reference, save_image};
pub use kinds::{
    apply_distortion, gaussian_kernel, quant_table, severity_to_score, DistortionClass, DistortionType, LevelTables,
};
pub use manifest::{ClassEntry, Dataset, DatasetManifest, ImageRecord};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// RGB image, `3 × H × W`, values in [0, 1].
pub type Image = Array3<f32>;

fn item_seed(seed: u64, reference: usize, class: usize, level: usize) -> u64 {
    let mut z = seed
        ^ (reference as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (class as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (level as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z ^ (z >> 33)
}

/// Distorts every reference in `corpus_dir` with every class at every
/// level, writing PNGs under `out_dir/images/` and the manifest to
/// `out_dir/manifest.csv`. Records are ordered by (reference, class, level)
/// and the output is a pure function of the inputs and `seed`.
pub fn build_dataset(
    corpus_dir: &Path,
    classes: &[DistortionClass],
    tables: &LevelTables,
    seed: u64,
    out_dir: &Path,
    exec: Exec,
) -> Result<Dataset> {
    tables.validate()?;
    if classes.is_empty() {
        return Err(Error::Config("no distortion classes requested".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if classes[..i].contains(c) {
            return Err(Error::Config(format!("distortion class `{c}` listed twice")));
        }
        for &t in c.parts() {
            tables.parameter(t, 1)?;
        }
    }
    let files = list_corpus(corpus_dir)?;
    if files.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need at least 2 reference images, found {}",
            corpus_dir.display(),
            files.len()
        )));
    }
    let references: Vec<(String, &Path)> = files
        .iter()
        .map(|p| (p.file_stem().and_then(|s| s.to_str()).unwrap_or("ref").replace(',', "_"), p.as_path()))
        .collect();

    let levels = tables.levels;
    let items: Vec<(usize, usize, usize)> = (0..references.len())
        .flat_map(|r| (0..classes.len()).flat_map(move |c| (1..=levels).map(move |l| (r, c, l))))
        .collect();
    let sources: Vec<Image> = exec
        .map(&references, |(_, p)| load_image(p))
        .into_iter()
        .collect::<Result<_>>()?;
    let records: Vec<ImageRecord> = exec
        .map(&items, |&(r, c, l)| -> Result<ImageRecord> {
            let (id, _) = &references[r];
            let class = &classes[c];
            let img = apply_distortion(&sources[r], class, l, tables, item_seed(seed, r, c, l))?;
            let rel = format!("images/{id}__{}__l{l}.png", class.name());
            save_image(&out_dir.join(&rel), &img)?;
            Ok(ImageRecord {
                path: rel,
                reference_id: id.clone(),
                distortion_index: c + 1,
                severity_level: l,
                score: severity_to_score(l, levels),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let manifest = DatasetManifest {
        classes: classes
            .iter()
            .map(|c| -> Result<ClassEntry> {
                Ok(ClassEntry {
                    name: c.name(),
                    parameters: c
                        .parts()
                        .iter()
                        .map(|&t| (1..=levels).map(|l| tables.parameter(t, l)).collect::<Result<_>>())
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?,
        levels,
        seed,
        records,
    };
    manifest.validate()?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_types() -> Vec<DistortionClass> {
        ["jpeg", "white_noise", "gaussian_blur", "contrast_change"]
            .iter()
            .map(|n| n.parse().unwrap())
            .collect()
    }

    #[test]
    fn builds_full_product_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("corpus");
        generate_corpus(&corpus, 3, 32, 1).unwrap();
        let a = build_dataset(&corpus, &four_types(), &LevelTables::defaults(), 9, &tmp.path().join("a"), Exec::Parallel).unwrap();
        let b = build_dataset(&corpus, &four_types(), &LevelTables::defaults(), 9, &tmp.path().join("b"), Exec::Sequential).unwrap();
        assert_eq!(a.manifest.records.len(), 3 * 4 * 4);
        assert_eq!(a.manifest.num_classes(), 4);
        assert_eq!(a.manifest.class_names()[0], "jpeg");
        let ta = std::fs::read(tmp.path().join("a/manifest.csv")).unwrap();
        let tb = std::fs::read(tmp.path().join("b/manifest.csv")).unwrap();
        assert_eq!(ta, tb);
        for r in &a.manifest.records {
            let ia = std::fs::read(a.image_path(r)).unwrap();
            let ib = std::fs::read(b.image_path(r)).unwrap();
            assert_eq!(ia, ib, "{}", r.path);
        }
        let reread = Dataset::open(&tmp.path().join("a/manifest.csv")).unwrap();
        assert_eq!(reread.manifest, a.manifest);
    }

    #[test]
    fn scores_increase_with_level_per_reference_and_type() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("corpus");
        generate_corpus(&corpus, 2, 32, 1).unwrap();
        let d = build_dataset(&corpus, &four_types()[..2], &LevelTables::defaults(), 1, &tmp.path().join("d"), Exec::Sequential)
            .unwrap();
        for w in d.manifest.records.windows(2) {
            if w[0].reference_id == w[1].reference_id && w[0].distortion_index == w[1].distortion_index {
                assert!(w[1].score > w[0].score);
            }
        }
    }

    #[test]
    fn corpus_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let missing = tmp.path().join("nope");
        let err = build_dataset(&missing, &four_types(), &LevelTables::defaults(), 1, tmp.path(), Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("nope"));

        let single = tmp.path().join("single");
        generate_corpus(&single, 1, 32, 1).unwrap();
        assert!(build_dataset(&single, &four_types(), &LevelTables::defaults(), 1, tmp.path(), Exec::Sequential).is_err());

        let broken = tmp.path().join("broken");
        generate_corpus(&broken, 2, 32, 1).unwrap();
        std::fs::write(broken.join("zzz.png"), b"garbage").unwrap();
        let err = build_dataset(&broken, &four_types(), &LevelTables::defaults(), 1, &tmp.path().join("o"), Exec::Sequential)
            .unwrap_err();
        assert!(err.to_string().contains("zzz.png"));
    }

    #[test]
    fn composite_classes_are_their_own_class() {
        let tmp = tempfile::tempdir().unwrap();
        let corpus = tmp.path().join("corpus");
        generate_corpus(&corpus, 2, 32, 1).unwrap();
        let classes: Vec<DistortionClass> = vec!["jpeg".parse().unwrap(), "gaussian_blur+white_noise".parse().unwrap()];
        let d = build_dataset(&corpus, &classes, &LevelTables::defaults(), 1, &tmp.path().join("d"), Exec::Sequential).unwrap();
        assert_eq!(d.manifest.classes[1].name, "gaussian_blur+white_noise");
        assert_eq!(d.manifest.classes[1].parameters.len(), 2);
    }
}
