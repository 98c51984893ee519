//! Declarative experiment configuration, dataset preparation and the
//! ablation matrix.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distort::{build_dataset, generate_corpus, Dataset, DistortionClass, LevelTables};
use crate::error::{Error, Result};
use crate::eval::{run_repeated_splits, RepeatedSummary, SplitProtocol};
use crate::exec::Exec;
use crate::model::{BackboneConfig, HeadVariant, Model, ModelConfig};
use crate::patch::PatchGeometry;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory of reference images. When absent, `references` procedural
    /// images of side `image_side` are generated from `corpus_seed`.
    pub corpus: Option<PathBuf>,
    pub references: usize,
    pub image_side: usize,
    pub corpus_seed: u64,
    /// Distortion class names, composites written `a+b`.
    pub types: Vec<String>,
    pub levels: LevelTables,
    /// Seed of the distortion noise.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            corpus: None,
            references: 24,
            image_side: 64,
            corpus_seed: 11,
            types: ["gaussian_blur", "white_noise", "jpeg", "contrast_change"].map(String::from).to_vec(),
            levels: LevelTables::defaults(),
            seed: 5,
        }
    }
}

impl DatasetSection {
    pub fn classes(&self) -> Result<Vec<DistortionClass>> {
        self.types.iter().map(|t| t.parse()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: HeadVariant,
    /// `tiny`, `full`, `tiny-deep` or `full-deep`.
    pub backbone: String,
    pub patch_side: usize,
    pub patch_stride: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: HeadVariant::F,
            backbone: "tiny".into(),
            patch_side: 32,
            patch_stride: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_splits: usize,
    pub train_fraction: f64,
    /// Foreign corpus (directory of references) or dataset manifest for
    /// cross-set evaluation.
    pub cross_set: Option<PathBuf>,
    /// Corpus seed used when the cross set is generated procedurally.
    pub cross_corpus_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_splits: 3,
            train_fraction: 0.8,
            cross_set: None,
            cross_corpus_seed: 97,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub variants: Vec<HeadVariant>,
    /// Adds an `f-V2` row trained with SGD.
    pub sgd: bool,
    /// Extra variant-f rows at these patch sizes.
    pub patch_sizes: Vec<usize>,
    /// Adds an `f-deeper` row with the deepened backbone.
    pub deeper: bool,
    /// Paired seeds per row.
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            variants: HeadVariant::ALL.to_vec(),
            sgd: true,
            patch_sizes: vec![64, 32],
            deeper: true,
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale settings: 24 references of 64×64, four types at four
    /// levels, tiny variant-f model on 32×32 patches, 10 epochs.
    pub fn toy() -> Self {
        Self {
            seed: 100,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainConfig {
                epochs: 10,
                lr0: 2e-3,
                lambda: 1e-3,
                augment_flip: false,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let classes = self.dataset.classes()?;
        if classes.is_empty() {
            return Err(Error::Config("dataset.types is empty".into()));
        }
        self.dataset.levels.validate()?;
        for c in &classes {
            for &t in c.parts() {
                self.dataset.levels.parameter(t, 1)?;
            }
        }
        if self.dataset.corpus.is_none() && (self.dataset.references < 2 || self.dataset.image_side == 0) {
            return Err(Error::Config("dataset needs at least 2 references of positive size".into()));
        }
        self.model_config(self.seed)?.validate()?;
        self.geometry()?;
        self.train.validate()?;
        if self.eval.n_splits == 0 || !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config("eval needs n_splits >= 1 and 0 < train_fraction < 1".into()));
        }
        for &p in &self.ablation.patch_sizes {
            if p == 0 || p % 32 != 0 {
                return Err(Error::Config(format!("ablation patch size {p} is not a positive multiple of 32")));
            }
        }
        if self.ablation.seeds == 0 {
            return Err(Error::Config("ablation.seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        Ok(ModelConfig::new(
            BackboneConfig::preset(&self.model.backbone)?,
            self.model.variant,
            self.dataset.types.len(),
            self.model.patch_side,
            seed,
        ))
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.model.patch_side, self.model.patch_stride)
    }

    pub fn split_protocol(&self, out_dir: Option<PathBuf>) -> Result<SplitProtocol> {
        Ok(SplitProtocol {
            model: self.model_config(self.seed)?,
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            geometry: self.geometry()?,
            train_fraction: self.eval.train_fraction,
            runs: self.eval.n_splits,
            out_dir,
        })
    }

    /// Materializes the reference corpus (generating it if needed) and the
    /// distorted dataset under `dir`.
    pub fn prepare_dataset(&self, dir: &Path, exec: Exec) -> Result<Dataset> {
        let corpus = match &self.dataset.corpus {
            Some(c) => c.clone(),
            None => {
                let c = dir.join("corpus");
                generate_corpus(&c, self.dataset.references, self.dataset.image_side, self.dataset.corpus_seed)?;
                c
            }
        };
        self.dataset_from_corpus(&corpus, &dir.join("dataset"), exec)
    }

    pub fn dataset_from_corpus(&self, corpus: &Path, out: &Path, exec: Exec) -> Result<Dataset> {
        build_dataset(corpus, &self.dataset.classes()?, &self.dataset.levels, self.dataset.seed, out, exec)
    }
}

/// One configuration of the ablation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Rows `a`..`f`, then `f-V2` (SGD), `f-V3`/`f-V4` (patch 64/32) and
/// `f-deeper`, all sharing the base seed.
pub fn ablation_matrix(base: &ExperimentConfig) -> Vec<AblationEntry> {
    let mut rows = Vec::new();
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut config = base.clone();
        config.eval.n_splits = base.ablation.seeds;
        f(&mut config);
        AblationEntry { label, config }
    };
    for &v in &base.ablation.variants {
        rows.push(with(v.id().to_string(), &|c| c.model.variant = v));
    }
    if base.ablation.sgd {
        rows.push(with("f-V2".into(), &|c| {
            c.model.variant = HeadVariant::F;
            c.train.optimizer = OptimizerKind::Sgd;
        }));
    }
    for &p in &base.ablation.patch_sizes {
        let label = match p {
            64 => "f-V3".to_string(),
            32 => "f-V4".to_string(),
            other => format!("f-p{other}"),
        };
        rows.push(with(label, &|c| {
            c.model.variant = HeadVariant::F;
            c.model.patch_side = p;
            c.model.patch_stride = p;
        }));
    }
    if base.ablation.deeper {
        rows.push(with("f-deeper".into(), &|c| {
            c.model.variant = HeadVariant::F;
            if !c.model.backbone.ends_with("-deep") {
                c.model.backbone = format!("{}-deep", c.model.backbone);
            }
        }));
    }
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub srocc: Option<f64>,
    pub lcc: Option<f64>,
    pub accuracy: Option<f64>,
    pub parameters: Option<usize>,
    pub wall_seconds: f64,
    pub error: Option<String>,
    /// Per-seed SROCC, for paired comparisons.
    pub per_seed_srocc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    /// Paired seeds behind each median.
    pub seeds: usize,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "srocc", "lcc", "accuracy", "parameters", "wall_seconds", "seeds", "error"])
            .expect("in-memory writer");
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                f(r.srocc),
                f(r.lcc),
                f(r.accuracy),
                r.parameters.map_or(String::new(), |p| p.to_string()),
                format!("{:.2}", r.wall_seconds),
                self.seeds.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .expect("in-memory writer");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    /// Fixed-width table for terminals.
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "medians over {} paired seeds\n{:<10} {:>8} {:>8} {:>8} {:>10} {:>9}  error\n",
            self.seeds, "label", "srocc", "lcc", "accuracy", "params", "seconds"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>8} {:>8} {:>8} {:>10} {:>9.1}  {}\n",
                r.label,
                f(r.srocc),
                f(r.lcc),
                f(r.accuracy),
                r.parameters.map_or("-".to_string(), |p| p.to_string()),
                r.wall_seconds,
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

/// Runs every entry on the same dataset. Failures become rows with an
/// error tag; `on_row` sees each row as it completes.
pub fn run_ablation(
    dataset: &Dataset,
    entries: &[AblationEntry],
    out_dir: Option<&Path>,
    exec: Exec,
    mut on_row: impl FnMut(&ResultRow),
) -> ResultsTable {
    let mut table = ResultsTable {
        seeds: entries.first().map_or(0, |e| e.config.eval.n_splits),
        rows: Vec::new(),
    };
    for entry in entries {
        let start = Instant::now();
        let parameters = entry
            .config
            .model_config(entry.config.seed)
            .and_then(Model::<f32>::build)
            .map(|m| m.census().total)
            .ok();
        let result = entry.config.validate().and_then(|_| {
            let protocol = entry.config.split_protocol(out_dir.map(|d| d.join(&entry.label)))?;
            run_repeated_splits(dataset, &protocol, exec)
        });
        let row = match result {
            Ok(summary) => summary_row(&entry.label, &summary, parameters, start),
            Err(e) => ResultRow {
                label: entry.label.clone(),
                srocc: None,
                lcc: None,
                accuracy: None,
                parameters,
                wall_seconds: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
                per_seed_srocc: Vec::new(),
            },
        };
        on_row(&row);
        table.rows.push(row);
    }
    table
}

fn summary_row(label: &str, s: &RepeatedSummary, parameters: Option<usize>, start: Instant) -> ResultRow {
    let errors: Vec<&str> = s.runs.iter().filter_map(|r| r.error.as_deref()).collect();
    ResultRow {
        label: label.to_string(),
        srocc: s.median_srocc,
        lcc: s.median_lcc,
        accuracy: s.median_accuracy,
        parameters,
        wall_seconds: start.elapsed().as_secs_f64(),
        error: (!errors.is_empty()).then(|| errors.join("; ")),
        per_seed_srocc: s.runs.iter().map(|r| r.report.as_ref().and_then(|x| x.srocc)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_rows() {
        let labels: Vec<String> = ablation_matrix(&ExperimentConfig::toy()).into_iter().map(|e| e.label).collect();
        assert_eq!(labels, ["a", "b", "c", "d", "e", "f", "f-V2", "f-V3", "f-V4", "f-deeper"]);
    }

    #[test]
    fn matrix_rows_share_seed_and_data() {
        let base = ExperimentConfig::toy();
        for e in ablation_matrix(&base) {
            assert_eq!(e.config.seed, base.seed);
            assert_eq!(e.config.dataset, base.dataset);
            assert_eq!(e.config.eval.n_splits, base.ablation.seeds);
        }
        let m = ablation_matrix(&base);
        let deeper = m.iter().find(|e| e.label == "f-deeper").unwrap();
        assert_eq!(deeper.config.model.backbone, "tiny-deep");
        assert_eq!(m.iter().find(|e| e.label == "f-V2").unwrap().config.train.optimizer, OptimizerKind::Sgd);
    }

    #[test]
    fn validation() {
        ExperimentConfig::toy().validate().unwrap();
        let mut c = ExperimentConfig::toy();
        c.dataset.types.push("sharpen".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        c.model.patch_side = 48;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        c.ablation.patch_sizes = vec![40];
        assert!(c.validate().is_err());
    }

    #[test]
    fn failed_rows_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = ExperimentConfig::toy();
        base.dataset.references = 4;
        base.dataset.types = vec!["white_noise".into(), "gaussian_blur".into()];
        base.train.epochs = 1;
        base.ablation.seeds = 1;
        let ds = base.prepare_dataset(dir.path(), Exec::default()).unwrap();
        let mut entries: Vec<AblationEntry> =
            ablation_matrix(&base).into_iter().filter(|e| e.label == "b" || e.label == "f-V3").collect();
        // 64×64 patches fit; 128 do not
        entries[1].config.model.patch_side = 128;
        entries[1].config.model.patch_stride = 128;
        let mut seen = 0;
        let table = run_ablation(&ds, &entries, None, Exec::default(), |_| seen += 1);
        assert_eq!(seen, 2);
        assert_eq!(table.rows.len(), 2);
        assert!(table.row("b").unwrap().error.is_none());
        assert!(table.row("f-V3").unwrap().error.is_some());
        assert!(table.to_csv().lines().count() == 3);
    }
}
