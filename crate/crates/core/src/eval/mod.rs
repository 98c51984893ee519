//! Image-level aggregation, correlation metrics and the evaluation
//! protocols (single split, repeated splits, cross-dataset).

mod logistic;
mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use logistic::{fit_logistic, linear_fit, LogisticParams};
pub use metrics::{average_ranks, median, pcc, srocc};

use crate::distort::{load_image, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{ForwardOutput, Model, ModelConfig};
use crate::nn::{softmax, Real};
use crate::patch::{extract_patches, split_by_reference, training_patches, PatchGeometry, SplitSpec};
use crate::train::{train, TrainConfig, TrainOutputs};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageAggregate {
    pub score: f64,
    /// 1-based majority class; absent for quality-only models.
    pub class: Option<usize>,
}

/// Mean patch score and majority-vote class. Vote ties go to the larger
/// summed softmax probability, then to the lower class index.
pub fn aggregate_image(outputs: &[ForwardOutput<f64>]) -> Result<ImageAggregate> {
    if outputs.is_empty() {
        return Err(Error::Data("cannot aggregate an image with no patches".into()));
    }
    let score = outputs.iter().map(|o| o.s).sum::<f64>() / outputs.len() as f64;
    let logits: Option<Vec<&Vec<f64>>> = outputs.iter().map(|o| o.d_logits.as_ref()).collect();
    let class = match logits {
        None => None,
        Some(all) => {
            let m = all[0].len();
            if m == 0 || all.iter().any(|l| l.len() != m) {
                return Err(Error::Shape("patch outputs disagree on the number of classes".into()));
            }
            let mut votes = vec![0usize; m];
            let mut mass = vec![0.0f64; m];
            for l in &all {
                votes[argmax(l)] += 1;
                for (acc, p) in mass.iter_mut().zip(softmax(l)) {
                    *acc += p;
                }
            }
            let mut best = 0;
            for c in 1..m {
                if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
                    best = c;
                }
            }
            Some(best + 1)
        }
    };
    Ok(ImageAggregate { score, class })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub path: String,
    pub reference_id: String,
    pub distortion_true: String,
    pub distortion_pred: Option<String>,
    pub severity: usize,
    pub score_true: f64,
    pub score_pred: f64,
    pub patch_scores: Vec<f64>,
    pub patch_classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub srocc: Option<f64>,
    pub lcc: Option<f64>,
    pub lcc_remapped: Option<f64>,
    pub accuracy: Option<f64>,
    pub logistic: Option<LogisticParams>,
    /// Set when the predictions admit no correlation (e.g. all equal).
    pub degenerate: Option<String>,
    pub predictions: Vec<ImagePrediction>,
}

impl EvalReport {
    pub fn from_predictions(predictions: Vec<ImagePrediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Data("no images to evaluate".into()));
        }
        let pred: Vec<f64> = predictions.iter().map(|p| p.score_pred).collect();
        let truth: Vec<f64> = predictions.iter().map(|p| p.score_true).collect();
        let accuracy = if predictions.iter().all(|p| p.distortion_pred.is_some()) {
            let hits = predictions
                .iter()
                .filter(|p| p.distortion_pred.as_deref() == Some(p.distortion_true.as_str()))
                .count();
            Some(hits as f64 / predictions.len() as f64)
        } else {
            None
        };
        let mut report = Self {
            n_images: predictions.len(),
            srocc: None,
            lcc: None,
            lcc_remapped: None,
            accuracy,
            logistic: None,
            degenerate: None,
            predictions,
        };
        match (srocc(&pred, &truth), pcc(&pred, &truth)) {
            (Ok(s), Ok(l)) => {
                report.srocc = Some(s);
                report.lcc = Some(l);
            }
            (Err(Error::Degenerate(why)), _) | (_, Err(Error::Degenerate(why))) => {
                report.degenerate = Some(format!("degenerate predictions: {why}"));
                return Ok(report);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
        if let Ok(fit) = fit_logistic(&pred, &truth) {
            report.logistic = Some(fit);
            report.lcc_remapped = pcc(&fit.apply_all(&pred), &truth).ok();
        }
        Ok(report)
    }

    /// One-line summary.
    pub fn summary(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "n={} srocc={} lcc={} lcc_remapped={} accuracy={}",
            self.n_images,
            f(self.srocc),
            f(self.lcc),
            f(self.lcc_remapped),
            f(self.accuracy)
        );
        if let Some(d) = &self.degenerate {
            write!(s, " ({d})").unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn predictions_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["reference_id", "distortion_true", "distortion_pred", "severity", "score_true", "score_pred"])
            .expect("in-memory writer");
        for p in &self.predictions {
            w.write_record([
                p.reference_id.clone(),
                p.distortion_true.clone(),
                p.distortion_pred.clone().unwrap_or_default(),
                p.severity.to_string(),
                p.score_true.to_string(),
                p.score_pred.to_string(),
            ])
            .expect("in-memory writer");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&json, self.to_text()).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.predictions_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn predict_image<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    record: &ImageRecord,
    geometry: PatchGeometry,
    true_name: &str,
    model_classes: &[String],
) -> Result<ImagePrediction> {
    let path = dataset.image_path(record);
    let image = load_image(&path)?;
    let patches = extract_patches(&image, &path.display().to_string(), geometry)?;
    let outputs = patches
        .iter()
        .map(|(_, _, px)| model.forward(&px.mapv(|v| T::of(v as f64))).map(|o| o.to_f64()))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate_image(&outputs)?;
    let distortion_pred = match agg.class {
        Some(c) => Some(
            model_classes
                .get(c - 1)
                .cloned()
                .ok_or_else(|| Error::Data(format!("model predicts class {c} but only {} names are known", model_classes.len())))?,
        ),
        None => None,
    };
    Ok(ImagePrediction {
        path: record.path.clone(),
        reference_id: record.reference_id.clone(),
        distortion_true: true_name.to_string(),
        distortion_pred,
        severity: record.severity_level,
        score_true: record.score,
        score_pred: agg.score,
        patch_scores: outputs.iter().map(|o| o.s).collect(),
        patch_classes: outputs.iter().filter_map(|o| o.d_logits.as_deref().map(|l| argmax(l) + 1)).collect(),
    })
}

fn check_geometry(config: &ModelConfig, geometry: PatchGeometry) -> Result<()> {
    if geometry.side != config.patch_side {
        return Err(Error::Config(format!(
            "patch size {} does not match the model's patch size {}",
            geometry.side, config.patch_side
        )));
    }
    Ok(())
}

fn predict_records<T: Real>(
    model: &Model<T>,
    dataset: &Dataset,
    records: &[&ImageRecord],
    geometry: PatchGeometry,
    model_classes: &[String],
    exec: Exec,
) -> Result<Vec<ImagePrediction>> {
    let names = dataset.manifest.class_names();
    exec.map(records, |r| predict_image(model, dataset, r, geometry, &names[r.distortion_index - 1], model_classes))
        .into_iter()
        .collect()
}

/// Evaluates a model on a dataset that shares its class dictionary.
pub fn evaluate<T: Real>(model: &Model<T>, dataset: &Dataset, geometry: PatchGeometry, exec: Exec) -> Result<EvalReport> {
    check_geometry(model.config(), geometry)?;
    let names = dataset.manifest.class_names();
    if model.config().variant.has_distortion_head() && model.config().num_distortions != names.len() {
        return Err(Error::Config(format!(
            "model has {} distortion classes, dataset has {}",
            model.config().num_distortions,
            names.len()
        )));
    }
    let records: Vec<&ImageRecord> = dataset.manifest.records.iter().collect();
    EvalReport::from_predictions(predict_records(model, dataset, &records, geometry, &names, exec)?)
}

/// Evaluates on a foreign dataset restricted to `shared_types`, matching
/// classes by name. `model_classes` names the model's outputs in order.
pub fn cross_dataset_eval<T: Real>(
    model: &Model<T>,
    model_classes: &[String],
    foreign: &Dataset,
    shared_types: &[String],
    geometry: PatchGeometry,
    exec: Exec,
) -> Result<EvalReport> {
    check_geometry(model.config(), geometry)?;
    let foreign_names = foreign.manifest.class_names();
    let shared: Vec<&String> = shared_types
        .iter()
        .filter(|t| foreign_names.contains(t) && model_classes.contains(t))
        .collect();
    if shared.is_empty() {
        return Err(Error::Data(format!(
            "no distortion types shared between the model ({}) and the dataset ({})",
            model_classes.join(", "),
            foreign_names.join(", ")
        )));
    }
    let records: Vec<&ImageRecord> = foreign
        .manifest
        .records
        .iter()
        .filter(|r| shared.contains(&&foreign_names[r.distortion_index - 1]))
        .collect();
    EvalReport::from_predictions(predict_records(model, foreign, &records, geometry, model_classes, exec)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRun {
    pub run: usize,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedSummary {
    pub runs: Vec<SplitRun>,
    pub median_srocc: Option<f64>,
    pub median_lcc: Option<f64>,
    pub median_accuracy: Option<f64>,
}

/// Options shared by every run of [`run_repeated_splits`].
#[derive(Clone, Debug)]
pub struct SplitProtocol {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub geometry: PatchGeometry,
    pub train_fraction: f64,
    pub runs: usize,
    /// Per-run output directories `run<i>/` are created under this path.
    pub out_dir: Option<PathBuf>,
}

/// `runs` independent split/train/evaluate cycles with seeds
/// `train.seed + i`. Fails unless at least half of the runs succeed.
pub fn run_repeated_splits(dataset: &Dataset, protocol: &SplitProtocol, exec: Exec) -> Result<RepeatedSummary> {
    if protocol.runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let mut runs = Vec::with_capacity(protocol.runs);
    for i in 0..protocol.runs {
        let seed = protocol.train.seed + i as u64;
        let outcome = single_split_run(dataset, protocol, i, seed, exec);
        runs.push(match outcome {
            Ok(report) => SplitRun {
                run: i,
                seed,
                report: Some(report),
                error: None,
            },
            Err(e) => SplitRun {
                run: i,
                seed,
                report: None,
                error: Some(format!("run {i}: {e}")),
            },
        });
    }
    let ok: Vec<&EvalReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
    if ok.len() * 2 < protocol.runs {
        let errors: Vec<&str> = runs.iter().filter_map(|r| r.error.as_deref()).collect();
        return Err(Error::Data(format!(
            "only {}/{} runs succeeded: {}",
            ok.len(),
            protocol.runs,
            errors.join("; ")
        )));
    }
    let collect = |f: fn(&EvalReport) -> Option<f64>| median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    Ok(RepeatedSummary {
        median_srocc: collect(|r| r.srocc),
        median_lcc: collect(|r| r.lcc_remapped.or(r.lcc)),
        median_accuracy: collect(|r| r.accuracy),
        runs,
    })
}

fn single_split_run(dataset: &Dataset, protocol: &SplitProtocol, run: usize, seed: u64, exec: Exec) -> Result<EvalReport> {
    let (train_m, test_m) = split_by_reference(
        &dataset.manifest,
        SplitSpec {
            train_fraction: protocol.train_fraction,
            seed,
        },
    )?;
    let model = Model::<f32>::build(ModelConfig {
        seed,
        ..protocol.model.clone()
    })?;
    let train_cfg = TrainConfig {
        seed,
        ..protocol.train.clone()
    };
    let patches = training_patches(&dataset.with_manifest(train_m), protocol.geometry, train_cfg.augment_flip, exec)?;
    let outputs = match &protocol.out_dir {
        Some(d) => TrainOutputs::in_dir(&d.join(format!("run{run}"))),
        None => TrainOutputs::default(),
    };
    let state = train(model, &patches, &train_cfg, &outputs, exec)?;
    drop(patches);
    let report = evaluate(&state.model, &dataset.with_manifest(test_m), protocol.geometry, exec)?;
    if let Some(dir) = &outputs.dir {
        report.write(dir, "eval")?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out(s: f64, logits: Option<Vec<f64>>) -> ForwardOutput<f64> {
        ForwardOutput { d_logits: logits, s }
    }

    #[test]
    fn mean_and_majority() {
        let outs = vec![
            out(10.0, Some(vec![0.0, 1.0, 0.0])),
            out(20.0, Some(vec![0.0, 1.0, 0.0])),
            out(30.0, Some(vec![0.0, 0.0, 1.0])),
        ];
        let a = aggregate_image(&outs).unwrap();
        assert_eq!(a.score, 20.0);
        assert_eq!(a.class, Some(2));
    }

    #[test]
    fn vote_tie_goes_to_softmax_mass() {
        // votes 1:1; class-1 mass 0.6 + 0.3 = 0.9, class-2 mass 0.4 + 0.7 = 1.1
        let l = |p: f64| vec![p.ln(), (1.0 - p).ln()];
        let outs = vec![out(0.0, Some(l(0.6))), out(0.0, Some(l(0.3)))];
        assert_eq!(aggregate_image(&outs).unwrap().class, Some(2));
        // equal mass falls back to the lowest index
        let outs = vec![out(0.0, Some(l(0.6))), out(0.0, Some(l(0.4)))];
        assert_eq!(aggregate_image(&outs).unwrap().class, Some(1));
    }

    #[test]
    fn aggregation_errors_and_quality_only() {
        assert!(aggregate_image(&[]).is_err());
        let a = aggregate_image(&[out(1.0, None), out(3.0, None)]).unwrap();
        assert_eq!((a.score, a.class), (2.0, None));
    }

    fn prediction(truth: f64, pred: f64, cls: &str, pcls: &str) -> ImagePrediction {
        ImagePrediction {
            path: format!("{truth}.png"),
            reference_id: "r".into(),
            distortion_true: cls.into(),
            distortion_pred: Some(pcls.into()),
            severity: 1,
            score_true: truth,
            score_pred: pred,
            patch_scores: vec![pred],
            patch_classes: vec![1],
        }
    }

    #[test]
    fn oracle_predictions() {
        let preds: Vec<_> = (0..12)
            .map(|i| prediction(i as f64 * 8.0, i as f64 * 8.0, "blur", if i < 9 { "blur" } else { "noise" }))
            .collect();
        let r = EvalReport::from_predictions(preds).unwrap();
        assert_eq!(r.srocc, Some(1.0));
        assert!((r.lcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.lcc_remapped.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(r.accuracy, Some(0.75));
        assert!(r.degenerate.is_none());
    }

    #[test]
    fn constant_predictions_are_flagged() {
        let preds: Vec<_> = (0..8).map(|i| prediction(i as f64, 5.0, "a", "a")).collect();
        let r = EvalReport::from_predictions(preds).unwrap();
        assert!(r.degenerate.as_deref().unwrap().contains("degenerate predictions"));
        assert_eq!(r.srocc, None);
        assert_eq!(r.accuracy, Some(1.0));
    }

    #[test]
    fn csv_header_and_round_trip() {
        let preds: Vec<_> = (0..6).map(|i| prediction(i as f64, (i * i) as f64, "a", "b")).collect();
        let r = EvalReport::from_predictions(preds).unwrap();
        let csv = r.predictions_csv();
        assert!(csv.starts_with("reference_id,distortion_true,distortion_pred,severity,score_true,score_pred\n"));
        assert_eq!(csv.lines().count(), 7);
        let dir = tempfile::tempdir().unwrap();
        let (json, _) = r.write(dir.path(), "eval").unwrap();
        assert_eq!(EvalReport::read(&json).unwrap(), r);
    }
}
