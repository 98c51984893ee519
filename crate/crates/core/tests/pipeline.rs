use qualnet::eval::{evaluate, EvalReport};
use qualnet::experiment::ExperimentConfig;
use qualnet::patch::{split_by_reference, training_patches, SplitSpec};
use qualnet::train::{train, TrainOutputs};
use qualnet::{Exec, Model};

fn small_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::toy();
    config.dataset.references = 3;
    config.dataset.image_side = 32;
    config.train.epochs = 2;
    config
}

#[test]
fn train_save_reload_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let ds = config.prepare_dataset(dir.path(), Exec::default()).unwrap();
    assert_eq!(ds.manifest.records.len(), 3 * 16);

    let (train_m, test_m) = split_by_reference(&ds.manifest, SplitSpec { train_fraction: 0.8, seed: 1 }).unwrap();
    let train_refs = train_m.reference_ids();
    assert!(test_m.reference_ids().iter().all(|r| !train_refs.contains(r)));

    let patches = training_patches(&ds.with_manifest(train_m), config.geometry().unwrap(), false, Exec::default()).unwrap();
    let model = Model::<f32>::build(config.model_config(1).unwrap()).unwrap();
    let outputs = TrainOutputs::in_dir(dir.path());
    let state = train(model, &patches, &config.train, &outputs, Exec::default()).unwrap();
    assert_eq!(state.curve.len(), 2);
    assert!(state.curve.iter().all(|s| s.mean_ltotal.is_finite()));

    let path = dir.path().join("saved.qnet");
    state.model.save(&path).unwrap();
    let reloaded = Model::<f32>::load(&path).unwrap();
    let test = ds.with_manifest(test_m);
    let a = evaluate(&state.model, &test, config.geometry().unwrap(), Exec::Sequential).unwrap();
    let b = evaluate(&reloaded, &test, config.geometry().unwrap(), Exec::Parallel).unwrap();
    assert_eq!(a.n_images, 16);
    let scores = |r: &EvalReport| r.predictions.iter().map(|p| p.score_pred).collect::<Vec<_>>();
    assert_eq!(scores(&a), scores(&b));
    assert_eq!(a.accuracy, b.accuracy);

    let (json, _) = a.write(dir.path(), "eval").unwrap();
    assert_eq!(EvalReport::read(&json).unwrap(), a);
}
