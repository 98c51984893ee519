use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qualnet::distort::Dataset;
use qualnet::eval::{cross_dataset_eval, evaluate, EvalReport};
use qualnet::experiment::{ablation_matrix, run_ablation, ExperimentConfig, ResultsTable};
use qualnet::model::{read_container, write_container};
use qualnet::patch::{split_by_reference, training_patches, PatchGeometry, SplitSpec};
use qualnet::train::{resume, train, TrainOutputs, TrainState};
use qualnet::{Exec, Model};

use crate::run::{out_root, RunDir};
use crate::{plot, Cli, Command};

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::toy());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn require_file(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    match path {
        Some(p) if p.is_file() => Ok(p.clone()),
        Some(p) => bail!("{what} {} does not exist", p.display()),
        None => bail!("this command needs --{what}"),
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(cross) = &cli.cross_set {
        config.eval.cross_set = Some(cross.clone());
    }
    config.validate().context("invalid configuration")?;
    if let Some(corpus) = &config.dataset.corpus {
        if cli.dataset.is_none() && !corpus.is_dir() {
            bail!("corpus directory {} does not exist", corpus.display());
        }
    }
    if let Some(d) = &cli.dataset {
        require_file(Some(d), "dataset")?;
    }
    match &cli.command {
        Command::Eval => {
            require_file(cli.checkpoint.as_ref(), "checkpoint")?;
        }
        Command::Plot { report, image, .. } => match (report, image) {
            (Some(r), _) => {
                require_file(Some(r), "report")?;
            }
            (None, Some(i)) => {
                require_file(Some(i), "image")?;
                require_file(cli.checkpoint.as_ref(), "checkpoint")?;
            }
            (None, None) => bail!("plot needs --report, or --image with --checkpoint"),
        },
        Command::Train => {
            if cli.checkpoint.is_some() {
                require_file(cli.checkpoint.as_ref(), "checkpoint")?;
            }
        }
        Command::Synth | Command::Ablate => {}
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring worker threads")?;
    }

    let mut run = RunDir::create(&out_root(cli.out.as_deref()), config.seed)?;
    fs::write(run.join("config.toml"), toml::to_string_pretty(&config)?).context("writing config copy")?;
    run.say(format!("run directory: {}", run.path.display()));
    let exec = Exec::default();
    let result = match &cli.command {
        Command::Synth => synth(cli, &config, &mut run, exec),
        Command::Train => cmd_train(cli, &config, &mut run, exec),
        Command::Eval => cmd_eval(cli, &config, &mut run, exec),
        Command::Ablate => ablate(cli, &config, &mut run, exec),
        Command::Plot { report, image, top_k } => cmd_plot(cli, report.as_deref(), image.as_deref(), *top_k, &mut run),
    };
    if let Err(e) = &result {
        run.say(format!("error: {e:#}"));
    }
    result
}

fn dataset(cli: &Cli, config: &ExperimentConfig, run: &mut RunDir, exec: Exec) -> Result<Dataset> {
    let ds = match &cli.dataset {
        Some(m) => Dataset::open(m)?,
        None => config.prepare_dataset(&run.path, exec)?,
    };
    let m = &ds.manifest;
    run.say(format!(
        "dataset: {} records, {} classes x {} levels, {} references",
        m.records.len(),
        m.num_classes(),
        m.levels,
        m.reference_ids().len()
    ));
    Ok(ds)
}

fn synth(cli: &Cli, config: &ExperimentConfig, run: &mut RunDir, exec: Exec) -> Result<()> {
    let ds = dataset(cli, config, run, exec)?;
    run.say(format!("manifest: {}", ds.root.join("manifest.csv").display()));
    Ok(())
}

fn save_model(model: &Model<f32>, classes: &[String], path: &Path) -> Result<()> {
    let mut container = model.to_container();
    container.extra = serde_json::json!({ "classes": classes });
    write_container(path, &container)?;
    Ok(())
}

/// A model and, when recorded, the names of its distortion classes.
fn load_model(path: &Path) -> Result<(Model<f32>, Option<Vec<String>>)> {
    let container = read_container(path)?;
    if container.kind != "model" && container.kind != "train_state" {
        bail!("{} holds a `{}` container, not a model", path.display(), container.kind);
    }
    let classes = container
        .extra
        .get("classes")
        .and_then(|c| serde_json::from_value(c.clone()).ok());
    Ok((Model::from_container(&container, path)?, classes))
}

fn geometry(config: &ExperimentConfig, patch_side: usize) -> Result<PatchGeometry> {
    Ok(PatchGeometry::new(patch_side, config.model.patch_stride.min(patch_side))?)
}

fn write_report(run: &mut RunDir, report: &EvalReport, stem: &str) -> Result<()> {
    let (json, csv) = report.write(&run.path, stem)?;
    run.say(format!("{stem}: {}", report.summary()));
    run.say(format!("report: {} and {}", json.display(), csv.display()));
    Ok(())
}

fn cmd_train(cli: &Cli, config: &ExperimentConfig, run: &mut RunDir, exec: Exec) -> Result<()> {
    let ds = dataset(cli, config, run, exec)?;
    let classes = ds.manifest.class_names();
    let (train_m, test_m) = split_by_reference(
        &ds.manifest,
        SplitSpec {
            train_fraction: config.eval.train_fraction,
            seed: config.seed,
        },
    )?;
    fs::write(
        run.join("split.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "train": train_m.reference_ids(),
            "test": test_m.reference_ids(),
        }))?,
    )?;
    let outputs = TrainOutputs::in_dir(&run.path);
    let state = match &cli.checkpoint {
        Some(path) => {
            let mut state = TrainState::<f32>::load(path)?;
            if state.model.config().num_distortions != classes.len() && state.model.config().variant.has_distortion_head() {
                bail!(
                    "checkpoint has {} distortion classes, dataset has {}",
                    state.model.config().num_distortions,
                    classes.len()
                );
            }
            state.config.epochs = config.train.epochs;
            run.say(format!("resuming after epoch {} of {}", state.epoch, state.config.epochs));
            let g = geometry(config, state.model.config().patch_side)?;
            let patches = training_patches(&ds.with_manifest(train_m), g, state.config.augment_flip, exec)?;
            resume(state, &patches, &outputs, exec)?
        }
        None => {
            let model = Model::<f32>::build(config.model_config(config.seed)?)?;
            let census = model.census();
            run.say(format!("model: variant {}, {} parameters", config.model.variant, census.total));
            let tc = qualnet::train::TrainConfig {
                seed: config.seed,
                ..config.train.clone()
            };
            let patches = training_patches(&ds.with_manifest(train_m), config.geometry()?, tc.augment_flip, exec)?;
            run.say(format!("training on {} patches for {} epochs", patches.len(), tc.epochs));
            train(model, &patches, &tc, &outputs, exec)?
        }
    };
    for s in &state.curve {
        run.say(format!(
            "epoch {:>3}  L_d {:.4}  L_s {:.3}  L_total {:.4}  lr {:.3e}",
            s.epoch, s.mean_ld, s.mean_ls, s.mean_ltotal, s.lr
        ));
    }
    let model_path = run.join("model.qnet");
    save_model(&state.model, &classes, &model_path)?;
    run.say(format!("checkpoint: {}", model_path.display()));
    let g = geometry(config, state.model.config().patch_side)?;
    let report = evaluate(&state.model, &ds.with_manifest(test_m), g, exec)?;
    write_report(run, &report, "eval")
}

fn cmd_eval(cli: &Cli, config: &ExperimentConfig, run: &mut RunDir, exec: Exec) -> Result<()> {
    let checkpoint = require_file(cli.checkpoint.as_ref(), "checkpoint")?;
    let (model, recorded) = load_model(&checkpoint)?;
    let g = geometry(config, model.config().patch_side)?;
    match &config.eval.cross_set {
        Some(target) => {
            let foreign = if target.is_file() {
                Dataset::open(target)?
            } else if target.is_dir() {
                config.dataset_from_corpus(target, &run.join("cross_dataset"), exec)?
            } else {
                bail!("cross set {} does not exist", target.display());
            };
            let classes = recorded.unwrap_or_else(|| config.dataset.types.clone());
            run.say(format!("cross-set: {} records from {}", foreign.manifest.records.len(), target.display()));
            let report = cross_dataset_eval(&model, &classes, &foreign, &config.dataset.types, g, exec)?;
            write_report(run, &report, "cross_eval")
        }
        None => {
            let ds = dataset(cli, config, run, exec)?;
            if let Some(names) = &recorded {
                if *names != ds.manifest.class_names() {
                    bail!(
                        "checkpoint classes [{}] differ from dataset classes [{}]",
                        names.join(", "),
                        ds.manifest.class_names().join(", ")
                    );
                }
            }
            let report = evaluate(&model, &ds, g, exec)?;
            write_report(run, &report, "eval")
        }
    }
}

fn ablate(cli: &Cli, config: &ExperimentConfig, run: &mut RunDir, exec: Exec) -> Result<()> {
    let entries = ablation_matrix(config);
    if entries.is_empty() {
        bail!("the ablation section selects no configurations");
    }
    let ds = dataset(cli, config, run, exec)?;
    let labels: Vec<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    run.say(format!("ablation rows: {}", labels.join(", ")));
    let csv_path = run.join("results.csv");
    let mut partial = ResultsTable {
        seeds: config.ablation.seeds,
        rows: Vec::new(),
    };
    let mut lines = Vec::new();
    let table = run_ablation(&ds, &entries, Some(&run.join("ablation")), exec, |row| {
        partial.rows.push(row.clone());
        let _ = fs::write(&csv_path, partial.to_csv());
        lines.push(format!(
            "{}: srocc {} accuracy {} ({:.1}s){}",
            row.label,
            row.srocc.map_or("-".into(), |v| format!("{v:.4}")),
            row.accuracy.map_or("-".into(), |v| format!("{v:.4}")),
            row.wall_seconds,
            row.error.as_ref().map_or(String::new(), |e| format!(" error: {e}"))
        ));
    });
    for l in lines {
        run.say(l);
    }
    fs::write(&csv_path, table.to_csv())?;
    fs::write(run.join("results.txt"), table.to_text())?;
    fs::write(run.join("results.json"), serde_json::to_string_pretty(&table)?)?;
    run.say(table.to_text());
    run.say(format!("results: {}", csv_path.display()));
    Ok(())
}

fn cmd_plot(cli: &Cli, report: Option<&Path>, image: Option<&Path>, top_k: usize, run: &mut RunDir) -> Result<()> {
    if let Some(r) = report {
        let report = EvalReport::read(r)?;
        let out = run.join("scatter.png");
        let panels = plot::scatter(&report, &out)?;
        run.say(format!("scatter: {} ({panels} panels)", out.display()));
    }
    if let Some(i) = image {
        let checkpoint = require_file(cli.checkpoint.as_ref(), "checkpoint")?;
        let (model, _) = load_model(&checkpoint)?;
        for (name, channels) in plot::montages(&model, i, top_k, &run.path)? {
            run.say(format!("montage: {} ({channels} channels)", run.join(&name).display()));
        }
    }
    Ok(())
}
