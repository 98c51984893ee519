//! Sequential vs parallel execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array3;
use qualnet::experiment::ExperimentConfig;
use qualnet::train::batch_gradient;
use qualnet::patch::{load_patches, PatchGeometry};
use qualnet::{Exec, HeadVariant, Model, ModelConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn forward(c: &mut Criterion) {
    let model = Model::<f32>::build(ModelConfig::tiny(HeadVariant::F, 4, 32, 1)).unwrap();
    let patches: Vec<Array3<f32>> = (0..16)
        .map(|i| Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c * 7 + y * 3 + x + i) % 17) as f32 / 17.0))
        .collect();
    let mut group = c.benchmark_group("forward_batch_16");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.forward_batch(&patches, exec).unwrap())
        });
    }
    group.finish();
}

fn gradient_and_dataset(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::toy();
    config.dataset.references = 2;
    let dataset = config.prepare_dataset(dir.path(), Exec::Parallel).unwrap();
    let geometry = PatchGeometry::new(32, 32).unwrap();
    let patches = load_patches(&dataset, geometry, Exec::Parallel).unwrap();
    let model = Model::<f32>::build(config.model_config(1).unwrap()).unwrap();
    let batch: Vec<usize> = (0..16).collect();

    let mut group = c.benchmark_group("batch_gradient_16");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(&model, &patches, &batch, 1e-3, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("build_dataset_2refs");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let out = tempfile::tempdir().unwrap();
                config.prepare_dataset(out.path(), exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradient_and_dataset);
criterion_main!(benches);
