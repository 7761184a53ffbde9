//! One training batch on the desk configuration, rayon against the
//! sequential fallback. Build with `--no-default-features` to make both
//! paths sequential.

use std::hint::black_box;

use afgm_core::data_io::{split, synthetic_ett, SplitScheme};
use afgm_core::model::{Model, ModelConfig};
use afgm_core::parallel;
use afgm_core::trainer::{batch_loss_and_grad, batch_loss_and_grad_seq, TrainData};
use criterion::{criterion_group, criterion_main, Criterion};

fn batch(c: &mut Criterion) {
    let ds = synthetic_ett(17_420, 7);
    let cfg = ModelConfig::default();
    let splits = split(ds.rows(), SplitScheme::EttStandard, cfg.input_len, cfg.horizon).unwrap();
    let data = TrainData::new(&ds, &splits, cfg.input_len, cfg.horizon).unwrap();
    let model = Model::new(cfg).unwrap();
    let set = model.init_params(1, Some((data.mean.clone(), data.std.clone())));
    let idx: Vec<usize> = (0..24).map(|i| i * 97).collect();

    let mut group = c.benchmark_group(format!("batch24_threads{}", parallel::threads()));
    group.sample_size(10);
    group.bench_function("rayon", |b| {
        b.iter(|| black_box(batch_loss_and_grad(&model, &set.params, &data.train, &idx).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(batch_loss_and_grad_seq(&model, &set.params, &data.train, &idx).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
