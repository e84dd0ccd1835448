use std::hint::black_box;

use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use mcdiff::curriculum::shannon_entropy;
use mcdiff::data::kspace_truncate;
use mcdiff::data::phantom::generate_phantom_pair;
use mcdiff::diffusion::{sample_hr_with_seeds, ConditionPair, NoiseSchedule};
use mcdiff::evaluation::ssim;
use mcdiff::unet::{init_model, ModelConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RES: usize = 32;

fn phantom() -> (Array2<f64>, Array2<f64>) {
    generate_phantom_pair(&mut ChaCha8Rng::seed_from_u64(7), RES).unwrap()
}

fn to_unit(grid: &Array2<f64>) -> Array2<f64> {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    grid.mapv(|v| 2.0 * (v - lo) / (hi - lo).max(1e-12) - 1.0)
}

fn tensor(grid: &Array2<f64>, batch: usize) -> Tensor {
    let one = Tensor::from_iter(grid.iter().copied(), &Device::Cpu)
        .unwrap()
        .reshape((1, 1, RES, RES))
        .unwrap();
    one.repeat((batch, 1, 1, 1)).unwrap()
}

fn image_ops(c: &mut Criterion) {
    let (t2, _) = phantom();
    let lr = kspace_truncate(t2.view(), 4).unwrap();
    c.bench_function("kspace_truncate 32x32 x4", |b| b.iter(|| kspace_truncate(black_box(t2.view()), 4).unwrap()));
    c.bench_function("ssim 32x32", |b| b.iter(|| ssim(black_box(&lr), black_box(&t2), 1.0).unwrap()));
    c.bench_function("entropy 32x32", |b| b.iter(|| shannon_entropy(black_box(&t2), 256).unwrap()));
}

fn model_ops(c: &mut Criterion) {
    let (t2, t1) = phantom();
    let lr = to_unit(&kspace_truncate(t2.view(), 4).unwrap());
    let aux = to_unit(&t1);
    let config = ModelConfig::desk();
    let (_vars, model) = init_model(&config, DType::F64, &Device::Cpu, 1).unwrap();

    let batch = 4;
    let cond = ConditionPair::new(tensor(&lr, batch), tensor(&aux, batch)).unwrap();
    let x_t = tensor(&to_unit(&t2), batch);
    let steps = vec![50; batch];
    c.bench_function("desk forward batch 4", |b| b.iter(|| model.forward(black_box(&x_t), &cond, &steps).unwrap()));

    let single = ConditionPair::new(tensor(&lr, 1), tensor(&aux, 1)).unwrap();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap().respace(5).unwrap();
    let mut group = c.benchmark_group("sampling");
    group.sample_size(10);
    group.bench_function("4 chains x 5 steps", |b| {
        b.iter(|| sample_hr_with_seeds(&single, &model, &schedule, &[1, 2, 3, 4]).unwrap())
    });
    group.finish();
}

criterion_group!(benches, image_ops, model_ops);
criterion_main!(benches);
