use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ust_core::exec::{self, ExecMode};
use ust_core::kernels::{self, ConvGeom};
use ust_core::losses::IdentityExtractor;
use ust_core::model::{ImageBatch, MaskBatch, ModelConfig, UstModel};
use ust_core::synth::UnpairedBatch;
use ust_core::trainer::{train_step, TrainState, TrainerConfig};
use ust_core::Tensor;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn box_mask(n: usize, size: usize) -> MaskBatch {
    let mut m = Tensor::zeros(&[n, 1, size, size]);
    for s in 0..n {
        for y in size / 4..3 * size / 4 {
            for x in size / 4..3 * size / 4 {
                m.set4(s, 0, y, x, 1.0);
            }
        }
    }
    MaskBatch::new(m).unwrap()
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom {
        c_in: 16,
        h: 32,
        w: 32,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    };
    let n = 8;
    let x = random(&[n, 16, 32, 32], 1);
    let w = random(&[32, 16, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d_forward_8x16x32x32");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| kernels::conv2d_forward(x.data(), n, &g, w.data(), None, 32, true))
        });
    }
    group.finish();
}

fn instance_norm(c: &mut Criterion) {
    let x = random(&[8, 32, 32, 32], 3);
    let mut group = c.benchmark_group("instance_norm_8x32x32x32");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| kernels::instance_norm_forward(x.data(), 8 * 32, 32 * 32, 1e-5))
        });
    }
    group.finish();
}

fn take_off(c: &mut Criterion) {
    let model = UstModel::new(ModelConfig::desk(), 7).unwrap();
    let x = ImageBatch::new(random(&[4, 3, 64, 64], 4)).unwrap();
    let m = box_mask(4, 64);
    let mut group = c.benchmark_group("take_off_desk_batch4");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| model.take_off(&x, &m).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let batch = UnpairedBatch {
        x_a: ImageBatch::new(random(&[2, 3, 32, 32], 5)).unwrap(),
        m_a: box_mask(2, 32),
        x_b: ImageBatch::new(random(&[2, 3, 32, 32], 6)).unwrap(),
    };
    let cfg = TrainerConfig {
        learning_rate: 1e-4,
        ..TrainerConfig::default()
    };
    let model_cfg = ModelConfig {
        image_size: 32,
        ..ModelConfig::desk()
    };
    let state = TrainState::new(UstModel::new(model_cfg, 8).unwrap(), 8);
    let mut group = c.benchmark_group("train_step_32px_batch2");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter_batched(
                || state.clone(),
                |mut st| train_step(&mut st, &batch, &cfg, &IdentityExtractor).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, conv, instance_norm, take_off, training_step);
criterion_main!(benches);
