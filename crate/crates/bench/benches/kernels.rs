use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ms2d_bench::{random_map, random_sequence, rng};
use ms2d_core::data::generate_phantom;
use ms2d_core::ms2d::{ms2d_forward, Ms2dParams};
use ms2d_core::scan_catalog::{experiment_streams, path_order, serialize};
use ms2d_core::segnet::build_model;
use ms2d_core::ssm::{ssm_scan_parallel, ssm_scan_sequential, SsmStreamParams};
use ms2d_core::stats::{friedman, table2_fixture, TABLE2_TIES};
use ms2d_core::training::loss_and_grad;
use ms2d_core::{FriedmanOptions, GridShape, LossKind, ModelConfig, PhantomSpec, ScanId};

fn selective_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let p = SsmStreamParams::new(&mut rng(0), 16, 8, 0.3);
    for len in [256usize, 1024, 4096] {
        let x = random_sequence(1, len, 16);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::new("sequential", len), &x, |b, x| {
            b.iter(|| ssm_scan_sequential(black_box(x), &p).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", len), &x, |b, x| {
            b.iter(|| ssm_scan_parallel(black_box(x), &p).unwrap())
        });
    }
    group.finish();
}

fn serialization(c: &mut Criterion) {
    let v = random_map(2, 32, 16);
    let shape = GridShape::square(32).unwrap();
    let mut group = c.benchmark_group("serialize_32x32");
    for id in [ScanId::S1, ScanId::S5, ScanId::S9] {
        let perm = path_order(id, shape);
        group.bench_function(id.to_string(), |b| b.iter(|| serialize(black_box(&v), &perm).unwrap()));
    }
    group.finish();
}

fn ms2d_block(c: &mut Criterion) {
    let mut group = c.benchmark_group("ms2d_block");
    for exp in [1usize, 19, 20] {
        let streams = experiment_streams(exp).unwrap().streams;
        let p = Ms2dParams::new(&mut rng(3), 16, 8, streams, 0.02);
        let v = random_map(4, 8, 16);
        group.bench_function(format!("exp{exp}_8x8_c16"), |b| {
            b.iter(|| ms2d_forward(black_box(&v), &p).unwrap())
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let model = build_model(&ModelConfig::desk(), 0).unwrap();
    let data = generate_phantom(&PhantomSpec {
        n_cases: 8,
        ..Default::default()
    })
    .unwrap();
    let batch: Vec<_> = data.iter().collect();
    let mut group = c.benchmark_group("desk_model");
    group.sample_size(10);
    group.bench_function("loss_and_grad_batch8", |b| {
        b.iter(|| loss_and_grad(&model, black_box(&batch), LossKind::BceDice).unwrap())
    });
    group.finish();
}

fn friedman_fixture(c: &mut Criterion) {
    let m = table2_fixture();
    let opts = FriedmanOptions {
        ties: TABLE2_TIES,
        tie_correction: false,
    };
    c.bench_function("friedman_table2", |b| b.iter(|| friedman(black_box(&m), opts).unwrap()));
}

criterion_group!(
    benches,
    selective_scan,
    serialization,
    ms2d_block,
    training_step,
    friedman_fixture
);
criterion_main!(benches);
