use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use seqpack_bench::{lane, lengths, packed_fixture};
use seqpack_core::conv::conv1d_pack_forward;
use seqpack_core::packing::{plan_fifo, plan_greedy_sorted};
use seqpack_core::scan::{parallel_scan, serial_scan};
use seqpack_core::ssm::{ssm_backward_packed, ssm_forward_packed};

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("scan");
    for len in [255, 256, 4095, 4096, 65536] {
        let (a, b) = lane(len, 1);
        group.throughput(Throughput::Elements(len as u64));
        group.bench_with_input(BenchmarkId::new("parallel", len), &len, |bench, _| {
            bench.iter(|| parallel_scan(black_box(&a), black_box(&b)))
        });
        group.bench_with_input(BenchmarkId::new("serial", len), &len, |bench, _| {
            bench.iter(|| serial_scan(black_box(&a), black_box(&b)))
        });
    }
    group.finish();
}

fn planners(c: &mut Criterion) {
    let lens = lengths(100_000, 2048, 2);
    let mut group = c.benchmark_group("plan");
    group.sample_size(20);
    group.bench_function("fifo", |b| {
        b.iter(|| plan_fifo(black_box(&lens), 4096).unwrap())
    });
    group.bench_function("greedy", |b| {
        b.iter(|| plan_greedy_sorted(black_box(&lens), 4096).unwrap())
    });
    group.finish();
}

fn packed_ops(c: &mut Criterion) {
    let lens = lengths(16, 256, 3);
    let fx = packed_fixture(&lens, 512, 16, 8, 4);
    let pos = fx.plan.position_indices();
    let dy = fx.x.mapv(|v| 0.5 * v);
    let mut group = c.benchmark_group("packed");
    group.throughput(Throughput::Elements(fx.plan.total_slots() as u64));
    group.bench_function("conv_forward", |b| {
        b.iter(|| conv1d_pack_forward(black_box(&fx.x), &fx.conv, &pos).unwrap())
    });
    group.bench_function("ssm_forward", |b| {
        b.iter(|| ssm_forward_packed(black_box(&fx.ssm), &pos).unwrap())
    });
    group.bench_function("ssm_backward", |b| {
        b.iter(|| ssm_backward_packed(black_box(&fx.ssm), &pos, &dy).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scan, planners, packed_ops);
criterion_main!(benches);
