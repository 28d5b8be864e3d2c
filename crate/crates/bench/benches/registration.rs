//! Benchmarks for the hot paths: interpolation, table building, metric
//! evaluation with gradients, and full optimization iterations.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use xcoreg_bench::{bench_config, misaligned_group};
use xcoreg_core::coreg::xcoreg;
use xcoreg_core::density::{joint_table, Binning};
use xcoreg_core::metrics::{ape, build_metric_context, vi, xmetric};
use xcoreg_core::sample::draw_samples;
use xcoreg_core::transform::{Transform, TransformGroup, Translation};

fn bench_interpolation(c: &mut Criterion) {
    let vols = misaligned_group(128, 1);
    let v = &vols[0];
    let grid = v.grid().clone();
    let points: Vec<_> = (0..grid.len()).step_by(3).map(|i| grid.point_at(i)).collect();
    c.bench_function("interpolate_128sq", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for p in &points {
                acc += v.sample(black_box(p)).value;
            }
            black_box(acc)
        })
    });
}

fn bench_tables(c: &mut Criterion) {
    let vols = misaligned_group(128, 2);
    let binning = Binning::from_volume(&vols[0], 64);
    let coords: Vec<f64> = vols[0].data().iter().map(|&u| binning.coord(u)).collect();
    let k = 4;
    let gamma = vec![0.25; coords.len() * k];
    c.bench_function("joint_table_16k_samples", |b| {
        b.iter(|| black_box(joint_table(&coords, &gamma, k, &binning).unwrap()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let vols = misaligned_group(128, 3);
    let grid = vols[0].grid().clone();
    let group = TransformGroup::new(
        (0..vols.len()).map(|_| Transform::Translation(Translation::zero(2))).collect(),
        false,
    );
    let samples = draw_samples(&grid, 0.1, 9);
    let binnings: Vec<Binning> = vols.iter().map(|v| Binning::from_volume(v, 64)).collect();
    let ctx = build_metric_context(&vols, &group, None, &samples, &binnings, true);
    let k = 4;
    let gamma = vec![0.25; ctx.num_overlap * k];
    c.bench_function("xmetric_grad_1638_samples", |b| {
        b.iter(|| black_box(xmetric(&ctx, &gamma, k).unwrap()))
    });
    c.bench_function("ape_grad_1638_samples", |b| {
        b.iter(|| black_box(ape(&ctx).unwrap()))
    });
    c.bench_function("vi_grad_1638_samples", |b| {
        b.iter(|| black_box(vi(&ctx).unwrap()))
    });
}

fn bench_full_iterations(c: &mut Criterion) {
    let vols = misaligned_group(128, 4);
    let cfg = bench_config("xmetric", "translation", 5);
    c.bench_function("xcoreg_5_iterations_128sq", |b| {
        b.iter(|| black_box(xcoreg(&vols, &cfg).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_interpolation,
    bench_tables,
    bench_metrics,
    bench_full_iterations
);
criterion_main!(benches);
