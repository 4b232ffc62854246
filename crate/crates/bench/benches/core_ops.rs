//! Criterion benchmarks for the hot paths: lattice construction, the
//! cubemap splat renderer (both modes), plane-sweep volumes and tiled heads.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psgp_core::cost_volume::{build_volume, make_hypotheses, LocalStatsFeatures};
use psgp_core::geometry::{fibonacci_lattice, lattice_count, CameraPose};
use psgp_core::raster::ErpImage;
use psgp_core::render::{render_pano, RenderConfig, RenderMode};
use psgp_core::scene::random_gaussian_cloud;
use psgp_core::tiling::{pre_pad, run_tiled, LocalOperator, ToyHead};

fn bench_lattice(c: &mut Criterion) {
    c.bench_function("fibonacci_lattice_1024", |b| {
        let n = lattice_count(1024);
        b.iter(|| fibonacci_lattice(std::hint::black_box(n), 0).unwrap())
    });
}

fn bench_render(c: &mut Criterion) {
    let cloud = random_gaussian_cloud(7, 5_000, 4.0, (1.0, 4.0), 512);
    let pose = CameraPose::identity();
    let cfg = RenderConfig::new(512).unwrap();
    c.bench_function("render_pano_512_batched", |b| {
        b.iter(|| render_pano(&cloud, &pose, &cfg, false).unwrap())
    });
    let seq = cfg.clone().with_mode(RenderMode::Sequential);
    c.bench_function("render_pano_512_sequential", |b| {
        b.iter(|| render_pano(&cloud, &pose, &seq, false).unwrap())
    });
}

fn bench_cost_volume(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img0 = ErpImage::zeros(256, 128, 3).unwrap();
    let mut img1 = ErpImage::zeros(256, 128, 3).unwrap();
    for v in img0.as_mut_slice() {
        *v = rng.gen_range(0.0..1.0);
    }
    for v in img1.as_mut_slice() {
        *v = rng.gen_range(0.0..1.0);
    }
    let provider = LocalStatsFeatures;
    let f0 = provider.features(&img0, 3).unwrap();
    let f1 = provider.features(&img1, 3).unwrap();
    let hyp = make_hypotheses(0.5, 10.0, 64).unwrap();
    let p0 = CameraPose::identity();
    let p1 = CameraPose::at(nalgebra::Vector3::new(0.5, 0.0, 0.0));
    c.bench_function("build_volume_32x16x64", |b| {
        b.iter(|| build_volume(&f0, &f1, &p0, &p1, &hyp).unwrap())
    });
}

fn bench_tiled_head(c: &mut Criterion) {
    let head = ToyHead::seeded(3, 6, 12, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut img = psgp_core::raster::Raster::zeros(512, 256, 3);
    for v in img.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0);
    }
    c.bench_function("toy_head_untiled_512x256", |b| {
        b.iter_batched(
            || pre_pad(&img, head.radius()),
            |padded| head.apply(&padded),
            BatchSize::LargeInput,
        )
    });
    c.bench_function("toy_head_tiled4_512x256", |b| {
        b.iter(|| run_tiled(&head, &img, 4).unwrap())
    });
}

criterion_group!(benches, bench_lattice, bench_render, bench_cost_volume, bench_tiled_head);
criterion_main!(benches);
