use criterion::{criterion_group, criterion_main, Criterion};
use fragdiff_core::metrics::{issim_loss, ssim, DEFAULT_GAMMA1, DEFAULT_GAMMA2, DEFAULT_HEAD_WINDOW};
use fragdiff_core::{Raster, RasterKind};
use std::hint::black_box;

fn fragment(seed: u64) -> Raster {
    let values = (0..128 * 128u64)
        .map(|i| ((i.wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 1000.0)
        .collect();
    Raster::new(128, 128, RasterKind::DensityMap, values).unwrap()
}

fn metrics(c: &mut Criterion) {
    let (e, g) = (fragment(1), fragment(2));
    let heads: Vec<(usize, usize)> = (0..40).map(|i| ((i * 37) % 128, (i * 59) % 128)).collect();
    c.bench_function("ssim_128", |b| b.iter(|| ssim(black_box(&e), &g, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap()));
    c.bench_function("issim_128_40_heads", |b| {
        b.iter(|| issim_loss(black_box(&e), &g, &heads, DEFAULT_HEAD_WINDOW, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap())
    });
}

criterion_group!(benches, metrics);
criterion_main!(benches);
