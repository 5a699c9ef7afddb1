use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtd_bench::Fixture;
use vtd_core::codebook::{build_codebook, quantize};
use vtd_core::dataset::FrameMode;

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, mode) in [("embed", FrameMode::Embed), ("pixel", FrameMode::Pixel)] {
        let fx = Fixture::new(mode);
        g.bench_function(name, |b| {
            b.iter_batched(
                || Fixture {
                    data: fx.data.clone(),
                    state: fx.state.clone(),
                    config: fx.config.clone(),
                },
                |mut f| black_box(f.train_step().unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn quantize_frames(c: &mut Criterion) {
    let fx = Fixture::new(FrameMode::Embed);
    let cb = fx.codebook();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<f64>> = (0..256)
        .map(|_| (0..cb.dim()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    c.bench_function("quantize_256", |b| {
        b.iter(|| {
            for x in &xs {
                black_box(quantize(black_box(x), &cb).unwrap());
            }
        })
    });
}

fn codebook_build(c: &mut Criterion) {
    let fx = Fixture::new(FrameMode::Embed);
    c.bench_function("codebook_build_5", |b| {
        b.iter(|| {
            black_box(
                build_codebook(&fx.data.labels, &fx.state.params.text, &fx.state.encoder, None).unwrap(),
            )
        })
    });
}

criterion_group!(benches, train_step, quantize_frames, codebook_build);
criterion_main!(benches);
