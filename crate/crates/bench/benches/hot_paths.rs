use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use lapyr::models::{denoise_level, init_weights, tonemap_level, ParamGroup};
use lapyr::numerics::{Tape, Tensor};
use lapyr::pipeline::enhance_patch;
use lapyr::pyramid::{decompose, reconstruct};
use lapyr::training::{sample_loss, synth_dataset, LossWeights, NoiseConfig, Phase};
use lapyr::transforms::{dct2, extract_tiles, DEFAULT_TILE_STRIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn patch(seed: u64) -> Tensor {
    Tensor::uniform(&[224, 224, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn transforms(c: &mut Criterion) {
    let x = patch(1);
    c.bench_function("pyramid round trip 224", |b| {
        b.iter(|| {
            let p = decompose(black_box(&x)).unwrap();
            reconstruct(&p.laplacian[0], &p.laplacian[1], &p.laplacian[2], &p.base).unwrap()
        })
    });
    let tiles = extract_tiles(&x, DEFAULT_TILE_STRIDE).unwrap();
    c.bench_function("dct2 on 729 tiles", |b| b.iter(|| dct2(black_box(&tiles)).unwrap()));
}

fn networks(c: &mut Criterion) {
    let bundle = init_weights(1);
    let level = patch(2).map(|v| v - 0.5);
    c.bench_function("denoise level 224 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let net = bundle.denoisers[0].bind(&mut tape, true);
            let x = tape.constant(level.clone());
            let y = denoise_level(&mut tape, x, &net).unwrap();
            let t = tape.constant(level.clone());
            let loss = tape.l1_loss(y, t).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    c.bench_function("tonemap level 224 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let net = bundle.tonemappers[0].bind(&mut tape, true);
            let x = tape.constant(level.clone());
            let y = tonemap_level(&mut tape, x, &net, true).unwrap();
            let t = tape.constant(level.clone());
            let loss = tape.l1_loss(y, t).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    let x = patch(3);
    c.bench_function("enhance patch 224", |b| b.iter(|| enhance_patch(black_box(&x), &bundle).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let bundle = init_weights(4);
    let data = synth_dataset(1, 5, &NoiseConfig::default()).unwrap();
    let mut g = c.benchmark_group("sample gradient");
    g.sample_size(10);
    for phase in Phase::ALL {
        g.bench_function(format!("phase {phase}"), |b| {
            b.iter_batched(
                Tape::new,
                |mut tape| {
                    let nets = bundle.bind(&mut tape, Some(ParamGroup::All));
                    let loss = sample_loss(&mut tape, &nets, &data[0], phase, bundle.ordering, &LossWeights::default()).unwrap();
                    tape.backward(loss).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, transforms, networks, training_step);
criterion_main!(benches);
