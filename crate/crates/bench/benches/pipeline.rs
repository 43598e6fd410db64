//! Stage-level benchmarks for the generative pipeline: frame synthesis,
//! VQ-VAE encode/decode, a full training step, transformer loss, and
//! autoregressive sampling.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use refgen_core::dataset::build_dataset;
use refgen_core::dot::{generate, Dot, DotConfig};
use refgen_core::tape::Tape;
use refgen_core::tokens::make_pairs;
use refgen_core::vqvae::{QuantizeMode, Vqvae, VqvaeConfig};

fn bench_pipeline(c: &mut Criterion) {
    let frames = build_dataset(2, 9, None).unwrap();
    let vq = Vqvae::new(VqvaeConfig::default(), 1).unwrap();
    let dot = Dot::new(DotConfig::nano(), 3).unwrap();

    c.bench_function("synthesize_frame", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i += 1;
            build_dataset(1, black_box(i), None).unwrap()
        })
    });

    c.bench_function("vqvae_encode_frame", |b| {
        b.iter(|| vq.reconstruct(black_box(&frames[0]), QuantizeMode::Stochastic { seed: 7 }).unwrap())
    });

    let seq = vq.reconstruct(&frames[0], QuantizeMode::Stochastic { seed: 7 }).unwrap().1;
    c.bench_function("vqvae_decode_tokens", |b| {
        b.iter(|| vq.decode_tokens(black_box(&seq)).unwrap())
    });

    c.bench_function("vqvae_train_step_frame", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = vq.insert_params(&mut tape);
            let fwd = vq
                .forward_t(&mut tape, &vars, &frames[0].to_tensor(), QuantizeMode::Stochastic { seed: 7 })
                .unwrap();
            tape.backward(fwd.total).unwrap()
        })
    });

    let pair = make_pairs(&seq).unwrap();
    c.bench_function("dot_nano_pair_loss_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = dot.insert_params(&mut tape);
            let l = dot.pair_loss_t(&mut tape, &vars, black_box(&pair), None).unwrap();
            tape.backward(l).unwrap()
        })
    });

    c.bench_function("dot_nano_generate_512", |b| {
        let mut s = 0u64;
        b.iter(|| {
            s += 1;
            generate(&dot, 0, black_box(s), 1.0).unwrap()
        })
    });
}

fn config() -> Criterion {
    Criterion::default().sample_size(10)
}

criterion_group! {
    name = benches;
    config = config();
    targets = bench_pipeline
}
criterion_main!(benches);
