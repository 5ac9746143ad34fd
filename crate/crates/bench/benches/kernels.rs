use std::hint::black_box;

use bimatch_core::encoders::{EncoderConfig, ImageEncoder, TextEncoder};
use bimatch_core::numkernel::{Graph, ParamStore, Tensor};
use bimatch_core::synthdata::{caption_words, tokenize, Vocab};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> EncoderConfig {
    EncoderConfig {
        hidden_dim: 64,
        num_layers: 2,
        num_heads: 4,
        patch_size: 8,
        image_height: 64,
        image_width: 32,
        max_text_len: 32,
        vocab_size: Vocab::captions().len(),
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [32, 64, 128] {
        let a = Tensor::matrix(n, n, random(&mut rng, n * n)).unwrap();
        let b = Tensor::matrix(n, n, random(&mut rng, n * n)).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let out = g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap();
                black_box(g.value(out));
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let g = Graph::new();
                let (x, y) = (g.input(a.clone()), g.input(b.clone()));
                let loss = g.mean(g.matmul(x, y).unwrap());
                g.backward(loss).unwrap();
                black_box(g.grad(x));
            })
        });
    }
    group.finish();
}

fn encoders(c: &mut Criterion) {
    let cfg = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let image = ImageEncoder::new(&mut store, &cfg, &mut rng).unwrap();
    let text = TextEncoder::new(&mut store, &cfg, &mut rng).unwrap();
    let pixels: Vec<f64> = (0..cfg.image_height * cfg.image_width * 3).map(|_| rng.random()).collect();
    let vocab = Vocab::captions();
    let caption = caption_words()[..12].join(" ");
    let ids = tokenize(&caption, &vocab, cfg.max_text_len).unwrap();

    let mut group = c.benchmark_group("encoder");
    group.bench_function("image_forward", |bench| {
        bench.iter(|| {
            let g = Graph::with_params(&store);
            black_box(g.value(image.encode(&g, &pixels).unwrap().tokens));
        })
    });
    group.bench_function("image_forward_backward", |bench| {
        bench.iter(|| {
            let g = Graph::with_params(&store);
            let out = image.encode(&g, &pixels).unwrap();
            g.backward(g.mean(out.tokens)).unwrap();
            black_box(g.param_grads());
        })
    });
    group.bench_function("text_forward", |bench| {
        bench.iter(|| {
            let g = Graph::with_params(&store);
            black_box(g.value(text.encode(&g, &ids, &vocab).unwrap().tokens));
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, encoders);
criterion_main!(benches);
