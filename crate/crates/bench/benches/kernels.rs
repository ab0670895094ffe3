use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use halluc_bench::{halluc_fixture, head_fixture, normal_matrix};
use halluc_core::corpns::divergence_loss;
use halluc_core::hallucinator::hallucination_loss;
use halluc_core::heads::HeadKind;
use halluc_core::Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1, "bench-matmul");
    let a = normal_matrix(256, 32, &mut rng);
    let b = normal_matrix(21, 32, &mut rng);
    c.bench_function("matmul_t 256x32 by 21x32", |bench| {
        bench.iter(|| black_box(&a).matmul_t(black_box(&b)).unwrap())
    });
}

fn heads(c: &mut Criterion) {
    for kind in [HeadKind::Cosine, HeadKind::FullyConnected] {
        let (head, x, t) = head_fixture(kind, 256);
        c.bench_function(&format!("{} head loss and grads, batch 256", kind.as_str()), |bench| {
            bench.iter(|| head.loss_and_grads(black_box(&x), &t).unwrap())
        });
    }
}

fn hallucinator(c: &mut Criterion) {
    let (h, head, inputs) = halluc_fixture(100);
    c.bench_function("hallucinator forward, 100 requests", |bench| {
        bench.iter(|| h.apply(black_box(&inputs.inputs)).unwrap())
    });
    c.bench_function("hallucination loss and grads, 100 requests", |bench| {
        bench.iter(|| hallucination_loss(&h, None, &head, black_box(&inputs)).unwrap())
    });
}

fn divergence(c: &mut Criterion) {
    let mut rng = Rng::new(2, "bench-div");
    let f = halluc_core::Matrix::from_vec(3, 256, (0..768).map(|_| rng.uniform()).collect()).unwrap();
    c.bench_function("divergence loss, 3 heads x 256 boxes", |bench| {
        bench.iter(|| divergence_loss(black_box(&f), 1e-6).unwrap())
    });
}

criterion_group!(benches, matmul, heads, hallucinator, divergence);
criterion_main!(benches);
