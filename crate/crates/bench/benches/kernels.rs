use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerdiff_bench::random_array;
use layerdiff_core::numeric::{kernels, Tape};
use layerdiff_core::rope::{apply_rope, image_positions, Role, RopeSplit};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_array(&[n, n], 1);
        let b = random_array(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| kernels::matmul(&a, &b).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("segment_attention");
    g.sample_size(20);
    for tokens in [128, 256] {
        let (heads, dim) = (4, 32);
        let q = random_array(&[tokens, heads, dim], 3);
        let k = random_array(&[tokens, heads, dim], 4);
        let v = random_array(&[tokens, heads, dim], 5);
        let segments = vec![0..tokens / 2, tokens / 2..tokens];
        g.bench_with_input(BenchmarkId::new("forward_backward", tokens), &tokens, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (qv, kv, vv) = (tape.param(q.clone()), tape.param(k.clone()), tape.param(v.clone()));
                let out = tape.segment_attention(qv, kv, vv, &segments).unwrap();
                let loss = tape.sum(out);
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

fn rope(c: &mut Criterion) {
    let split = RopeSplit::desk();
    let positions = image_positions(16, 16, 1, Role::Denoise).unwrap();
    let x = random_array(&[positions.len(), split.head_dim()], 6);
    c.bench_function("rope/apply_256_tokens", |bench| {
        bench.iter(|| {
            let mut v = x.data().to_vec();
            apply_rope(&mut v, &positions, &split).unwrap();
            v
        })
    });
}

criterion_group!(benches, matmul, attention, rope);
criterion_main!(benches);
