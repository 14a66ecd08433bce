use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fusecap::tensor::{im2col, matmul_into, ConvGeometry, Padding, Tape, Tensor};

fn filled(n: usize, seed: u32) -> Vec<f32> {
    (0..n as u32).map(|i| ((i.wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0).collect()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for &n in &[32usize, 64, 128] {
        let (a, b) = (filled(n * n, 1), filled(n * n, 2));
        let mut out = vec![0.0f32; n * n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| matmul_into(black_box(&a), black_box(&b), &mut out, n, n, n, false))
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let shape = [4, 32, 32, 8];
    let x = filled(shape.iter().product(), 3);
    let geo = ConvGeometry::new(&shape, 3, 2, Padding::Same).unwrap();
    c.bench_function("im2col 4x32x32x8 k3 s2", |b| b.iter(|| im2col(black_box(&x), &geo)));

    let input = Tensor::new(shape.to_vec(), x.clone()).unwrap();
    let w = Tensor::new(vec![3, 3, 8, 16], filled(3 * 3 * 8 * 16, 4)).unwrap();
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(input.clone(), true);
            let wv = t.leaf(w.clone(), true);
            let y = t.conv2d(xv, wv, None, 2, Padding::Same).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
