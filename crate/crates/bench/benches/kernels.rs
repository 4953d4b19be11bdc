use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use supermask_bench::{normal, sparse_layer, ternary};
use supermask_core::{masking, sparse, tensor, MaskMode, Tensor};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(64, 784, 300), (64, 300, 100), (256, 256, 256)] {
        let a = normal(&[m, k], 1);
        let b = normal(&[k, n], 2);
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{m}x{k}x{n}")),
            &(a, b),
            |bch, (a, b)| bch.iter(|| tensor::matmul(black_box(a), black_box(b)).unwrap()),
        );
    }
    g.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    g.sample_size(20);
    for (h, cin, cout) in [(32, 3, 64), (16, 64, 64)] {
        let x = normal(&[8, h, h, cin], 3);
        let k = normal(&[3, 3, cin, cout], 4);
        g.bench_function(format!("8x{h}x{h}x{cin}->{cout}"), |b| {
            b.iter(|| tensor::conv2d(black_box(&x), black_box(&k)).unwrap())
        });
        let dy = normal(&[8, h, h, cout], 5);
        g.bench_function(format!("backward 8x{h}x{h}x{cin}->{cout}"), |b| {
            b.iter(|| {
                tensor::conv2d_backward(black_box(&x), black_box(&k), black_box(&dy)).unwrap()
            })
        });
    }
    g.finish();
}

fn quantize(c: &mut Criterion) {
    let scores = normal(&[784, 300], 6).map(|v| v * 0.05);
    c.bench_function("quantize 784x300", |b| {
        b.iter(|| masking::quantize_scores(black_box(&scores), -0.01, 0.01, MaskMode::Signed))
    });
}

fn sparse_matvec(c: &mut Criterion) {
    let mut g = c.benchmark_group("matvec 784x300");
    let x: Vec<f64> = normal(&[300], 7).into_data();
    for keep in [0.03, 0.3, 1.0] {
        let layer = sparse_layer(784, 300, keep, 8);
        g.bench_with_input(BenchmarkId::new("csr", keep), &layer, |b, l| {
            b.iter(|| sparse::sparse_matvec(black_box(l), black_box(&x)).unwrap())
        });
    }
    let dense = Tensor::full([784, 300], 0.05)
        .hadamard(&ternary(&[784, 300], 0.03, 8))
        .unwrap();
    let xc = Tensor::new([300, 1], x.clone()).unwrap();
    g.bench_function("dense", |b| {
        b.iter(|| tensor::matmul(black_box(&dense), black_box(&xc)).unwrap())
    });
    g.finish();
}

criterion_group!(kernels, matmul, conv2d, quantize, sparse_matvec);
criterion_main!(kernels);
