use ann_core::tensor::kernels::matmul_seq;
use ann_core::tensor::{Distribution, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    group.sample_size(10);
    for &(m, k, p) in &[(256, 32, 1024), (1024, 32, 4096), (512, 512, 512)] {
        let a = Tensor::seeded_fill(&[m, k], 1, Distribution::Uniform).unwrap();
        let b = Tensor::seeded_fill(&[k, p], 2, Distribution::Uniform).unwrap();
        let mut out = vec![0.0; m * p];
        let id = format!("{m}x{k}x{p}");
        group.throughput(Throughput::Elements((m * k * p) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", &id), &(), |bench, _| {
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                matmul_seq(a.data(), b.data(), &mut out, k, p);
            })
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &id), &(), |bench, _| {
            bench.iter(|| {
                out.iter_mut().for_each(|v| *v = 0.0);
                ann_core::tensor::kernels::matmul_par(a.data(), b.data(), &mut out, k, p);
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x = Tensor::seeded_fill(&[1024, 1024], 3, Distribution::Uniform).unwrap();
    c.bench_function("softmax_rows 1024x1024", |b| {
        b.iter(|| x.softmax_rows().unwrap())
    });
}

criterion_group!(benches, matmul, softmax);
criterion_main!(benches);
