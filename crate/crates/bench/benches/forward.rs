use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use shapeconv_bench::{BenchCase, BenchKind, Workload};

fn forward(c: &mut Criterion) {
    let cases = [
        BenchCase { dims: [1, 16, 32, 32], kernel: 3, c_out: 16 },
        BenchCase { dims: [1, 32, 64, 64], kernel: 3, c_out: 32 },
        BenchCase { dims: [1, 64, 64, 64], kernel: 3, c_out: 64 },
    ];
    let mut group = c.benchmark_group("forward");
    for case in cases {
        let work = Workload::new(case, 0).expect("valid case");
        for kind in BenchKind::ALL {
            group.bench_with_input(BenchmarkId::new(kind.label(), case.label()), &work, |b, w| {
                b.iter(|| black_box(w.run(kind).expect("forward")))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
