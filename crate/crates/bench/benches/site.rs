use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mari_bench::site_pair;
use mari_core::exec::{Session, Strategy};
use mari_core::gca::run_gca;
use mari_core::graph::{fixture_ranking_model, ModelDims, SiteDims};
use mari_core::harness::fixture_bench_dims;
use mari_core::rewrite::rewrite_all;

fn vanilla_vs_split(c: &mut Criterion) {
    let mut group = c.benchmark_group("site");
    group.sample_size(20);
    for du in [256usize, 1024, 4096] {
        let p = site_pair(SiteDims { du, di: 256, dc: 0, d: 128 }, 256, 7).unwrap();
        let (v, s) = (Session::new(&p.vanilla), Session::new(&p.split));
        group.bench_with_input(BenchmarkId::new("vanilla", du), &du, |b, _| {
            b.iter(|| v.run(&p.bundle, Strategy::Uoi).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("split", du), &du, |b, _| {
            b.iter(|| s.run(&p.bundle, Strategy::Uoi).unwrap())
        });
    }
    group.finish();
}

fn passes(c: &mut Criterion) {
    let g = fixture_ranking_model(&ModelDims { fragmented: true, ..fixture_bench_dims() }).unwrap();
    c.bench_function("gca/fixture", |b| b.iter(|| run_gca(&g)));
    c.bench_function("rewrite_all/fixture", |b| b.iter(|| rewrite_all(&g).unwrap()));
}

criterion_group!(benches, vanilla_vs_split, passes);
criterion_main!(benches);
