use criterion::{black_box, criterion_group, criterion_main, Criterion};
use permon::oracle::random_instance;
use permon::{ipa, simulate, Variant};
use permon_bench::bundled;

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(20);
    for name in ["example", "static", "noise"] {
        let r = bundled(name);
        let mut options = r.options.clone();
        options.record_samples = false;
        group.bench_function(name, |b| {
            b.iter(|| {
                simulate(black_box(&r.scenario), black_box(&r.params), &options)
                    .unwrap()
                    .cost
            })
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    group.sample_size(20);
    for name in ["example", "static"] {
        let r = bundled(name);
        let mut options = r.options.clone();
        options.record_samples = false;
        group.bench_function(name, |b| {
            b.iter(|| {
                ipa::evaluate(black_box(&r.scenario), black_box(&r.params), &options)
                    .unwrap()
                    .cost
            })
        });
    }
    for variant in [Variant::Optimal, Variant::Practical] {
        let (sc, params) = random_instance(42, variant);
        group.bench_function(format!("random_{variant}"), |b| {
            b.iter(|| {
                ipa::evaluate(black_box(&sc), black_box(&params), &Default::default())
                    .unwrap()
                    .cost
            })
        });
    }
    group.finish();
}

criterion_group!(benches, simulation, gradient);
criterion_main!(benches);
