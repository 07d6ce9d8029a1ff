use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dfsense_bench::fixture;
use dfsense_core::pipeline::{instance_grad, reconstruct, select, Objective, Variant};

fn training_step(c: &mut Criterion) {
    let f = fixture(Variant::Full);
    let z = select(&f.params, &f.instance, f.cfg.k).unwrap().to_f64();
    let mut g = c.benchmark_group("instance");
    g.sample_size(20);
    g.bench_function("reconstruct (forward)", |b| {
        b.iter(|| reconstruct(&f.ctx, &f.params, black_box(&f.instance), &z).unwrap())
    });
    for (name, objective) in [("task gradient", Objective::Task), ("reconstruction gradient", Objective::Reconstruction)] {
        g.bench_function(name, |b| {
            b.iter(|| instance_grad(&f.ctx, &f.params, black_box(&f.instance), &z, objective, &f.cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, training_step);
criterion_main!(benches);
