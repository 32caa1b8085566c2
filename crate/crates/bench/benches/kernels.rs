use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mdplab_core::integrator::{gaussian_cloud, TaggedSystem};
use mdplab_core::measures::{optimal_matching, wasserstein2, W2Method};
use mdplab_core::models::make_mean_field_ou;
use mdplab_core::{Dynamics, Model, NoiseStream, ParticleSystem, StreamKey};

fn ou() -> Arc<Model> {
    Arc::new(make_mean_field_ou(1.0, 0.5, 1.0, 1).unwrap().into())
}

fn noise(c: &mut Criterion) {
    let mut s = NoiseStream::new(StreamKey::new(1, 0, mdplab_core::Domain::Dynamics, 0), 2);
    let mut buf = [0.0; 2];
    c.bench_function("normals_pair", |b| {
        b.iter(|| {
            s.fill_normals(&mut buf);
            black_box(buf)
        })
    });
}

fn stepping(c: &mut Criterion) {
    let model = ou();
    let mut g = c.benchmark_group("em_step");
    for n in [100usize, 1000, 5000] {
        let cloud = gaussian_cloud(1, n, 3).unwrap();
        let mut ps = ParticleSystem::new(model.clone(), &cloud, 7, 0).unwrap();
        g.bench_with_input(BenchmarkId::new("full", n), &n, |b, _| b.iter(|| ps.step(0.01).unwrap()));
    }
    let field = model.affine().unwrap();
    let mut t = TaggedSystem::new(field, 1000, &[0.3], &[0.0], 7, 0).unwrap();
    g.bench_function("reduced_tagged", |b| b.iter(|| t.step(0.01).unwrap()));
    g.finish();
}

fn transport(c: &mut Criterion) {
    let mut g = c.benchmark_group("w2");
    for n in [64usize, 256] {
        let a = gaussian_cloud(2, n, 1).unwrap();
        let b = gaussian_cloud(2, n, 2).unwrap();
        g.bench_with_input(BenchmarkId::new("assignment_2d", n), &n, |bch, _| {
            bch.iter(|| optimal_matching(black_box(&a), black_box(&b)).unwrap())
        });
    }
    let a = gaussian_cloud(1, 5000, 1).unwrap();
    let b = gaussian_cloud(1, 5000, 2).unwrap();
    g.bench_function("sorted_1d_5000", |bch| {
        bch.iter(|| wasserstein2(black_box(&a), black_box(&b), W2Method::Sorted1d).unwrap())
    });
    g.finish();
}

criterion_group!(benches, noise, stepping, transport);
criterion_main!(benches);
