use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spaer_core::diffeo::{register_svf, SvfConfig};
use spaer_core::eqfeatures::representation;
use spaer_core::geometry::axis_angle;
use spaer_core::simulator::{simulate, SimConfig};
use spaer_core::temporal::{attend, AttentionParams, TokenSequence};
use spaer_core::volume::resample_rigid;
use spaer_core::{estimate_rigid, track, FilterBank, PointCloud, RigidTransform, TrackOptions, Vec3};

fn kabsch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<Vec3> = (0..32).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 100.0).collect();
    let source = PointCloud::new(points, vec![1.0; 32]);
    let q = RigidTransform::new(axis_angle(&Vec3::new(1.0, 2.0, 3.0), 40.0), Vec3::new(5.0, -3.0, 2.0));
    let target = source.transformed(&q);
    c.bench_function("kabsch_k32", |b| b.iter(|| estimate_rigid(&source, &target).unwrap()));
}

fn features(c: &mut Criterion) {
    let sim = simulate(&SimConfig { frames: 2, ..SimConfig::default() }).unwrap();
    let bank = FilterBank::default_bank();
    c.bench_function("representation_64", |b| b.iter(|| representation(&bank, &sim.frames[1]).unwrap()));
    let q = RigidTransform::new(axis_angle(&Vec3::new(0.0, 1.0, 1.0), 3.0), Vec3::new(1.0, 0.5, 0.0));
    c.bench_function("resample_rigid_64", |b| b.iter(|| resample_rigid(&sim.frames[1], &q)));
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = AttentionParams::init(96, 4, &mut rng).unwrap();
    let tokens = TokenSequence::new(DMatrix::from_fn(20, 96, |_, _| rng.random_range(-0.5..0.5)));
    c.bench_function("attend_t20_d96", |b| b.iter(|| attend(&tokens, &params).unwrap()));
}

fn sequence(c: &mut Criterion) {
    let sim = simulate(&SimConfig::default()).unwrap();
    let bank = FilterBank::default_bank();
    let mut group = c.benchmark_group("sequence");
    group.sample_size(10);
    group.bench_function("track_t20_64", |b| b.iter(|| track(&sim.frames, &bank, None, &TrackOptions::default()).unwrap()));
    let small = simulate(&SimConfig { size: 32, spacing_mm: 6.0, frames: 2, distortion_mm: 2.0, ..SimConfig::default() }).unwrap();
    let cfg = SvfConfig { iterations: 20, ..SvfConfig::default() };
    group.bench_function("register_svf_32", |b| {
        b.iter_batched(|| small.frames.clone(), |f| register_svf(&f[1], &f[0], &cfg).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, kabsch, features, attention, sequence);
criterion_main!(benches);
