use std::hint::black_box;

use ccmlab::dataset::{lcnet_inputs, lcnet_labels};
use ccmlab::geometry::ArrayConfig;
use ccmlab::par::Exec;
use ccmlab::scene::{Grid, GridCache, Scene};
use ccmlab::sim::{run_experiment, ExperimentConfig, ExperimentContext, FrameTiming, Method};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn grid_cache(c: &mut Criterion) {
    let scene = Scene::default();
    let array = ArrayConfig::default();
    let mut g = c.benchmark_group("grid_cache");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let grid = Grid::square(scene.plane_bounds, 120).unwrap();
                black_box(GridCache::build_with(&array, &scene, grid, exec).unwrap())
            })
        });
    }
    g.finish();
}

fn labels(c: &mut Criterion) {
    let scene = Scene::default();
    let grid = Grid::square(scene.plane_bounds, 120).unwrap();
    let cache = GridCache::build(&ArrayConfig::default(), &scene, grid).unwrap();
    let timing = FrameTiming::default();
    let inputs = lcnet_inputs(&scene.plane_bounds, 64, 2, (2.0, 10.0), 1);
    let mut g = c.benchmark_group("lcnet_labels");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(lcnet_labels(&cache, &timing, &inputs, exec).unwrap()))
        });
    }
    g.finish();
}

fn experiment(c: &mut Criterion) {
    let scene = Scene::default();
    let grid = Grid::square(scene.plane_bounds, 60).unwrap();
    let cache = GridCache::build(&ArrayConfig::default(), &scene, grid).unwrap();
    let cfg = ExperimentConfig {
        n_trajectories: 8,
        n_coct: 4,
        methods: vec![Method::Ls, Method::IdentityLmmse, Method::Statistical, Method::Perfect],
        ..Default::default()
    };
    let mut g = c.benchmark_group("experiment");
    g.sample_size(10);
    for (name, exec) in POLICIES {
        let mut ctx = ExperimentContext::new(ArrayConfig::default(), &scene, &cache, FrameTiming::default());
        ctx.exec = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(run_experiment(&cfg, &ctx).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, grid_cache, labels, experiment);
criterion_main!(benches);
