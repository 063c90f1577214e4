use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use discene::cli::model_config_for;
use discene::distill::{distill_step, DistillPlan, ModelRef};
use discene::matching::nearest_neighbor_pairs_with;
use discene::model::init_params;
use discene::par::{self, Exec};
use discene::syndata::{render_depth_with, Dataset, SceneRecipe};
use discene::train::{prepare_scenes, Role, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn nn_pairs(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cloud = |n: usize| -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..3.0),
                ]
            })
            .collect()
    };
    let (a, b) = (cloud(20_000), cloud(20_000));
    let mut g = c.benchmark_group("nearest_neighbor_pairs");
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| nearest_neighbor_pairs_with(exec, black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn render(c: &mut Criterion) {
    let recipe = SceneRecipe::paper();
    let data = Dataset::generate(&recipe, &[0]).unwrap();
    let scene = &data.scenes[0];
    let mut g = c.benchmark_group("render_depth");
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| render_depth_with(exec, black_box(&scene.grid), &scene.camera, 128, 128))
        });
    }
    g.finish();
}

fn distill_batch(c: &mut Criterion) {
    let data = Dataset::generate(&SceneRecipe::toy(), &(0..8).collect::<Vec<_>>()).unwrap();
    let scenes = prepare_scenes(&data, data.manifest.recipe.image, false, Exec::Sequential).unwrap();
    let config_for = |role| {
        let cfg = TrainConfig {
            role,
            ..TrainConfig::default()
        };
        model_config_for(&cfg, &data).unwrap()
    };
    let (t_config, s_config) = (config_for(Role::Teacher), config_for(Role::Student));
    let (teacher, student) = (init_params(&t_config, 0).unwrap(), init_params(&s_config, 1).unwrap());
    let t = ModelRef {
        params: &teacher,
        config: &t_config,
    };
    let s = ModelRef {
        params: &student,
        config: &s_config,
    };
    let plan = DistillPlan::full();
    let mut g = c.benchmark_group("distill_batch_of_8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| {
                par::map_slice(exec, &scenes, |sc| {
                    distill_step(s, Some(t), sc, &plan, 0).unwrap().losses.total
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, nn_pairs, render, distill_batch);
criterion_main!(benches);
