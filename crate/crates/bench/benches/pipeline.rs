//! Benchmarks for the simulator, probe, and track machinery.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use vcl_bench::{bench_dataset, bench_model};
use vcl_core::datagen::segment_and_track;
use vcl_core::evalharness::{rollout, PolicyController, RhcConfig};
use vcl_core::policy::HeadKind;
use vcl_core::probe::{distort, vc_profile, DiffusionSchedule};
use vcl_core::simenv::{init_world, make_tasks, render, scripted_expert, step, EnvConfig};

fn pipeline_benches(c: &mut Criterion) {
    let env = EnvConfig::default();
    let tasks = make_tasks(&env);
    let mut rng = vcl_core::rng::stream_rng(3, "bench-world");
    let state = init_world(&tasks[0], &env, &mut rng);

    c.bench_function("sim_step_render", |b| {
        b.iter(|| {
            let a = scripted_expert(&state, &tasks[0], &env);
            let next = step(&state, &a, &env);
            render(black_box(&next), &env)
        })
    });

    let ds = bench_dataset();
    c.bench_function("segment_and_track_traj", |b| {
        b.iter(|| segment_and_track(&ds.trajectories[0], 32, 16, 196, &env).unwrap())
    });

    let schedule = DiffusionSchedule::linear(999, 1e-5, 5e-3).unwrap();
    let obs = ds.observe(0, 0);
    c.bench_function("distort_32x32", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            distort(black_box(&obs), &schedule, seed)
        })
    });

    let model = bench_model(HeadKind::Discrete);
    let instr = ds.instr_samples[0].instruction.clone();
    c.bench_function("vc_profile_w64", |b| {
        b.iter(|| vc_profile(&model, &obs, &instr, &schedule, 5).unwrap())
    });

    c.bench_function("rollout_8_4", |b| {
        let ctrl = PolicyController { model: &model };
        let rhc = RhcConfig { horizon: 8, h_exec: 4 };
        b.iter(|| rollout(&ctrl, &tasks[0], &env, rhc, 32, 9, 0).unwrap())
    });
}

criterion_group!(benches, pipeline_benches);
criterion_main!(benches);
