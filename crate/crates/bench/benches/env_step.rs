use criterion::{criterion_group, criterion_main, Criterion};
use splatnav::env::{EnvConfig, NavEnv};

fn step_loop(env: &mut NavEnv, actions: usize, k: &mut usize) {
    *k += 1;
    let r = env.step(*k % actions).unwrap();
    if r.terminated || r.truncated {
        env.reset(*k as u64).unwrap();
    }
}

fn bench_env(c: &mut Criterion) {
    for (name, mut cfg) in [("grid_uncached", EnvConfig::grid()), ("fps", EnvConfig::fps()), ("overlay", EnvConfig::overlay())] {
        cfg.cache_observations = false;
        let mut env = NavEnv::new(cfg).unwrap();
        env.reset(0).unwrap();
        let n = env.action_count();
        let mut k = 0;
        c.bench_function(&format!("env_step_{name}"), |b| b.iter(|| step_loop(&mut env, n, &mut k)));
    }
}

criterion_group!(benches, bench_env);
criterion_main!(benches);
