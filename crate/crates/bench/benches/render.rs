use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use splatnav::synthetic::{generate_synthetic_scene, SceneSpec};
use splatnav::{render, CameraIntrinsics, CameraPose};

fn bench_render(c: &mut Criterion) {
    let k = CameraIntrinsics::from_hfov(64, 64, 90.0).unwrap();
    let pose = CameraPose::ground(0.3, -0.2, 0.15, 2.0);
    let mut g = c.benchmark_group("render_64x64");
    for n in [5_000, 10_000, 20_000] {
        let scene = generate_synthetic_scene(&SceneSpec::courtyard(7, n)).unwrap().scene;
        g.bench_with_input(BenchmarkId::from_parameter(n), &scene, |b, s| b.iter(|| render(s, &pose, &k)));
    }
    g.finish();
}

criterion_group!(benches, bench_render);
criterion_main!(benches);
