//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stderr (bypassing the test harness capture) and the test
//! fails if any criterion does.
//!
//! Timing criteria run first, before the long training runs, so they are
//! measured on an otherwise idle process.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatnav::env::overlay::{billboard, SpriteOverlay};
use splatnav::env::{Cause, EnvConfig, EnvShared, FpsState, NavEnv, NavState};
use splatnav::occupancy::{build_octree, camera_box, forest_query, query_box};
use splatnav::render::{render, RenderedImage};
use splatnav::rl::nn::{NetBuilder, Network};
use splatnav::rl::policy::log_softmax;
use splatnav::rl::ppo::HeadBatch;
use splatnav::rl::{
    action_match_rate, compute_gae, evaluate_success_map, free_grid_starts, ppo_loss, steps_to_sustained, train, value_iteration, EvalPolicy,
    PolicySpec, PpoConfig, TablePolicy, TrainOptions, Trajectory,
};
use splatnav::synthetic::{generate_synthetic_scene, SceneSpec};
use splatnav::{Aabb, CameraIntrinsics, CameraPose, Gaussian, SplatScene, Vec3};

const STEP_BUDGET: u64 = 200_000;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Report {
    results: Vec<(&'static str, bool)>,
}

impl Report {
    fn record(&mut self, name: &'static str, pass: bool, detail: String) {
        let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
        // Direct handle writes are not captured by the test harness.
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.results.push((name, pass));
    }
}

// ---------------------------------------------------------------- octree

/// Occupied leaves by direct binning, then every box checked against every
/// leaf with closed-interval overlap.
fn brute_leaves(pts: &[Vec3], origin: Vec3, edge: f64, depth: u8, min_points: u32) -> Vec<[u32; 3]> {
    let size = 1u32 << depth;
    let leaf = edge / size as f64;
    let mut counts: HashMap<[u32; 3], u32> = HashMap::new();
    for p in pts {
        let i = [0, 1, 2].map(|a| (((p[a] - origin[a]) / leaf).floor() as i64).clamp(0, size as i64 - 1) as u32);
        *counts.entry(i).or_default() += 1;
    }
    counts.into_iter().filter(|(_, c)| *c >= min_points).map(|(i, _)| i).collect()
}

fn brute_hit(leaves: &[[u32; 3]], origin: Vec3, leaf: f64, b: &Aabb) -> bool {
    leaves.iter().any(|i| {
        (0..3).all(|a| {
            let lo = origin[a] + i[a] as f64 * leaf;
            let hi = origin[a] + (i[a] + 1) as f64 * leaf;
            lo <= b.max[a] && b.min[a] <= hi
        })
    })
}

fn octree_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut disagreements = 0;
    let mut hits = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=10_000);
        let origin = Vec3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
        let edge = rng.gen_range(0.25..4.0);
        let depth = rng.gen_range(1..=6u8);
        let min_points = rng.gen_range(1..=3u32);
        // A few clusters so that most of the volume stays empty.
        let centres: Vec<Vec3> = (0..rng.gen_range(1..4)).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.1..0.9))).collect();
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                let c = centres[rng.gen_range(0..centres.len())];
                origin + Vec3::from_fn(|a, _| (c[a] + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 0.999_999)) * edge
            })
            .collect();
        let tree = build_octree(&pts, origin, edge, depth, min_points).unwrap();
        let leaves = brute_leaves(&pts, origin, edge, depth, min_points);
        let leaf = edge / (1u32 << depth) as f64;
        for _ in 0..1000 {
            let lo = Vec3::from_fn(|a, _| origin[a] + edge * rng.gen_range(-0.2..1.1));
            let ext = Vec3::from_fn(|_, _| edge * rng.gen_range(0.0..0.15));
            let b = Aabb::new(lo, lo + ext).unwrap();
            let expect = brute_hit(&leaves, origin, leaf, &b);
            hits += expect as usize;
            if query_box(&tree, &b).0 != expect {
                disagreements += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    r.record(
        "octree-oracle-equivalence",
        disagreements == 0 && secs < 120.0,
        format!("{disagreements} disagreements over 100 clouds x 1000 boxes ({hits} hits), {secs:.1}s"),
    );
}

fn query_latency(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let depth = 6u8;
    let pts: Vec<Vec3> = (0..10_000).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
    let tree = build_octree(&pts, Vec3::zeros(), 1.0, depth, 1).unwrap();
    let leaf = tree.leaf_edge();
    let bound = 8 * depth as usize + 1;
    let mut times = Vec::with_capacity(100_000);
    let mut worst = 0;
    for k in 0..100_000 {
        // Half generic points, half lattice corners (the most shared faces).
        let p = if k % 2 == 0 {
            Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))
        } else {
            Vec3::from_fn(|_, _| rng.gen_range(0..=(1u32 << depth)) as f64 * leaf)
        };
        let b = Aabb { min: p, max: p };
        let t = Instant::now();
        let (_, s) = std::hint::black_box(query_box(&tree, &b));
        times.push(t.elapsed().as_secs_f64() * 1e6);
        worst = worst.max(s.nodes_visited);
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    r.record(
        "octree-query-latency",
        median < 50.0 && worst <= bound,
        format!("median {median:.3}us (< 50us), max nodes visited {worst} (bound {bound})"),
    );
}

// -------------------------------------------------------------- renderer

fn k64() -> CameraIntrinsics {
    CameraIntrinsics::from_hfov(64, 64, 90.0).unwrap()
}

fn renderer_correctness(r: &mut Report) {
    let t0 = Instant::now();
    let (color, bg) = ([0.9, 0.2, 0.1], [0.1, 0.3, 0.6]);
    let g = Gaussian::with_color(Vec3::new(2.0, 0.0, 0.0), UnitQuaternion::identity(), Vec3::repeat(0.1), 0.9, color);
    let scene = SplatScene::new(vec![g], 0, bg).unwrap();
    let img = render(&scene, &CameraPose::from_position_ypr(Vec3::zeros(), 0.0, 0.0, 0.0), &k64());
    // Pinhole with f = 32px: sigma = 32 * 0.1 / 2 px, plus the 0.3 px^2 blur.
    let var = (32.0f64 * 0.1 / 2.0).powi(2) + 0.3;
    let mut worst: f64 = 0.0;
    for y in 0..64 {
        for x in 0..64 {
            let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
            let mut a = (0.9 * (-0.5 * (dx * dx + dy * dy) / var).exp()).min(0.999);
            if a < 1.0 / 255.0 {
                a = 0.0;
            }
            let got = img.get(x, y);
            for c in 0..3 {
                worst = worst.max((got[c] as f64 - (color[c] * a + (1.0 - a) * bg[c])).abs());
            }
        }
    }

    // Permutation invariance on a random scene.
    let spec = SceneSpec::random_blobs(5, 300);
    let base = generate_synthetic_scene(&spec).unwrap().scene;
    let pose = CameraPose::ground(-0.8, -0.6, 0.15, 0.6);
    let a = render(&base, &pose, &k64());
    let mut shuffled = base.clone();
    shuffled.gaussians.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let perm = a.max_abs_diff(&render(&shuffled, &pose, &k64())).unwrap();

    // Bitwise determinism across pool sizes, large enough to take the
    // parallel projection path.
    let big = generate_synthetic_scene(&SceneSpec::courtyard(9, 20_000)).unwrap().scene;
    let pose = CameraPose::ground(0.3, -0.4, 0.15, 2.0);
    let frames: Vec<RenderedImage> = [1, 2, 4]
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            pool.install(|| render(&big, &pose, &k64()))
        })
        .collect();
    let bitwise = frames.windows(2).all(|w| w[0].pixels.iter().map(|v| v.to_bits()).eq(w[1].pixels.iter().map(|v| v.to_bits())));
    let secs = t0.elapsed().as_secs_f64();
    r.record(
        "renderer-correctness",
        worst <= 1e-3 && perm <= 1e-6 && bitwise && secs < 60.0,
        format!("oracle max err {worst:.2e} (<= 1e-3), permutation {perm:.1e} (<= 1e-6), bitwise across 1/2/4 workers: {bitwise}, {secs:.1}s"),
    );
}

fn throughput(r: &mut Report) {
    let scene = generate_synthetic_scene(&SceneSpec::courtyard(7, 20_000)).unwrap().scene;
    let k = k64();
    let poses: Vec<CameraPose> = (0..120)
        .map(|i| {
            let t = i as f64 / 120.0 * std::f64::consts::TAU;
            CameraPose::ground(0.6 * t.cos(), 0.6 * t.sin(), 0.15, t + 1.0)
        })
        .collect();
    render(&scene, &poses[0], &k);
    let t0 = Instant::now();
    for p in &poses {
        std::hint::black_box(render(&scene, p, &k));
    }
    let fps = poses.len() as f64 / t0.elapsed().as_secs_f64();

    // End-to-end env steps with fresh renders every step.
    let mut cfg = EnvConfig::grid();
    cfg.cache_observations = false;
    cfg.curriculum.enabled = false;
    let mut env = NavEnv::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    env.reset(0).unwrap();
    let n = 300;
    let t0 = Instant::now();
    for i in 0..n {
        let s = env.step(rng.gen_range(0..6)).unwrap();
        if s.terminated || s.truncated {
            env.reset(i).unwrap();
        }
    }
    let hz = n as f64 / t0.elapsed().as_secs_f64();
    r.record(
        "render-and-step-throughput",
        fps >= 30.0 && hz >= 30.0,
        format!("{fps:.0} frames/s on 20k splats at 64x64 (>= 30), {hz:.0} env steps/s uncached (>= 30)"),
    );
}

// ------------------------------------------------------------------- MDP

fn mdp_exactness(r: &mut Report, shared: &EnvShared) {
    let cfg = &shared.config;
    let m = shared.grid.clone().unwrap();
    let mut env = shared.make_env();
    let (goal, bounds, half) = (m.goal, cfg.reward.bounds, cfg.camera.half_extent);
    let mut mismatches = 0;
    let mut seen: Vec<f64> = Vec::new();
    let mut checked = 0;
    // Every free state x every action through the real env, against a
    // cause derived from the pose alone.
    for idx in 0..m.state_count() {
        let s = m.state(idx);
        if !m.is_free(&s) {
            continue;
        }
        for a in 0..6 {
            env.reset_to(NavState::Grid(s), 0).unwrap();
            let st = env.step(a).unwrap();
            let p = st.info.pose;
            let g = st.info.grid.unwrap();
            let cause = if g == [goal.ix, goal.iy, goal.iyaw] {
                Some(Cause::Goal)
            } else if forest_query(&shared.world.forest, &camera_box(&p.center(), half)) {
                Some(Cause::Collision)
            } else if p.x.abs() > bounds + 1e-9 || p.y.abs() > bounds + 1e-9 {
                Some(Cause::OutOfBounds)
            } else {
                None
            };
            let expect = -0.2
                + match cause {
                    Some(Cause::Goal) => 50.0,
                    Some(Cause::Collision) | Some(Cause::OutOfBounds) => -10.0,
                    _ => 0.0,
                };
            if st.reward != expect || st.info.cause != cause || st.terminated != cause.is_some() || st.truncated {
                mismatches += 1;
            }
            if !seen.contains(&st.reward) {
                seen.push(st.reward);
            }
            checked += 1;
        }
    }
    seen.sort_by(f64::total_cmp);
    let allowed = seen.iter().all(|v| [-10.2, -0.2, 49.8].contains(v));

    // Truncation exactly at the step cap: spin in place from a free start.
    let start = (0..m.state_count()).map(|i| m.state(i)).find(|s| m.is_free(s) && !m.is_goal(s)).unwrap();
    env.reset_to(NavState::Grid(start), 0).unwrap();
    let mut trunc_at = None;
    for i in 1..=250u32 {
        let st = env.step(if i % 2 == 0 { 4 } else { 5 }).unwrap();
        if st.truncated {
            trunc_at = Some((i, st.terminated, st.reward));
            break;
        }
    }
    let shape = env.observation_shape();
    let obs_len = env.last_observation().map(|o| o.bytes.len());
    let pass = mismatches == 0 && allowed && trunc_at == Some((200, false, -0.2)) && env.action_count() == 6 && shape == [64, 64, 3] && obs_len == Some(64 * 64 * 3);
    r.record(
        "mdp-exactness",
        pass,
        format!(
            "{checked} transitions, {mismatches} mismatches, rewards seen {seen:?}, truncation {trunc_at:?}, {} actions, obs {shape:?}",
            env.action_count()
        ),
    );
}

// -------------------------------------------------------------- learning

struct RunResult {
    /// First update-boundary step with greedy success >= 0.9 on all free starts.
    learned_at: Option<u64>,
    sustained_at: Option<u64>,
    steps: u64,
    success: Vec<f64>,
    secs: f64,
}

fn run(shared: &EnvShared, seed: u64, curriculum: bool) -> RunResult {
    let mut cfg = (*shared.config).clone();
    cfg.curriculum.enabled = curriculum;
    let shared = EnvShared::with_world(cfg, shared.world.clone()).unwrap();
    let starts = free_grid_starts(&shared).unwrap();
    let ppo = PpoConfig {
        seed,
        total_steps: STEP_BUDGET,
        ..Default::default()
    };
    let spec = PolicySpec::vision(64, 64, 6);
    let t0 = Instant::now();
    let mut learned_at = None;
    let sh = shared.clone();
    let opts = TrainOptions {
        on_update: Some(Box::new(|p, pol| {
            if learned_at.is_none() && p.curriculum_finished {
                let m = evaluate_success_map(pol, &sh, &starts, 1, 0)?.mean();
                if m >= 0.9 {
                    learned_at = Some(p.steps);
                }
            }
            // Without a curriculum only the sustained step is measured.
            Ok(p.sustained_at.is_some() && (learned_at.is_some() || !curriculum))
        })),
        ..Default::default()
    };
    let out = train(&shared, &spec, &ppo, opts).unwrap();
    let starts = free_grid_starts(&shared).unwrap();
    let success = evaluate_success_map(&out.policy, &shared, &starts, 1, 0).unwrap().rates;
    let sustained_at = steps_to_sustained(&out.episodes, 50, 0.8, true);
    let line = format!(
        "  seed {seed} curriculum {curriculum}: learned {learned_at:?}, sustained {sustained_at:?}, curriculum done {:?}, {} steps, {:.0}s\n",
        out.report.steps_to_curriculum,
        out.steps,
        t0.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    RunResult {
        learned_at,
        sustained_at,
        steps: out.steps,
        success,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning_and_oracle(r: &mut Report, shared: &EnvShared) {
    let m = shared.grid.clone().unwrap();
    let starts = free_grid_starts(shared).unwrap();

    // Oracle: value iteration, checked through the real env as well as the
    // transition model.
    let vi = value_iteration(&m, 0.99);
    let tp = TablePolicy { model: &m, table: &vi.policy };
    let oracle = evaluate_success_map(&tp, shared, &starts, 1, 0).unwrap();
    let mut env = shared.make_env();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut env_fail = 0;
    for s in &starts {
        env.reset_to(*s, 0).unwrap();
        loop {
            let st = env.state().unwrap();
            let a = tp.act(&[], &[st], &mut rng)[0];
            let res = env.step(a).unwrap();
            if res.terminated || res.truncated {
                env_fail += (res.info.cause != Some(Cause::Goal)) as usize;
                break;
            }
        }
    }
    let oracle_ok = oracle.rates.iter().all(|&x| x == 1.0) && env_fail == 0;

    let with: Vec<RunResult> = SEEDS.iter().map(|&s| run(shared, s, true)).collect();
    let without: Vec<RunResult> = SEEDS.iter().map(|&s| run(shared, s, false)).collect();

    let learned = with.iter().filter(|w| w.learned_at.is_some_and(|s| s <= STEP_BUDGET)).count();
    let secs: f64 = with.iter().map(|w| w.secs).sum();
    r.record(
        "learning-with-curriculum",
        learned == SEEDS.len(),
        format!(
            "{learned}/3 seeds reach >= 0.9 greedy success on {} free starts within {STEP_BUDGET} steps (at {:?}), {secs:.0}s total",
            starts.len(),
            with.iter().map(|w| w.learned_at).collect::<Vec<_>>()
        ),
    );

    // Runs that never sustain are censored at the step they stopped.
    let sustained = |v: &[RunResult]| v.iter().map(|w| w.sustained_at.map_or(f64::INFINITY, |s| s as f64)).collect::<Vec<_>>();
    let (a, b) = (sustained(&with), sustained(&without));
    let (ma, mb) = (median(a.clone()), median(b.clone()));
    r.record(
        "curriculum-ablation",
        ma < mb,
        format!(
            "median steps to sustained success {ma} with curriculum vs {mb} without (per seed {a:?} vs {b:?}; no-curriculum run lengths {:?})",
            without.iter().map(|w| w.steps).collect::<Vec<_>>()
        ),
    );

    let dominated = with
        .iter()
        .chain(&without)
        .all(|w| w.success.iter().zip(&oracle.rates).all(|(p, o)| *p <= *o + 0.0));
    r.record(
        "value-iteration-oracle",
        oracle_ok && dominated,
        format!(
            "oracle success {:.3} over {} starts (env replay failures {env_fail}); trained maps pointwise <= oracle: {dominated}",
            oracle.mean(),
            starts.len()
        ),
    );
}

// --------------------------------------------------------------- overlay

fn overlay_behaviour(r: &mut Report) {
    let k = k64();
    let pose = CameraPose::ground(0.0, 0.0, 0.15, 0.0);
    let sprite = |d: f64| SpriteOverlay::apple(32, Vec3::new(d, 0.0, 0.15), 0.2);
    let pairs: Vec<(f64, f64)> = [0.5, 0.8, 1.0, 1.7]
        .iter()
        .map(|&d| (billboard(&sprite(d), &pose, &k).unwrap().height, billboard(&sprite(2.0 * d), &pose, &k).unwrap().height))
        .collect();
    let halves = pairs.iter().all(|(n, f)| *n == 2.0 * *f);

    let cfg = EnvConfig::overlay();
    let mut env = NavEnv::new(cfg.clone()).unwrap();
    let a = cfg.overlay.anchor;
    env.reset_to(
        NavState::Fps(FpsState {
            x: a[0],
            y: a[1] - 1.0,
            yaw: std::f64::consts::FRAC_PI_2,
            steps: 0,
        }),
        0,
    )
    .unwrap();
    let mut fracs = Vec::new();
    let mut trigger = None;
    for _ in 0..40 {
        let st = env.step(0).unwrap();
        fracs.push(st.info.red_fraction.unwrap());
        if st.terminated {
            trigger = Some((st.info.cause, (st.info.pose.y - a[1]).abs(), st.reward));
            break;
        }
    }
    let monotone = fracs.windows(2).all(|w| w[1] >= w[0]);
    let contact = cfg.camera.half_extent + 0.5 * cfg.overlay.world_height;
    let before = matches!(trigger, Some((Some(Cause::Goal), d, _)) if d > contact);
    r.record(
        "overlay-behaviour",
        halves && monotone && before,
        format!("height halves: {halves} {pairs:?}; red fraction non-decreasing over {} steps: {monotone}; trigger {trigger:?} vs contact distance {contact}", fracs.len()),
    );
}

// ---------------------------------------------------------- action match

fn action_match(r: &mut Report) {
    let frames = [282usize, 333, 510, 158, 164, 121];
    let rates = [0.762, 0.664, 0.875, 0.873, 0.756, 0.694];
    // Match counts implied by the per-clip rates; each must round back.
    let matches: Vec<usize> = frames.iter().zip(&rates).map(|(f, r)| (*f as f64 * r).round() as usize).collect();
    let consistent = matches.iter().zip(&frames).zip(&rates).all(|((m, f), r)| ((*m as f64 / *f as f64) * 1000.0).round() / 1000.0 == *r);
    let mut labels = Vec::new();
    let mut pred = Vec::new();
    for (&f, &m) in frames.iter().zip(&matches) {
        for i in 0..f {
            let l = i % 6;
            labels.push(l);
            pred.push(if i < m { l } else { (l + 1) % 6 });
        }
    }
    let am = action_match_rate(&pred, &labels, &frames).unwrap();
    let per_clip_ok = am.per_clip.iter().zip(&rates).all(|(a, b)| (a - b).abs() <= 0.0005 + 1e-12);
    r.record(
        "action-match-arithmetic",
        consistent && per_clip_ok && (am.total - 0.783).abs() <= 0.001,
        format!("counts {matches:?} over {frames:?} -> total {:.4} (0.783 +- 0.001)", am.total),
    );
}

// ----------------------------------------------------------- GAE / grads

fn gae_and_gradients(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 60;
    let ends = [9usize, 30, 59];
    let mut t = Trajectory::default();
    for i in 0..n {
        t.obs.push(Arc::new(Vec::new()));
        t.env.push(0);
        t.actions.push(0);
        t.logp.push(0.0);
        t.values.push(rng.gen_range(-1.0..1.0));
        t.rewards.push(rng.gen_range(-1.0..1.0));
        t.terminated.push(ends.contains(&i));
        t.dones.push(ends.contains(&i));
    }
    t.next_values = (0..n).map(|i| if t.terminated[i] { 0.0 } else { t.values[i + 1] }).collect();
    let gamma = 0.97;
    let (a0, _) = compute_gae(&t, gamma, 0.0);
    let e0 = (0..n).map(|i| (a0[i] - (t.rewards[i] + gamma * t.next_values[i] - t.values[i])).abs()).fold(0.0, f64::max);
    let (a1, _) = compute_gae(&t, gamma, 1.0);
    let e1 = (0..n)
        .map(|i| {
            let end = *ends.iter().find(|&&e| e >= i).unwrap();
            let mc: f64 = (i..=end).map(|j| gamma.powi((j - i) as i32) * t.rewards[j]).sum();
            (a1[i] - (mc - t.values[i])).abs()
        })
        .fold(0.0, f64::max);

    // 1x1 input, no trunk: 4 actor logits + 1 value from one feature.
    let mut net: Network<f64> = NetBuilder::new(1, 1, 1).heads(4, (1, 1, 1));
    for p in net.params.iter_mut() {
        *p = rng.gen_range(-1.0..1.0);
    }
    let x = [0.3, -1.2, 0.8, 2.0, -0.5, 1.1];
    let actions = [0, 3, 1, 2, 3, 0];
    let tape = net.forward(&x, x.len());
    let old: Vec<f64> = (0..6)
        .map(|i| {
            let z: Vec<f32> = tape.logits[i * 4..i * 4 + 4].iter().map(|&v| v as f32).collect();
            log_softmax(&z)[actions[i]] + [0.05, -0.1, 0.3, -0.4, 0.02, 0.5][i]
        })
        .collect();
    let hb = HeadBatch {
        actions: &actions,
        old_logp: &old,
        advantages: &[1.0, -0.5, 2.0, 0.7, -1.5, 0.3],
        returns: &[0.5, 1.0, -2.0, 0.0, 0.3, 1.5],
    };
    let cfg = PpoConfig::default();
    let loss = |net: &Network<f64>| {
        let tape = net.forward(&x, x.len());
        let (parts, dl, dv) = ppo_loss(&tape.logits, &tape.values, 4, &hb, &cfg);
        let mut g = vec![0.0; net.params.len()];
        net.backward(&tape, &dl, &dv, &mut g);
        (parts.total, g)
    };
    let (_, g) = loss(&net);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..net.params.len() {
        let p0 = net.params[k];
        net.params[k] = p0 + h;
        let up = loss(&net).0;
        net.params[k] = p0 - h;
        let dn = loss(&net).0;
        net.params[k] = p0;
        let fd = (up - dn) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8));
    }
    r.record(
        "gae-and-gradient-checks",
        e0 <= 1e-9 && e1 <= 1e-9 && worst <= 1e-4,
        format!("lambda=0 err {e0:.1e}, lambda=1 err {e1:.1e} (<= 1e-9); finite-difference rel err {worst:.1e} over {} params (<= 1e-4)", net.params.len()),
    );
}

#[test]
fn acceptance_criteria() {
    let mut r = Report { results: Vec::new() };
    query_latency(&mut r);
    throughput(&mut r);
    octree_oracle(&mut r);
    renderer_correctness(&mut r);
    action_match(&mut r);
    gae_and_gradients(&mut r);
    overlay_behaviour(&mut r);
    let shared = EnvShared::new(EnvConfig::grid()).unwrap();
    mdp_exactness(&mut r, &shared);
    learning_and_oracle(&mut r, &shared);
    let failed: Vec<&str> = r.results.iter().filter(|x| !x.1).map(|x| x.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
