use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use splatnav::env::{CurriculumState, EnvConfig, EnvShared, NavState};
use splatnav::occupancy::{self, MAX_DEPTH};
use splatnav::rl::eval::{self, plot_heatmap, plot_series, write_curve_csv, SuccessMap};
use splatnav::rl::{
    self, evaluate_success_map, free_grid_starts, value_iteration, EvalPolicy, EvalReport, PolicyNet, PolicySpec,
    PpoConfig, ResumeState, RlError, StartVisits, TablePolicy, TrainOptions,
};
use splatnav::scene::{self, crop_point_cloud};
use splatnav::synthetic::{generate_synthetic_scene, SceneSpec};
use splatnav::{Aabb, CameraIntrinsics, RenderedImage, Vec3};

use crate::manifest::RunManifest;
use crate::{parse, BenchArgs, BuildOctreeArgs, Classify, CropArgs, EvalArgs, Exit, LabelsArgs, LayoutArg, RenderArgs, StartsArg, SynthArgs, TrainArgs};

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn create_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

fn load_env_config(p: Option<&Path>) -> Result<EnvConfig> {
    match p {
        Some(p) => EnvConfig::load(p).with_context(|| format!("loading {}", p.display())).usage(),
        None => Ok(EnvConfig::grid()),
    }
}

/// Library errors that reflect bad input map to exit 2; a diverged update
/// maps to exit 4.
fn classify(e: RlError) -> anyhow::Error {
    match e {
        RlError::NonFinite { .. } => anyhow::Error::new(e).context(Exit::NonFinite),
        RlError::Config(_)
        | RlError::ActionSpace { .. }
        | RlError::SpecMismatch
        | RlError::BadMagic(_)
        | RlError::Version(_)
        | RlError::Corrupt(_)
        | RlError::NotGrid
        | RlError::EmptyClip { .. }
        | RlError::Env(_) => anyhow::Error::new(e).context(Exit::Usage),
        _ => e.into(),
    }
}

pub fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_slice(&fs::read(p).usage()?).usage()?,
        None => {
            let mut s = match a.layout {
                LayoutArg::Courtyard => SceneSpec::courtyard(a.seed, a.splats),
                LayoutArg::Blobs => SceneSpec::random_blobs(a.seed, a.splats),
            };
            s.samples_per_splat = a.samples_per_splat;
            if a.no_landmark {
                s.landmark = None;
            }
            s
        }
    };
    m.seeds.push(spec.seed);
    let t = Instant::now();
    let s = generate_synthetic_scene(&spec).usage()?;
    m.time("generate", secs(t));
    create_parent(&a.scene_out)?;
    scene::save_splat_scene(&s.scene, &a.scene_out)?;
    m.artifact(&a.scene_out);
    if let Some(c) = &a.cloud_out {
        create_parent(c)?;
        scene::save_point_cloud(&s.cloud, c)?;
        m.artifact(c);
    }
    println!("{}", json!({"splats": s.scene.len(), "points": s.cloud.len(), "landmarks": s.landmarks().count()}));
    Ok(())
}

pub fn crop(a: &CropArgs, m: &mut RunManifest) -> Result<()> {
    let bounds = parse::bounds(&a.bounds).usage()?;
    let t = Instant::now();
    let pc = scene::load_point_cloud(&a.input).usage()?;
    let out = crop_point_cloud(&pc, &bounds);
    m.time("crop", secs(t));
    log::info!("kept {} of {} points", out.len(), pc.len());
    if out.is_empty() && a.fail_empty {
        return Err(anyhow::anyhow!("no points inside {}", a.bounds).context(Exit::Empty));
    }
    create_parent(&a.out)?;
    scene::save_point_cloud(&out, &a.out)?;
    m.artifact(&a.out);
    println!("{}", json!({"input": pc.len(), "output": out.len()}));
    Ok(())
}

pub fn build_octree(a: &BuildOctreeArgs, m: &mut RunManifest) -> Result<()> {
    if !(1..=MAX_DEPTH).contains(&a.depth) {
        return Err(anyhow::anyhow!("depth {} outside 1..={MAX_DEPTH}", a.depth).context(Exit::Usage));
    }
    if !(a.cell_edge > 0.0 && a.cell_edge.is_finite()) {
        return Err(anyhow::anyhow!("cell edge must be positive").context(Exit::Usage));
    }
    let pc = scene::load_point_cloud(&a.input).usage()?;
    let t = Instant::now();
    let forest = occupancy::build_forest(&pc, a.cell_edge, a.depth, a.min_points).usage()?;
    m.time("build", secs(t));
    create_parent(&a.out)?;
    occupancy::save_forest(&forest, &a.out)?;
    m.artifact(&a.out);
    let summary = forest.summary();
    if let Some(d) = &a.dump {
        create_parent(d)?;
        fs::write(d, serde_json::to_vec_pretty(&summary)?)?;
        m.artifact(d);
    }
    println!("{}", json!({"cells": forest.len(), "occupied_leaves": summary.occupied_leaves}));
    Ok(())
}

fn save_image(img: &RenderedImage, path: &Path) -> Result<()> {
    create_parent(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        img.save_ppm(path)?;
    } else {
        img.save_png(path)?;
    }
    Ok(())
}

pub fn render(a: &RenderArgs, m: &mut RunManifest) -> Result<()> {
    let (w, h) = parse::resolution(&a.res).usage()?;
    let k = CameraIntrinsics::from_hfov(w, h, a.hfov).usage()?;
    let poses = match (&a.pose, &a.poses) {
        (Some(p), _) => vec![parse::pose(p).usage()?],
        (None, Some(file)) => {
            let text = fs::read_to_string(file).usage()?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .enumerate()
                .map(|(i, l)| parse::pose(l).with_context(|| format!("pose {}", i + 1)))
                .collect::<Result<Vec<_>>>()
                .usage()?
        }
        (None, None) => bail!("--pose or --poses is required"),
    };
    let splats = scene::load_splat_scene(&a.scene).usage()?;
    let t = Instant::now();
    if a.poses.is_some() {
        fs::create_dir_all(&a.out)?;
        for (i, p) in poses.iter().enumerate() {
            let path = a.out.join(format!("frame_{i:05}.png"));
            save_image(&splatnav::render(&splats, p, &k), &path)?;
            m.artifact(path);
        }
    } else {
        save_image(&splatnav::render(&splats, &poses[0], &k), &a.out)?;
        m.artifact(&a.out);
    }
    m.time("render", secs(t));
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[i])
}

pub fn bench(a: &BenchArgs, m: &mut RunManifest) -> Result<()> {
    let (w, h) = parse::resolution(&a.res).usage()?;
    let k = CameraIntrinsics::from_hfov(w, h, a.hfov).usage()?;
    m.seeds.push(a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let mut render_ms = Vec::new();
    let mut splats = 0;
    if a.frames > 0 {
        let path = a.scene.as_ref().context("--frames > 0 needs --scene").usage()?;
        let s = scene::load_splat_scene(path).usage()?;
        splats = s.len();
        let poses: Vec<_> = (0..a.frames)
            .map(|_| {
                let (x, y, yaw) = (rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(0.0..std::f64::consts::TAU));
                splatnav::CameraPose::ground(x, y, 0.15, yaw)
            })
            .collect();
        splatnav::render(&s, &poses[0], &k);
        for p in &poses {
            let t = Instant::now();
            std::hint::black_box(splatnav::render(&s, p, &k));
            render_ms.push(secs(t) * 1e3);
        }
    }

    let mut query_us = Vec::new();
    let mut max_visits = 0;
    let mut cells = 0;
    let mut depth = 0;
    if a.queries > 0 {
        let path = a.forest.as_ref().context("--queries > 0 needs --forest").usage()?;
        let f = occupancy::load_forest(path).usage()?;
        cells = f.len();
        depth = f.depth;
        let (lo, hi) = f
            .cells()
            .iter()
            .map(|(_, t)| t.bounds())
            .fold((Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN)), |(lo, hi), b| (lo.inf(&b.min), hi.sup(&b.max)));
        let (lo, hi) = if f.is_empty() { (Vec3::zeros(), Vec3::repeat(1.0)) } else { (lo, hi) };
        let points: Vec<Vec3> = (0..a.queries)
            .map(|_| Vec3::from_fn(|i, _| rng.gen_range(lo[i]..=hi[i])))
            .collect();
        for p in &points {
            let b = Aabb { min: *p, max: *p };
            let t = Instant::now();
            let (_, stats) = std::hint::black_box(f.query(&b));
            query_us.push(secs(t) * 1e6);
            max_visits = max_visits.max(stats.nodes_visited);
        }
    }

    let stats = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        (percentile(&s, 0.5), percentile(&s, 0.95))
    };
    let (rm, rp) = stats(&render_ms);
    let (qm, qp) = stats(&query_us);
    m.time("render_total", render_ms.iter().sum::<f64>() / 1e3);
    m.time("query_total", query_us.iter().sum::<f64>() / 1e6);
    let out = json!({
        "resolution": [w, h],
        "splats": splats,
        "frames": a.frames,
        "render_ms": render_ms,
        "render_median_ms": rm,
        "render_p95_ms": rp,
        "fps": rm.map(|x| 1e3 / x),
        "cells": cells,
        "depth": depth,
        "queries": a.queries,
        "query_us": query_us,
        "query_median_us": qm,
        "query_p95_us": qp,
        "max_nodes_visited": max_visits,
        "visit_bound": 8 * depth as usize + 1,
    });
    println!("{out}");
    Ok(())
}

/// Everything a training run needs; the file given to `train --config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    /// Defaults to the vision network sized for the env.
    pub policy: Option<PolicySpec>,
    /// Stop once the curriculum is done and greedy success over all free
    /// grid starts reaches this value.
    pub stop_success: Option<f64>,
    /// Save the checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: usize,
}

const CHECKPOINT: &str = "checkpoint.bin";
const RESUME: &str = "resume.json";
const CURVE: &str = "curve.csv";
const REPORT: &str = "report.json";
const CONFIG: &str = "config.json";

pub fn train(a: &TrainArgs, m: &mut RunManifest) -> Result<()> {
    let cfg: TrainConfig = match (&a.config, a.resume) {
        (Some(p), _) => serde_json::from_slice(&fs::read(p).usage()?).with_context(|| format!("parsing {}", p.display())).usage()?,
        (None, true) => serde_json::from_slice(&fs::read(a.out.join(CONFIG)).usage()?).usage()?,
        (None, false) => TrainConfig::default(),
    };
    cfg.env.validate().usage()?;
    cfg.ppo.validate().map_err(classify)?;
    m.seeds.push(cfg.ppo.seed);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(CONFIG), serde_json::to_vec_pretty(&cfg)?)?;
    m.artifact(a.out.join(CONFIG));

    let t = Instant::now();
    let shared = EnvShared::new(cfg.env.clone()).usage()?;
    m.time("setup", secs(t));
    let c = &cfg.env.camera;
    let spec = cfg
        .policy
        .clone()
        .unwrap_or_else(|| PolicySpec::vision(c.height as usize, c.width as usize, cfg.env.action_count()));
    let ckpt = a.out.join(CHECKPOINT);

    let (init, resume, mut curve, prior) = if a.resume {
        let p = rl::load_checkpoint(&ckpt).usage()?;
        let r: ResumeState = serde_json::from_slice(&fs::read(a.out.join(RESUME)).usage()?).usage()?;
        let curve = fs::read_to_string(a.out.join(CURVE)).unwrap_or_default();
        let prior: Option<EvalReport> = fs::read(a.out.join(REPORT)).ok().and_then(|b| serde_json::from_slice(&b).ok());
        log::info!("resuming at step {}", r.steps);
        (Some(p), Some(r), curve, prior)
    } else {
        let p = PolicyNet::new(spec.clone(), cfg.ppo.seed).map_err(classify)?;
        rl::save_checkpoint(&p, &ckpt)?;
        (Some(p), None, String::new(), None)
    };

    let starts = if cfg.stop_success.is_some() {
        free_grid_starts(&shared).map_err(classify)?
    } else {
        Vec::new()
    };
    let sh = shared.clone();
    let every = cfg.checkpoint_every;
    let stop = cfg.stop_success;
    let ck = ckpt.clone();
    let opts = TrainOptions {
        init,
        resume,
        on_update: Some(Box::new(move |p, pol| {
            log::info!(
                "update {} step {} radius {} finished {} rolling reward {:.2} success {:.2}",
                p.update,
                p.steps,
                p.radius,
                p.curriculum_finished,
                p.rolling_reward,
                p.rolling_success
            );
            if every > 0 && p.update % every == 0 {
                rl::save_checkpoint(pol, &ck)?;
            }
            match stop {
                Some(target) if p.curriculum_finished => {
                    let s = evaluate_success_map(pol, &sh, &starts, 1, 0)?.mean();
                    log::info!("greedy success {s:.3}");
                    Ok(s >= target)
                }
                _ => Ok(false),
            }
        })),
    };
    let t = Instant::now();
    let out = rl::train(&shared, &spec, &cfg.ppo, opts).map_err(classify)?;
    m.time("train", secs(t));

    rl::save_checkpoint(&out.policy, &ckpt)?;
    m.artifact(&ckpt);
    fs::write(a.out.join(RESUME), serde_json::to_vec_pretty(&out.resume)?)?;
    m.artifact(a.out.join(RESUME));

    let mut buf = Vec::new();
    write_curve_csv(&out.curve, &mut buf)?;
    let fresh = String::from_utf8(buf)?;
    if curve.is_empty() {
        curve = fresh;
    } else {
        curve.extend(fresh.lines().skip(1).map(|l| format!("{l}\n")));
    }
    fs::write(a.out.join(CURVE), curve)?;
    m.artifact(a.out.join(CURVE));

    let mut report = out.report;
    if let Some(p) = prior {
        let mut rr = p.rolling_reward;
        rr.extend(report.rolling_reward);
        report.rolling_reward = rr;
        for (c, o) in report.start_visits.counts.iter_mut().zip(&p.start_visits.counts) {
            *c += o;
        }
    }
    if shared.grid.is_some() {
        let t = Instant::now();
        let starts = free_grid_starts(&shared).map_err(classify)?;
        let map = evaluate_success_map(&out.policy, &shared, &starts, 1, cfg.ppo.seed).map_err(classify)?;
        report.success = Some(map.cells(&report.start_visits, &shared));
        m.time("eval", secs(t));
        println!("{}", json!({"steps": out.steps, "success": map.mean(), "curriculum_done_at": report.steps_to_curriculum}));
    } else {
        println!("{}", json!({"steps": out.steps, "curriculum_done_at": report.steps_to_curriculum}));
    }
    report.validate().map_err(classify)?;
    fs::write(a.out.join(REPORT), serde_json::to_vec_pretty(&report)?)?;
    m.artifact(a.out.join(REPORT));
    Ok(())
}

pub fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    m.seeds.push(a.seed);
    if let Some(dir) = &a.labels {
        let path = a.checkpoint.as_ref().context("--labels needs --checkpoint").usage()?;
        let policy = rl::load_checkpoint(path).usage()?;
        let data = eval::read_labelled_frames(dir).usage()?;
        let t = Instant::now();
        let r = eval::policy_action_match(&policy, &data).map_err(classify)?;
        m.time("eval", secs(t));
        create_parent(&a.out)?;
        fs::write(&a.out, serde_json::to_vec_pretty(&r)?)?;
        m.artifact(&a.out);
        println!("{}", json!({"frames": data.labels.len(), "total": r.total}));
        return Ok(());
    }

    let cfg = load_env_config(a.env.as_deref())?;
    let t = Instant::now();
    let shared = EnvShared::new(cfg).usage()?;
    m.time("setup", secs(t));
    let starts: Vec<NavState> = match a.starts {
        StartsArg::Grid => free_grid_starts(&shared).map_err(classify)?,
        StartsArg::Random => {
            let mut env = shared.make_env();
            env.set_curriculum(CurriculumState::finished(shared.max_radius));
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..a.start_count)
                .map(|_| {
                    env.reset(rng.gen())?;
                    Ok(env.state().expect("reset sets a state"))
                })
                .collect::<Result<_, splatnav::env::EnvError>>()
                .usage()?
        }
    };
    ensure!(a.episodes > 0, "--episodes must be positive");

    let t = Instant::now();
    let map: SuccessMap = if a.oracle {
        let model = shared.grid.clone().context("--oracle needs a grid env").usage()?;
        let vi = value_iteration(&model, 0.99);
        let p = TablePolicy {
            model: &model,
            table: &vi.policy,
        };
        evaluate_success_map(&p, &shared, &starts, a.episodes, a.seed).map_err(classify)?
    } else {
        let path = a.checkpoint.as_ref().context("--checkpoint is required").usage()?;
        let policy = rl::load_checkpoint(path).usage()?;
        let p: &dyn EvalPolicy = &policy;
        evaluate_success_map(p, &shared, &starts, a.episodes, a.seed).map_err(classify)?
    };
    m.time("eval", secs(t));

    let mut report = EvalReport::new(StartVisits::for_env(&shared));
    if let Some(run) = &a.run {
        let prior: EvalReport = serde_json::from_slice(&fs::read(run.join(REPORT)).usage()?).usage()?;
        report.rolling_reward = prior.rolling_reward;
        report.start_visits = prior.start_visits;
        report.steps_to_curriculum = prior.steps_to_curriculum;
    }
    let grid = map.cells(&report.start_visits, &shared);
    report.success = Some(grid.clone());
    report.validate().map_err(classify)?;
    create_parent(&a.out)?;
    fs::write(&a.out, serde_json::to_vec_pretty(&report)?)?;
    m.artifact(&a.out);

    if let Some(dir) = &a.plot {
        fs::create_dir_all(dir)?;
        let heat = dir.join("success_map.png");
        plot_heatmap(grid.side, &grid.cells, &heat).map_err(classify)?;
        m.artifact(heat);
        if !report.rolling_reward.is_empty() {
            let curve = dir.join("reward_curve.png");
            let pts: Vec<(f64, f64)> = report.rolling_reward.iter().map(|&(s, r)| (s as f64, r)).collect();
            plot_series(&pts, &curve).map_err(classify)?;
            m.artifact(curve);
        }
        let visits = &report.start_visits;
        let max = visits.counts.iter().copied().max().unwrap_or(0);
        if max > 0 {
            let cells: Vec<Option<f64>> = visits.counts.iter().map(|&c| (c > 0).then(|| c as f64 / max as f64)).collect();
            let path = dir.join("start_visits.png");
            plot_heatmap(visits.side, &cells, &path).map_err(classify)?;
            m.artifact(path);
        }
    }
    println!("{}", json!({"starts": map.starts.len(), "episodes": map.episodes, "mean_success": map.mean()}));
    Ok(())
}

pub fn labels(a: &LabelsArgs, m: &mut RunManifest) -> Result<()> {
    let clips = parse::counts(&a.clips).usage()?;
    let mut cfg = load_env_config(a.env.as_deref())?;
    cfg.noise.enabled = a.noise;
    m.seeds.push(a.seed);
    let shared = EnvShared::new(cfg).usage()?;
    let model = shared.grid.clone().context("labels need a grid env").usage()?;
    let vi = value_iteration(&model, 0.99);
    let free: Vec<usize> = (0..model.state_count()).filter(|&s| model.is_free(&model.state(s))).collect();
    ensure!(!free.is_empty(), "no free grid state");

    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut env = shared.make_env();
    let (w, h) = (shared.config.camera.width, shared.config.camera.height);
    let mut frames = Vec::new();
    for (clip, &len) in clips.iter().enumerate() {
        let mut obs = None;
        for _ in 0..len {
            let o = match obs.take() {
                Some(o) => o,
                None => {
                    let s = model.state(free[rng.gen_range(0..free.len())]);
                    env.reset_to(NavState::Grid(s), rng.gen()).usage()?.0
                }
            };
            let Some(NavState::Grid(g)) = env.state() else { unreachable!("grid env") };
            let action = vi.policy[model.index(&g).expect("on lattice")];
            frames.push((o.bytes.to_vec(), [w, h], action, clip));
            let r = env.step(action).usage()?;
            if !(r.terminated || r.truncated) {
                obs = Some(r.observation);
            }
        }
    }
    m.time("render", secs(t));
    eval::write_labelled_frames(&a.out, shared.config.action_count(), &frames).map_err(classify)?;
    m.artifact(PathBuf::from(&a.out));
    println!("{}", json!({"frames": frames.len(), "clips": clips.len()}));
    Ok(())
}
