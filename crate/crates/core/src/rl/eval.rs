//! Success maps, start statistics, action-match rates and plots.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::PolicyNet;
use super::ppo::{CurvePoint, EpisodeRecord};
use super::vi::follow_table;
use super::RlError;
use crate::env::{EnvKind, EnvShared, GridModel, NavState};

/// Anything that picks actions from frames or states.
pub trait EvalPolicy {
    fn action_count(&self) -> usize;
    fn act(&self, obs: &[&[u8]], states: &[NavState], rng: &mut ChaCha8Rng) -> Vec<usize>;
    /// Deterministic policies get one episode per start.
    fn deterministic(&self) -> bool {
        true
    }
}

impl EvalPolicy for PolicyNet {
    fn action_count(&self) -> usize {
        self.spec.actions
    }

    fn act(&self, obs: &[&[u8]], _: &[NavState], _: &mut ChaCha8Rng) -> Vec<usize> {
        self.greedy(obs)
    }
}

/// Action lookup by grid state index (the value-iteration oracle).
pub struct TablePolicy<'a> {
    pub model: &'a GridModel,
    pub table: &'a [usize],
}

impl EvalPolicy for TablePolicy<'_> {
    fn action_count(&self) -> usize {
        6
    }

    fn act(&self, _: &[&[u8]], states: &[NavState], _: &mut ChaCha8Rng) -> Vec<usize> {
        states
            .iter()
            .map(|s| match s {
                NavState::Grid(g) => self.table[self.model.index(g).expect("state on lattice")],
                NavState::Fps(_) => panic!("table policy needs grid states"),
            })
            .collect()
    }
}

pub struct UniformPolicy(pub usize);

impl EvalPolicy for UniformPolicy {
    fn action_count(&self) -> usize {
        self.0
    }

    fn act(&self, obs: &[&[u8]], _: &[NavState], rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..obs.len()).map(|_| rng.gen_range(0..self.0)).collect()
    }

    fn deterministic(&self) -> bool {
        false
    }
}

const TABLE_BATCH: usize = 256;

/// Greedy action for every grid state, from each state's rendered frame.
/// Non-free states get action 0.
pub fn greedy_action_table(policy: &dyn EvalPolicy, shared: &EnvShared) -> Result<Vec<usize>, RlError> {
    let m = shared.grid.as_ref().ok_or(RlError::NotGrid)?;
    let free: Vec<usize> = (0..m.state_count()).filter(|&s| m.is_free(&m.state(s))).collect();
    let mut table = vec![0; m.state_count()];
    let mut env = shared.make_env();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in free.chunks(TABLE_BATCH) {
        let mut obs = Vec::with_capacity(chunk.len());
        let mut states = Vec::with_capacity(chunk.len());
        for &s in chunk {
            let st = NavState::Grid(m.state(s));
            obs.push(env.reset_to(st, 0)?.0.bytes);
            states.push(st);
        }
        let refs: Vec<&[u8]> = obs.iter().map(|o| o.as_slice()).collect();
        for (&s, a) in chunk.iter().zip(policy.act(&refs, &states, &mut rng)) {
            table[s] = a;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessMap {
    pub starts: Vec<NavState>,
    /// Success frequency per start.
    pub rates: Vec<f64>,
    pub episodes: usize,
}

impl SuccessMap {
    pub fn mean(&self) -> f64 {
        if self.rates.is_empty() {
            return 0.0;
        }
        self.rates.iter().sum::<f64>() / self.rates.len() as f64
    }

    /// Mean rate per `(x, y)` cell of the start histogram grid; `None` where
    /// no start was evaluated.
    pub fn cells(&self, bins: &StartVisits, shared: &EnvShared) -> SuccessGrid {
        let mut sum = vec![0.0; bins.counts.len()];
        let mut n = vec![0u32; bins.counts.len()];
        for (s, r) in self.starts.iter().zip(&self.rates) {
            if let Some(b) = bins.bin(s, shared) {
                sum[b] += r;
                n[b] += 1;
            }
        }
        SuccessGrid {
            side: bins.side,
            half_width: bins.half_width,
            cells: sum.iter().zip(&n).map(|(s, &k)| (k > 0).then(|| s / k as f64)).collect(),
            mean: self.mean(),
        }
    }
}

/// Row-major over `y` (rows) then `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessGrid {
    pub side: usize,
    pub half_width: f64,
    pub cells: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-start success frequency with the policy's own action selection.
/// Deterministic policies on the noise-free grid env use the action table
/// and the transition model, which is exact and skips rendering.
pub fn evaluate_success_map(
    policy: &dyn EvalPolicy,
    shared: &EnvShared,
    starts: &[NavState],
    episodes: usize,
    seed: u64,
) -> Result<SuccessMap, RlError> {
    let actions = shared.config.action_count();
    if policy.action_count() != actions {
        return Err(RlError::ActionSpace { policy: policy.action_count(), data: actions });
    }
    let cap = shared.config.reward.max_steps;
    let episodes = if policy.deterministic() { 1 } else { episodes.max(1) };
    if let (Some(m), true, true) = (&shared.grid, policy.deterministic(), !shared.config.noise.enabled) {
        let table = greedy_action_table(policy, shared)?;
        let rates = starts
            .iter()
            .map(|s| match s {
                NavState::Grid(g) => {
                    let i = m.index(g).expect("start on lattice");
                    if follow_table(m, &table, i, cap).0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                NavState::Fps(_) => 0.0,
            })
            .collect();
        return Ok(SuccessMap {
            starts: starts.to_vec(),
            rates,
            episodes,
        });
    }
    let mut env = shared.make_env();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::with_capacity(starts.len());
    for (k, s) in starts.iter().enumerate() {
        let mut wins = 0;
        for e in 0..episodes {
            let (mut obs, _) = env.reset_to(*s, seed ^ ((k * episodes + e) as u64))?;
            loop {
                let st = env.state().unwrap();
                let a = policy.act(&[obs.bytes.as_slice()], &[st], &mut rng)[0];
                let r = env.step(a)?;
                if r.terminated || r.truncated {
                    if r.info.cause == Some(crate::env::Cause::Goal) {
                        wins += 1;
                    }
                    break;
                }
                obs = r.observation;
            }
        }
        rates.push(wins as f64 / episodes as f64);
    }
    Ok(SuccessMap {
        starts: starts.to_vec(),
        rates,
        episodes,
    })
}

/// Every free grid start, in state-index order.
pub fn free_grid_starts(shared: &EnvShared) -> Result<Vec<NavState>, RlError> {
    let m = shared.grid.as_ref().ok_or(RlError::NotGrid)?;
    Ok((0..m.state_count())
        .map(|i| m.state(i))
        .filter(|s| m.is_free(s))
        .map(NavState::Grid)
        .collect())
}

/// Histogram of start positions over square bins centred on the lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartVisits {
    pub side: usize,
    pub half_width: f64,
    /// Row-major over `y` then `x`.
    pub counts: Vec<u32>,
}

impl StartVisits {
    pub fn for_env(shared: &EnvShared) -> Self {
        let (side, half_width) = match (&shared.grid, shared.config.kind) {
            (Some(m), EnvKind::Grid) => (m.side() as usize, (m.n as f64 + 0.5) * m.step),
            _ => {
                let b = shared.config.reward.bounds;
                (21, b * 21.0 / 20.0)
            }
        };
        Self {
            side,
            half_width,
            counts: vec![0; side * side],
        }
    }

    pub fn bin(&self, s: &NavState, shared: &EnvShared) -> Option<usize> {
        let (x, y) = match s {
            NavState::Grid(g) => {
                let p = shared.grid.as_ref()?.pose(g);
                (p.x, p.y)
            }
            NavState::Fps(f) => (f.x, f.y),
        };
        let w = 2.0 * self.half_width / self.side as f64;
        let i = ((x + self.half_width) / w).floor();
        let j = ((y + self.half_width) / w).floor();
        let n = self.side as f64;
        (i >= 0.0 && j >= 0.0 && i < n && j < n).then(|| j as usize * self.side + i as usize)
    }

    pub fn record(&mut self, s: &NavState, shared: &EnvShared) {
        if let Some(b) = self.bin(s, shared) {
            self.counts[b] += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(env step, mean return of the last 50 episodes)` at each episode end.
    pub rolling_reward: Vec<(u64, f64)>,
    pub success: Option<SuccessGrid>,
    pub start_visits: StartVisits,
    pub steps_to_curriculum: Option<u64>,
}

impl EvalReport {
    pub fn new(start_visits: StartVisits) -> Self {
        Self {
            rolling_reward: Vec::new(),
            success: None,
            start_visits,
            steps_to_curriculum: None,
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        if let Some(s) = &self.success {
            if s.cells.iter().flatten().chain([&s.mean]).any(|r| !(0.0..=1.0).contains(r)) {
                return Err(RlError::Config("success rate outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Trailing mean over `window` values, one output per input.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// First env step at which the success rate over the last `window`
/// qualifying episodes reaches `threshold`. With `full_only`, only episodes
/// started from the full start distribution count.
pub fn steps_to_sustained(episodes: &[EpisodeRecord], window: usize, threshold: f64, full_only: bool) -> Option<u64> {
    let mut wins = std::collections::VecDeque::with_capacity(window);
    for e in episodes.iter().filter(|e| !full_only || e.full_start) {
        if wins.len() == window {
            wins.pop_front();
        }
        wins.push_back(e.success());
        if wins.len() == window && wins.iter().filter(|&&w| w).count() as f64 >= threshold * window as f64 - 1e-9 {
            return Some(e.end_step);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMatch {
    pub frames: Vec<usize>,
    pub matches: Vec<usize>,
    pub per_clip: Vec<f64>,
    pub total: f64,
}

/// Per-clip and frame-weighted match rates. `clip_lens` partitions the
/// frames in order.
pub fn action_match_rate(predicted: &[usize], labels: &[usize], clip_lens: &[usize]) -> Result<ActionMatch, RlError> {
    if predicted.len() != labels.len() || clip_lens.iter().sum::<usize>() != labels.len() {
        return Err(RlError::Config(format!(
            "{} predictions, {} labels, clips cover {}",
            predicted.len(),
            labels.len(),
            clip_lens.iter().sum::<usize>()
        )));
    }
    let mut at = 0;
    let mut matches = Vec::with_capacity(clip_lens.len());
    let mut per_clip = Vec::with_capacity(clip_lens.len());
    for (clip, &n) in clip_lens.iter().enumerate() {
        if n == 0 {
            return Err(RlError::EmptyClip { clip });
        }
        let m = (at..at + n).filter(|&i| predicted[i] == labels[i]).count();
        matches.push(m);
        per_clip.push(m as f64 / n as f64);
        at += n;
    }
    let total = matches.iter().sum::<usize>() as f64 / labels.len() as f64;
    Ok(ActionMatch {
        frames: clip_lens.to_vec(),
        matches,
        per_clip,
        total,
    })
}

/// One labelled frame of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub image: String,
    pub action: usize,
    pub clip: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LabelMeta {
    actions: usize,
}

/// Writes frames as PNGs plus `labels.jsonl`, and `meta.json` declaring the
/// size of the action space.
pub fn write_labelled_frames(dir: &Path, actions: usize, frames: &[(Vec<u8>, [u32; 2], usize, usize)]) -> Result<(), RlError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec(&LabelMeta { actions })?)?;
    let mut f = fs::File::create(dir.join("labels.jsonl"))?;
    for (i, (rgb, [w, h], action, clip)) in frames.iter().enumerate() {
        let name = format!("frame_{i:05}.png");
        let img = RgbImage::from_raw(*w, *h, rgb.clone()).ok_or_else(|| RlError::Config("frame size".into()))?;
        img.save(dir.join(&name))?;
        if *action >= actions {
            return Err(RlError::ActionSpace { policy: actions, data: action + 1 });
        }
        let l = FrameLabel {
            image: name,
            action: *action,
            clip: *clip,
        };
        writeln!(f, "{}", serde_json::to_string(&l)?)?;
    }
    Ok(())
}

/// Frames (8-bit RGB), labels and clip lengths. Clips must be contiguous.
pub struct LabelledFrames {
    /// Declared action-space size, when the set has a `meta.json`.
    pub actions: Option<usize>,
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub clip_lens: Vec<usize>,
}

pub fn read_labelled_frames(dir: &Path) -> Result<LabelledFrames, RlError> {
    let text = fs::read_to_string(dir.join("labels.jsonl"))?;
    let meta = dir.join("meta.json");
    let actions = if meta.exists() {
        Some(serde_json::from_slice::<LabelMeta>(&fs::read(meta)?)?.actions)
    } else {
        None
    };
    let mut out = LabelledFrames {
        actions,
        frames: Vec::new(),
        labels: Vec::new(),
        clip_lens: Vec::new(),
    };
    let mut last_clip = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let l: FrameLabel = serde_json::from_str(line)?;
        out.frames.push(image::open(dir.join(&l.image))?.to_rgb8().into_raw());
        out.labels.push(l.action);
        if last_clip != Some(l.clip) {
            out.clip_lens.push(0);
            last_clip = Some(l.clip);
        }
        *out.clip_lens.last_mut().unwrap() += 1;
    }
    Ok(out)
}

/// Action-match rate of a policy's argmax actions on labelled frames.
pub fn policy_action_match(policy: &PolicyNet, data: &LabelledFrames) -> Result<ActionMatch, RlError> {
    if let Some(n) = data.actions.filter(|&n| n != policy.spec.actions) {
        return Err(RlError::ActionSpace {
            policy: policy.spec.actions,
            data: n,
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= policy.spec.actions) {
        return Err(RlError::ActionSpace {
            policy: policy.spec.actions,
            data: bad + 1,
        });
    }
    let mut pred = Vec::with_capacity(data.frames.len());
    for chunk in data.frames.chunks(TABLE_BATCH) {
        pred.extend(policy.greedy(chunk));
    }
    action_match_rate(&pred, &data.labels, &data.clip_lens)
}

/// Training curve as CSV: step, rolling reward, curriculum radius.
pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "step,rolling_reward,radius")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.rolling_reward, p.radius)?;
    }
    Ok(())
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;

/// Line plot of `(x, y)` points on a white canvas with axes.
pub fn plot_series(points: &[(f64, f64)], path: &Path) -> Result<(), RlError> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let (m, ww, hh) = (30.0, PLOT_W as f64 - 40.0, PLOT_H as f64 - 40.0);
    for x in 30..PLOT_W - 10 {
        img.put_pixel(x, PLOT_H - 30, Rgb([0, 0, 0]));
    }
    for y in 10..PLOT_H - 30 {
        img.put_pixel(30, y, Rgb([0, 0, 0]));
    }
    if points.len() >= 2 {
        let (x0, x1) = points.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
        let (y0, y1) = points.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
        let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * ww;
        let sy = |y: f64| PLOT_H as f64 - m - (y - y0) / (y1 - y0).max(1e-12) * hh;
        for w in points.windows(2) {
            let (ax, ay, bx, by) = (sx(w[0].0), sy(w[0].1), sx(w[1].0), sy(w[1].1));
            let n = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for k in 0..=n {
                let t = k as f64 / n as f64;
                let (x, y) = (ax + t * (bx - ax), ay + t * (by - ay));
                if x >= 0.0 && y >= 0.0 && x < PLOT_W as f64 && y < PLOT_H as f64 {
                    img.put_pixel(x as u32, y as u32, Rgb([200, 30, 30]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Heatmap of a square grid of values in `[0, 1]`; `None` cells are grey.
/// Rows are flipped so +y points up.
pub fn plot_heatmap(side: usize, cells: &[Option<f64>], path: &Path) -> Result<(), RlError> {
    let px = (320 / side.max(1)).max(1) as u32;
    let n = side as u32 * px;
    let mut img = RgbImage::new(n, n);
    for j in 0..side {
        for i in 0..side {
            let c = match cells[j * side + i] {
                Some(v) => {
                    let v = v.clamp(0.0, 1.0);
                    Rgb([(255.0 * (1.0 - v)) as u8, (200.0 * v) as u8, 40])
                }
                None => Rgb([90, 90, 90]),
            };
            for y in 0..px {
                for x in 0..px {
                    img.put_pixel(i as u32 * px + x, (side - 1 - j) as u32 * px + y, c);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_rate_examples() {
        let r = action_match_rate(&[1, 2, 3, 4], &[1, 2, 3, 0], &[4]).unwrap();
        assert_eq!(r.total, 0.75);
        let r = action_match_rate(&[1, 1], &[1, 1], &[1, 1]).unwrap();
        assert_eq!(r.per_clip, vec![1.0, 1.0]);
        assert!(matches!(action_match_rate(&[1], &[1], &[1, 0]), Err(RlError::EmptyClip { clip: 1 })));
    }

    #[test]
    fn match_total_ignores_partition() {
        let pred: Vec<usize> = (0..100).map(|i| (i * 7) % 4).collect();
        let lab: Vec<usize> = (0..100).map(|i| (i * 5) % 4).collect();
        let a = action_match_rate(&pred, &lab, &[100]).unwrap().total;
        let b = action_match_rate(&pred, &lab, &[10, 30, 1, 59]).unwrap().total;
        assert_eq!(a, b);
    }

    #[test]
    fn rolling_mean_and_sustained() {
        assert_eq!(rolling_mean(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        let ep = |ok: bool, step: u64, full: bool| EpisodeRecord {
            start: NavState::Grid(crate::env::GridState { ix: 0, iy: 0, iyaw: 0, steps: 0 }),
            radius: 1,
            full_start: full,
            ret: 0.0,
            length: 1,
            cause: ok.then_some(crate::env::Cause::Goal),
            end_step: step,
        };
        let mut eps: Vec<_> = (0..10).map(|i| ep(true, i, false)).collect();
        eps.extend((10..20).map(|i| ep(i % 5 != 0, i, true)));
        assert_eq!(steps_to_sustained(&eps, 4, 0.75, false), Some(3));
        // Full-start episodes only: 10 fails, 11..=14 all succeed.
        assert_eq!(steps_to_sustained(&eps, 4, 1.0, true), Some(14));
        assert_eq!(steps_to_sustained(&eps, 50, 0.8, true), None);
    }

    #[test]
    fn labelled_frames_roundtrip_and_action_space() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..5).map(|i| (vec![i as u8 * 40; 4 * 4 * 3], [4, 4], i % 3, i / 3)).collect();
        write_labelled_frames(dir.path(), 4, &frames).unwrap();
        let d = read_labelled_frames(dir.path()).unwrap();
        assert_eq!(d.actions, Some(4));
        assert_eq!(d.labels, vec![0, 1, 2, 0, 1]);
        assert_eq!(d.clip_lens, vec![3, 2]);
        assert_eq!(d.frames[2], frames[2].0);

        let p = PolicyNet::new(
            crate::rl::PolicySpec {
                height: 4,
                width: 4,
                channels: 3,
                conv: vec![],
                kernel: 3,
                hidden: 0,
                actions: 6,
            },
            0,
        )
        .unwrap();
        assert!(matches!(policy_action_match(&p, &d), Err(RlError::ActionSpace { policy: 6, data: 4 })));
        assert!(write_labelled_frames(dir.path(), 2, &frames).is_err());
    }
}
