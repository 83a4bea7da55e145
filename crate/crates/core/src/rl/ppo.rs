//! Proximal policy optimization with GAE over lockstep environments.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{EvalReport, StartVisits};
use super::nn::{clip_grad_norm, Adam};
use super::policy::{PolicyNet, PolicySpec};
use super::RlError;
use crate::env::{Cause, CurriculumState, EnvShared, NavEnv, NavState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Transitions per update, summed over environments.
    pub rollout: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: u64,
    pub n_envs: usize,
    /// Multiplies rewards before they reach the learner.
    pub reward_scale: f64,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            rollout: 2048,
            minibatch: 256,
            lr: 1e-3,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 200_000,
            n_envs: 8,
            reward_scale: 0.1,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must be in (0, 1], got {}", self.lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if self.epochs == 0 || self.rollout == 0 || self.minibatch == 0 || self.n_envs == 0 {
            return bad("epochs, rollout, minibatch and n_envs must be positive".into());
        }
        if !(self.lr > 0.0 && self.reward_scale > 0.0) {
            return bad("lr and reward_scale must be positive".into());
        }
        Ok(())
    }
}

/// Transitions from several environments, in collection order.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub obs: Vec<Arc<Vec<u8>>>,
    /// Environment that produced each transition.
    pub env: Vec<usize>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s')` used for bootstrapping: 0 after termination, the critic's
    /// estimate after truncation or at the end of the rollout.
    pub next_values: Vec<f64>,
    /// The episode ended here (terminated or truncated).
    pub dones: Vec<bool>,
    pub terminated: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn push(&mut self, obs: Arc<Vec<u8>>, env: usize, action: usize, logp: f64, value: f64) {
        self.obs.push(obs);
        self.env.push(env);
        self.actions.push(action);
        self.logp.push(logp);
        self.values.push(value);
        self.rewards.push(0.0);
        self.next_values.push(0.0);
        self.dones.push(false);
        self.terminated.push(false);
    }
}

/// `A_t = sum_k (gamma lambda)^k delta_{t+k}`, cut at episode ends.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.len();
    let envs = traj.env.iter().max().map_or(0, |&e| e + 1);
    let mut carry = vec![0.0; envs];
    let mut adv = vec![0.0; n];
    for i in (0..n).rev() {
        let e = traj.env[i];
        let delta = traj.rewards[i] + gamma * traj.next_values[i] - traj.values[i];
        let cont = if traj.dones[i] { 0.0 } else { 1.0 };
        adv[i] = delta + gamma * lambda * cont * carry[e];
        carry[e] = adv[i];
    }
    let ret = adv.iter().zip(&traj.values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// A finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub start: NavState,
    pub radius: u32,
    /// Started from the full start distribution (curriculum finished).
    pub full_start: bool,
    pub ret: f64,
    pub length: u32,
    pub cause: Option<Cause>,
    /// Global env step at which the episode ended.
    pub end_step: u64,
}

impl EpisodeRecord {
    pub fn success(&self) -> bool {
        self.cause == Some(Cause::Goal)
    }
}

struct Running {
    start: NavState,
    radius: u32,
    full_start: bool,
    ret: f64,
    length: u32,
}

/// Lockstep environments plus a curriculum they share.
pub struct RolloutState {
    pub envs: Vec<NavEnv>,
    pub curriculum: CurriculumState,
    pub steps: u64,
    /// Step at which the curriculum finished, if it has.
    pub curriculum_done_at: Option<u64>,
    obs: Vec<Arc<Vec<u8>>>,
    running: Vec<Running>,
    rng: ChaCha8Rng,
    reward_scale: f64,
}

impl RolloutState {
    pub fn new(shared: &EnvShared, n_envs: usize, seed: u64, reward_scale: f64) -> Result<Self, RlError> {
        let curriculum = CurriculumState::new(&shared.config.curriculum, shared.max_radius);
        Self::with_curriculum(shared, n_envs, seed, reward_scale, curriculum)
    }

    pub fn with_curriculum(
        shared: &EnvShared,
        n_envs: usize,
        seed: u64,
        reward_scale: f64,
        curriculum: CurriculumState,
    ) -> Result<Self, RlError> {
        let mut s = Self {
            envs: (0..n_envs).map(|_| shared.make_env()).collect(),
            curriculum_done_at: curriculum.finished.then_some(0),
            curriculum,
            steps: 0,
            obs: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e0u64),
            reward_scale,
        };
        for e in 0..n_envs {
            let (obs, run) = s.reset_env(e)?;
            s.obs.push(obs);
            s.running.push(run);
        }
        Ok(s)
    }

    fn reset_env(&mut self, e: usize) -> Result<(Arc<Vec<u8>>, Running), RlError> {
        let env = &mut self.envs[e];
        env.set_curriculum(self.curriculum.clone());
        let (obs, _) = env.reset(self.rng.gen())?;
        Ok((
            obs.bytes,
            Running {
                start: env.state().unwrap(),
                radius: self.curriculum.radius,
                full_start: self.curriculum.finished,
                ret: 0.0,
                length: 0,
            },
        ))
    }

    pub fn action_count(&self) -> usize {
        self.envs[0].action_count()
    }
}

/// Steps the environments round-robin until exactly `length` transitions
/// are collected. Episodes reset automatically.
pub fn collect_rollout<R: Rng>(
    state: &mut RolloutState,
    policy: &PolicyNet,
    length: usize,
    rng: &mut R,
) -> Result<(Trajectory, Vec<EpisodeRecord>), RlError> {
    let n = state.envs.len();
    let mut traj = Trajectory::default();
    let mut episodes = Vec::new();
    // Transition awaiting V(s') from the next forward pass, per env.
    let mut pending: Vec<Option<usize>> = vec![None; n];
    let mut truncated_at: Vec<(usize, Arc<Vec<u8>>)> = Vec::new();
    while traj.len() < length {
        let active = n.min(length - traj.len());
        let obs: Vec<&[u8]> = state.obs[..active].iter().map(|o| o.as_slice()).collect();
        let acts = policy.act(&obs, rng);
        for (e, a) in acts.into_iter().enumerate() {
            if let Some(i) = pending[e].take() {
                traj.next_values[i] = a.value;
            }
            let i = traj.len();
            traj.push(state.obs[e].clone(), e, a.action, a.logp, a.value);
            let r = state.envs[e].step(a.action)?;
            state.steps += 1;
            traj.rewards[i] = r.reward * state.reward_scale;
            traj.terminated[i] = r.terminated;
            traj.dones[i] = r.terminated || r.truncated;
            let run = &mut state.running[e];
            run.ret += r.reward;
            run.length += 1;
            if r.truncated {
                truncated_at.push((i, r.observation.bytes.clone()));
            } else if !r.terminated {
                pending[e] = Some(i);
            }
            if traj.dones[i] {
                let run = &state.running[e];
                let rec = EpisodeRecord {
                    start: run.start,
                    radius: run.radius,
                    full_start: run.full_start,
                    ret: run.ret,
                    length: run.length,
                    cause: r.info.cause,
                    end_step: state.steps,
                };
                let was_finished = state.curriculum.finished;
                state.curriculum.record(rec.success());
                if !was_finished && state.curriculum.finished {
                    state.curriculum_done_at = Some(state.steps);
                }
                episodes.push(rec);
                let (obs, run) = state.reset_env(e)?;
                state.obs[e] = obs;
                state.running[e] = run;
            } else {
                state.obs[e] = r.observation.bytes;
            }
        }
    }
    let tail: Vec<usize> = (0..n).filter(|&e| pending[e].is_some()).collect();
    if !tail.is_empty() {
        let obs: Vec<&[u8]> = tail.iter().map(|&e| state.obs[e].as_slice()).collect();
        for (&e, v) in tail.iter().zip(policy.values(&obs)) {
            traj.next_values[pending[e].unwrap()] = v;
        }
    }
    if !truncated_at.is_empty() {
        let obs: Vec<&[u8]> = truncated_at.iter().map(|(_, o)| o.as_slice()).collect();
        for ((i, _), v) in truncated_at.iter().zip(policy.values(&obs)) {
            traj.next_values[*i] = v;
        }
    }
    Ok((traj, episodes))
}

/// Minibatch view consumed by [`ppo_loss`].
pub struct HeadBatch<'a> {
    pub actions: &'a [usize],
    pub old_logp: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// PPO loss (to be minimized) and its gradient w.r.t. logits and values:
/// `-min(r A, clip(r) A) + c_v (V - R)^2 - c_e H`, averaged over the batch.
pub fn ppo_loss(logits: &[f64], values: &[f64], actions: usize, b: &HeadBatch, cfg: &PpoConfig) -> (LossParts, Vec<f64>, Vec<f64>) {
    let n = b.actions.len();
    let inv = 1.0 / n as f64;
    let mut parts = LossParts::default();
    let mut dlogits = vec![0.0; n * actions];
    let mut dvalues = vec![0.0; n];
    for i in 0..n {
        let z = &logits[i * actions..(i + 1) * actions];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        let lp: Vec<f64> = z.iter().map(|v| v - lse).collect();
        let pi: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let a = b.actions[i];
        let adv = b.advantages[i];
        let log_ratio = lp[a] - b.old_logp[i];
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        parts.policy -= inv * (ratio * adv).min(clipped * adv);
        let is_clipped = (adv > 0.0 && ratio > 1.0 + cfg.clip) || (adv < 0.0 && ratio < 1.0 - cfg.clip);
        if (ratio - 1.0).abs() > cfg.clip {
            parts.clip_fraction += inv;
        }
        parts.approx_kl += inv * ((ratio - 1.0) - log_ratio);
        let h: f64 = -pi.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
        parts.entropy += inv * h;
        let d = &mut dlogits[i * actions..(i + 1) * actions];
        for k in 0..actions {
            let onehot = if k == a { 1.0 } else { 0.0 };
            if !is_clipped {
                d[k] -= inv * adv * ratio * (onehot - pi[k]);
            }
            // d(-c H)/dz_k = c pi_k (log pi_k + H)
            d[k] += inv * cfg.ent_coef * pi[k] * (lp[k] + h);
        }
        let err = values[i] - b.returns[i];
        parts.value += inv * err * err;
        dvalues[i] = 2.0 * inv * cfg.vf_coef * err;
    }
    parts.total = parts.policy + cfg.vf_coef * parts.value - cfg.ent_coef * parts.entropy;
    (parts, dlogits, dvalues)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: LossParts,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Normalized advantages for the batch, if enabled.
fn batch_advantages(traj: &Trajectory, cfg: &PpoConfig) -> Vec<f64> {
    let a = &traj.advantages;
    if !cfg.normalize_advantages || a.len() < 2 {
        return a.clone();
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64;
    let sd = var.sqrt() + 1e-8;
    a.iter().map(|x| (x - mean) / sd).collect()
}

/// Sub-batch for forward/backward passes; small tapes stay in cache.
const CHUNK: usize = 8;

/// Loss and parameter gradient on the transitions `idx`, accumulated over
/// small chunks.
pub fn ppo_gradient(policy: &PolicyNet, traj: &Trajectory, adv: &[f64], idx: &[usize], cfg: &PpoConfig) -> (LossParts, Vec<f32>) {
    let mut grads = vec![0f32; policy.param_count()];
    let mut parts = LossParts::default();
    for c in idx.chunks(CHUNK) {
        let obs: Vec<&[u8]> = c.iter().map(|&i| traj.obs[i].as_slice()).collect();
        let tape = policy.forward(&obs);
        let logits: Vec<f64> = tape.logits.iter().map(|&v| v as f64).collect();
        let values: Vec<f64> = tape.values.iter().map(|&v| v as f64).collect();
        let actions: Vec<usize> = c.iter().map(|&i| traj.actions[i]).collect();
        let old_logp: Vec<f64> = c.iter().map(|&i| traj.logp[i]).collect();
        let advantages: Vec<f64> = c.iter().map(|&i| adv[i]).collect();
        let returns: Vec<f64> = c.iter().map(|&i| traj.returns[i]).collect();
        let hb = HeadBatch {
            actions: &actions,
            old_logp: &old_logp,
            advantages: &advantages,
            returns: &returns,
        };
        let (p, dl, dv) = ppo_loss(&logits, &values, policy.spec.actions, &hb, cfg);
        // Chunk means -> batch mean.
        let w = c.len() as f64 / idx.len() as f64;
        parts.total += w * p.total;
        parts.policy += w * p.policy;
        parts.value += w * p.value;
        parts.entropy += w * p.entropy;
        parts.clip_fraction += w * p.clip_fraction;
        parts.approx_kl += w * p.approx_kl;
        let dl: Vec<f32> = dl.iter().map(|&v| (w * v) as f32).collect();
        let dv: Vec<f32> = dv.iter().map(|&v| (w * v) as f32).collect();
        policy.net.backward(&tape, &dl, &dv, &mut grads);
    }
    (parts, grads)
}

/// Runs `epochs` passes of shuffled minibatch Adam steps. Stats are those of
/// the last epoch. A non-finite loss or gradient aborts before the step.
pub fn ppo_update<R: Rng>(policy: &mut PolicyNet, opt: &mut Adam, traj: &Trajectory, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats, RlError> {
    if traj.is_empty() {
        return Ok(UpdateStats::default());
    }
    if traj.advantages.len() != traj.len() || traj.returns.len() != traj.len() {
        return Err(RlError::Config("trajectory has no advantages; run compute_gae first".into()));
    }
    let adv = batch_advantages(traj, cfg);
    let mut idx: Vec<usize> = (0..traj.len()).collect();
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        let mut acc = UpdateStats::default();
        for mb in idx.chunks(cfg.minibatch) {
            let (parts, mut grads) = ppo_gradient(policy, traj, &adv, mb, cfg);
            if !parts.total.is_finite() {
                return Err(RlError::NonFinite { what: format!("loss ({parts:?})") });
            }
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(RlError::NonFinite { what: "gradient".into() });
            }
            opt.step(&mut policy.net.params, &grads);
            let w = mb.len() as f64 / traj.len() as f64;
            let l = &mut acc.loss;
            l.total += w * parts.total;
            l.policy += w * parts.policy;
            l.value += w * parts.value;
            l.entropy += w * parts.entropy;
            l.clip_fraction += w * parts.clip_fraction;
            l.approx_kl += w * parts.approx_kl;
            acc.grad_norm = acc.grad_norm.max(norm);
            acc.minibatches += 1;
        }
        stats = acc;
    }
    if !policy.params_finite() {
        return Err(RlError::NonFinite { what: "parameters".into() });
    }
    Ok(stats)
}

/// Snapshot handed to the training callback after every update.
#[derive(Clone, Debug, Serialize)]
pub struct Progress {
    pub update: usize,
    pub steps: u64,
    pub episodes: usize,
    pub radius: u32,
    pub curriculum_finished: bool,
    pub rolling_reward: f64,
    pub rolling_success: f64,
    /// First env step at which the last 50 full-start episodes reached 80%
    /// success (see [`steps_to_sustained`](super::eval::steps_to_sustained)).
    pub sustained_at: Option<u64>,
    pub stats: UpdateStats,
    pub elapsed_s: f64,
}

pub type Callback<'a> = dyn FnMut(&Progress, &PolicyNet) -> Result<bool, RlError> + 'a;

pub struct TrainOptions<'a> {
    /// Starting weights (resume); a fresh network when `None`.
    pub init: Option<PolicyNet>,
    /// Called after each update; returning `true` stops training.
    pub on_update: Option<Box<Callback<'a>>>,
    /// Continue an earlier run.
    pub resume: Option<ResumeState>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            init: None,
            on_update: None,
            resume: None,
        }
    }
}

/// What a run needs besides weights to pick up where it stopped. The
/// optimizer moments are not kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub steps: u64,
    pub curriculum: CurriculumState,
    pub curriculum_done_at: Option<u64>,
}

pub const ROLLING_WINDOW: usize = 50;
pub const SUSTAINED_SUCCESS: f64 = 0.8;

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub rolling_reward: f64,
    pub radius: u32,
}

pub struct TrainOutcome {
    pub policy: PolicyNet,
    pub report: EvalReport,
    pub curve: Vec<CurvePoint>,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: Vec<UpdateStats>,
    pub steps: u64,
    pub stopped: bool,
    /// Where to pick up if the run is continued.
    pub resume: ResumeState,
}

/// Collect, estimate advantages, update; repeat until the step budget is
/// spent or the callback stops the run.
pub fn train(shared: &EnvShared, spec: &PolicySpec, cfg: &PpoConfig, mut opts: TrainOptions) -> Result<TrainOutcome, RlError> {
    cfg.validate()?;
    let actions = shared.config.action_count();
    if spec.actions != actions {
        return Err(RlError::ActionSpace { policy: spec.actions, data: actions });
    }
    let mut policy = match opts.init.take() {
        Some(p) if &p.spec == spec => p,
        Some(_) => return Err(RlError::SpecMismatch),
        None => PolicyNet::new(spec.clone(), cfg.seed)?,
    };
    let mut opt = Adam::new(policy.param_count(), cfg.lr);
    let resume = opts.resume.take().unwrap_or_else(|| ResumeState {
        steps: 0,
        curriculum: CurriculumState::new(&shared.config.curriculum, shared.max_radius),
        curriculum_done_at: None,
    });
    let offset = resume.steps;
    let curriculum = resume.curriculum;
    // A resumed run draws fresh randomness rather than replaying the first.
    let seed = cfg.seed.wrapping_add(offset);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut report = EvalReport::new(StartVisits::for_env(shared));
    let mut out = TrainOutcome {
        policy: policy.clone(),
        report: EvalReport::new(StartVisits::for_env(shared)),
        curve: Vec::new(),
        episodes: Vec::new(),
        updates: Vec::new(),
        steps: offset,
        stopped: false,
        resume: ResumeState {
            steps: offset,
            curriculum: curriculum.clone(),
            curriculum_done_at: resume.curriculum_done_at,
        },
    };
    if cfg.total_steps <= offset {
        return Ok(out);
    }
    let mut state = RolloutState::with_curriculum(shared, cfg.n_envs, seed, cfg.reward_scale, curriculum)?;
    state.steps = offset;
    if offset > 0 {
        state.curriculum_done_at = resume.curriculum_done_at;
    }
    let mut recent: VecDeque<(f64, bool)> = VecDeque::with_capacity(ROLLING_WINDOW);
    let mut full: VecDeque<bool> = VecDeque::with_capacity(ROLLING_WINDOW);
    let mut sustained_at = None;
    let t0 = Instant::now();
    let mut update = 0;
    while state.steps < cfg.total_steps {
        let len = cfg.rollout.min((cfg.total_steps - state.steps) as usize);
        let (mut traj, eps) = collect_rollout(&mut state, &policy, len, &mut rng)?;
        for e in &eps {
            if recent.len() == ROLLING_WINDOW {
                recent.pop_front();
            }
            recent.push_back((e.ret, e.success()));
            if e.full_start && sustained_at.is_none() {
                if full.len() == ROLLING_WINDOW {
                    full.pop_front();
                }
                full.push_back(e.success());
                let wins = full.iter().filter(|&&w| w).count() as f64;
                if full.len() == ROLLING_WINDOW && wins >= SUSTAINED_SUCCESS * ROLLING_WINDOW as f64 - 1e-9 {
                    sustained_at = Some(e.end_step);
                }
            }
            let rolling = recent.iter().map(|r| r.0).sum::<f64>() / recent.len() as f64;
            report.rolling_reward.push((e.end_step, rolling));
            report.start_visits.record(&e.start, shared);
        }
        out.episodes.extend(eps);
        let (adv, ret) = compute_gae(&traj, cfg.gamma, cfg.lambda);
        traj.advantages = adv;
        traj.returns = ret;
        let stats = ppo_update(&mut policy, &mut opt, &traj, cfg, &mut rng)?;
        out.updates.push(stats);
        update += 1;
        let rolling_reward = report.rolling_reward.last().map_or(0.0, |r| r.1);
        out.curve.push(CurvePoint {
            step: state.steps,
            rolling_reward,
            radius: state.curriculum.radius,
        });
        report.steps_to_curriculum = state.curriculum_done_at;
        if let Some(cb) = opts.on_update.as_mut() {
            let p = Progress {
                update,
                steps: state.steps,
                episodes: out.episodes.len(),
                radius: state.curriculum.radius,
                curriculum_finished: state.curriculum.finished,
                rolling_reward,
                rolling_success: if recent.is_empty() {
                    0.0
                } else {
                    recent.iter().filter(|r| r.1).count() as f64 / recent.len() as f64
                },
                sustained_at,
                stats,
                elapsed_s: t0.elapsed().as_secs_f64(),
            };
            if cb(&p, &policy)? {
                out.stopped = true;
                break;
            }
        }
    }
    out.steps = state.steps;
    out.resume = ResumeState {
        steps: state.steps,
        curriculum: state.curriculum,
        curriculum_done_at: state.curriculum_done_at,
    };
    out.policy = policy;
    out.report = report;
    Ok(out)
}
