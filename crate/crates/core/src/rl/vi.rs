//! Tabular solutions of the grid MDP from its transition model, no pixels.

use crate::env::{GridAction, GridModel};

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    /// Optimal value per state index; 0 for terminal (non-free) states.
    pub values: Vec<f64>,
    /// Greedy action per state index, lowest index on ties.
    pub policy: Vec<usize>,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

pub const VI_TOLERANCE: f64 = 1e-9;
const MAX_SWEEPS: usize = 100_000;

fn backup(m: &GridModel, v: &[f64], s: usize, a: usize, gamma: f64) -> f64 {
    let t = m.transition(&m.state(s), GridAction::ALL[a]);
    match (t.terminated, t.next) {
        (false, Some(n)) => t.reward + gamma * v[n],
        _ => t.reward,
    }
}

/// Synchronous Bellman sweeps until the residual drops below 1e-9.
pub fn value_iteration(m: &GridModel, gamma: f64) -> ValueIteration {
    let n = m.state_count();
    let free: Vec<bool> = (0..n).map(|s| m.is_free(&m.state(s))).collect();
    let mut v = vec![0.0; n];
    let mut residuals = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let mut next = vec![0.0; n];
        let mut res: f64 = 0.0;
        for s in (0..n).filter(|&s| free[s]) {
            next[s] = (0..GridAction::ALL.len()).map(|a| backup(m, &v, s, a, gamma)).fold(f64::NEG_INFINITY, f64::max);
            res = res.max((next[s] - v[s]).abs());
        }
        v = next;
        residuals.push(res);
        if res < VI_TOLERANCE {
            break;
        }
    }
    let policy = (0..n)
        .map(|s| {
            if !free[s] {
                return 0;
            }
            let q: Vec<f64> = (0..GridAction::ALL.len()).map(|a| backup(m, &v, s, a, gamma)).collect();
            let best = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // Tie tolerance absorbs rounding between equal-length paths.
            q.iter().position(|&x| x >= best - 1e-9).unwrap()
        })
        .collect();
    ValueIteration { values: v, policy, residuals }
}

/// Expected return of a stochastic policy over `horizon` steps:
/// `V_h(s) = sum_a pi(a|s) [r + gamma V_{h-1}(s')]`, `V_0 = 0`.
pub fn evaluate_policy_finite(m: &GridModel, pi: impl Fn(usize) -> Vec<f64>, horizon: u32, gamma: f64) -> Vec<f64> {
    let n = m.state_count();
    let probs: Vec<Vec<f64>> = (0..n).map(&pi).collect();
    let free: Vec<bool> = (0..n).map(|s| m.is_free(&m.state(s))).collect();
    let mut v = vec![0.0; n];
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for s in (0..n).filter(|&s| free[s]) {
            next[s] = probs[s].iter().enumerate().map(|(a, p)| p * backup(m, &v, s, a, gamma)).sum();
        }
        v = next;
    }
    v
}

/// Follows a deterministic action table from `start`; returns whether the
/// goal is reached within `cap` steps and the steps taken.
pub fn follow_table(m: &GridModel, table: &[usize], start: usize, cap: u32) -> (bool, u32) {
    let mut s = start;
    for k in 1..=cap {
        let t = m.transition(&m.state(s), GridAction::ALL[table[s]]);
        if t.terminated {
            return (m.is_goal(&t.state), k);
        }
        s = t.next.expect("non-terminal successor is on the lattice");
    }
    (false, cap)
}
