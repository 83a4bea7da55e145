use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::config::CurriculumConfig;

/// Start-distance schedule. Radius is measured in actions: grid steps plus
/// heading steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub radius: u32,
    pub max_radius: u32,
    pub window: VecDeque<bool>,
    pub window_size: usize,
    pub threshold: f64,
    pub finished: bool,
}

impl CurriculumState {
    /// A disabled curriculum starts finished: every start is uniform.
    pub fn new(cfg: &CurriculumConfig, max_radius: u32) -> Self {
        let radius = cfg.start_radius.max(1);
        Self {
            radius,
            max_radius,
            window: VecDeque::with_capacity(cfg.window),
            window_size: cfg.window.max(1),
            threshold: cfg.threshold,
            finished: !cfg.enabled || radius > max_radius,
        }
    }

    pub fn finished(max_radius: u32) -> Self {
        Self {
            finished: true,
            ..Self::new(&CurriculumConfig::default(), max_radius)
        }
    }

    pub fn success_rate(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        self.window.iter().filter(|&&s| s).count() as f64 / self.window.len() as f64
    }

    /// Records an episode outcome; returns true when the radius advanced.
    pub fn record(&mut self, success: bool) -> bool {
        if self.finished {
            return false;
        }
        if self.window.len() == self.window_size {
            self.window.pop_front();
        }
        self.window.push_back(success);
        if self.window.len() == self.window_size && self.success_rate() >= self.threshold {
            self.radius += 1;
            self.window.clear();
            if self.radius > self.max_radius {
                self.finished = true;
            }
            return true;
        }
        false
    }
}

pub fn curriculum_update(c: &CurriculumState, episode_success: bool) -> CurriculumState {
    let mut next = c.clone();
    next.record(episode_success);
    next
}
