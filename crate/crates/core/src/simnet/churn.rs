//! Participation schedules: which nodes are awake at each tick.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChurnModel {
    /// Nobody changes state.
    Static,
    /// Each node is independently awake with probability `awake_prob` at every tick.
    Bernoulli { awake_prob: f64 },
    /// The awake count follows `n * (mean + amplitude * sin(2 pi t / period))`;
    /// nodes are added or removed at random to track it.
    Sinusoidal { mean: f64, amplitude: f64, period: f64 },
    /// Each node flips between awake and asleep with probability `flip_prob` per tick.
    Flip { flip_prob: f64 },
}

fn default_mean() -> f64 {
    0.5
}

fn default_amplitude() -> f64 {
    0.2
}

fn default_period() -> f64 {
    120.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "StageSpec", into = "StageSpec")]
pub struct Stage {
    /// Length in ticks; the last stage may omit it to run indefinitely.
    pub ticks: Option<u64>,
    pub model: ChurnModel,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
enum StageSpec {
    Static {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
    },
    Bernoulli {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
        awake_prob: f64,
    },
    Sinusoidal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
        #[serde(default = "default_mean")]
        mean: f64,
        #[serde(default = "default_amplitude")]
        amplitude: f64,
        #[serde(default = "default_period")]
        period: f64,
    },
    Flip {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ticks: Option<u64>,
        flip_prob: f64,
    },
}

impl From<StageSpec> for Stage {
    fn from(s: StageSpec) -> Self {
        match s {
            StageSpec::Static { ticks } => Stage { ticks, model: ChurnModel::Static },
            StageSpec::Bernoulli { ticks, awake_prob } => Stage { ticks, model: ChurnModel::Bernoulli { awake_prob } },
            StageSpec::Sinusoidal { ticks, mean, amplitude, period } => {
                Stage { ticks, model: ChurnModel::Sinusoidal { mean, amplitude, period } }
            }
            StageSpec::Flip { ticks, flip_prob } => Stage { ticks, model: ChurnModel::Flip { flip_prob } },
        }
    }
}

impl From<Stage> for StageSpec {
    fn from(s: Stage) -> Self {
        let ticks = s.ticks;
        match s.model {
            ChurnModel::Static => StageSpec::Static { ticks },
            ChurnModel::Bernoulli { awake_prob } => StageSpec::Bernoulli { ticks, awake_prob },
            ChurnModel::Sinusoidal { mean, amplitude, period } => StageSpec::Sinusoidal { ticks, mean, amplitude, period },
            ChurnModel::Flip { flip_prob } => StageSpec::Flip { ticks, flip_prob },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSchedule {
    /// Nodes `0..initial_awake` start awake; defaults to everyone.
    #[serde(default)]
    pub initial_awake: Option<usize>,
    #[serde(default)]
    pub stages: Vec<Stage>,
}

impl Default for ChurnSchedule {
    fn default() -> Self {
        ChurnSchedule { initial_awake: None, stages: vec![Stage { ticks: None, model: ChurnModel::Static }] }
    }
}

impl ChurnSchedule {
    pub fn single(model: ChurnModel) -> Self {
        ChurnSchedule { initial_awake: None, stages: vec![Stage { ticks: None, model }] }
    }

    /// Stage index and model in force at `tick`.
    pub fn stage_at(&self, tick: u64) -> (usize, ChurnModel) {
        let mut start = 0u64;
        for (i, s) in self.stages.iter().enumerate() {
            match s.ticks {
                Some(len) if tick >= start + len => start += len,
                _ => return (i, s.model),
            }
        }
        match self.stages.last() {
            Some(s) => (self.stages.len() - 1, s.model),
            None => (0, ChurnModel::Static),
        }
    }
}

/// Evolves the awake set tick by tick.
#[derive(Clone, Debug)]
pub struct ChurnProcess {
    schedule: ChurnSchedule,
    awake: Vec<bool>,
    rng: ChaCha8Rng,
    tick: Option<u64>,
}

impl ChurnProcess {
    pub fn new(n: usize, schedule: ChurnSchedule, rng: ChaCha8Rng) -> Self {
        let k = schedule.initial_awake.unwrap_or(n).min(n);
        let awake = (0..n).map(|i| i < k).collect();
        ChurnProcess { schedule, awake, rng, tick: None }
    }

    pub fn awake(&self) -> &[bool] {
        &self.awake
    }

    pub fn schedule(&self) -> &ChurnSchedule {
        &self.schedule
    }

    /// Advances to `tick` (ticks must be visited in order) and returns the awake set.
    pub fn advance(&mut self, tick: u64) -> &[bool] {
        if self.tick.is_some_and(|t| t >= tick) {
            return &self.awake;
        }
        let first = self.tick.is_none();
        self.tick = Some(tick);
        if first && tick == 0 {
            return &self.awake;
        }
        let (_, model) = self.schedule.stage_at(tick);
        let n = self.awake.len();
        match model {
            ChurnModel::Static => {}
            ChurnModel::Bernoulli { awake_prob } => {
                for a in self.awake.iter_mut() {
                    *a = self.rng.gen_bool(awake_prob.clamp(0.0, 1.0));
                }
            }
            ChurnModel::Flip { flip_prob } => {
                for a in self.awake.iter_mut() {
                    if self.rng.gen_bool(flip_prob.clamp(0.0, 1.0)) {
                        *a = !*a;
                    }
                }
            }
            ChurnModel::Sinusoidal { mean, amplitude, period } => {
                let phase = 2.0 * std::f64::consts::PI * tick as f64 / period;
                let frac = (mean + amplitude * phase.sin()).clamp(0.0, 1.0);
                let target = (n as f64 * frac).round() as usize;
                let current = self.awake.iter().filter(|&&a| a).count();
                let (want, count) = if target > current { (false, target - current) } else { (true, current - target) };
                let mut pool: Vec<usize> = (0..n).filter(|&i| self.awake[i] == want).collect();
                pool.shuffle(&mut self.rng);
                for &i in pool.iter().take(count) {
                    self.awake[i] = !want;
                }
            }
        }
        &self.awake
    }
}
