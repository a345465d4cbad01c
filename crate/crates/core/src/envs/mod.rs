//! Task-distribution environments with meta-episode semantics: three 5x5
//! grid-worlds and a symbolic memory corridor, plus reference oracles used
//! by the verification suites.
//!
//! Reward timing for grids follows the occupancy convention: the reward for
//! a step is determined by the cell the agent acts from, so a shortest-path
//! policy pays `-0.1` for each of its `d` moves and collects `1` for the
//! remaining `15 - d` steps on the goal.

mod corridor;
mod grid;

pub use corridor::{CorridorTask, CORRIDOR_ROOMS};
pub use grid::{dense_reward, known_goal_episode_return, GridTask, GRID_SIZE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::Rng;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step() called after the meta-episode finished")]
    MetaEpisodeOver,
    #[error("invalid action {action} for {env}")]
    InvalidAction { action: usize, env: String },
    #[error("unknown environment name: {0}")]
    UnknownEnv(String),
}

/// The four environment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    Grid,
    GridShow,
    GridDense,
    MemoryCorridor,
}

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self, EnvError> {
        match name {
            "grid" => Ok(EnvKind::Grid),
            "grid-show" => Ok(EnvKind::GridShow),
            "grid-dense" => Ok(EnvKind::GridDense),
            "memory-corridor" => Ok(EnvKind::MemoryCorridor),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Grid => "grid",
            EnvKind::GridShow => "grid-show",
            EnvKind::GridDense => "grid-dense",
            EnvKind::MemoryCorridor => "memory-corridor",
        }
    }

    pub fn is_grid(&self) -> bool {
        !matches!(self, EnvKind::MemoryCorridor)
    }

    /// Observation width is fixed per environment.
    pub fn obs_width(&self) -> usize {
        match self {
            EnvKind::Grid => 2,
            EnvKind::GridShow => 4,
            EnvKind::GridDense => 3,
            EnvKind::MemoryCorridor => 5,
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::MemoryCorridor => 2,
            _ => 5,
        }
    }

    /// Width of the ground-truth task one-hot.
    pub fn label_width(&self) -> usize {
        match self {
            EnvKind::MemoryCorridor => 2,
            _ => 25,
        }
    }

    /// Number of distinct tasks in the distribution (goal cells or signals).
    pub fn task_count(&self) -> usize {
        match self {
            EnvKind::MemoryCorridor => 2,
            _ => 24,
        }
    }

    pub fn episode_len(&self) -> usize {
        match self {
            EnvKind::MemoryCorridor => corridor::EPISODE_LEN,
            _ => grid::EPISODE_LEN,
        }
    }

    pub fn episodes_per_meta(&self) -> usize {
        match self {
            EnvKind::MemoryCorridor => 2,
            _ => 4,
        }
    }

    pub fn meta_len(&self) -> usize {
        self.episode_len() * self.episodes_per_meta()
    }
}

/// A sampled MDP from the task distribution. Held constant for one
/// meta-episode and never observable by the acting policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Task {
    Grid(GridTask),
    Corridor(CorridorTask),
}

impl Task {
    /// Index into the task one-hot / embedding table.
    pub fn label_index(&self) -> usize {
        match self {
            Task::Grid(t) => t.cell_index(),
            Task::Corridor(t) => usize::from(t.signal_green),
        }
    }

    pub fn one_hot(&self, width: usize) -> Vec<f64> {
        let mut v = vec![0.0; width];
        v[self.label_index()] = 1.0;
        v
    }
}

/// Uniform sample from the task distribution.
pub fn sample_task<R: Rng>(kind: EnvKind, rng: &mut R) -> Task {
    match kind {
        EnvKind::MemoryCorridor => Task::Corridor(CorridorTask::sample(rng)),
        _ => Task::Grid(GridTask::sample(rng)),
    }
}

/// Result of one environment step. On inner-episode end the observation is
/// already the next episode's first observation (the task persists and the
/// agent restarts); on meta-episode end it is the final observation.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub meta_done: bool,
}

/// One transition, exportable as a line-delimited record for debugging.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition {
    pub episode_index: usize,
    pub step: usize,
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

enum EnvState {
    Grid(grid::GridEnv),
    Corridor(corridor::CorridorEnv),
}

/// A single environment instance bound to one task per meta-episode.
pub struct Env {
    kind: EnvKind,
    state: EnvState,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        let state = match kind {
            EnvKind::MemoryCorridor => EnvState::Corridor(corridor::CorridorEnv::new()),
            _ => EnvState::Grid(grid::GridEnv::new(kind)),
        };
        Env { kind, state }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    /// Start a fresh meta-episode on the given task. Position returns to the
    /// start cell, step counters and the episode index reset to zero.
    pub fn reset_meta(&mut self, task: &Task) -> Vec<f64> {
        match (&mut self.state, task) {
            (EnvState::Grid(env), Task::Grid(t)) => env.reset_meta(*t),
            (EnvState::Corridor(env), Task::Corridor(t)) => env.reset_meta(t.clone()),
            _ => panic!("task kind does not match environment kind"),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        match &mut self.state {
            EnvState::Grid(env) => env.step(action),
            EnvState::Corridor(env) => env.step(action),
        }
    }

    /// Episode index within the current meta-episode.
    pub fn episode_index(&self) -> usize {
        match &self.state {
            EnvState::Grid(env) => env.episode_index(),
            EnvState::Corridor(env) => env.episode_index(),
        }
    }
}

/// Serialize transitions as line-delimited JSON records.
pub fn write_transitions<W: std::io::Write>(
    out: &mut W,
    transitions: &[Transition],
) -> std::io::Result<()> {
    for t in transitions {
        serde_json::to_writer(&mut *out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn grid_task_sampling_is_uniform_over_24_cells() {
        let mut rng = stream(0, Stream::Task, &[0]);
        let n = 100_000;
        let mut counts = [0usize; 25];
        for _ in 0..n {
            let Task::Grid(t) = sample_task(EnvKind::Grid, &mut rng) else { unreachable!() };
            counts[t.cell_index()] += 1;
        }
        assert_eq!(counts[0], 0, "start cell must never be the goal");
        let p = 1.0 / 24.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for (i, &c) in counts.iter().enumerate().skip(1) {
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * se, "cell {i}: freq {freq}");
        }
    }

    #[test]
    fn corridor_signal_is_balanced() {
        let mut rng = stream(0, Stream::Task, &[1]);
        let n = 100_000;
        let mut green = 0usize;
        for _ in 0..n {
            let Task::Corridor(t) = sample_task(EnvKind::MemoryCorridor, &mut rng) else {
                unreachable!()
            };
            green += usize::from(t.signal_green);
        }
        let freq = green as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * se, "green freq {freq}");
    }

    #[test]
    fn seeded_sampler_reproduces_task_sequence() {
        let draw = || {
            let mut rng = stream(9, Stream::Task, &[4]);
            (0..32).map(|_| sample_task(EnvKind::Grid, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn task_label_is_one_hot() {
        let mut rng = stream(0, Stream::Task, &[2]);
        for _ in 0..100 {
            let t = sample_task(EnvKind::Grid, &mut rng);
            let v = t.one_hot(EnvKind::Grid.label_width());
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 24);
        }
    }

    #[test]
    fn meta_len_matches_frames_per_meta_episode() {
        assert_eq!(EnvKind::Grid.meta_len(), 60);
        assert_eq!(EnvKind::GridShow.meta_len(), 60);
        assert_eq!(EnvKind::GridDense.meta_len(), 60);
        assert_eq!(EnvKind::MemoryCorridor.meta_len(), 36);
    }
}
