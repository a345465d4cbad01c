use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvKind, StepResult};

pub const GRID_SIZE: usize = 5;
pub const EPISODE_LEN: usize = 15;
const EPISODES_PER_META: usize = 4;

pub const ACTION_UP: usize = 0;
pub const ACTION_DOWN: usize = 1;
pub const ACTION_LEFT: usize = 2;
pub const ACTION_RIGHT: usize = 3;
pub const ACTION_STAY: usize = 4;

/// Goal cell of one grid task. The agent starts in the bottom-left corner
/// (0, 0), which is never the goal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridTask {
    pub goal: (usize, usize),
}

impl GridTask {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        // Uniform over the 24 non-start cells.
        let idx = rng.gen_range(1..GRID_SIZE * GRID_SIZE);
        GridTask { goal: (idx % GRID_SIZE, idx / GRID_SIZE) }
    }

    /// Row-major cell index `y * 5 + x`; the start cell is index 0.
    pub fn cell_index(&self) -> usize {
        self.goal.1 * GRID_SIZE + self.goal.0
    }
}

/// Dense reward variant: negative Manhattan distance scaled by 0.1, so the
/// reward increases monotonically toward the goal and is 0 on it.
pub fn dense_reward(position: (usize, usize), goal: (usize, usize)) -> f64 {
    let dx = position.0.abs_diff(goal.0);
    let dy = position.1.abs_diff(goal.1);
    -0.1 * (dx + dy) as f64
}

/// Episode return of the shortest-path-then-stay policy:
/// `(15 - d) * 1 + d * (-0.1)` for Manhattan distance `d` from the start.
pub fn known_goal_episode_return(goal: (usize, usize)) -> f64 {
    let d = (goal.0 + goal.1) as f64;
    (EPISODE_LEN as f64 - d) - 0.1 * d
}

pub(super) struct GridEnv {
    kind: EnvKind,
    task: GridTask,
    pos: (usize, usize),
    step_in_episode: usize,
    episode_index: usize,
    meta_done: bool,
    prev_dense: f64,
}

impl GridEnv {
    pub fn new(kind: EnvKind) -> Self {
        debug_assert!(kind.is_grid());
        GridEnv {
            kind,
            task: GridTask { goal: (1, 0) },
            pos: (0, 0),
            step_in_episode: 0,
            episode_index: 0,
            meta_done: true,
            prev_dense: 0.0,
        }
    }

    pub fn episode_index(&self) -> usize {
        self.episode_index
    }

    pub fn reset_meta(&mut self, task: GridTask) -> Vec<f64> {
        assert_ne!(task.goal, (0, 0), "goal must differ from the start cell");
        self.task = task;
        self.pos = (0, 0);
        self.step_in_episode = 0;
        self.episode_index = 0;
        self.meta_done = false;
        self.prev_dense = 0.0;
        self.observation(true)
    }

    /// Observation layout: position scaled to [0,1], then per-variant extras
    /// that are exactly zero when inactive. Grid Show appends the goal
    /// coordinates, scaled to (0,1], on the first timestep of each episode;
    /// Grid Dense appends the previous dense reward.
    fn observation(&self, episode_start: bool) -> Vec<f64> {
        let scale = (GRID_SIZE - 1) as f64;
        let mut obs = vec![self.pos.0 as f64 / scale, self.pos.1 as f64 / scale];
        match self.kind {
            EnvKind::Grid => {}
            EnvKind::GridShow => {
                if episode_start {
                    obs.push((self.task.goal.0 + 1) as f64 / GRID_SIZE as f64);
                    obs.push((self.task.goal.1 + 1) as f64 / GRID_SIZE as f64);
                } else {
                    obs.push(0.0);
                    obs.push(0.0);
                }
            }
            EnvKind::GridDense => obs.push(self.prev_dense),
            EnvKind::MemoryCorridor => unreachable!(),
        }
        obs
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.meta_done {
            return Err(EnvError::MetaEpisodeOver);
        }
        if action > ACTION_STAY {
            return Err(EnvError::InvalidAction { action, env: self.kind.name().to_string() });
        }

        // Reward from the occupied cell, before moving.
        let reward = match self.kind {
            EnvKind::GridDense => dense_reward(self.pos, self.task.goal),
            _ => {
                if self.pos == self.task.goal {
                    1.0
                } else {
                    -0.1
                }
            }
        };
        self.prev_dense = if self.kind == EnvKind::GridDense { reward } else { 0.0 };

        // Movement clipped at the walls.
        let (x, y) = self.pos;
        self.pos = match action {
            ACTION_UP => (x, (y + 1).min(GRID_SIZE - 1)),
            ACTION_DOWN => (x, y.saturating_sub(1)),
            ACTION_LEFT => (x.saturating_sub(1), y),
            ACTION_RIGHT => ((x + 1).min(GRID_SIZE - 1), y),
            _ => (x, y),
        };

        self.step_in_episode += 1;
        let done = self.step_in_episode == EPISODE_LEN;
        let mut episode_start = false;
        if done {
            self.episode_index += 1;
            if self.episode_index == EPISODES_PER_META {
                self.meta_done = true;
            } else {
                // Episodes restart at the start cell; the task persists.
                self.pos = (0, 0);
                self.step_in_episode = 0;
                self.prev_dense = 0.0;
                episode_start = true;
            }
        }

        Ok(StepResult {
            obs: self.observation(episode_start),
            reward,
            done,
            meta_done: self.meta_done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(kind: EnvKind, goal: (usize, usize)) -> (GridEnv, Vec<f64>) {
        let mut env = GridEnv::new(kind);
        let obs = env.reset_meta(GridTask { goal });
        (env, obs)
    }

    #[test]
    fn reset_starts_bottom_left_without_extras() {
        let (_, obs) = fresh(EnvKind::Grid, (2, 2));
        assert_eq!(obs, vec![0.0, 0.0]);
    }

    #[test]
    fn grid_show_reveals_goal_only_at_episode_starts() {
        let (mut env, obs) = fresh(EnvKind::GridShow, (3, 1));
        assert!(obs[2] > 0.0 && obs[3] > 0.0, "goal visible at reset: {obs:?}");
        for t in 0..EPISODE_LEN {
            let r = env.step(ACTION_STAY).unwrap();
            if t + 1 == EPISODE_LEN {
                // First observation of episode 2 shows the goal again.
                assert!(r.done);
                assert!(r.obs[2] > 0.0 && r.obs[3] > 0.0);
            } else {
                assert_eq!(&r.obs[2..], &[0.0, 0.0]);
            }
        }
    }

    #[test]
    fn step_up_from_start_costs_penalty() {
        let (mut env, _) = fresh(EnvKind::Grid, (2, 2));
        let r = env.step(ACTION_UP).unwrap();
        assert_eq!(r.reward, -0.1);
        assert_eq!(r.obs, vec![0.0, 0.25]);
    }

    #[test]
    fn staying_on_goal_earns_reward() {
        let (mut env, _) = fresh(EnvKind::Grid, (0, 1));
        env.step(ACTION_UP).unwrap();
        let r = env.step(ACTION_STAY).unwrap();
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn walls_clip_movement() {
        let (mut env, _) = fresh(EnvKind::Grid, (4, 4));
        let r = env.step(ACTION_DOWN).unwrap();
        assert_eq!(r.obs, vec![0.0, 0.0]);
        let r = env.step(ACTION_LEFT).unwrap();
        assert_eq!(r.obs, vec![0.0, 0.0]);
        for _ in 0..6 {
            env.step(ACTION_RIGHT).unwrap();
        }
        // x clipped at 4 even after 6 moves right
        let r = env.step(ACTION_STAY).unwrap();
        assert_eq!(r.obs[0], 1.0);
    }

    #[test]
    fn meta_episode_is_four_episodes_of_fifteen_steps() {
        let (mut env, _) = fresh(EnvKind::Grid, (2, 3));
        let mut frames = 0;
        loop {
            let r = env.step(ACTION_STAY).unwrap();
            frames += 1;
            assert_eq!(r.done, frames % EPISODE_LEN == 0);
            if r.meta_done {
                break;
            }
        }
        assert_eq!(frames, 60);
        assert!(matches!(env.step(ACTION_STAY), Err(EnvError::MetaEpisodeOver)));
    }

    #[test]
    fn episodes_restart_at_start_cell_with_task_fixed() {
        let (mut env, _) = fresh(EnvKind::Grid, (1, 0));
        env.step(ACTION_RIGHT).unwrap();
        let mut last = None;
        for _ in 0..EPISODE_LEN - 1 {
            last = Some(env.step(ACTION_STAY).unwrap());
        }
        let r = last.unwrap();
        assert!(r.done && !r.meta_done);
        assert_eq!(r.obs, vec![0.0, 0.0], "restarted at the start cell");
        assert_eq!(env.task.goal, (1, 0));
        // Reward for the last step of episode 1 came from the goal cell.
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn dense_reward_closed_form() {
        assert_eq!(dense_reward((2, 2), (2, 2)), 0.0);
        assert_eq!(dense_reward((0, 0), (4, 4)), -0.8);
        // Strictly increasing along a monotone path toward the goal.
        let goal = (4, 3);
        let mut prev = dense_reward((0, 0), goal);
        for x in 1..=4 {
            let r = dense_reward((x, 0), goal);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn dense_variant_replaces_reward_and_observes_it() {
        let (mut env, obs) = fresh(EnvKind::GridDense, (2, 0));
        assert_eq!(obs, vec![0.0, 0.0, 0.0]);
        let r = env.step(ACTION_RIGHT).unwrap();
        assert_eq!(r.reward, -0.2); // distance 2 from the start cell
        assert_eq!(r.obs[2], -0.2); // previous reward observable
        let r = env.step(ACTION_RIGHT).unwrap();
        assert_eq!(r.reward, -0.1);
        let r = env.step(ACTION_STAY).unwrap();
        assert_eq!(r.reward, 0.0, "standing on the goal");
    }

    #[test]
    fn shortest_path_then_stay_matches_closed_form() {
        for idx in 1..25 {
            let goal = (idx % 5, idx / 5);
            let (mut env, _) = fresh(EnvKind::Grid, goal);
            let mut total = 0.0;
            for _ in 0..goal.0 {
                total += env.step(ACTION_RIGHT).unwrap().reward;
            }
            for _ in 0..goal.1 {
                total += env.step(ACTION_UP).unwrap().reward;
            }
            for _ in 0..EPISODE_LEN - goal.0 - goal.1 {
                let r = env.step(ACTION_STAY).unwrap();
                total += r.reward;
                if r.done {
                    break;
                }
            }
            let want = known_goal_episode_return(goal);
            assert!((total - want).abs() < 1e-12, "goal {goal:?}: {total} vs {want}");
        }
    }

    #[test]
    fn known_goal_return_examples() {
        assert!((known_goal_episode_return((2, 2)) - 10.6).abs() < 1e-12);
        assert!((known_goal_episode_return((4, 4)) - 6.2).abs() < 1e-12);
        assert!((known_goal_episode_return((1, 0)) - 13.9).abs() < 1e-12);
    }
}
