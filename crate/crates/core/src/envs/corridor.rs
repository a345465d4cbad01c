use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, StepResult};

pub const CORRIDOR_ROOMS: usize = 16;
/// Signal observation, one choice per room, then the final signal decision.
pub const EPISODE_LEN: usize = CORRIDOR_ROOMS + 2;
const EPISODES_PER_META: usize = 2;

pub const ACTION_LEFT: usize = 0;
pub const ACTION_RIGHT: usize = 1;

/// Observation channels (one-hot).
const OBS_SIGNAL_RED: usize = 0;
const OBS_SIGNAL_GREEN: usize = 1;
const OBS_COLUMN_A: usize = 2;
const OBS_COLUMN_B: usize = 3;
const OBS_TERMINAL: usize = 4;

/// Memory-corridor task: the signal defines the correct final action and is
/// shown before the first room; each room has a column type that determines
/// the locally-correct side. Columns are resampled per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorridorTask {
    /// false: red signal, correct final action left; true: green, right.
    pub signal_green: bool,
    /// false: column A, go left; true: column B, go right.
    pub columns: [bool; CORRIDOR_ROOMS],
}

impl CorridorTask {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let signal_green = rng.gen::<bool>();
        let mut columns = [false; CORRIDOR_ROOMS];
        for c in columns.iter_mut() {
            *c = rng.gen::<bool>();
        }
        CorridorTask { signal_green, columns }
    }

    pub fn final_action(&self) -> usize {
        if self.signal_green {
            ACTION_RIGHT
        } else {
            ACTION_LEFT
        }
    }

    pub fn room_action(&self, room: usize) -> usize {
        if self.columns[room] {
            ACTION_RIGHT
        } else {
            ACTION_LEFT
        }
    }
}

pub(super) struct CorridorEnv {
    task: CorridorTask,
    step_in_episode: usize,
    episode_index: usize,
    meta_done: bool,
}

impl CorridorEnv {
    pub fn new() -> Self {
        CorridorEnv {
            task: CorridorTask { signal_green: false, columns: [false; CORRIDOR_ROOMS] },
            step_in_episode: 0,
            episode_index: 0,
            meta_done: true,
        }
    }

    pub fn episode_index(&self) -> usize {
        self.episode_index
    }

    pub fn reset_meta(&mut self, task: CorridorTask) -> Vec<f64> {
        self.task = task;
        self.step_in_episode = 0;
        self.episode_index = 0;
        self.meta_done = false;
        self.observation()
    }

    /// Step 0 shows the signal; steps 1..=16 show the column of the current
    /// room; step 17 shows the terminal room.
    fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; 5];
        let t = self.step_in_episode;
        if t == 0 {
            let ch = if self.task.signal_green { OBS_SIGNAL_GREEN } else { OBS_SIGNAL_RED };
            obs[ch] = 1.0;
        } else if t <= CORRIDOR_ROOMS {
            let ch = if self.task.columns[t - 1] { OBS_COLUMN_B } else { OBS_COLUMN_A };
            obs[ch] = 1.0;
        } else {
            obs[OBS_TERMINAL] = 1.0;
        }
        obs
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        if self.meta_done {
            return Err(EnvError::MetaEpisodeOver);
        }
        if action > ACTION_RIGHT {
            return Err(EnvError::InvalidAction { action, env: "memory-corridor".to_string() });
        }

        let t = self.step_in_episode;
        let reward = if t == 0 {
            // Walking in from the signal room; nothing to decide yet.
            0.0
        } else if t <= CORRIDOR_ROOMS {
            if action == self.task.room_action(t - 1) {
                0.1
            } else {
                0.0
            }
        } else if action == self.task.final_action() {
            4.0
        } else {
            -3.0
        };

        self.step_in_episode += 1;
        let done = self.step_in_episode == EPISODE_LEN;
        if done {
            self.episode_index += 1;
            if self.episode_index == EPISODES_PER_META {
                self.meta_done = true;
            } else {
                self.step_in_episode = 0;
            }
        }

        Ok(StepResult { obs: self.observation(), reward, done, meta_done: self.meta_done })
    }
}
