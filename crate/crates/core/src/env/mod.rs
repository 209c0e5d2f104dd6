//! Deterministic grid navigation with rendered image observations.
//!
//! The agent starts in `start_cell`, moves one cell per decision step and
//! receives `goal_reward` on entering `goal_cell`. Every step, including the
//! one that reaches the goal, costs `step_penalty`. Moves that would leave the
//! grid keep the agent in place. Episodes end at the goal or after
//! `max_steps` decisions.

mod render;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use render::{render, ThemeStyle, THEME_TABLE};

/// Grid coordinate as `(row, col)`, row 0 at the top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl Cell {
    pub fn row(self) -> usize {
        self.0
    }

    pub fn col(self) -> usize {
        self.1
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.0.abs_diff(other.0) + self.1.abs_diff(other.1)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Theme {
    Target,
    SourceVariant,
    Thermal,
}

impl Theme {
    pub fn name(self) -> &'static str {
        match self {
            Theme::Target => "Target",
            Theme::SourceVariant => "SourceVariant",
            Theme::Thermal => "Thermal",
        }
    }

    pub fn is_source(self) -> bool {
        !matches!(self, Theme::Target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub start_cell: Cell,
    pub goal_cell: Cell,
    pub max_steps: usize,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub theme: Theme,
    pub obs_height: usize,
    pub obs_width: usize,
    pub gamma: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 5,
            start_cell: Cell(0, 0),
            goal_cell: Cell(4, 4),
            max_steps: 512,
            step_penalty: 0.001,
            goal_reward: 1.0,
            theme: Theme::Target,
            obs_height: 64,
            obs_width: 64,
            gamma: 0.99,
        }
    }
}

impl GridConfig {
    pub fn with_theme(mut self, theme: Theme) -> Self {
        self.theme = theme;
        self
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.0 < self.rows && cell.1 < self.cols
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.rows == 0 || self.cols == 0 {
            return fail(format!("grid must be non-empty, got {}x{}", self.rows, self.cols));
        }
        if !self.contains(self.start_cell) {
            return fail(format!("start_cell {} outside the grid", self.start_cell));
        }
        if !self.contains(self.goal_cell) {
            return fail(format!("goal_cell {} outside the grid", self.goal_cell));
        }
        if self.start_cell == self.goal_cell {
            return fail(format!("start_cell and goal_cell coincide at {}", self.start_cell));
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive".into());
        }
        if !(self.step_penalty >= 0.0 && self.step_penalty.is_finite()) {
            return fail(format!("step_penalty must be nonnegative, got {}", self.step_penalty));
        }
        if !self.goal_reward.is_finite() {
            return fail("goal_reward must be finite".into());
        }
        if self.obs_height == 0 || self.obs_width == 0 {
            return fail("observation dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        Ok(())
    }

    /// Number of decision steps on a shortest path between two cells.
    pub fn shortest_distance(&self, from: Cell) -> usize {
        from.manhattan(self.goal_cell)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    North = 0,
    South = 1,
    East = 2,
    West = 3,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::North, Action::South, Action::East, Action::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::North => (-1, 0),
            Action::South => (1, 0),
            Action::East => (0, 1),
            Action::West => (0, -1),
        }
    }
}

/// An RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub pixels: Arc<[u8]>,
}

impl Observation {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        let expected = height * width * Self::CHANNELS;
        if pixels.len() != expected {
            return Err(Error::shape(
                format!("{expected} bytes for {height}x{width}x3"),
                format!("{} bytes", pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels: pixels.into(),
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

impl fmt::Debug for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observation")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub agent_cell: Cell,
    pub steps_taken: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
}

/// A validated grid environment. All methods are pure over explicit state.
#[derive(Debug, Clone)]
pub struct GridEnv {
    config: GridConfig,
}

impl GridEnv {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn reset(&self) -> (EnvState, Observation) {
        let state = EnvState {
            agent_cell: self.config.start_cell,
            steps_taken: 0,
        };
        let obs = self.render(&state);
        (state, obs)
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        state.agent_cell == self.config.goal_cell || state.steps_taken >= self.config.max_steps
    }

    /// Cell reached by taking `action` from `cell`, clamped to the grid.
    pub fn next_cell(&self, cell: Cell, action: Action) -> Cell {
        let (dr, dc) = action.delta();
        let row = cell.0 as isize + dr;
        let col = cell.1 as isize + dc;
        if row < 0 || col < 0 || row as usize >= self.config.rows || col as usize >= self.config.cols
        {
            cell
        } else {
            Cell(row as usize, col as usize)
        }
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<(EnvState, StepResult)> {
        if self.is_terminal(state) {
            return Err(Error::Usage(format!(
                "step called on a terminal state (agent {}, {} steps)",
                state.agent_cell, state.steps_taken
            )));
        }
        let next = EnvState {
            agent_cell: self.next_cell(state.agent_cell, action),
            steps_taken: state.steps_taken + 1,
        };
        let reached_goal = next.agent_cell == self.config.goal_cell;
        let mut reward = -self.config.step_penalty;
        if reached_goal {
            reward += self.config.goal_reward;
        }
        let done = reached_goal || next.steps_taken == self.config.max_steps;
        let observation = self.render(&next);
        Ok((
            next,
            StepResult {
                observation,
                reward,
                done,
                reached_goal,
            },
        ))
    }

    pub fn render(&self, state: &EnvState) -> Observation {
        render(state, &self.config)
    }

    /// Shortest-path action toward the goal, ties broken in the order
    /// North, East, South, West.
    pub fn greedy_action(&self, cell: Cell) -> Action {
        const ORDER: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];
        let here = cell.manhattan(self.config.goal_cell);
        ORDER
            .into_iter()
            .find(|&a| self.next_cell(cell, a).manhattan(self.config.goal_cell) < here)
            // Only reachable when already at the goal.
            .unwrap_or(Action::North)
    }

    /// Quasi-optimal scripted demonstrator: greedy with probability
    /// `1 - epsilon`, uniformly random otherwise.
    pub fn demonstrator_action<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        epsilon: f64,
        rng: &mut R,
    ) -> Action {
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            Action::ALL[rng.gen_range(0..Action::COUNT)]
        } else {
            self.greedy_action(state.agent_cell)
        }
    }
}
