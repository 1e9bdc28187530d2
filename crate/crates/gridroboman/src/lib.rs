//! Gridroboman: a 7×7 grid with a robot and three coloured objects that
//! can be moved, lifted and stacked. Thirty tasks share the same dynamics
//! and differ only in their binary per-step reward, so the task cannot be
//! read off the observation.
//!
//! ```
//! use gridroboman::{Action, BoardState, Task};
//! use rand::SeedableRng;
//!
//! let mut rng = rand::rngs::StdRng::seed_from_u64(0);
//! let mut state = BoardState::reset(Task::Lift(gridroboman::Color::Red), &mut rng);
//! let out = state.step(Action::Skip).unwrap();
//! assert!(out.reward <= 1);
//! ```

mod board;
mod task;

pub use board::{
    Action, BoardState, Color, EnvError, ObsScale, Pos, StepResult, BOARD_SIZE, EPISODE_LEN, NUM_ACTIONS,
    OBS_DIM,
};
pub use task::{task_set, Task, UnknownTask, ALL_TASKS};
