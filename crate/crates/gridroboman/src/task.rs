use std::fmt;
use std::str::FromStr;

use crate::board::{BoardState, Color, Pos};

/// One of the 30 gridroboman tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Robot next to the object, holding nothing.
    Touch(Color),
    /// Robot holds the object.
    Lift(Color),
    /// Robot holds `held` and stands next to `target`.
    TouchWith { held: Color, target: Color },
    Corner(Color),
    Center(Color),
    /// Objects within one cell of each other along both axes.
    Close(Color, Color),
    /// Manhattan distance between the objects above 9.
    Far(Color, Color),
    /// `top` stacked directly on `bottom`.
    Stack { top: Color, bottom: Color },
}

use Color::{Blue, Green, Red};

/// Canonical task order. The 10-, 20- and 30-task sets are its prefixes.
pub const ALL_TASKS: [Task; 30] = [
    Task::Touch(Red),
    Task::Touch(Green),
    Task::Touch(Blue),
    Task::Lift(Red),
    Task::Lift(Green),
    Task::Lift(Blue),
    Task::TouchWith { held: Red, target: Blue },
    Task::TouchWith { held: Red, target: Green },
    Task::TouchWith { held: Green, target: Red },
    Task::TouchWith { held: Green, target: Blue },
    Task::TouchWith { held: Blue, target: Red },
    Task::TouchWith { held: Blue, target: Green },
    Task::Corner(Red),
    Task::Corner(Green),
    Task::Corner(Blue),
    Task::Center(Red),
    Task::Center(Green),
    Task::Center(Blue),
    Task::Close(Red, Blue),
    Task::Close(Red, Green),
    Task::Close(Blue, Green),
    Task::Far(Red, Blue),
    Task::Far(Red, Green),
    Task::Far(Blue, Green),
    Task::Stack { top: Red, bottom: Blue },
    Task::Stack { top: Red, bottom: Green },
    Task::Stack { top: Green, bottom: Red },
    Task::Stack { top: Green, bottom: Blue },
    Task::Stack { top: Blue, bottom: Red },
    Task::Stack { top: Blue, bottom: Green },
];

/// First `n` tasks of the canonical order (`n` of 10, 20 or 30 gives the
/// standard task sets).
pub fn task_set(n: usize) -> &'static [Task] {
    &ALL_TASKS[..n.min(ALL_TASKS.len())]
}

fn adjacent(a: Pos, b: Pos) -> bool {
    (a.x - b.x).abs() + (a.y - b.y).abs() == 1
}

fn in_corner(p: Pos) -> bool {
    let edge = |v: i32| v <= 1 || v >= 5;
    edge(p.x) && edge(p.y)
}

fn in_center(p: Pos) -> bool {
    (2..=4).contains(&p.x) && (2..=4).contains(&p.y)
}

impl Task {
    pub fn index(self) -> usize {
        ALL_TASKS.iter().position(|&t| t == self).expect("every task is listed")
    }

    pub fn from_index(i: usize) -> Option<Task> {
        ALL_TASKS.get(i).copied()
    }

    /// Binary reward of being in `state` under this task.
    pub fn reward(self, state: &BoardState) -> u8 {
        let pos = |c: Color| state.object_pos(c);
        let ok = match self {
            Task::Touch(c) => state.held.is_none() && adjacent(state.robot, pos(c)),
            Task::Lift(c) => state.held == Some(c),
            Task::TouchWith { held, target } => state.held == Some(held) && adjacent(state.robot, pos(target)),
            Task::Corner(c) => in_corner(pos(c)),
            Task::Center(c) => in_center(pos(c)),
            Task::Close(a, b) => {
                let (p, q) = (pos(a), pos(b));
                (p.x - q.x).abs() <= 1 && (p.y - q.y).abs() <= 1
            }
            Task::Far(a, b) => {
                let (p, q) = (pos(a), pos(b));
                (p.x - q.x).abs() + (p.y - q.y).abs() > 9
            }
            Task::Stack { top, bottom } => {
                pos(top) == pos(bottom)
                    && state.held != Some(top)
                    && state.status(top) == 1
                    && state.status(bottom) == -1
            }
        };
        ok as u8
    }

    pub fn name(self) -> String {
        match self {
            Task::Touch(c) => format!("touch_{c}"),
            Task::Lift(c) => format!("lift_{c}"),
            Task::TouchWith { held, target } => format!("{held}_touch_{target}"),
            Task::Corner(c) => format!("{c}_corner"),
            Task::Center(c) => format!("{c}_center"),
            Task::Close(a, b) => format!("{a}_close_{b}"),
            Task::Far(a, b) => format!("{a}_far_{b}"),
            Task::Stack { top, bottom } => format!("{top}_on_{bottom}"),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownTask(pub String);

impl fmt::Display for UnknownTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown task `{}`", self.0)
    }
}

impl std::error::Error for UnknownTask {}

impl FromStr for Task {
    type Err = UnknownTask;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_TASKS
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| UnknownTask(s.to_string()))
    }
}
