use std::fmt;

use rand::seq::index::sample;
use rand::Rng;

use crate::task::Task;

pub const BOARD_SIZE: i32 = 7;
pub const EPISODE_LEN: u32 = 50;
pub const OBS_DIM: usize = 11;
pub const NUM_ACTIONS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Lift,
    Put,
    Skip,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Lift,
        Action::Put,
        Action::Skip,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> Option<(i32, i32)> {
        match self {
            Action::Up => Some((0, 1)),
            Action::Down => Some((0, -1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn on_board(self) -> bool {
        (0..BOARD_SIZE).contains(&self.x) && (0..BOARD_SIZE).contains(&self.y)
    }
}

/// How observation coordinates are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObsScale {
    /// Coordinates divided by 6 so they lie in [0, 1].
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvError {
    EpisodeOver,
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::EpisodeOver => write!(f, "step called after the episode ended"),
        }
    }
}

impl std::error::Error for EnvError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepResult {
    pub reward: u8,
    pub done: bool,
}

/// Full environment state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoardState {
    pub robot: Pos,
    /// Cell of each object; a held object shares the robot's cell.
    pub objects: [Pos; 3],
    /// −1 under another object, 0 on the board, +1 held or on top.
    pub statuses: [i8; 3],
    pub held: Option<Color>,
    pub step_count: u32,
    pub task: Task,
}

impl BoardState {
    /// Random start: robot and objects on four distinct cells.
    pub fn reset<R: Rng + ?Sized>(task: Task, rng: &mut R) -> Self {
        let n = (BOARD_SIZE * BOARD_SIZE) as usize;
        let cells = sample(rng, n, 4).into_vec();
        let pos = |c: usize| Pos::new(c as i32 % BOARD_SIZE, c as i32 / BOARD_SIZE);
        Self {
            robot: pos(cells[0]),
            objects: [pos(cells[1]), pos(cells[2]), pos(cells[3])],
            statuses: [0; 3],
            held: None,
            step_count: 0,
            task,
        }
    }

    pub fn object_pos(&self, c: Color) -> Pos {
        self.objects[c.index()]
    }

    pub fn status(&self, c: Color) -> i8 {
        self.statuses[c.index()]
    }

    pub fn is_done(&self) -> bool {
        self.step_count >= EPISODE_LEN
    }

    /// Objects resting at `p` that are not held.
    fn resting_at(&self, p: Pos) -> Vec<Color> {
        Color::ALL
            .into_iter()
            .filter(|&c| self.held != Some(c) && self.objects[c.index()] == p)
            .collect()
    }

    /// Apply the transition rules only; no reward, no step counting.
    pub fn apply(&mut self, action: Action) {
        if let Some((dx, dy)) = action.delta() {
            let next = Pos::new(self.robot.x + dx, self.robot.y + dy);
            if next.on_board() {
                self.robot = next;
                if let Some(h) = self.held {
                    self.objects[h.index()] = next;
                }
            }
            return;
        }
        match action {
            Action::Lift => {
                if self.held.is_some() {
                    return;
                }
                let here = self.resting_at(self.robot);
                let target = match here.as_slice() {
                    [] => return,
                    [one] => *one,
                    many => {
                        let top = *many.iter().find(|&&c| self.status(c) == 1).expect("stack has a top");
                        for &c in many {
                            if c != top {
                                self.statuses[c.index()] = 0;
                            }
                        }
                        top
                    }
                };
                self.held = Some(target);
                self.statuses[target.index()] = 1;
            }
            Action::Put => {
                let Some(h) = self.held else { return };
                let here = self.resting_at(self.robot);
                match here.as_slice() {
                    [] => self.statuses[h.index()] = 0,
                    [below] => {
                        self.statuses[below.index()] = -1;
                        self.statuses[h.index()] = 1;
                    }
                    _ => return,
                }
                self.held = None;
            }
            _ => {}
        }
    }

    /// One environment step.
    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeOver);
        }
        self.apply(action);
        self.step_count += 1;
        Ok(StepResult {
            reward: self.task.reward(self),
            done: self.is_done(),
        })
    }

    /// Red xy, green xy, blue xy, robot xy, then the three statuses.
    pub fn observe(&self, scale: ObsScale) -> [f32; OBS_DIM] {
        let k = match scale {
            ObsScale::Normalized => 1.0 / (BOARD_SIZE - 1) as f32,
            ObsScale::Raw => 1.0,
        };
        let mut o = [0.0; OBS_DIM];
        for (i, p) in self.objects.iter().chain(std::iter::once(&self.robot)).enumerate() {
            o[2 * i] = p.x as f32 * k;
            o[2 * i + 1] = p.y as f32 * k;
        }
        for (i, &s) in self.statuses.iter().enumerate() {
            o[8 + i] = s as f32;
        }
        o
    }

    /// Every structural invariant of a reachable state.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !self.robot.on_board() || self.objects.iter().any(|p| !p.on_board()) {
            return Err("entity off the board".into());
        }
        if self.step_count > EPISODE_LEN {
            return Err(format!("step count {} beyond episode end", self.step_count));
        }
        if let Some(h) = self.held {
            if self.status(h) != 1 {
                return Err(format!("held {h} has status {}", self.status(h)));
            }
            if self.object_pos(h) != self.robot {
                return Err(format!("held {h} is not with the robot"));
            }
        }
        for c in Color::ALL {
            let s = self.status(c);
            if !(-1..=1).contains(&s) {
                return Err(format!("{c} has status {s}"));
            }
            if self.held == Some(c) {
                continue;
            }
            let others: Vec<Color> = self
                .resting_at(self.object_pos(c))
                .into_iter()
                .filter(|&o| o != c)
                .collect();
            match (others.as_slice(), s) {
                ([], 0) => {}
                ([o], 1) if self.status(*o) == -1 => {}
                ([o], -1) if self.status(*o) == 1 => {}
                _ => {
                    return Err(format!(
                        "{c} with status {s} shares its cell with {} resting objects",
                        others.len()
                    ))
                }
            }
        }
        Ok(())
    }

    /// ASCII board, top row first: `#` robot, `r g b` objects, uppercase
    /// for the top of a stack, `.` empty. A held object is drawn as the
    /// robot.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for y in (0..BOARD_SIZE).rev() {
            for x in 0..BOARD_SIZE {
                let p = Pos::new(x, y);
                let ch = if self.robot == p {
                    '#'
                } else {
                    let here = self.resting_at(p);
                    match here.as_slice() {
                        [] => '.',
                        [c] => letter(*c),
                        many => {
                            let top = many.iter().find(|&&c| self.status(c) == 1).copied().unwrap_or(many[0]);
                            letter(top).to_ascii_uppercase()
                        }
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

fn letter(c: Color) -> char {
    match c {
        Color::Red => 'r',
        Color::Green => 'g',
        Color::Blue => 'b',
    }
}
