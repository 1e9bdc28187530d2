//! Data generators: a scripted ε-greedy expert, a uniform random policy
//! and per-task online DQN agents whose whole training history is kept.

use gridroboman::{Action, BoardState, Color, ObsScale, Pos, Task, BOARD_SIZE, NUM_ACTIONS};
use r2a_core::agent::{AgentConfig, AgentKind, Evaluator, Learner, RetrievalSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{transitions_from, Dataset, Episode, GeneratorInfo, Manifest, FORMAT_VERSION};
use crate::error::{HarnessError, HarnessResult};

/// Independent RNG stream per task so a task's episodes do not depend on
/// which other tasks are generated alongside it.
pub fn task_rng(seed: u64, task: Task) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.index() as u64 + 1);
    rng
}

/// Play one episode with `policy`, which sees the state and its
/// normalised observation.
pub fn rollout<R, P>(task: Task, rng: &mut R, mut policy: P) -> HarnessResult<Episode>
where
    R: Rng + ?Sized,
    P: FnMut(&BoardState, &[f32], &mut R) -> HarnessResult<Action>,
{
    let mut state = BoardState::reset(task, rng);
    let mut ep = Episode {
        task,
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    while !state.is_done() {
        let obs = state.observe(ObsScale::Normalized);
        let a = policy(&state, &obs, rng)?;
        let out = state.step(a).expect("episode not over");
        ep.observations.push(obs);
        ep.actions.push(a.index() as u8);
        ep.rewards.push(out.reward);
    }
    Ok(ep)
}

fn step_towards(from: Pos, to: Pos) -> Action {
    if to.x > from.x {
        Action::Right
    } else if to.x < from.x {
        Action::Left
    } else if to.y > from.y {
        Action::Up
    } else if to.y < from.y {
        Action::Down
    } else {
        Action::Skip
    }
}

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

fn cells() -> impl Iterator<Item = Pos> {
    (0..BOARD_SIZE).flat_map(|y| (0..BOARD_SIZE).map(move |x| Pos::new(x, y)))
}

/// Nearest cell satisfying `ok`, ties broken by scan order.
fn nearest(from: Pos, ok: impl Fn(Pos) -> bool) -> Option<Pos> {
    cells().filter(|&p| ok(p)).min_by_key(|&p| manhattan(from, p))
}

fn others_resting_at(state: &BoardState, p: Pos, except: Color) -> bool {
    Color::ALL
        .into_iter()
        .any(|c| c != except && state.held != Some(c) && state.object_pos(c) == p)
}

fn cell_free(state: &BoardState, p: Pos) -> bool {
    !Color::ALL
        .into_iter()
        .any(|c| state.held != Some(c) && state.object_pos(c) == p)
}

/// Put the held object down on a free cell, walking to one if needed.
fn drop_held(state: &BoardState) -> Action {
    if cell_free(state, state.robot) {
        return Action::Put;
    }
    match nearest(state.robot, |p| cell_free(state, p)) {
        Some(p) => step_towards(state.robot, p),
        None => Action::Put,
    }
}

/// Next action towards holding `c`, or `None` when already holding it.
fn acquire(state: &BoardState, c: Color) -> Option<Action> {
    match state.held {
        Some(h) if h == c => None,
        Some(_) => Some(drop_held(state)),
        None => {
            let target = state.object_pos(c);
            if state.robot == target {
                Some(Action::Lift)
            } else {
                Some(step_towards(state.robot, target))
            }
        }
    }
}

fn adjacent_cell(state: &BoardState, target: Pos) -> Action {
    match nearest(state.robot, |p| manhattan(p, target) == 1) {
        Some(p) => step_towards(state.robot, p),
        None => Action::Skip,
    }
}

/// Greedy controller for each task family. Returns `Skip` once the
/// rewarding condition holds.
pub fn expert_action(state: &BoardState) -> Action {
    let task = state.task;
    if task.reward(state) == 1 {
        return Action::Skip;
    }
    match task {
        Task::Touch(c) => {
            if state.held.is_some() {
                drop_held(state)
            } else {
                adjacent_cell(state, state.object_pos(c))
            }
        }
        Task::Lift(c) => acquire(state, c).unwrap_or(Action::Skip),
        Task::TouchWith { held, target } => {
            acquire(state, held).unwrap_or_else(|| adjacent_cell(state, state.object_pos(target)))
        }
        Task::Corner(c) => acquire(state, c).unwrap_or_else(|| {
            let edge = |v: i32| v <= 1 || v >= BOARD_SIZE - 2;
            let goal = nearest(state.robot, |p| edge(p.x) && edge(p.y)).expect("corners exist");
            step_towards(state.robot, goal)
        }),
        Task::Center(c) => acquire(state, c).unwrap_or_else(|| {
            let mid = |v: i32| (2..=4).contains(&v);
            let goal = nearest(state.robot, |p| mid(p.x) && mid(p.y)).expect("center exists");
            step_towards(state.robot, goal)
        }),
        Task::Close(a, b) => acquire(state, a).unwrap_or_else(|| step_towards(state.robot, state.object_pos(b))),
        Task::Far(a, b) => {
            let pb = state.object_pos(b);
            match nearest(state.object_pos(a), |p| manhattan(p, pb) > 9) {
                Some(goal) => acquire(state, a).unwrap_or_else(|| step_towards(state.robot, goal)),
                None => {
                    // b is too central: push it to its nearest board corner first
                    let corner = [0, BOARD_SIZE - 1];
                    let goal = nearest(pb, |p| corner.contains(&p.x) && corner.contains(&p.y)).expect("corners exist");
                    acquire(state, b).unwrap_or_else(|| step_towards(state.robot, goal))
                }
            }
        }
        Task::Stack { top, bottom } => {
            let pb = state.object_pos(bottom);
            if state.held != Some(bottom) && others_resting_at(state, pb, bottom) {
                // clear whatever shares the bottom object's cell
                if state.held.is_some() {
                    drop_held(state)
                } else if state.robot == pb {
                    Action::Lift
                } else {
                    step_towards(state.robot, pb)
                }
            } else {
                match acquire(state, top) {
                    Some(a) => a,
                    None if state.robot == pb => Action::Put,
                    None => step_towards(state.robot, pb),
                }
            }
        }
    }
}

fn random_action<R: Rng + ?Sized>(rng: &mut R) -> Action {
    Action::from_index(rng.random_range(0..NUM_ACTIONS)).expect("in range")
}

pub fn scripted_episode<R: Rng + ?Sized>(task: Task, epsilon: f64, rng: &mut R) -> Episode {
    rollout(task, rng, |s, _, rng| {
        Ok(if rng.random::<f64>() < epsilon {
            random_action(rng)
        } else {
            expert_action(s)
        })
    })
    .expect("scripted policy cannot fail")
}

pub fn random_episode<R: Rng + ?Sized>(task: Task, rng: &mut R) -> Episode {
    rollout(task, rng, |_, _, rng| Ok(random_action(rng))).expect("random policy cannot fail")
}

/// Linear decay from `start` to `end` over the first `fraction` of
/// `total` episodes, then constant.
pub fn decayed_epsilon(episode: usize, total: usize, start: f64, end: f64, fraction: f64) -> f64 {
    let horizon = (total as f64 * fraction).max(1.0);
    let t = (episode as f64 / horizon).min(1.0);
    start + (end - start) * t
}

fn online_dqn_episodes(task: Task, n: usize, info: &GeneratorInfo, rng: &mut ChaCha8Rng) -> HarnessResult<Vec<Episode>> {
    let GeneratorInfo::OnlineDqn {
        epsilon_start,
        epsilon_end,
        decay_fraction,
        hidden,
        batch_size,
        updates_per_episode,
        target_period,
    } = *info
    else {
        unreachable!("called with an online generator")
    };
    let cfg = AgentConfig {
        kind: AgentKind::Baseline,
        hidden,
        target_period,
        ..AgentConfig::default()
    };
    let mut learner = Learner::new(cfg, rng)?;
    let empty = RetrievalSet::new();
    let mut episodes = Vec::with_capacity(n);
    for k in 0..n {
        let eps = decayed_epsilon(k, n, epsilon_start, epsilon_end, decay_fraction);
        let ep = {
            let mut ev = Evaluator::new(&learner.model, &learner.online, task.index() as u8, None, rng)?;
            rollout(task, rng, |_, obs, rng| {
                let o: Vec<f64> = obs.iter().map(|&v| v as f64).collect();
                let a = ev.act(&o, eps, rng)?;
                Ok(Action::from_index(a).expect("agent emits valid actions"))
            })?
        };
        episodes.push(ep);
        let pool: Vec<usize> = (0..episodes.len()).collect();
        for _ in 0..updates_per_episode {
            let batch = transitions_from(&episodes, &pool, batch_size, rng);
            learner.train_step(&batch, &empty, rng)?;
        }
    }
    Ok(episodes)
}

/// Generate `episodes_per_task` episodes for each task.
pub fn generate_dataset(
    tasks: &[Task],
    episodes_per_task: usize,
    generator: &GeneratorInfo,
    seed: u64,
) -> HarnessResult<Dataset> {
    if episodes_per_task == 0 {
        return Err(HarnessError::Config("episodes per task must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(HarnessError::Config("no tasks requested".into()));
    }
    let mut episodes = Vec::with_capacity(tasks.len() * episodes_per_task);
    for &task in tasks {
        let mut rng = task_rng(seed, task);
        match generator {
            GeneratorInfo::Scripted { epsilon } => {
                episodes.extend((0..episodes_per_task).map(|_| scripted_episode(task, *epsilon, &mut rng)))
            }
            GeneratorInfo::Random => episodes.extend((0..episodes_per_task).map(|_| random_episode(task, &mut rng))),
            GeneratorInfo::OnlineDqn { .. } => {
                episodes.extend(online_dqn_episodes(task, episodes_per_task, generator, &mut rng)?)
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tasks: tasks.iter().map(|t| t.name()).collect(),
        episodes_per_task,
        generator: generator.clone(),
        seed,
        total_episodes: episodes.len(),
    };
    Ok(Dataset::new(manifest, episodes)?)
}
