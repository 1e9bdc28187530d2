//! Online evaluation in live environments.

use std::io::Write;

use gridroboman::{Action, BoardState, ObsScale, Task};
use r2a_core::agent::{epsilon_greedy, AgentModel, Evaluator};
use r2a_core::retrieval::RetrievalMode;
use r2a_core::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, RetrievalSource};
use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub episodes: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub n_retrieval: usize,
    pub context_len: usize,
    /// Leading episodes per task whose retrieval diagnostics are emitted.
    pub diag_episodes: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            episodes: cfg.eval_episodes,
            epsilon: cfg.eval_epsilon,
            seed: cfg.eval_seed,
            n_retrieval: cfg.n_retrieval,
            context_len: cfg.effective_context_len(),
            diag_episodes: cfg.diag_episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskEval {
    pub task: String,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl TaskEval {
    fn from_returns(task: Task, returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            task: task.name(),
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Mean of the per-task means.
pub fn aggregate(evals: &[TaskEval]) -> f64 {
    evals.iter().map(|e| e.mean).sum::<f64>() / evals.len().max(1) as f64
}

#[derive(Serialize)]
struct SourceRef {
    dataset_episode: usize,
    start: usize,
    task: String,
}

#[derive(Serialize)]
struct DiagRecord {
    learner_step: u64,
    task: String,
    episode: usize,
    t: usize,
    slot: usize,
    kl: f64,
    trajectories: Vec<usize>,
    states: Vec<(usize, usize)>,
    weights: Vec<f64>,
    sources: Vec<SourceRef>,
}

/// RNG for one purpose of one evaluation episode. Streams depend only on
/// the evaluation seed, so every agent faces the same start states.
pub fn eval_rng(seed: u64, task: Task, episode: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task.index() as u64) << 40) | ((episode as u64) << 8) | purpose);
    rng
}

const ENV: u64 = 0;
const AGENT: u64 = 1;
const RETRIEVAL: u64 = 2;

fn play<R: Rng + ?Sized, F>(task: Task, env_rng: &mut R, mut choose: F) -> HarnessResult<f64>
where
    F: FnMut(usize, &[f64]) -> HarnessResult<usize>,
{
    let mut state = BoardState::reset(task, env_rng);
    let mut total = 0.0;
    let mut t = 0;
    while !state.is_done() {
        let obs: Vec<f64> = state.observe(ObsScale::Normalized).iter().map(|&v| v as f64).collect();
        let a = choose(t, &obs)?;
        total += state.step(Action::from_index(a).expect("valid action")).expect("live episode").reward as f64;
        t += 1;
    }
    Ok(total)
}

/// Per-task returns of a uniformly random policy on the evaluation start
/// states.
pub fn random_policy(tasks: &[Task], settings: &EvalSettings) -> Vec<TaskEval> {
    tasks
        .iter()
        .map(|&task| {
            let returns = (0..settings.episodes)
                .map(|e| {
                    let mut env = eval_rng(settings.seed, task, e, ENV);
                    let mut agent = eval_rng(settings.seed, task, e, AGENT);
                    play(task, &mut env, |_, _| Ok(agent.random_range(0..gridroboman::NUM_ACTIONS))).unwrap()
                })
                .collect();
            TaskEval::from_returns(task, returns)
        })
        .collect()
}

/// Roll out the agent on every task. Retrieval agents read a
/// task-filtered batch drawn once per task.
pub fn evaluate(
    model: &AgentModel,
    store: &ParamStore,
    tasks: &[Task],
    dataset: Option<&Dataset>,
    settings: &EvalSettings,
    learner_step: u64,
    mut diag: Option<&mut dyn Write>,
) -> HarnessResult<Vec<TaskEval>> {
    let needs_data = model.cfg.uses_retrieval() && model.cfg.retrieval.mode != RetrievalMode::NoRetrieval;
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let mut rrng = eval_rng(settings.seed, task, 0, RETRIEVAL);
        let batch = if needs_data {
            let ds = dataset.ok_or_else(|| HarnessError::Config("retrieval agent evaluated without a dataset".into()))?;
            Some(ds.sample_retrieval_batch(
                settings.n_retrieval,
                RetrievalSource::TaskFiltered(task),
                settings.context_len,
                &mut rrng,
            )?)
        } else {
            None
        };
        let mut ev = Evaluator::new(model, store, task.index() as u8, batch.as_ref(), &mut rrng)?;
        let mut returns = Vec::with_capacity(settings.episodes);
        for e in 0..settings.episodes {
            let mut env = eval_rng(settings.seed, task, e, ENV);
            let mut agent = eval_rng(settings.seed, task, e, AGENT);
            let want_diag = needs_data && e < settings.diag_episodes && diag.is_some();
            let ret = play(task, &mut env, |t, obs| {
                let (q, slots) = ev.q_values_with_diagnostics(obs, want_diag, &mut agent)?;
                if let (true, Some(w), Some(b)) = (want_diag, diag.as_deref_mut(), batch.as_ref()) {
                    for d in slots {
                        let rec = DiagRecord {
                            learner_step,
                            task: task.name(),
                            episode: e,
                            t,
                            slot: d.slot,
                            kl: d.kl,
                            sources: d
                                .selection
                                .trajectories
                                .iter()
                                .map(|&i| {
                                    let s = b.sources[i];
                                    SourceRef {
                                        dataset_episode: s.episode,
                                        start: s.start,
                                        task: Task::from_index(s.task as usize).map_or("?".into(), |t| t.name()),
                                    }
                                })
                                .collect(),
                            trajectories: d.selection.trajectories,
                            states: d.selection.states,
                            weights: d.selection.weights,
                        };
                        let line = serde_json::to_string(&rec).expect("record serialises");
                        writeln!(w, "{line}").map_err(|e| HarnessError::Io {
                            path: "diagnostics".into(),
                            source: e,
                        })?;
                    }
                }
                Ok(epsilon_greedy(&q, settings.epsilon, &mut agent))
            })?;
            returns.push(ret);
        }
        out.push(TaskEval::from_returns(task, returns));
    }
    Ok(out)
}
