//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gridroboman::{task_set, Task};
use r2a_core::agent::{AgentConfig, AgentKind, AuxVariant};
use r2a_core::retrieval::{Ranking, RetrievalMode};
use r2a_core::AdamConfig;

use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Ra,
}

/// Mechanism ablations applied on top of the retrieval agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Queries and prior from the agent state only; slots unused.
    QueryFromState,
    /// Retrieval process kept but never reads the retrieval batch.
    NoRetrieval,
    /// Retrieval trajectories cut to short windows.
    ShortContext,
    /// Posterior mean passed through and no KL penalty.
    NoBottleneck,
}

/// Which trajectories back each task's retrieval batch during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainRetrieval {
    TaskFiltered,
    Uniform,
}

pub const SHORT_CONTEXT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub ablation: Ablation,
    pub aux: AuxVariant,
    /// Task set as written: `3`, `10`, `20`, `30` or comma-separated names.
    pub tasks: String,
    pub seed: u64,
    /// Seeds used by the ablation suite.
    pub seeds: Vec<u64>,
    pub dataset: PathBuf,
    pub n_retrieval: usize,
    pub k_traj: usize,
    pub k_states: usize,
    pub context_len: usize,
    pub beta: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_epsilon: f64,
    pub eval_seed: u64,
    pub batch_size: usize,
    /// Distinct tasks per training batch; 0 means all.
    pub tasks_per_step: usize,
    pub train_retrieval: TrainRetrieval,
    pub q_width: usize,
    pub summary_hidden: usize,
    pub n_slots: usize,
    pub slot_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ranking: Ranking,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub gamma: f64,
    pub target_period: u64,
    pub aux_coef: f64,
    pub checkpoint_every: u64,
    pub record_wall_clock: bool,
    /// Episodes per task whose retrieval diagnostics are written by `eval`.
    pub diag_episodes: usize,
    /// Variants run by the ablation suite.
    pub variants: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ra,
            ablation: Ablation::None,
            aux: AuxVariant::Standard,
            tasks: "10".into(),
            seed: 0,
            seeds: vec![0, 1, 2],
            dataset: PathBuf::from("data/tasks10.grbm"),
            n_retrieval: 64,
            k_traj: 10,
            k_states: 10,
            context_len: 50,
            beta: 0.3,
            steps: 30_000,
            eval_every: 1_000,
            eval_episodes: 20,
            eval_epsilon: 6.5e-4,
            eval_seed: 1_000_003,
            batch_size: 256,
            tasks_per_step: 0,
            train_retrieval: TrainRetrieval::TaskFiltered,
            q_width: 256,
            summary_hidden: 256,
            n_slots: 4,
            slot_dim: 128,
            key_dim: 64,
            value_dim: 64,
            ranking: Ranking::ByReturn,
            learning_rate: 3e-4,
            adam_epsilon: 1e-7,
            clip_norm: 40.0,
            gamma: 0.99,
            target_period: 2500,
            aux_coef: 0.1,
            checkpoint_every: 0,
            record_wall_clock: false,
            diag_episodes: 1,
            variants: DEFAULT_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub const DEFAULT_VARIANTS: [&str; 7] = ["baseline", "ra", "a1", "a2", "a3", "no_ib", "k_sweep"];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{key} = {value}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> HarnessResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> HarnessResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parse a task-set description.
pub fn parse_tasks(spec: &str) -> HarnessResult<Vec<Task>> {
    let spec = spec.trim();
    if let Ok(n) = spec.parse::<usize>() {
        if matches!(n, 3 | 10 | 20 | 30) {
            return Ok(task_set(n).to_vec());
        }
        return Err(bad("tasks", spec, "numeric task sets are 3, 10, 20 or 30"));
    }
    let tasks: Vec<Task> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Task>().map_err(|e| bad("tasks", spec, e)))
        .collect::<HarnessResult<_>>()?;
    if tasks.is_empty() {
        return Err(bad("tasks", spec, "empty task list"));
    }
    let mut seen = tasks.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != tasks.len() {
        return Err(bad("tasks", spec, "duplicate task"));
    }
    Ok(tasks)
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> HarnessResult<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => {
                self.mode = match v {
                    "baseline" => Mode::Baseline,
                    "ra" => Mode::Ra,
                    _ => return Err(bad(key, v, "expected baseline or ra")),
                }
            }
            "ablation" => {
                self.ablation = match v {
                    "none" => Ablation::None,
                    "a1" | "query_from_state" => Ablation::QueryFromState,
                    "a2" | "no_retrieval" => Ablation::NoRetrieval,
                    "a3" | "short_context" => Ablation::ShortContext,
                    "no_ib" => Ablation::NoBottleneck,
                    _ => return Err(bad(key, v, "expected none, a1, a2, a3 or no_ib")),
                }
            }
            "aux" => {
                self.aux = match v {
                    "standard" => AuxVariant::Standard,
                    "standard_masked" => AuxVariant::StandardAndMasked,
                    "masked_only" => AuxVariant::MaskedOnly,
                    "none" => AuxVariant::None,
                    _ => return Err(bad(key, v, "expected standard, standard_masked, masked_only or none")),
                }
            }
            "tasks" => {
                parse_tasks(v)?;
                self.tasks = v.to_string();
            }
            "seed" => self.seed = num(key, v)?,
            "seeds" => self.seeds = list(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "n_retrieval" => self.n_retrieval = num(key, v)?,
            "k_traj" => self.k_traj = num(key, v)?,
            "k_states" => self.k_states = num(key, v)?,
            "context_len" => self.context_len = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "eval_epsilon" => self.eval_epsilon = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "tasks_per_step" => self.tasks_per_step = num(key, v)?,
            "train_retrieval" => {
                self.train_retrieval = match v {
                    "task_filtered" => TrainRetrieval::TaskFiltered,
                    "uniform" => TrainRetrieval::Uniform,
                    _ => return Err(bad(key, v, "expected task_filtered or uniform")),
                }
            }
            "q_width" => self.q_width = num(key, v)?,
            "summary_hidden" => self.summary_hidden = num(key, v)?,
            "n_slots" => self.n_slots = num(key, v)?,
            "slot_dim" => self.slot_dim = num(key, v)?,
            "key_dim" => self.key_dim = num(key, v)?,
            "value_dim" => self.value_dim = num(key, v)?,
            "ranking" => {
                self.ranking = match v {
                    "by_return" => Ranking::ByReturn,
                    "learned" => Ranking::Learned,
                    _ => return Err(bad(key, v, "expected by_return or learned")),
                }
            }
            "learning_rate" => self.learning_rate = num(key, v)?,
            "adam_epsilon" => self.adam_epsilon = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "target_period" => self.target_period = num(key, v)?,
            "aux_coef" => self.aux_coef = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "record_wall_clock" => self.record_wall_clock = num(key, v)?,
            "diag_episodes" => self.diag_episodes = num(key, v)?,
            "variants" => self.variants = list(key, v)?,
            other => return Err(HarnessError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> HarnessResult<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parse config text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> HarnessResult<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn ablation_name(&self) -> &'static str {
        match self.ablation {
            Ablation::None => "none",
            Ablation::QueryFromState => "a1",
            Ablation::NoRetrieval => "a2",
            Ablation::ShortContext => "a3",
            Ablation::NoBottleneck => "no_ib",
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mode = match self.mode {
            Mode::Baseline => "baseline",
            Mode::Ra => "ra",
        };
        let aux = match self.aux {
            AuxVariant::Standard => "standard",
            AuxVariant::StandardAndMasked => "standard_masked",
            AuxVariant::MaskedOnly => "masked_only",
            AuxVariant::None => "none",
        };
        let train_retrieval = match self.train_retrieval {
            TrainRetrieval::TaskFiltered => "task_filtered",
            TrainRetrieval::Uniform => "uniform",
        };
        let ranking = match self.ranking {
            Ranking::ByReturn => "by_return",
            Ranking::Learned => "learned",
        };
        vec![
            ("mode", mode.into()),
            ("ablation", self.ablation_name().into()),
            ("aux", aux.into()),
            ("tasks", self.tasks.clone()),
            ("seed", self.seed.to_string()),
            ("seeds", join(&self.seeds)),
            ("dataset", self.dataset.display().to_string()),
            ("n_retrieval", self.n_retrieval.to_string()),
            ("k_traj", self.k_traj.to_string()),
            ("k_states", self.k_states.to_string()),
            ("context_len", self.context_len.to_string()),
            ("beta", self.beta.to_string()),
            ("steps", self.steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_epsilon", self.eval_epsilon.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("tasks_per_step", self.tasks_per_step.to_string()),
            ("train_retrieval", train_retrieval.into()),
            ("q_width", self.q_width.to_string()),
            ("summary_hidden", self.summary_hidden.to_string()),
            ("n_slots", self.n_slots.to_string()),
            ("slot_dim", self.slot_dim.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("value_dim", self.value_dim.to_string()),
            ("ranking", ranking.into()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_epsilon", self.adam_epsilon.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("gamma", self.gamma.to_string()),
            ("target_period", self.target_period.to_string()),
            ("aux_coef", self.aux_coef.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("record_wall_clock", self.record_wall_clock.to_string()),
            ("diag_episodes", self.diag_episodes.to_string()),
            ("variants", join(&self.variants)),
        ]
    }

    /// The resolved config as parseable text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn task_list(&self) -> HarnessResult<Vec<Task>> {
        parse_tasks(&self.tasks)
    }

    /// Retrieval trajectory length after the short-context ablation.
    pub fn effective_context_len(&self) -> usize {
        if self.ablation == Ablation::ShortContext {
            SHORT_CONTEXT
        } else {
            self.context_len
        }
    }

    /// Name used for this run in metrics and tables.
    pub fn run_label(&self) -> String {
        match (self.mode, self.ablation) {
            (Mode::Baseline, _) => "baseline".into(),
            (Mode::Ra, Ablation::None) => "ra".into(),
            (Mode::Ra, _) => self.ablation_name().into(),
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        let mut a = AgentConfig {
            kind: match self.mode {
                Mode::Baseline => AgentKind::Baseline,
                Mode::Ra => AgentKind::Retrieval,
            },
            hidden: self.q_width,
            gamma: self.gamma,
            target_period: self.target_period,
            aux_coef: self.aux_coef,
            aux: self.aux,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                epsilon: self.adam_epsilon,
                clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
                ..AdamConfig::default()
            },
            ..AgentConfig::default()
        };
        a.summarizer.hidden = self.summary_hidden;
        let r = &mut a.retrieval;
        r.n_slots = self.n_slots;
        r.slot_dim = self.slot_dim;
        r.key_dim = self.key_dim;
        r.value_dim = self.value_dim;
        r.k_traj = self.k_traj;
        r.k_states = self.k_states;
        r.ranking = self.ranking;
        r.beta = self.beta;
        match self.ablation {
            Ablation::QueryFromState => r.mode = RetrievalMode::QueryFromState,
            Ablation::NoRetrieval => r.mode = RetrievalMode::NoRetrieval,
            Ablation::NoBottleneck => {
                r.use_bottleneck = false;
                r.beta = 0.0;
            }
            Ablation::None | Ablation::ShortContext => {}
        }
        a
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let fail = |m: &str| Err(HarnessError::Config(m.to_string()));
        self.task_list()?;
        if self.steps == 0 || self.eval_every == 0 {
            return fail("steps and eval_every must be positive");
        }
        if self.eval_episodes == 0 || self.batch_size == 0 || self.n_retrieval == 0 {
            return fail("eval_episodes, batch_size and n_retrieval must be positive");
        }
        if self.context_len == 0 || self.context_len > 50 {
            return fail("context_len must lie in 1..=50");
        }
        if self.checkpoint_every % self.eval_every != 0 {
            return fail("checkpoint_every must be a multiple of eval_every");
        }
        if !(0.0..=1.0).contains(&self.eval_epsilon) {
            return fail("eval_epsilon must lie in [0, 1]");
        }
        if self.beta < 0.0 {
            return fail("beta must be non-negative");
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty");
        }
        self.agent_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.mode == Mode::Ra && self.ablation != Ablation::NoRetrieval {
            let need = self.k_traj;
            if need > self.n_retrieval {
                return fail("k_traj cannot exceed n_retrieval");
            }
            if self.k_states > need * self.effective_context_len() {
                return fail("k_states cannot exceed the number of candidate states");
            }
        }
        Ok(())
    }
}
