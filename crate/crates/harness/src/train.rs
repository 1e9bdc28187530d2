//! Offline multi-task training loop with periodic evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gridroboman::Task;
use r2a_core::agent::{AgentError, LossBreakdown, Learner, RetrievalSet};
use r2a_core::batch::TransitionBatch;
use r2a_core::retrieval::RetrievalMode;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, TrainRetrieval};
use crate::dataset::{Dataset, RetrievalSource};
use crate::error::{HarnessError, HarnessResult};
use crate::eval::{aggregate, evaluate, EvalSettings, TaskEval};
use crate::metrics::{MetricsRow, MetricsWriter};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_INFO_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.r2ac";
pub const FAILURE_FILE: &str = "failure.txt";

/// Stream 0 initialises parameters, stream 1 drives training.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut train = ChaCha8Rng::seed_from_u64(seed);
    train.set_stream(1);
    (init, train)
}

#[derive(Serialize)]
struct RunInfo<'a> {
    run: String,
    seed: u64,
    dataset: String,
    dataset_sha256: String,
    tasks: Vec<String>,
    budget_note: &'a str,
}

pub struct Trainer<'a> {
    pub cfg: ExperimentConfig,
    pub tasks: Vec<Task>,
    pub dataset: &'a Dataset,
    pub learner: Learner,
    pub rng: ChaCha8Rng,
    window: Vec<LossBreakdown>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, dataset: &'a Dataset) -> HarnessResult<Self> {
        cfg.validate()?;
        let (mut init, rng) = run_rngs(cfg.seed);
        let learner = Learner::new(cfg.agent_config(), &mut init)?;
        Self::assemble(cfg.clone(), dataset, learner, rng)
    }

    pub fn resume(ckpt: &Checkpoint, dataset: &'a Dataset) -> HarnessResult<Self> {
        let (learner, rng) = ckpt.restore()?;
        Self::assemble(ckpt.config.clone(), dataset, learner, rng)
    }

    fn assemble(cfg: ExperimentConfig, dataset: &'a Dataset, learner: Learner, rng: ChaCha8Rng) -> HarnessResult<Self> {
        let tasks = cfg.task_list()?;
        for &t in &tasks {
            let have = dataset.episodes_of(t).len();
            if have == 0 {
                return Err(crate::dataset::DataError::MissingTask(t.name()).into());
            }
            if learner.model.cfg.uses_retrieval() && have < cfg.n_retrieval {
                return Err(crate::dataset::DataError::NotEnough {
                    need: cfg.n_retrieval,
                    have,
                }
                .into());
            }
        }
        Ok(Self {
            cfg,
            tasks,
            dataset,
            learner,
            rng,
            window: Vec::new(),
        })
    }

    fn reads_data(&self) -> bool {
        let c = &self.learner.model.cfg;
        c.uses_retrieval() && c.retrieval.mode != RetrievalMode::NoRetrieval
    }

    /// Training batch and matching retrieval batches for the next update.
    pub fn sample_inputs(&mut self) -> HarnessResult<(TransitionBatch, RetrievalSet)> {
        let k = self.cfg.tasks_per_step;
        let subset: Vec<Task> = if k == 0 || k >= self.tasks.len() {
            self.tasks.clone()
        } else {
            let mut idx = sample(&mut self.rng, self.tasks.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| self.tasks[i]).collect()
        };
        let batch = self
            .dataset
            .sample_training_batch(self.cfg.batch_size, Some(&subset), &mut self.rng)?;
        let mut set = RetrievalSet::new();
        if self.reads_data() {
            let mut present = batch.tasks.clone();
            present.sort_unstable();
            present.dedup();
            let ctx = self.cfg.effective_context_len();
            let n = self.cfg.n_retrieval;
            match self.cfg.train_retrieval {
                TrainRetrieval::TaskFiltered => {
                    for t in present {
                        let task = Task::from_index(t as usize).expect("dataset task ids are valid");
                        let b = self.dataset.sample_retrieval_batch(
                            n,
                            RetrievalSource::TaskFiltered(task),
                            ctx,
                            &mut self.rng,
                        )?;
                        set.insert(t, b);
                    }
                }
                TrainRetrieval::Uniform => {
                    let b = self
                        .dataset
                        .sample_retrieval_batch(n, RetrievalSource::Uniform, ctx, &mut self.rng)?;
                    for t in present {
                        set.insert(t, b.clone());
                    }
                }
            }
        }
        Ok((batch, set))
    }

    pub fn train_step(&mut self) -> HarnessResult<LossBreakdown> {
        let (batch, set) = self.sample_inputs()?;
        let out = self.learner.train_step(&batch, &set, &mut self.rng)?;
        self.window.push(out);
        Ok(out)
    }

    pub fn evaluate(&self, diag: Option<&mut dyn std::io::Write>) -> HarnessResult<Vec<TaskEval>> {
        evaluate(
            &self.learner.model,
            &self.learner.online,
            &self.tasks,
            Some(self.dataset),
            &EvalSettings::from_config(&self.cfg),
            self.learner.step,
            diag,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.learner, &self.rng)
    }

    fn metrics_row(&mut self, evals: &[TaskEval], started: Instant) -> MetricsRow {
        let n = self.window.len().max(1) as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| self.window.iter().map(f).sum::<f64>() / n;
        let row = MetricsRow {
            run: self.cfg.run_label(),
            seed: self.cfg.seed,
            learner_step: self.learner.step,
            mean_return: aggregate(evals),
            td: mean(|l| l.td),
            aux: mean(|l| l.aux),
            kl: mean(|l| l.kl),
            wall_clock_s: self.cfg.record_wall_clock.then(|| started.elapsed().as_secs_f64()),
            task_returns: evals.iter().map(|e| (e.task.clone(), e.mean)).collect(),
        };
        self.window.clear();
        row
    }

    /// Train to `cfg.steps`, evaluating every `eval_every` steps and at the
    /// end. With an output directory, writes the resolved config, run
    /// info, metrics and checkpoints there.
    pub fn run(&mut self, out_dir: Option<&Path>) -> HarnessResult<Vec<MetricsRow>> {
        let started = Instant::now();
        let task_names: Vec<String> = self.tasks.iter().map(|t| t.name()).collect();
        let mut writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
                write_file(&dir.join(CONFIG_FILE), self.cfg.render().as_bytes())?;
                let info = RunInfo {
                    run: self.cfg.run_label(),
                    seed: self.cfg.seed,
                    dataset: self.cfg.dataset.display().to_string(),
                    dataset_sha256: self.dataset.hash(),
                    tasks: task_names.clone(),
                    budget_note: "desk-scale budget: learner steps and evaluation cadence chosen for a workstation CPU",
                };
                let json = serde_json::to_string_pretty(&info).expect("run info serialises");
                write_file(&dir.join(RUN_INFO_FILE), json.as_bytes())?;
                let path = dir.join(METRICS_FILE);
                Some(if self.learner.step == 0 {
                    MetricsWriter::create(&path, &task_names)?
                } else {
                    MetricsWriter::resume(&path, &task_names, self.learner.step)?
                })
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.learner.step < self.cfg.steps {
            if let Err(e) = self.train_step() {
                if let (Some(dir), HarnessError::Agent(AgentError::NonFiniteLoss { .. })) = (out_dir, &e) {
                    let _ = fs::write(dir.join(FAILURE_FILE), format!("{e}\n{}", self.cfg.render()));
                }
                return Err(e);
            }
            let step = self.learner.step;
            if step % self.cfg.eval_every == 0 || step == self.cfg.steps {
                let evals = self.evaluate(None)?;
                let row = self.metrics_row(&evals, started);
                log::info!(
                    "{} seed {} step {}: return {:.3} td {:.4} aux {:.4} kl {:.4}",
                    row.run,
                    row.seed,
                    step,
                    row.mean_return,
                    row.td,
                    row.aux,
                    row.kl
                );
                if let Some(w) = writer.as_mut() {
                    w.write(&row)?;
                }
                rows.push(row);
                let ckpt_due = self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0;
                if let (Some(dir), true) = (out_dir, ckpt_due || step == self.cfg.steps) {
                    let bytes = self.checkpoint().encode();
                    write_file(&checkpoint_path(dir, step), &bytes)?;
                    write_file(&dir.join(CHECKPOINT_FILE), &bytes)?;
                }
            }
        }
        Ok(rows)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.r2ac"))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> HarnessResult<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}
