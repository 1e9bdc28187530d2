//! Offline double-DQN agent, optionally augmented with retrieval.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::batch::{TrajectoryBatch, TransitionBatch};
use crate::error::TensorError;
use crate::loss::huber_loss;
use crate::nn::{batched_attention, GatedResidual, Linear};
use crate::optim::AdamConfig;
use crate::params::ParamGroup;
use crate::retrieval::{PreparedRetrieval, RetrievalConfig, RetrievalMode, RetrievalParams, SlotDiagnostics, StepOptions};
use crate::summarizer::{Encoder, Summarizer, SummarizerConfig};
use crate::tape::{Tape, Var};
use crate::{AdamState, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("retrieval-augmented agent needs a retrieval batch for task {0}")]
    MissingRetrieval(u8),
    #[error("non-finite loss at learner step {step}: td={td} aux={aux} kl={kl}")]
    NonFiniteLoss { step: u64, td: f64, aux: f64, kl: f64 },
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

pub type AgentResult<T> = std::result::Result<T, AgentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgentKind {
    Baseline,
    #[default]
    Retrieval,
}

/// Which auxiliary losses train the summarizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxVariant {
    /// Action, reward and value prediction.
    #[default]
    Standard,
    /// Standard losses plus masked-state regression.
    StandardAndMasked,
    /// Masked-state regression only.
    MaskedOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub obs_dim: usize,
    pub num_actions: usize,
    /// Width of every Q-network hidden layer; also the agent state width.
    pub hidden: usize,
    pub summarizer: SummarizerConfig,
    pub retrieval: RetrievalConfig,
    pub gamma: f64,
    pub huber_delta: f64,
    pub target_period: u64,
    pub aux_coef: f64,
    pub aux: AuxVariant,
    pub mask_fraction: f64,
    /// Cut the retrieval path's gradient into the summaries.
    pub stop_grad_summaries: bool,
    /// Let the auxiliary losses train the encoder through the summarizer.
    pub aux_trains_encoder: bool,
    /// Add a second attention read over `z` on top of `s̃` before the Q head.
    pub double_conditioning: bool,
    pub adam: AdamConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Retrieval,
            obs_dim: 11,
            num_actions: crate::NUM_ACTIONS,
            hidden: 256,
            summarizer: SummarizerConfig::default(),
            retrieval: RetrievalConfig::default(),
            gamma: 0.99,
            huber_delta: 1.0,
            target_period: 2500,
            aux_coef: 0.1,
            aux: AuxVariant::Standard,
            mask_fraction: 0.15,
            stop_grad_summaries: false,
            aux_trains_encoder: true,
            double_conditioning: false,
            adam: AdamConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> AgentResult<()> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if self.obs_dim == 0 || self.num_actions == 0 || self.hidden == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.huber_delta <= 0.0 {
            return bad("huber delta must be positive");
        }
        if self.target_period == 0 {
            return bad("target period must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return bad("mask fraction must lie in [0, 1)");
        }
        if self.summarizer.num_actions != self.num_actions {
            return bad("summarizer and agent disagree on the number of actions");
        }
        if self.kind == AgentKind::Retrieval {
            self.retrieval.validate(self.hidden)?;
        }
        Ok(())
    }

    pub fn uses_retrieval(&self) -> bool {
        self.kind == AgentKind::Retrieval
    }
}

/// Per-step loss terms. `total = td + aux_coef·aux + β·kl`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub td: f64,
    pub aux: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Second read over the bottleneck samples used by the double-conditioning
/// variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentUpdate {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub update: GatedResidual,
}

impl AgentUpdate {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, ds: usize, cfg: &RetrievalConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Retrieval;
        Self {
            query: Linear::projection(store, "agent.cond_query", g, ds, cfg.key_dim, rng),
            key: Linear::projection(store, "agent.cond_key", g, cfg.slot_dim, cfg.key_dim, rng),
            value: Linear::projection(store, "agent.cond_value", g, cfg.slot_dim, ds, rng),
            update: GatedResidual::new(store, "agent.cond_update", g, ds, cfg.residual, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<f64>, store: &ParamStore, state: Var, z: Var, heads: usize) -> AgentResult<Var> {
        let b = tape.value(state).rows();
        let ds = tape.value(state).last_dim();
        let n = tape.value(z).rows() / b;
        let de = self.query.out_dim;
        let q = self.query.forward(tape, store, state)?;
        let q = tape.reshape(q, &[b, 1, de])?;
        let k = self.key.forward(tape, store, z)?;
        let k = tape.reshape(k, &[b, n, de])?;
        let v = self.value.forward(tape, store, z)?;
        let v = tape.reshape(v, &[b, n, ds])?;
        let att = batched_attention(tape, q, k, v, heads)?;
        let u = tape.reshape(att.output, &[b, ds])?;
        Ok(self.update.forward(tape, store, state, u)?)
    }
}

/// Architecture of an agent; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub cfg: AgentConfig,
    pub encoder: Encoder,
    pub q_head: Linear,
    pub summarizer: Option<Summarizer>,
    pub retrieval: Option<RetrievalParams>,
    pub conditioning: Option<AgentUpdate>,
}

/// Retrieval batches keyed by task.
pub type RetrievalSet = BTreeMap<u8, TrajectoryBatch>;

/// Summaries and auxiliary losses for every task's retrieval batch on one
/// tape.
#[derive(Debug, Clone, Default)]
pub struct PreparedSet {
    pub by_task: BTreeMap<u8, PreparedRetrieval>,
    /// Unscaled auxiliary loss averaged over tasks, if any was computed.
    pub aux: Option<Var>,
}

/// Q-values for a batch of observations plus the retrieval by-products.
#[derive(Debug, Clone)]
pub struct QOutput {
    /// `[n, num_actions]`
    pub q: Var,
    pub kl: Var,
    pub diagnostics: Vec<SlotDiagnostics>,
}

impl AgentModel {
    /// Build the architecture and a freshly initialised parameter store.
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, rng: &mut R) -> AgentResult<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.obs_dim, cfg.hidden, rng);
        let q_head = Linear::new(&mut store, "q_head", ParamGroup::QHead, cfg.hidden, cfg.num_actions, rng);
        let (summarizer, retrieval, conditioning) = if cfg.uses_retrieval() {
            let s = Summarizer::new(&mut store, cfg.hidden, cfg.summarizer, rng);
            let r = RetrievalParams::new(&mut store, cfg.hidden, cfg.summarizer.hidden, &cfg.retrieval, rng);
            let c = cfg
                .double_conditioning
                .then(|| AgentUpdate::new(&mut store, cfg.hidden, &cfg.retrieval, rng));
            (Some(s), Some(r), c)
        } else {
            (None, None, None)
        };
        Ok((
            Self {
                cfg,
                encoder,
                q_head,
                summarizer,
                retrieval,
                conditioning,
            },
            store,
        ))
    }

    fn obs_tensor(&self, obs: &[f64]) -> AgentResult<Tensor> {
        let d = self.cfg.obs_dim;
        if obs.is_empty() || obs.len() % d != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "observations",
                left: vec![obs.len()],
                right: vec![d],
            }
            .into());
        }
        Ok(Tensor::from_vec(vec![obs.len() / d, d], obs.to_vec())?)
    }

    /// Summarise every task's retrieval batch and project keys and values.
    /// Also computes the auxiliary losses when `with_aux` is set.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<f64>,
        store: &ParamStore,
        set: &RetrievalSet,
        tasks: &[u8],
        with_aux: bool,
        rng: &mut R,
    ) -> AgentResult<PreparedSet> {
        let (Some(summ), Some(ret)) = (&self.summarizer, &self.retrieval) else {
            return Ok(PreparedSet::default());
        };
        if self.cfg.retrieval.mode == RetrievalMode::NoRetrieval {
            return Ok(PreparedSet::default());
        }
        let mut out = PreparedSet::default();
        let mut aux_terms = Vec::new();
        for &task in tasks {
            if out.by_task.contains_key(&task) {
                continue;
            }
            let batch = set.get(&task).ok_or(AgentError::MissingRetrieval(task))?;
            self.cfg.retrieval.check_batch(batch.num_traj, batch.len)?;
            let obs = tape.constant(Tensor::from_vec(
                vec![batch.num_steps(), batch.obs_dim],
                batch.observations.clone(),
            )?);
            let mut states = self.encoder.encode(tape, store, obs)?;
            if !self.cfg.aux_trains_encoder {
                states = tape.stop_gradient(states);
            }
            let inputs = summ.step_inputs(tape, store, states, batch)?;
            let mut sums = summ.summarize(tape, store, inputs, batch.num_traj, batch.len)?;
            if with_aux {
                let mut terms = Vec::new();
                if matches!(self.cfg.aux, AuxVariant::Standard | AuxVariant::StandardAndMasked) {
                    let a =
                        summ.auxiliary_losses(tape, store, &sums, &batch.actions, &batch.rewards, &batch.mc_returns)?;
                    terms.push(a.total);
                }
                if matches!(self.cfg.aux, AuxVariant::StandardAndMasked | AuxVariant::MaskedOnly) {
                    if let Some(m) = summ.masked_state_loss(
                        tape,
                        store,
                        inputs,
                        states,
                        batch.num_traj,
                        batch.len,
                        self.cfg.mask_fraction,
                        rng,
                    )? {
                        terms.push(m);
                    }
                }
                for t in terms {
                    aux_terms.push(t);
                }
            }
            if self.cfg.stop_grad_summaries {
                sums.forward = tape.stop_gradient(sums.forward);
                sums.backward = tape.stop_gradient(sums.backward);
            }
            let p = ret.prepare(tape, store, &sums, &batch.returns)?;
            out.by_task.insert(task, p);
        }
        if !aux_terms.is_empty() {
            let mut acc = aux_terms[0];
            for &t in &aux_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            out.aux = Some(tape.scale(acc, 1.0 / out.by_task.len().max(1) as f64));
        }
        Ok(out)
    }

    /// Q-values for `obs` (row-major, `n × obs_dim`), where row `i` belongs
    /// to `tasks[i]`. Rows are grouped by task so every group reads its
    /// own retrieval batch; each state starts from fresh slots.
    #[allow(clippy::too_many_arguments)]
    pub fn q_values<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<f64>,
        store: &ParamStore,
        obs: &[f64],
        tasks: &[u8],
        prepared: &PreparedSet,
        opts: StepOptions,
        rng: &mut R,
    ) -> AgentResult<QOutput> {
        let x = self.obs_tensor(obs)?;
        let n = x.rows();
        if tasks.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "q_values",
                left: vec![n],
                right: vec![tasks.len()],
            }
            .into());
        }
        let x = tape.constant(x);
        let s = self.encoder.encode(tape, store, x)?;
        let Some(ret) = &self.retrieval else {
            let q = self.q_head.forward(tape, store, s)?;
            let kl = tape.constant(Tensor::scalar(0.0));
            return Ok(QOutput {
                q,
                kl,
                diagnostics: Vec::new(),
            });
        };
        let rcfg = &self.cfg.retrieval;
        let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, &t) in tasks.iter().enumerate() {
            groups.entry(t).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(n);
        let mut kl_total: Option<Var> = None;
        let mut diagnostics = Vec::new();
        for (task, rows) in &groups {
            let ctx = if rcfg.mode == RetrievalMode::NoRetrieval {
                None
            } else {
                Some(prepared.by_task.get(task).ok_or(AgentError::MissingRetrieval(*task))?)
            };
            let sg = if groups.len() == 1 { s } else { tape.gather_rows(s, rows)? };
            let slots = if rcfg.mode == RetrievalMode::QueryFromState {
                None
            } else {
                let t = RetrievalParams::initial_slots(rcfg, rows.len(), rng);
                Some(tape.constant(t))
            };
            let out = ret.step(tape, store, rcfg, sg, slots, ctx, opts, rng)?;
            let mut state = out.state;
            if let Some(c) = &self.conditioning {
                state = c.forward(tape, store, state, out.z, rcfg.agent_heads.max(1))?;
            }
            parts.push(state);
            let kl = tape.scale(out.kl, rows.len() as f64 / n as f64);
            kl_total = Some(match kl_total {
                Some(prev) => tape.add(prev, kl)?,
                None => kl,
            });
            for mut d in out.diagnostics {
                d.row = rows[d.row];
                diagnostics.push(d);
            }
            order.extend_from_slice(rows);
        }
        let states = if parts.len() == 1 {
            parts[0]
        } else {
            let cat = tape.concat_rows(&parts)?;
            let mut inverse = vec![0; n];
            for (pos, &row) in order.iter().enumerate() {
                inverse[row] = pos;
            }
            tape.gather_rows(cat, &inverse)?
        };
        let q = self.q_head.forward(tape, store, states)?;
        Ok(QOutput {
            q,
            kl: kl_total.expect("at least one task group"),
            diagnostics,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice over precomputed Q-values.
pub fn epsilon_greedy<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q.len())
    } else {
        greedy_action(q)
    }
}

/// Double-DQN regression targets `r + γ(1 − done)·Q_target(s', argmax Q_online(s', ·))`.
pub fn double_dqn_targets(
    rewards: &[f64],
    dones: &[bool],
    q_online_next: &Tensor,
    q_target_next: &Tensor,
    gamma: f64,
) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .enumerate()
        .map(|(i, (&r, &done))| {
            if done {
                r
            } else {
                let a = greedy_action(q_online_next.row(i));
                r + gamma * q_target_next.row(i)[a]
            }
        })
        .collect()
}

/// Mean Huber loss between the Q-values of the taken actions and fixed
/// targets.
pub fn td_loss(tape: &mut Tape<f64>, q: Var, actions: &[usize], targets: &[f64], delta: f64) -> AgentResult<Var> {
    if actions.is_empty() {
        return Err(TensorError::EmptyAxis { op: "td_loss" }.into());
    }
    let chosen = tape.pick(q, actions)?;
    let y = tape.constant(Tensor::from_vec(vec![targets.len()], targets.to_vec())?);
    Ok(huber_loss(tape, chosen, y, delta)?)
}

/// Online parameters, target copy and optimizer state of one agent.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: AgentModel,
    pub online: ParamStore,
    pub target: ParamStore,
    pub optimizer: AdamState,
    /// Number of completed updates.
    pub step: u64,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, rng: &mut R) -> AgentResult<Self> {
        let (model, online) = AgentModel::new(cfg, rng)?;
        let target = online.clone();
        let optimizer = AdamState::new(cfg.adam, &online);
        Ok(Self {
            model,
            online,
            target,
            optimizer,
            step: 0,
        })
    }

    fn distinct_tasks(batch: &TransitionBatch) -> Vec<u8> {
        let mut t = batch.tasks.clone();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Greedy Q-values of `obs` under the target parameters (bottleneck
    /// means, fresh slots).
    fn target_q<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        tasks: &[u8],
        set: &RetrievalSet,
        rng: &mut R,
    ) -> AgentResult<Tensor> {
        let mut tape = Tape::new();
        let distinct = {
            let mut t = tasks.to_vec();
            t.sort_unstable();
            t.dedup();
            t
        };
        let prep = self.model.prepare(&mut tape, &self.target, set, &distinct, false, rng)?;
        let out = self
            .model
            .q_values(&mut tape, &self.target, obs, tasks, &prep, StepOptions::default(), rng)?;
        Ok(tape.value(out.q).clone())
    }

    /// Build the full loss for one batch on `tape` without updating
    /// anything. Returns the total loss node and its breakdown.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<f64>,
        batch: &TransitionBatch,
        set: &RetrievalSet,
        rng: &mut R,
    ) -> AgentResult<(Var, LossBreakdown)> {
        batch.validate()?;
        if batch.is_empty() {
            return Err(TensorError::EmptyAxis { op: "train_step" }.into());
        }
        let cfg = &self.model.cfg;
        let tasks = Self::distinct_tasks(batch);
        let with_aux = cfg.aux != AuxVariant::None;
        let prep = self.model.prepare(tape, &self.online, set, &tasks, with_aux, rng)?;
        let train_opts = StepOptions {
            stochastic: true,
            ..Default::default()
        };
        let out = self.model.q_values(
            tape,
            &self.online,
            &batch.observations,
            &batch.tasks,
            &prep,
            train_opts,
            rng,
        )?;

        let mark = tape.len();
        let next_online = self.model.q_values(
            tape,
            &self.online,
            &batch.next_observations,
            &batch.tasks,
            &prep,
            StepOptions::default(),
            rng,
        )?;
        let q_online_next = tape.value(next_online.q).clone();
        tape.truncate(mark);
        let q_target_next = self.target_q(&batch.next_observations, &batch.tasks, set, rng)?;
        let targets = double_dqn_targets(&batch.rewards, &batch.dones, &q_online_next, &q_target_next, cfg.gamma);

        let td = td_loss(tape, out.q, &batch.actions, &targets, cfg.huber_delta)?;
        let mut total = td;
        let mut aux_value = 0.0;
        if let Some(aux) = prep.aux {
            aux_value = tape.value(aux).item();
            let scaled = tape.scale(aux, cfg.aux_coef);
            total = tape.add(total, scaled)?;
        }
        let kl_value = tape.value(out.kl).item();
        if cfg.uses_retrieval() {
            let scaled = tape.scale(out.kl, cfg.retrieval.beta);
            total = tape.add(total, scaled)?;
        }
        let breakdown = LossBreakdown {
            td: tape.value(td).item(),
            aux: aux_value,
            kl: kl_value,
            total: tape.value(total).item(),
            grad_norm: 0.0,
        };
        Ok((total, breakdown))
    }

    /// One optimisation step: loss, backward pass, Adam update and target
    /// refresh when the step count reaches a multiple of the period.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &TransitionBatch,
        set: &RetrievalSet,
        rng: &mut R,
    ) -> AgentResult<LossBreakdown> {
        let mut tape = Tape::new();
        let (total, mut breakdown) = self.loss(&mut tape, batch, set, rng)?;
        if ![breakdown.td, breakdown.aux, breakdown.kl, breakdown.total]
            .iter()
            .all(|x| x.is_finite())
        {
            return Err(AgentError::NonFiniteLoss {
                step: self.step,
                td: breakdown.td,
                aux: breakdown.aux,
                kl: breakdown.kl,
            });
        }
        let grads = tape.backward(total)?;
        let grads = grads.for_store(&self.online);
        breakdown.grad_norm = self.optimizer.step(&mut self.online, &grads)?;
        self.step += 1;
        if self.step % self.model.cfg.target_period == 0 {
            self.target.copy_from(&self.online)?;
        }
        Ok(breakdown)
    }
}

/// Forward-only evaluation with retrieval keys prepared once and reused
/// for every query.
pub struct Evaluator<'a> {
    model: &'a AgentModel,
    store: &'a ParamStore,
    tape: Tape<f64>,
    prepared: PreparedSet,
    task: u8,
    mark: usize,
}

impl<'a> Evaluator<'a> {
    /// `retrieval` is required by retrieval-augmented agents that read data.
    pub fn new<R: Rng + ?Sized>(
        model: &'a AgentModel,
        store: &'a ParamStore,
        task: u8,
        retrieval: Option<&TrajectoryBatch>,
        rng: &mut R,
    ) -> AgentResult<Self> {
        let mut tape = Tape::new();
        let needs_data = model.cfg.uses_retrieval() && model.cfg.retrieval.mode != RetrievalMode::NoRetrieval;
        let prepared = match retrieval {
            Some(b) if needs_data => {
                let mut set = RetrievalSet::new();
                set.insert(task, b.clone());
                model.prepare(&mut tape, store, &set, &[task], false, rng)?
            }
            None if needs_data => return Err(AgentError::MissingRetrieval(task)),
            _ => PreparedSet::default(),
        };
        let mark = tape.len();
        Ok(Self {
            model,
            store,
            tape,
            prepared,
            task,
            mark,
        })
    }

    /// Q-values and retrieval diagnostics for one observation.
    pub fn q_values_with_diagnostics<R: Rng + ?Sized>(
        &mut self,
        obs: &[f64],
        diagnostics: bool,
        rng: &mut R,
    ) -> AgentResult<(Vec<f64>, Vec<SlotDiagnostics>)> {
        self.tape.truncate(self.mark);
        let opts = StepOptions {
            diagnostics,
            ..Default::default()
        };
        let out = self
            .model
            .q_values(&mut self.tape, self.store, obs, &[self.task], &self.prepared, opts, rng)?;
        Ok((self.tape.value(out.q).data().to_vec(), out.diagnostics))
    }

    pub fn q_values<R: Rng + ?Sized>(&mut self, obs: &[f64], rng: &mut R) -> AgentResult<Vec<f64>> {
        Ok(self.q_values_with_diagnostics(obs, false, rng)?.0)
    }

    /// ε-greedy action; argmax ties go to the lowest action index.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &[f64], epsilon: f64, rng: &mut R) -> AgentResult<usize> {
        let q = self.q_values(obs, rng)?;
        Ok(epsilon_greedy(&q, epsilon, rng))
    }
}
