//! Slot-based retrieval over a batch of summarised trajectories.
//!
//! One retrieval step for a batch of agent states `s` (`[B, d_s]`):
//!
//! 1. each of `n_f` slots is advanced by a GRU fed `s`, giving prestates
//!    `m̂`, and emits a query `q = f_query(m̂)`;
//! 2. queries score every retrieval state by `q·κ/√d_e`, where keys
//!    `κ = h·W^e` come from forward summaries; the best trajectories are
//!    kept, then the best states among them, with softmax weights
//!    renormalised over what survives;
//! 3. `g = Σ α·v`, values `v = b·W^v` from backward summaries;
//! 4. `z ~ p(z | g)` with a KL penalty against a prior `r(z | m̂)`;
//! 5. slots absorb `z` and attend to each other;
//! 6. the agent state attends over the `z` of every slot and is updated
//!    through a gated residual.
//!
//! Selection indices carry no gradient; gradients reach only the keys and
//! values of selected states.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::loss::{kl_elementwise, reparameterize};
use crate::nn::{batched_attention, GatedResidual, GruCell, Linear, Mlp, ResidualMode};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::summarizer::Summaries;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm_nt, Tensor};

/// How candidate trajectories are chosen before state-level selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ranking {
    /// Top trajectories by summed attention weight over their states.
    Learned,
    /// Highest-return trajectories; states are still chosen by attention.
    #[default]
    ByReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrievalMode {
    #[default]
    Full,
    /// One query per state computed from the agent state; no slots.
    QueryFromState,
    /// Slots are updated by self-attention alone and never read the
    /// retrieval batch.
    NoRetrieval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub n_slots: usize,
    pub slot_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub k_traj: usize,
    pub k_states: usize,
    pub ranking: Ranking,
    pub beta: f64,
    /// Retrieval rounds per state (steps 1 to 5 repeated before step 6).
    pub iterations: usize,
    pub mode: RetrievalMode,
    pub agent_heads: usize,
    pub query_layers: usize,
    /// When false, `z` is the posterior mean and the KL term is zero.
    pub use_bottleneck: bool,
    /// Zero the weights of both Gaussian heads so posterior and prior agree
    /// at initialisation.
    pub ib_zero_init: bool,
    pub residual: ResidualMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            n_slots: 4,
            slot_dim: 128,
            key_dim: 64,
            value_dim: 64,
            k_traj: 10,
            k_states: 10,
            ranking: Ranking::ByReturn,
            beta: 0.3,
            iterations: 1,
            mode: RetrievalMode::Full,
            agent_heads: 1,
            query_layers: 1,
            use_bottleneck: true,
            ib_zero_init: false,
            residual: ResidualMode::Gated,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let bad = |m: String| Err(TensorError::Invalid(m));
        if self.n_slots == 0 || self.slot_dim == 0 || self.key_dim == 0 || self.value_dim == 0 {
            return bad("retrieval dimensions must be positive".into());
        }
        if self.k_traj == 0 || self.k_states == 0 {
            return bad("k_traj and k_states must be positive".into());
        }
        if self.iterations == 0 {
            return bad("retrieval needs at least one iteration".into());
        }
        if self.query_layers == 0 {
            return bad("query network needs at least one layer".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        let h = self.agent_heads.max(1);
        if self.key_dim % h != 0 || state_dim % h != 0 {
            return bad(format!(
                "{h} agent heads do not divide key dim {} and state dim {state_dim}",
                self.key_dim
            ));
        }
        Ok(())
    }

    /// Checks against the size of a concrete retrieval batch.
    pub fn check_batch(&self, num_traj: usize, len: usize) -> Result<()> {
        if num_traj == 0 || len == 0 {
            return Err(TensorError::EmptyAxis { op: "retrieval_batch" });
        }
        if self.k_traj > num_traj {
            return Err(TensorError::Invalid(format!(
                "k_traj {} exceeds retrieval batch of {num_traj} trajectories",
                self.k_traj
            )));
        }
        if self.k_states > self.k_traj * len {
            return Err(TensorError::Invalid(format!(
                "k_states {} exceeds the {} states of the kept trajectories",
                self.k_states,
                self.k_traj * len
            )));
        }
        Ok(())
    }
}

/// Result of top-k selection for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Kept trajectories, ascending.
    pub trajectories: Vec<usize>,
    /// Kept `(trajectory, step)` pairs, ascending.
    pub states: Vec<(usize, usize)>,
    /// Renormalised attention weight of each kept state.
    pub weights: Vec<f64>,
}

fn softmax_f64(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Two-stage hard top-k selection for one query.
///
/// `logits[i * len + j]` scores step `j` of trajectory `i`. Ties are broken
/// by lower trajectory index, then lower step index.
pub fn select_topk(
    logits: &[f64],
    num_traj: usize,
    len: usize,
    returns: &[f64],
    k_traj: usize,
    k_states: usize,
    ranking: Ranking,
) -> Result<Selection> {
    if num_traj == 0 || len == 0 {
        return Err(TensorError::EmptyAxis { op: "select_topk" });
    }
    if logits.len() != num_traj * len || returns.len() != num_traj {
        return Err(TensorError::ShapeMismatch {
            op: "select_topk",
            left: vec![logits.len(), returns.len()],
            right: vec![num_traj * len, num_traj],
        });
    }
    if k_traj == 0 || k_traj > num_traj || k_states == 0 || k_states > k_traj * len {
        return Err(TensorError::Invalid(format!(
            "cannot keep {k_traj} trajectories and {k_states} states from {num_traj} x {len}"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op: "select_topk" });
    }

    let scores: Vec<f64> = match ranking {
        Ranking::Learned => {
            let alpha = softmax_f64(logits);
            alpha.chunks(len).map(|c| c.iter().sum()).collect()
        }
        Ranking::ByReturn => returns.to_vec(),
    };
    let mut order: Vec<usize> = (0..num_traj).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut trajectories = order[..k_traj].to_vec();
    trajectories.sort_unstable();

    // Renormalising the softmax over a subset is the softmax of that
    // subset's logits, so ranking by logit is ranking by weight.
    let mut cands: Vec<(usize, usize)> = trajectories
        .iter()
        .flat_map(|&i| (0..len).map(move |j| (i, j)))
        .collect();
    cands.sort_by(|a, b| {
        let (la, lb) = (logits[a.0 * len + a.1], logits[b.0 * len + b.1]);
        match lb.total_cmp(&la) {
            Ordering::Equal => a.cmp(b),
            o => o,
        }
    });
    let mut states = cands[..k_states].to_vec();
    states.sort_unstable();
    let kept: Vec<f64> = states.iter().map(|&(i, j)| logits[i * len + j]).collect();
    Ok(Selection {
        trajectories,
        states,
        weights: softmax_f64(&kept),
    })
}

/// Per-slot record of what a retrieval step read.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDiagnostics {
    /// Row of the agent state within the batch passed to the step.
    pub row: usize,
    pub slot: usize,
    pub selection: Selection,
    pub kl: f64,
}

/// Keys and values of a summarised retrieval batch, ready to be queried.
#[derive(Debug, Clone)]
pub struct PreparedRetrieval {
    /// `[len * num_traj, key_dim]`, time-major rows.
    pub keys: Var,
    /// `[len * num_traj, value_dim]`
    pub values: Var,
    pub num_traj: usize,
    pub len: usize,
    pub returns: Vec<f64>,
}

impl PreparedRetrieval {
    fn row(&self, traj: usize, step: usize) -> usize {
        step * self.num_traj + traj
    }
}

/// Everything a retrieval step produces.
#[derive(Debug, Clone)]
pub struct RetrievalOutput {
    /// Updated agent state `s̃`, `[B, d_s]`.
    pub state: Var,
    /// Agent-facing summary `u`, `[B, d_s]`.
    pub u: Var,
    /// Bottleneck samples, `[B * n_f, slot_dim]` (`[B, slot_dim]` when the
    /// query comes from the agent state).
    pub z: Var,
    /// KL penalty summed over slots and averaged over the batch.
    pub kl: Var,
    /// Slot states after step 5 when requested.
    pub next_slots: Option<Var>,
    /// Step-6 attention weights, one `[B, 1, n_f]` tensor per head.
    pub agent_weights: Vec<Var>,
    pub diagnostics: Vec<SlotDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepOptions {
    /// Sample `z`; otherwise use the posterior mean.
    pub stochastic: bool,
    /// Run step 5 after the final round and return the new slots.
    pub next_slots: bool,
    pub diagnostics: bool,
}

/// Parameters of the retrieval process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalParams {
    pub cfg_state_dim: usize,
    pub query_cell: GruCell,
    pub query: Mlp,
    pub state_query: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub post_mu: Linear,
    pub post_logvar: Linear,
    pub prior_mu: Linear,
    pub prior_logvar: Linear,
    pub state_prior_mu: Linear,
    pub state_prior_logvar: Linear,
    pub slot_update: GatedResidual,
    pub sa_query: Linear,
    pub sa_key: Linear,
    pub sa_value: Linear,
    pub slot_merge: GatedResidual,
    pub ag_query: Linear,
    pub ag_key: Linear,
    pub ag_value: Linear,
    pub agent_update: GatedResidual,
}

impl RetrievalParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        state_dim: usize,
        summary_hidden: usize,
        cfg: &RetrievalConfig,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Retrieval;
        let (dm, de, dv) = (cfg.slot_dim, cfg.key_dim, cfg.value_dim);
        let mut query_dims = vec![dm; cfg.query_layers.max(1)];
        query_dims.push(de);
        let gauss = |store: &mut ParamStore<T>, name: &str, din: usize, rng: &mut R| {
            let l = Linear::new(store, name, g, din, dm, rng);
            if cfg.ib_zero_init {
                *store.get_mut(l.weight) = Tensor::zeros(&[din, dm]);
            }
            l
        };
        let post_mu = gauss(store, "retrieval.post_mu", dv, rng);
        let post_logvar = gauss(store, "retrieval.post_logvar", dv, rng);
        let prior_mu = gauss(store, "retrieval.prior_mu", dm, rng);
        let prior_logvar = gauss(store, "retrieval.prior_logvar", dm, rng);
        let state_prior_mu = gauss(store, "retrieval.state_prior_mu", state_dim, rng);
        let state_prior_logvar = gauss(store, "retrieval.state_prior_logvar", state_dim, rng);
        Self {
            cfg_state_dim: state_dim,
            query_cell: GruCell::new(store, "retrieval.query_cell", g, state_dim, dm, rng),
            query: Mlp::new(store, "retrieval.query", g, &query_dims, false, rng),
            state_query: Linear::new(store, "retrieval.state_query", g, state_dim, de, rng),
            key_proj: Linear::projection(store, "retrieval.key", g, state_dim, de, rng),
            value_proj: Linear::projection(store, "retrieval.value", g, summary_hidden, dv, rng),
            post_mu,
            post_logvar,
            prior_mu,
            prior_logvar,
            state_prior_mu,
            state_prior_logvar,
            slot_update: GatedResidual::new(store, "retrieval.slot_update", g, dm, cfg.residual, rng),
            sa_query: Linear::projection(store, "retrieval.sa_query", g, dm, dm, rng),
            sa_key: Linear::projection(store, "retrieval.sa_key", g, dm, dm, rng),
            sa_value: Linear::projection(store, "retrieval.sa_value", g, dm, dm, rng),
            slot_merge: GatedResidual::new(store, "retrieval.slot_merge", g, dm, cfg.residual, rng),
            ag_query: Linear::projection(store, "retrieval.ag_query", g, state_dim, de, rng),
            ag_key: Linear::projection(store, "retrieval.ag_key", g, dm, de, rng),
            ag_value: Linear::projection(store, "retrieval.ag_value", g, dm, state_dim, rng),
            agent_update: GatedResidual::new(store, "retrieval.agent_update", g, state_dim, cfg.residual, rng),
        }
    }

    /// Fresh slots for `batch` agent states, each drawn from `N(0, 1/d_m)`.
    pub fn initial_slots<T: Scalar, R: Rng + ?Sized>(cfg: &RetrievalConfig, batch: usize, rng: &mut R) -> Tensor<T> {
        let std = 1.0 / (cfg.slot_dim as f64).sqrt();
        Tensor::randn(&[batch * cfg.n_slots, cfg.slot_dim], std, rng)
    }

    /// Project summaries into keys (from forward summaries) and values
    /// (from backward summaries).
    pub fn prepare<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        summaries: &Summaries,
        returns: &[f64],
    ) -> Result<PreparedRetrieval> {
        if returns.len() != summaries.num_traj {
            return Err(TensorError::ShapeMismatch {
                op: "prepare_retrieval",
                left: vec![returns.len()],
                right: vec![summaries.num_traj],
            });
        }
        Ok(PreparedRetrieval {
            keys: self.key_proj.forward(tape, store, summaries.forward)?,
            values: self.value_proj.forward(tape, store, summaries.backward)?,
            num_traj: summaries.num_traj,
            len: summaries.len,
            returns: returns.to_vec(),
        })
    }

    /// Step 1: advance every slot with the agent state and emit queries.
    /// `states` is `[B, d_s]`, `slots` `[B * n_f, d_m]`; rows of the outputs
    /// are ordered `b * n_f + k`.
    pub fn compute_queries<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        states: Var,
        slots: Var,
        n_slots: usize,
    ) -> Result<(Var, Var)> {
        let b = tape.value(states).rows();
        if tape.value(slots).rows() != b * n_slots {
            return Err(TensorError::ShapeMismatch {
                op: "compute_queries",
                left: tape.shape(slots).to_vec(),
                right: vec![b * n_slots, self.query_cell.hidden_dim],
            });
        }
        let rep = tape.repeat_rows(states, n_slots)?;
        let prestate = self.query_cell.step(tape, store, rep, slots)?;
        let queries = self.query.forward(tape, store, prestate)?;
        Ok((prestate, queries))
    }

    /// Step 2 on values only: pick trajectories and states for every query row.
    pub fn select<T: Scalar>(
        &self,
        tape: &Tape<T>,
        cfg: &RetrievalConfig,
        ctx: &PreparedRetrieval,
        queries: Var,
    ) -> Result<Vec<Selection>> {
        cfg.check_batch(ctx.num_traj, ctx.len)?;
        let qv = tape.value(queries);
        let kv = tape.value(ctx.keys);
        let de = kv.last_dim();
        if qv.last_dim() != de {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let (n, len) = (ctx.num_traj, ctx.len);
        // Candidate trajectories, ascending, so local indices keep the
        // global tie-break order.
        let cand: Vec<usize> = match cfg.ranking {
            Ranking::Learned => (0..n).collect(),
            Ranking::ByReturn => {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| ctx.returns[b].total_cmp(&ctx.returns[a]).then(a.cmp(&b)));
                let mut keep = order[..cfg.k_traj].to_vec();
                keep.sort_unstable();
                keep
            }
        };
        let nc = cand.len();
        let mut kmat = Vec::with_capacity(nc * len * de);
        for &i in &cand {
            for j in 0..len {
                kmat.extend_from_slice(kv.row(ctx.row(i, j)));
            }
        }
        let rows = qv.rows();
        let mut logits = vec![T::zero(); rows * nc * len];
        gemm_nt(qv.data(), &kmat, &mut logits, rows, de, nc * len);
        let scale = 1.0 / (de as f64).sqrt();
        let cand_returns: Vec<f64> = cand.iter().map(|&i| ctx.returns[i]).collect();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row: Vec<f64> = logits[r * nc * len..(r + 1) * nc * len]
                .iter()
                .map(|x| x.to_f64_lossy() * scale)
                .collect();
            let mut sel = select_topk(&row, nc, len, &cand_returns, cfg.k_traj, cfg.k_states, cfg.ranking)?;
            for t in sel.trajectories.iter_mut() {
                *t = cand[*t];
            }
            for s in sel.states.iter_mut() {
                s.0 = cand[s.0];
            }
            out.push(sel);
        }
        Ok(out)
    }

    /// Step 3: `g = Σ α v` over the selected states, with `α` recomputed on
    /// the tape. Returns `g` (`[R, value_dim]`) and `α` (`[R, k_states]`).
    pub fn retrieve<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ctx: &PreparedRetrieval,
        queries: Var,
        selections: &[Selection],
    ) -> Result<(Var, Var)> {
        let rows = tape.value(queries).rows();
        if selections.len() != rows || rows == 0 {
            return Err(TensorError::Invalid(format!(
                "{} selections for {rows} queries",
                selections.len()
            )));
        }
        let k = selections[0].states.len();
        let n_rows = tape.value(ctx.keys).rows();
        let mut idx = Vec::with_capacity(rows * k);
        for sel in selections {
            if sel.states.len() != k {
                return Err(TensorError::Invalid("selections differ in size".into()));
            }
            for &(i, j) in &sel.states {
                if i >= ctx.num_traj || j >= ctx.len {
                    return Err(TensorError::IndexOutOfRange {
                        op: "retrieve",
                        index: ctx.row(i, j),
                        len: n_rows,
                    });
                }
                idx.push(ctx.row(i, j));
            }
        }
        let de = tape.value(ctx.keys).last_dim();
        let dv = tape.value(ctx.values).last_dim();
        let q = tape.repeat_rows(queries, k)?;
        let keys = tape.gather_rows(ctx.keys, &idx)?;
        let prod = tape.mul(q, keys)?;
        let logits = tape.sum_last(prod);
        let logits = tape.reshape(logits, &[rows, k])?;
        let logits = tape.scale(logits, T::one() / T::from_usize(de).unwrap().sqrt());
        let alpha = tape.softmax(logits)?;
        let a3 = tape.reshape(alpha, &[rows, 1, k])?;
        let vals = tape.gather_rows(ctx.values, &idx)?;
        let vals = tape.reshape(vals, &[rows, k, dv])?;
        let g = tape.bmm(a3, vals)?;
        let g = tape.reshape(g, &[rows, dv])?;
        Ok((g, alpha))
    }

    /// Step 4: sample (or take the mean of) `p(z | g)` and compute the
    /// per-row KL to the prior `r(z | cond)`.
    ///
    /// The KL is built from the Gaussian heads applied to detached inputs,
    /// so it trains the heads alone and leaves the encoder, summarizer and
    /// query path to the RL loss. Returns `(z, kl_rows [R])`.
    #[allow(clippy::too_many_arguments)]
    pub fn bottleneck<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &RetrievalConfig,
        g: Var,
        cond: Var,
        prior_from_state: bool,
        stochastic: bool,
        rng: &mut R,
    ) -> Result<(Var, Option<Var>)> {
        let mu = self.post_mu.forward(tape, store, g)?;
        if !cfg.use_bottleneck {
            return Ok((mu, None));
        }
        let z = if stochastic {
            let lv = self.post_logvar.forward(tape, store, g)?;
            let noise = tape.constant(Tensor::randn(tape.shape(mu), 1.0, rng));
            reparameterize(tape, mu, lv, noise)?
        } else {
            mu
        };
        let (prior_mu, prior_lv) = if prior_from_state {
            (self.state_prior_mu, self.state_prior_logvar)
        } else {
            (self.prior_mu, self.prior_logvar)
        };
        let gd = tape.stop_gradient(g);
        let cd = tape.stop_gradient(cond);
        let mp = self.post_mu.forward(tape, store, gd)?;
        let lp = self.post_logvar.forward(tape, store, gd)?;
        let mr = prior_mu.forward(tape, store, cd)?;
        let lr = prior_lv.forward(tape, store, cd)?;
        for v in [mp, lp, mr, lr] {
            if !tape.value(v).is_finite() {
                return Err(TensorError::NonFinite { op: "bottleneck" });
            }
        }
        let kl = kl_elementwise(tape, mp, lp, mr, lr)?;
        Ok((z, Some(tape.sum_last(kl))))
    }

    /// Step 5: each slot absorbs its `z`, then slots attend to one another
    /// (queries from the prestates, keys and values from the updated slots).
    /// Returns the new slots and the attention weights `[B, n_f, n_f]`.
    pub fn update_slots<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prestate: Var,
        z: Var,
        n_slots: usize,
    ) -> Result<(Var, Var)> {
        let merged = self.slot_update.forward(tape, store, prestate, z)?;
        self.slot_attention(tape, store, prestate, merged, n_slots)
    }

    fn slot_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query_src: Var,
        slots: Var,
        n_slots: usize,
    ) -> Result<(Var, Var)> {
        let rows = tape.value(slots).rows();
        let dm = tape.value(slots).last_dim();
        if rows % n_slots != 0 || tape.shape(query_src) != tape.shape(slots) {
            return Err(TensorError::ShapeMismatch {
                op: "update_slots",
                left: tape.shape(query_src).to_vec(),
                right: tape.shape(slots).to_vec(),
            });
        }
        let b = rows / n_slots;
        let q = self.sa_query.forward(tape, store, query_src)?;
        let k = self.sa_key.forward(tape, store, slots)?;
        let v = self.sa_value.forward(tape, store, slots)?;
        let q = tape.reshape(q, &[b, n_slots, dm])?;
        let k = tape.reshape(k, &[b, n_slots, dm])?;
        let v = tape.reshape(v, &[b, n_slots, dm])?;
        let att = batched_attention(tape, q, k, v, 1)?;
        let out = tape.reshape(att.output, &[rows, dm])?;
        let next = self.slot_merge.forward(tape, store, slots, out)?;
        Ok((next, att.weights[0]))
    }

    /// Step 6: the agent state attends over the per-slot `z` and is updated
    /// by a gated residual. `z` is `[B * n_f, d_m]`. Returns `(s̃, u, γ)`.
    pub fn update_agent_state<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        states: Var,
        z: Var,
        n_slots: usize,
        heads: usize,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let b = tape.value(states).rows();
        let ds = tape.value(states).last_dim();
        if tape.value(z).rows() != b * n_slots {
            return Err(TensorError::ShapeMismatch {
                op: "update_agent_state",
                left: tape.shape(z).to_vec(),
                right: vec![b * n_slots],
            });
        }
        let de = self.ag_query.out_dim;
        let d = self.ag_query.forward(tape, store, states)?;
        let d = tape.reshape(d, &[b, 1, de])?;
        let k = self.ag_key.forward(tape, store, z)?;
        let k = tape.reshape(k, &[b, n_slots, de])?;
        let v = self.ag_value.forward(tape, store, z)?;
        let v = tape.reshape(v, &[b, n_slots, ds])?;
        let att = batched_attention(tape, d, k, v, heads)?;
        let u = tape.reshape(att.output, &[b, ds])?;
        let next = self.agent_update.forward(tape, store, states, u)?;
        Ok((next, u, att.weights))
    }

    /// One full retrieval step for a batch of agent states.
    ///
    /// `slots` is required unless the query comes from the agent state;
    /// `ctx` is required unless retrieval is disabled.
    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &RetrievalConfig,
        states: Var,
        slots: Option<Var>,
        ctx: Option<&PreparedRetrieval>,
        opts: StepOptions,
        rng: &mut R,
    ) -> Result<RetrievalOutput> {
        let b = tape.value(states).rows();
        if b == 0 {
            return Err(TensorError::EmptyAxis { op: "retrieval_step" });
        }
        let nf = cfg.n_slots;
        let need_ctx = || {
            ctx.ok_or_else(|| TensorError::Invalid("retrieval step needs a prepared retrieval batch".into()))
        };
        let need_slots = || slots.ok_or_else(|| TensorError::Invalid("retrieval step needs slot states".into()));
        let batch_mean = T::one() / T::from_usize(b).unwrap();

        match cfg.mode {
            RetrievalMode::QueryFromState => {
                let ctx = need_ctx()?;
                let q = self.state_query.forward(tape, store, states)?;
                let sels = self.select(tape, cfg, ctx, q)?;
                let (g, _) = self.retrieve(tape, ctx, q, &sels)?;
                let (z, kl_rows) = self.bottleneck(tape, store, cfg, g, states, true, opts.stochastic, rng)?;
                let u = self.ag_value.forward(tape, store, z)?;
                let state = self.agent_update.forward(tape, store, states, u)?;
                let diagnostics = if opts.diagnostics {
                    diagnostics(tape, sels, kl_rows, 1)
                } else {
                    Vec::new()
                };
                let kl = total_kl(tape, kl_rows, batch_mean);
                Ok(RetrievalOutput {
                    state,
                    u,
                    z,
                    kl,
                    next_slots: None,
                    agent_weights: Vec::new(),
                    diagnostics,
                })
            }
            RetrievalMode::NoRetrieval => {
                let m = need_slots()?;
                let rep = tape.repeat_rows(states, nf)?;
                let prestate = self.query_cell.step(tape, store, rep, m)?;
                let (next, _) = self.slot_attention(tape, store, prestate, prestate, nf)?;
                let (state, u, w) = self.update_agent_state(tape, store, states, next, nf, cfg.agent_heads)?;
                let kl = tape.constant(Tensor::scalar(T::zero()));
                Ok(RetrievalOutput {
                    state,
                    u,
                    z: next,
                    kl,
                    next_slots: opts.next_slots.then_some(next),
                    agent_weights: w,
                    diagnostics: Vec::new(),
                })
            }
            RetrievalMode::Full => {
                let ctx = need_ctx()?;
                let mut m = need_slots()?;
                let mut kl_total: Option<Var> = None;
                let mut z = m;
                let mut next_slots = None;
                let mut diags = Vec::new();
                for it in 0..cfg.iterations {
                    let (prestate, q) = self.compute_queries(tape, store, states, m, nf)?;
                    let sels = self.select(tape, cfg, ctx, q)?;
                    let (g, _) = self.retrieve(tape, ctx, q, &sels)?;
                    let (zi, kl_rows) =
                        self.bottleneck(tape, store, cfg, g, prestate, false, opts.stochastic, rng)?;
                    z = zi;
                    if opts.diagnostics && it + 1 == cfg.iterations {
                        diags = diagnostics(tape, sels, kl_rows, nf);
                    }
                    let kl = total_kl(tape, kl_rows, batch_mean);
                    kl_total = Some(match kl_total {
                        Some(prev) => tape.add(prev, kl)?,
                        None => kl,
                    });
                    if it + 1 < cfg.iterations || opts.next_slots {
                        let (next, _) = self.update_slots(tape, store, prestate, z, nf)?;
                        m = next;
                        next_slots = Some(next);
                    }
                }
                let (state, u, w) = self.update_agent_state(tape, store, states, z, nf, cfg.agent_heads)?;
                Ok(RetrievalOutput {
                    state,
                    u,
                    z,
                    kl: kl_total.expect("at least one iteration"),
                    next_slots: if opts.next_slots { next_slots } else { None },
                    agent_weights: w,
                    diagnostics: diags,
                })
            }
        }
    }
}

fn total_kl<T: Scalar>(tape: &mut Tape<T>, kl_rows: Option<Var>, batch_mean: T) -> Var {
    match kl_rows {
        Some(rows) => {
            let s = tape.sum(rows);
            tape.scale(s, batch_mean)
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    }
}

fn diagnostics<T: Scalar>(tape: &Tape<T>, sels: Vec<Selection>, kl_rows: Option<Var>, n_slots: usize) -> Vec<SlotDiagnostics> {
    let kl: Vec<f64> = match kl_rows {
        Some(v) => tape.value(v).to_f64_vec(),
        None => vec![0.0; sels.len()],
    };
    sels.into_iter()
        .enumerate()
        .map(|(r, selection)| SlotDiagnostics {
            row: r / n_slots,
            slot: r % n_slots,
            selection,
            kl: kl[r],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(
        logits: &[f64],
        n: usize,
        len: usize,
        returns: &[f64],
        kt: usize,
        ks: usize,
        ranking: Ranking,
    ) -> (Vec<usize>, Vec<(usize, usize)>) {
        // Exhaustive: compute every trajectory's score, sort all, then all
        // candidate states by weight.
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let s = match ranking {
                    Ranking::Learned => (0..len).map(|j| logits[i * len + j].exp() / z).sum(),
                    Ranking::ByReturn => returns[i],
                };
                (s, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut t: Vec<usize> = scored[..kt].iter().map(|x| x.1).collect();
        t.sort();
        let mut st: Vec<(f64, usize, usize)> = Vec::new();
        for &i in &t {
            for j in 0..len {
                st.push((logits[i * len + j], i, j));
            }
        }
        st.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut s: Vec<(usize, usize)> = st[..ks].iter().map(|x| (x.1, x.2)).collect();
        s.sort();
        (t, s)
    }

    #[test]
    fn no_truncation_gives_plain_softmax() {
        let logits = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
        let sel = select_topk(&logits, 2, 3, &[0.0, 1.0], 2, 6, Ranking::Learned).unwrap();
        let sm = softmax_f64(&logits);
        for (w, s) in sel.weights.iter().zip(&sm) {
            assert!((w - s).abs() < 1e-15);
        }
    }

    #[test]
    fn selection_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let (n, len) = (16, 5);
            let ranking = if trial % 2 == 0 { Ranking::Learned } else { Ranking::ByReturn };
            // Coarse logits create ties; learned trajectory scores are sums
            // whose rounding depends on evaluation order, so that mode
            // draws continuous logits instead.
            let logits: Vec<f64> = (0..n * len)
                .map(|_| match ranking {
                    Ranking::ByReturn => (rng.random_range(0..6) as f64) * 0.5,
                    Ranking::Learned => rng.random_range(-3.0..3.0),
                })
                .collect();
            let returns: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
            let kt = rng.random_range(1..=n);
            let ks = rng.random_range(1..=kt * len);
            let sel = select_topk(&logits, n, len, &returns, kt, ks, ranking).unwrap();
            let (t, s) = brute_force(&logits, n, len, &returns, kt, ks, ranking);
            assert_eq!(sel.trajectories, t);
            assert_eq!(sel.states, s);
            let total: f64 = sel.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_errors() {
        assert!(select_topk(&[], 0, 3, &[], 1, 1, Ranking::Learned).is_err());
        assert!(select_topk(&[0.0; 6], 2, 3, &[0.0; 2], 3, 1, Ranking::Learned).is_err());
        assert!(select_topk(&[0.0; 6], 2, 3, &[0.0; 2], 1, 4, Ranking::Learned).is_err());
        assert!(select_topk(&[f64::NAN; 6], 2, 3, &[0.0; 2], 1, 1, Ranking::Learned).is_err());
    }

    #[test]
    fn equal_logits_break_ties_by_index() {
        let sel = select_topk(&[1.0; 12], 4, 3, &[0.0; 4], 2, 3, Ranking::Learned).unwrap();
        assert_eq!(sel.trajectories, vec![0, 1]);
        assert_eq!(sel.states, vec![(0, 0), (0, 1), (0, 2)]);
    }
}
