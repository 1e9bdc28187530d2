//! State encoder and forward/backward trajectory summaries.
//!
//! The forward summary `h` of a step depends only on that step and the
//! ones before it; the backward summary `b` only on that step and the ones
//! after it. Keys for retrieval are built from `h`, values from `b`.

use rand::seq::index::sample;
use rand::Rng;

use crate::batch::TrajectoryBatch;
use crate::error::{Result, TensorError};
use crate::loss::{cross_entropy, mse};
use crate::nn::{GatedResidual, GruCell, Linear, Mlp, ResidualMode};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `f_enc`: the first two layers of the Q network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub mlp: Mlp,
    pub obs_dim: usize,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        obs_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(
                store,
                "encoder",
                ParamGroup::Encoder,
                &[obs_dim, state_dim, state_dim],
                true,
                rng,
            ),
            obs_dim,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// `[n, obs_dim] -> [n, state_dim]`
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, obs: Var) -> Result<Var> {
        if tape.value(obs).last_dim() != self.obs_dim || tape.shape(obs).len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: tape.shape(obs).to_vec(),
                right: vec![self.obs_dim],
            });
        }
        self.mlp.forward(tape, store, obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummarizerConfig {
    pub hidden: usize,
    pub num_actions: usize,
    pub residual: ResidualMode,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            num_actions: 7,
            residual: ResidualMode::Gated,
        }
    }
}

/// Forward and backward GRU summarizers with their auxiliary heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summarizer {
    pub state_dim: usize,
    pub hidden: usize,
    pub num_actions: usize,
    /// Embeds the previous action (one-hot) and reward into state space.
    pub prev_step_embed: Linear,
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
    pub forward_proj: Linear,
    pub merge: GatedResidual,
    pub action_head: Linear,
    pub reward_head: Linear,
    pub value_head: Linear,
    pub mask_token: ParamId,
    pub masked_from_past: Linear,
    pub masked_from_future: Linear,
}

/// Per-step summaries of a time-major batch of `num_traj` trajectories.
#[derive(Debug, Clone, Copy)]
pub struct Summaries {
    /// `[len * num_traj, state_dim]`
    pub forward: Var,
    /// `[len * num_traj, hidden]`
    pub backward: Var,
    pub num_traj: usize,
    pub len: usize,
}

/// Unscaled auxiliary loss terms.
#[derive(Debug, Clone, Copy)]
pub struct AuxLosses {
    pub action: Var,
    pub reward: Var,
    pub value: Var,
    pub total: Var,
}

impl Summarizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        state_dim: usize,
        cfg: SummarizerConfig,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Summarizer;
        let h = cfg.hidden;
        Self {
            state_dim,
            hidden: h,
            num_actions: cfg.num_actions,
            prev_step_embed: Linear::projection(store, "summarizer.prev_step", g, cfg.num_actions + 1, state_dim, rng),
            forward_cell: GruCell::new(store, "summarizer.forward", g, state_dim, h, rng),
            backward_cell: GruCell::new(store, "summarizer.backward", g, state_dim, h, rng),
            forward_proj: Linear::new(store, "summarizer.forward_proj", g, h, state_dim, rng),
            merge: GatedResidual::new(store, "summarizer.merge", g, state_dim, cfg.residual, rng),
            action_head: Linear::new(store, "summarizer.action_head", g, state_dim, cfg.num_actions, rng),
            reward_head: Linear::new(store, "summarizer.reward_head", g, h, 1, rng),
            value_head: Linear::new(store, "summarizer.value_head", g, h, 1, rng),
            mask_token: store.add(
                "summarizer.mask_token",
                g,
                Tensor::randn(&[state_dim], 0.1, rng),
            ),
            masked_from_past: Linear::new(store, "summarizer.masked_past", g, state_dim, state_dim, rng),
            masked_from_future: Linear::projection(store, "summarizer.masked_future", g, h, state_dim, rng),
        }
    }

    /// Summarizer inputs: encoded states plus an embedding of the previous
    /// step's action and reward.
    pub fn step_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        states: Var,
        batch: &TrajectoryBatch,
    ) -> Result<Var> {
        let feats = batch.previous_step_features(self.num_actions);
        let feats = tape.constant(Tensor::from_vec(
            vec![batch.num_steps(), self.num_actions + 1],
            feats.into_iter().map(T::lit).collect(),
        )?);
        let emb = self.prev_step_embed.forward(tape, store, feats)?;
        tape.add(states, emb)
    }

    /// Run both summarizers over time-major inputs `[len * num_traj, state_dim]`.
    pub fn summarize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: Var,
        num_traj: usize,
        len: usize,
    ) -> Result<Summaries> {
        if len == 0 || num_traj == 0 {
            return Err(TensorError::EmptyAxis { op: "summarize" });
        }
        if tape.shape(inputs) != [len * num_traj, self.state_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "summarize",
                left: tape.shape(inputs).to_vec(),
                right: vec![len * num_traj, self.state_dim],
            });
        }
        let zero = tape.constant(Tensor::zeros(&[num_traj, self.hidden]));

        let gx = self.forward_cell.project_input(tape, store, inputs)?;
        let mut h = zero;
        let mut fwd = Vec::with_capacity(len);
        for t in 0..len {
            let gx_t = tape.slice_rows(gx, t * num_traj, num_traj)?;
            h = self.forward_cell.step_projected(tape, store, gx_t, h)?;
            fwd.push(h);
        }
        let fwd = tape.concat_rows(&fwd)?;

        let gx = self.backward_cell.project_input(tape, store, inputs)?;
        let mut b = zero;
        let mut bwd = vec![b; len];
        for t in (0..len).rev() {
            let gx_t = tape.slice_rows(gx, t * num_traj, num_traj)?;
            b = self.backward_cell.step_projected(tape, store, gx_t, b)?;
            bwd[t] = b;
        }
        let backward = tape.concat_rows(&bwd)?;

        let proj = self.forward_proj.forward(tape, store, fwd)?;
        let forward = self.merge.forward(tape, store, inputs, proj)?;
        Ok(Summaries {
            forward,
            backward,
            num_traj,
            len,
        })
    }

    /// Action prediction from `h`, reward and value prediction from `b`.
    pub fn auxiliary_losses<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        summaries: &Summaries,
        actions: &[usize],
        rewards: &[f64],
        mc_returns: &[f64],
    ) -> Result<AuxLosses> {
        let n = summaries.len * summaries.num_traj;
        if actions.len() != n || rewards.len() != n || mc_returns.len() != n {
            return Err(TensorError::Invalid(format!(
                "auxiliary targets have lengths {}/{}/{}, expected {n}",
                actions.len(),
                rewards.len(),
                mc_returns.len()
            )));
        }
        let logits = self.action_head.forward(tape, store, summaries.forward)?;
        let action = cross_entropy(tape, logits, actions)?;

        let r_pred = self.reward_head.forward(tape, store, summaries.backward)?;
        let r_tgt = tape.constant(Tensor::from_vec(vec![n, 1], rewards.iter().map(|&x| T::lit(x)).collect())?);
        let reward = mse(tape, r_pred, r_tgt)?;

        let v_pred = self.value_head.forward(tape, store, summaries.backward)?;
        let v_tgt = tape.constant(Tensor::from_vec(vec![n, 1], mc_returns.iter().map(|&x| T::lit(x)).collect())?);
        let value = mse(tape, v_pred, v_tgt)?;

        let s = tape.add(action, reward)?;
        let total = tape.add(s, value)?;
        Ok(AuxLosses {
            action,
            reward,
            value,
            total,
        })
    }

    /// Number of positions masked per trajectory.
    pub fn masked_count(len: usize, mask_fraction: f64) -> usize {
        (mask_fraction * len as f64).round() as usize
    }

    /// Masked-state regression: a fraction of step inputs is replaced by a
    /// learned mask token before summarisation, and each masked state is
    /// predicted from the summaries at its position. Returns `None` when
    /// rounding leaves nothing to mask.
    #[allow(clippy::too_many_arguments)]
    pub fn masked_state_loss<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: Var,
        targets: Var,
        num_traj: usize,
        len: usize,
        mask_fraction: f64,
        rng: &mut R,
    ) -> Result<Option<Var>> {
        if len < 2 {
            return Err(TensorError::Invalid("masked-state loss needs trajectories of length >= 2".into()));
        }
        let k = Self::masked_count(len, mask_fraction);
        if k >= len {
            return Err(TensorError::Invalid(format!(
                "mask fraction {mask_fraction} masks all {len} positions"
            )));
        }
        if k == 0 {
            return Ok(None);
        }
        let d = self.state_dim;
        let mut rows = Vec::with_capacity(k * num_traj);
        for i in 0..num_traj {
            for j in sample(rng, len, k).into_iter() {
                rows.push(j * num_traj + i);
            }
        }
        rows.sort_unstable();
        let mut keep = vec![T::one(); len * num_traj * d];
        let mut masked = vec![T::zero(); len * num_traj * d];
        for &r in &rows {
            for c in 0..d {
                keep[r * d + c] = T::zero();
                masked[r * d + c] = T::one();
            }
        }
        let keep = tape.constant(Tensor::from_vec(vec![len * num_traj, d], keep)?);
        let masked = tape.constant(Tensor::from_vec(vec![len * num_traj, d], masked)?);
        let token = tape.param(store, self.mask_token);
        let kept = tape.mul(inputs, keep)?;
        let fill = tape.mul(masked, token)?;
        let masked_inputs = tape.add(kept, fill)?;
        let s = self.summarize(tape, store, masked_inputs, num_traj, len)?;
        let hp = tape.gather_rows(s.forward, &rows)?;
        let bp = tape.gather_rows(s.backward, &rows)?;
        let p1 = self.masked_from_past.forward(tape, store, hp)?;
        let p2 = self.masked_from_future.forward(tape, store, bp)?;
        let pred = tape.add(p1, p2)?;
        let tgt = tape.gather_rows(targets, &rows)?;
        let tgt = tape.stop_gradient(tgt);
        Ok(Some(mse(tape, pred, tgt)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(state_dim: usize, hidden: usize) -> (ParamStore<f64>, Summarizer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let s = Summarizer::new(
            &mut store,
            state_dim,
            SummarizerConfig {
                hidden,
                ..Default::default()
            },
            &mut rng,
        );
        (store, s, rng)
    }

    fn run(store: &ParamStore<f64>, s: &Summarizer, x: &Tensor<f64>, n: usize, len: usize) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let out = s.summarize(&mut tape, store, xi, n, len).unwrap();
        (tape.value(out.forward).clone(), tape.value(out.backward).clone())
    }

    #[test]
    fn encoder_output_width_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, 11, 64, &mut rng);
        let mut tape = Tape::new();
        let obs = tape.constant(Tensor::full(&[2, 11], 0.5));
        let s = enc.encode(&mut tape, &store, obs).unwrap();
        assert_eq!(tape.shape(s), &[2, 64]);
        let v = tape.value(s);
        assert_eq!(v.row(0), v.row(1));
        let bad = tape.constant(Tensor::zeros(&[1, 10]));
        assert!(enc.encode(&mut tape, &store, bad).is_err());
    }

    #[test]
    fn single_step_trajectory() {
        let (store, s, mut rng) = setup(4, 5);
        let x = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let (h, b) = run(&store, &s, &x, 1, 1);
        assert_eq!(h.shape(), &[1, 4]);
        assert_eq!(b.shape(), &[1, 5]);
        assert!(h.is_finite() && b.is_finite());
    }

    #[test]
    fn empty_trajectory_is_rejected() {
        let (store, s, _) = setup(4, 5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 4]));
        assert!(s.summarize(&mut tape, &store, x, 1, 0).is_err());
    }

    #[test]
    fn summaries_respect_causality() {
        let (store, s, mut rng) = setup(4, 6);
        let (n, len) = (3, 6);
        let x = Tensor::randn(&[n * len, 4], 1.0, &mut rng);
        let (h0, b0) = run(&store, &s, &x, n, len);
        let t = 2;
        // perturb step t+2 of trajectory 1
        let mut xp = x.clone();
        let r = (t + 2) * n + 1;
        for c in 0..4 {
            xp.data_mut()[r * 4 + c] += 0.7;
        }
        let (h1, b1) = run(&store, &s, &xp, n, len);
        for step in 0..=t + 1 {
            assert_eq!(h0.row(step * n + 1), h1.row(step * n + 1));
        }
        assert_ne!(b0.row(t * n + 1), b1.row(t * n + 1));
        for step in t + 3..len {
            assert_eq!(b0.row(step * n + 1), b1.row(step * n + 1));
        }
        // other trajectories untouched
        assert_eq!(h0.row(t * n), h1.row(t * n));
        assert_eq!(b0.row(t * n + 2), b1.row(t * n + 2));
    }

    #[test]
    fn saturated_action_logits_give_tiny_loss() {
        let (mut store, s, _) = setup(4, 5);
        // Action head reads h; make logits depend only on bias.
        *store.get_mut(s.action_head.weight) = Tensor::zeros(&[4, 7]);
        let mut bias = vec![0.0; 7];
        bias[3] = 12.0;
        *store.get_mut(s.action_head.bias.unwrap()) = Tensor::from_vec(vec![7], bias).unwrap();
        for head in [s.reward_head, s.value_head] {
            *store.get_mut(head.weight) = Tensor::zeros(&[5, 1]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let sm = s.summarize(&mut tape, &store, x, 1, 2).unwrap();
        let aux = s
            .auxiliary_losses(&mut tape, &store, &sm, &[3, 3], &[0.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert!(tape.value(aux.action).item() < 1e-4);
        assert_eq!(tape.value(aux.reward).item(), 0.0);
        assert_eq!(tape.value(aux.value).item(), 0.0);
    }

    #[test]
    fn auxiliary_losses_match_hand_computation() {
        let (mut store, s, _) = setup(2, 2);
        *store.get_mut(s.action_head.weight) = Tensor::zeros(&[2, 7]);
        let bias: Vec<f64> = (0..7).map(|a| a as f64 * 0.1).collect();
        *store.get_mut(s.action_head.bias.unwrap()) = Tensor::from_vec(vec![7], bias.clone()).unwrap();
        *store.get_mut(s.reward_head.weight) = Tensor::zeros(&[2, 1]);
        *store.get_mut(s.reward_head.bias.unwrap()) = Tensor::scalar(0.25).reshape(&[1]).unwrap();
        *store.get_mut(s.value_head.weight) = Tensor::zeros(&[2, 1]);
        *store.get_mut(s.value_head.bias.unwrap()) = Tensor::scalar(1.0).reshape(&[1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let sm = s.summarize(&mut tape, &store, x, 1, 2).unwrap();
        let aux = s
            .auxiliary_losses(&mut tape, &store, &sm, &[0, 6], &[0.0, 1.0], &[1.99, 1.0])
            .unwrap();
        let lse = bias.iter().map(|b: &f64| b.exp()).sum::<f64>().ln();
        let ce = ((lse - 0.0) + (lse - 0.6)) / 2.0;
        let rew = (0.25f64.powi(2) + 0.75f64.powi(2)) / 2.0;
        let val = ((1.0 - 1.99f64).powi(2) + 0.0) / 2.0;
        assert!((tape.value(aux.action).item() - ce).abs() < 1e-9);
        assert!((tape.value(aux.reward).item() - rew).abs() < 1e-9);
        assert!((tape.value(aux.value).item() - val).abs() < 1e-9);
        assert!((tape.value(aux.total).item() - (ce + rew + val)).abs() < 1e-9);
    }

    #[test]
    fn auxiliary_losses_reject_misaligned_targets() {
        let (store, s, _) = setup(2, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let sm = s.summarize(&mut tape, &store, x, 1, 2).unwrap();
        assert!(s.auxiliary_losses(&mut tape, &store, &sm, &[0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn masked_loss_edge_cases() {
        let (store, s, mut rng) = setup(3, 4);
        assert_eq!(Summarizer::masked_count(50, 0.15), 8);
        // l = 2 with 15% rounds to zero masked positions
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(&[2, 3], 1.0, &mut rng));
        let out = s.masked_state_loss(&mut tape, &store, x, x, 1, 2, 0.15, &mut rng).unwrap();
        assert!(out.is_none());
        // masking everything is an error
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(&[4, 3], 1.0, &mut rng));
        assert!(s.masked_state_loss(&mut tape, &store, x, x, 1, 4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn masked_loss_is_zero_for_a_perfect_predictor() {
        let (mut store, s, mut rng) = setup(3, 4);
        // predictor outputs bias only; target states all equal that bias.
        *store.get_mut(s.masked_from_past.weight) = Tensor::zeros(&[3, 3]);
        *store.get_mut(s.masked_from_future.weight) = Tensor::zeros(&[4, 3]);
        let target = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        *store.get_mut(s.masked_from_past.bias.unwrap()) = target.clone();
        let mut tape = Tape::new();
        let (n, len) = (2, 10);
        let x = tape.input(Tensor::randn(&[n * len, 3], 1.0, &mut rng));
        let rows: Vec<f64> = (0..n * len).flat_map(|_| target.data().to_vec()).collect();
        let t = tape.constant(Tensor::from_vec(vec![n * len, 3], rows).unwrap());
        let loss = s
            .masked_state_loss(&mut tape, &store, x, t, n, len, 0.2, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }
}
