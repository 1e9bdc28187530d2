//! Neural building blocks shared by the summarizer, retrieval process and agent.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check_last_dim<T: Scalar>(tape: &Tape<T>, op: &'static str, x: Var, want: usize) -> Result<()> {
    if tape.value(x).last_dim() != want || tape.shape(x).is_empty() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: tape.shape(x).to_vec(),
            right: vec![want],
        });
    }
    Ok(())
}

/// `x · W + b` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    /// Bias-free projection matrix.
    pub fn projection<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        );
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_last_dim(tape, "linear", x, self.in_dim)?;
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_on_output: bool,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        relu_on_output: bool,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Self {
            layers,
            relu_on_output,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < n || self.relu_on_output {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// GRU cell. Gate columns are laid out `[reset | update | candidate]`.
///
/// `h' = (1 − z) ⊙ h + z ⊙ n`, so a closed update gate (`z → 0`) keeps the
/// previous hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let h3 = 3 * hidden_dim;
        Self {
            w_input: store.add(
                format!("{name}.w_input"),
                group,
                Tensor::uniform(&[input_dim, h3], bound, rng),
            ),
            w_hidden: store.add(
                format!("{name}.w_hidden"),
                group,
                Tensor::uniform(&[hidden_dim, h3], bound, rng),
            ),
            b_input: store.add(format!("{name}.b_input"), group, Tensor::zeros(&[h3])),
            b_hidden: store.add(format!("{name}.b_hidden"), group, Tensor::zeros(&[h3])),
            input_dim,
            hidden_dim,
        }
    }

    /// Input-side gate pre-activations `x·W_x + b_x`, shape `[*, 3h]`.
    /// Useful to project a whole sequence in one matmul.
    pub fn project_input<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_last_dim(tape, "gru_input", x, self.input_dim)?;
        let w = tape.param(store, self.w_input);
        let b = tape.param(store, self.b_input);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let gx = self.project_input(tape, store, x)?;
        self.step_projected(tape, store, gx, h)
    }

    /// One step given precomputed input projections `gx` (`[n, 3h]`).
    pub fn step_projected<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        gx: Var,
        h: Var,
    ) -> Result<Var> {
        let hd = self.hidden_dim;
        check_last_dim(tape, "gru_hidden", h, hd)?;
        check_last_dim(tape, "gru_projected", gx, 3 * hd)?;
        if tape.value(gx).rows() != tape.value(h).rows() {
            return Err(TensorError::ShapeMismatch {
                op: "gru_step",
                left: tape.shape(gx).to_vec(),
                right: tape.shape(h).to_vec(),
            });
        }
        let wh = tape.param(store, self.w_hidden);
        let bh = tape.param(store, self.b_hidden);
        let gh = tape.matmul(h, wh)?;
        let gh = tape.add(gh, bh)?;

        let gx_rz = tape.slice_last(gx, 0, 2 * hd)?;
        let gh_rz = tape.slice_last(gh, 0, 2 * hd)?;
        let rz = tape.add(gx_rz, gh_rz)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_last(rz, 0, hd)?;
        let z = tape.slice_last(rz, hd, hd)?;

        let gx_n = tape.slice_last(gx, 2 * hd, hd)?;
        let gh_n = tape.slice_last(gh, 2 * hd, hd)?;
        let rgh = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, rgh)?;
        let n = tape.tanh(n);

        // h + z ⊙ (n − h)
        let diff = tape.sub(n, h)?;
        let upd = tape.mul(z, diff)?;
        tape.add(h, upd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// GRU-style gate followed by layer norm.
    #[default]
    Gated,
    /// Bare `state + update`.
    Plain,
}

/// GRU-gated residual update of a state by an update vector of the same
/// width, followed by layer norm:
///
/// ```text
/// r  = σ(y·W_r + x·U_r)
/// z  = σ(y·W_z + x·U_z + b_z)
/// ĥ  = tanh(y·W_g + (r ⊙ x)·U_g)
/// out = LayerNorm((1 − z) ⊙ x + z ⊙ ĥ)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedResidual {
    pub w_update: ParamId,
    pub u_state: ParamId,
    pub u_candidate: ParamId,
    pub gate_bias: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub dim: usize,
    pub mode: ResidualMode,
}

impl GatedResidual {
    pub const DEFAULT_GATE_BIAS: f64 = -1.0;

    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        mode: ResidualMode,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        Self {
            w_update: store.add(
                format!("{name}.w_update"),
                group,
                Tensor::uniform(&[dim, 3 * dim], bound, rng),
            ),
            u_state: store.add(
                format!("{name}.u_state"),
                group,
                Tensor::uniform(&[dim, 2 * dim], bound, rng),
            ),
            u_candidate: store.add(
                format!("{name}.u_candidate"),
                group,
                Tensor::uniform(&[dim, dim], bound, rng),
            ),
            gate_bias: store.add(
                format!("{name}.gate_bias"),
                group,
                Tensor::full(&[dim], T::lit(Self::DEFAULT_GATE_BIAS)),
            ),
            ln_gain: store.add(format!("{name}.ln_gain"), group, Tensor::ones(&[dim])),
            ln_bias: store.add(format!("{name}.ln_bias"), group, Tensor::zeros(&[dim])),
            dim,
            mode,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: Var,
        update: Var,
    ) -> Result<Var> {
        if tape.shape(state) != tape.shape(update) {
            return Err(TensorError::ShapeMismatch {
                op: "gated_residual",
                left: tape.shape(state).to_vec(),
                right: tape.shape(update).to_vec(),
            });
        }
        check_last_dim(tape, "gated_residual", state, self.dim)?;
        if self.mode == ResidualMode::Plain {
            return tape.add(state, update);
        }
        let d = self.dim;
        let w = tape.param(store, self.w_update);
        let u = tape.param(store, self.u_state);
        let ug = tape.param(store, self.u_candidate);
        let bz = tape.param(store, self.gate_bias);

        let yp = tape.matmul(update, w)?;
        let xp = tape.matmul(state, u)?;
        let y_rz = tape.slice_last(yp, 0, 2 * d)?;
        let rz = tape.add(y_rz, xp)?;
        let r_pre = tape.slice_last(rz, 0, d)?;
        let z_pre = tape.slice_last(rz, d, d)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(z_pre, bz)?;
        let z = tape.sigmoid(z_pre);

        let rx = tape.mul(r, state)?;
        let cand_x = tape.matmul(rx, ug)?;
        let y_g = tape.slice_last(yp, 2 * d, d)?;
        let cand = tape.add(y_g, cand_x)?;
        let cand = tape.tanh(cand);

        let diff = tape.sub(cand, state)?;
        let upd = tape.mul(z, diff)?;
        let mixed = tape.add(state, upd)?;
        let gain = tape.param(store, self.ln_gain);
        let bias = tape.param(store, self.ln_bias);
        tape.layer_norm(mixed, gain, bias, T::lit(LAYER_NORM_EPS))
    }
}

/// Output of a (possibly multi-head) attention read.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    /// One weight tensor per head, rows summing to one.
    pub weights: Vec<Var>,
}

/// Single-head scaled dot-product attention over 2-D inputs:
/// `softmax(q·kᵀ/√d)·v`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, queries: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (tape.shape(queries), tape.shape(keys), tape.shape(values));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: sq.to_vec(),
            right: sk.to_vec(),
        });
    }
    if sk[0] == 0 {
        return Err(TensorError::EmptyAxis { op: "attention" });
    }
    let d = sq[1];
    let logits = tape.matmul_nt(queries, keys)?;
    let logits = tape.scale(logits, T::one() / T::from_usize(d).unwrap().sqrt());
    let weights = tape.softmax(logits)?;
    let out = tape.matmul(weights, values)?;
    Ok((out, weights))
}

/// Batched multi-head attention: `q [B, nq, d]`, `k [B, nk, d]`,
/// `v [B, nk, dv]`. Heads split `d` and `dv` evenly.
pub fn batched_attention<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (
        tape.shape(queries).to_vec(),
        tape.shape(keys).to_vec(),
        tape.shape(values).to_vec(),
    );
    if sq.len() != 3
        || sk.len() != 3
        || sv.len() != 3
        || sq[0] != sk[0]
        || sk[0] != sv[0]
        || sq[2] != sk[2]
        || sk[1] != sv[1]
    {
        return Err(TensorError::ShapeMismatch {
            op: "batched_attention",
            left: sq,
            right: sk,
        });
    }
    if sk[1] == 0 {
        return Err(TensorError::EmptyAxis {
            op: "batched_attention",
        });
    }
    let heads = heads.max(1);
    if sq[2] % heads != 0 || sv[2] % heads != 0 {
        return Err(TensorError::Invalid(format!(
            "{heads} heads do not divide key dim {} and value dim {}",
            sq[2], sv[2]
        )));
    }
    let dh = sq[2] / heads;
    let dvh = sv[2] / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k, v) = if heads == 1 {
            (queries, keys, values)
        } else {
            (
                tape.slice_last(queries, h * dh, dh)?,
                tape.slice_last(keys, h * dh, dh)?,
                tape.slice_last(values, h * dvh, dvh)?,
            )
        };
        let logits = tape.bmm_nt(q, k)?;
        let logits = tape.scale(logits, scale);
        let w = tape.softmax(logits)?;
        outs.push(tape.bmm(w, v)?);
        weights.push(w);
    }
    let output = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    Ok(AttentionOutput { output, weights })
}
