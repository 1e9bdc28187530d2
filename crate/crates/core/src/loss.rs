//! Differentiable losses and Gaussian helpers composed from tape primitives.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean Huber penalty of `pred - target`.
pub fn huber_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var, delta: T) -> Result<Var> {
    same_shape(tape, "huber_loss", pred, target)?;
    let r = tape.sub(pred, target)?;
    let h = tape.huber(r, delta)?;
    tape.mean(h)
}

/// Mean squared error.
pub fn mse<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, "mse", pred, target)?;
    let r = tape.sub(pred, target)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}

/// Mean cross-entropy of `[n, c]` logits against class labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked)?;
    Ok(tape.scale(m, -T::one()))
}

/// `KL(p || r)` for diagonal Gaussians, summed over every element.
///
/// All four inputs share a shape; `logvar_*` are log-variances.
pub fn kl_diag_gaussians<T: Scalar>(
    tape: &mut Tape<T>,
    mu_p: Var,
    logvar_p: Var,
    mu_r: Var,
    logvar_r: Var,
) -> Result<Var> {
    same_shape(tape, "kl_diag_gaussians", mu_p, logvar_p)?;
    same_shape(tape, "kl_diag_gaussians", mu_p, mu_r)?;
    same_shape(tape, "kl_diag_gaussians", mu_p, logvar_r)?;
    for v in [mu_p, logvar_p, mu_r, logvar_r] {
        if !tape.value(v).is_finite() {
            return Err(TensorError::NonFinite {
                op: "kl_diag_gaussians",
            });
        }
    }
    let kl = kl_elementwise(tape, mu_p, logvar_p, mu_r, logvar_r)?;
    let s = tape.sum(kl);
    Ok(s)
}

/// Per-element KL terms `½(lv_r − lv_p + (e^{lv_p} + (μ_p − μ_r)²) e^{−lv_r} − 1)`.
pub fn kl_elementwise<T: Scalar>(
    tape: &mut Tape<T>,
    mu_p: Var,
    logvar_p: Var,
    mu_r: Var,
    logvar_r: Var,
) -> Result<Var> {
    let dlv = tape.sub(logvar_r, logvar_p)?;
    let var_p = tape.exp(logvar_p);
    let dmu = tape.sub(mu_p, mu_r)?;
    let dmu2 = tape.square(dmu)?;
    let num = tape.add(var_p, dmu2)?;
    let neg_lv_r = tape.scale(logvar_r, -T::one());
    let inv_var_r = tape.exp(neg_lv_r);
    let ratio = tape.mul(num, inv_var_r)?;
    let t = tape.add(dlv, ratio)?;
    let t = tape.add_scalar(t, -T::one());
    Ok(tape.scale(t, T::lit(0.5)))
}

/// `mu + exp(½·logvar) · noise`; `noise` is a constant supplied by the caller.
pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var, noise: Var) -> Result<Var> {
    same_shape(tape, "reparameterize", mu, logvar)?;
    same_shape(tape, "reparameterize", mu, noise)?;
    let noise = if tape.requires_grad(noise) {
        tape.stop_gradient(noise)
    } else {
        noise
    };
    let half = tape.scale(logvar, T::lit(0.5));
    let std = tape.exp(half);
    let eps = tape.mul(std, noise)?;
    tape.add(mu, eps)
}
