//! Differentiable sampling: Gaussian reparameterisation and Gumbel-Softmax.

use crate::error::{AutogradError, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn standard_normal(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// `z = mu + exp(log_var / 2) * eps` with caller-supplied noise. The noise is
/// a tape constant, so gradients reach `mu` and `log_var` only.
pub fn reparam_with_noise(tape: &mut Tape, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_var) || tape.shape(mu) != eps.shape() {
        return Err(AutogradError::ShapeMismatch {
            op: "reparam",
            lhs: tape.shape(mu).to_vec(),
            rhs: tape.shape(log_var).to_vec(),
        });
    }
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sd, e)?;
    tape.add(mu, noise)
}

/// Draws `eps ~ N(0, I)` from `rng` and reparameterises.
pub fn sample_gaussian_reparam(tape: &mut Tape, mu: Var, log_var: Var, rng: &mut RngStream) -> Result<Var> {
    if tape.shape(mu) != tape.shape(log_var) {
        return Err(AutogradError::ShapeMismatch {
            op: "reparam",
            lhs: tape.shape(mu).to_vec(),
            rhs: tape.shape(log_var).to_vec(),
        });
    }
    let eps = standard_normal(tape.shape(mu), rng);
    reparam_with_noise(tape, mu, log_var, &eps)
}

/// Row-wise Gumbel-Softmax over the columns of `logits`.
///
/// With `rng = None` no Gumbel noise is added (a tempered softmax). In hard
/// mode the forward value is the one-hot argmax and the gradient is that of
/// the soft sample (straight-through).
pub fn sample_gumbel_softmax(tape: &mut Tape, logits: Var, tau: f64, rng: Option<&mut RngStream>, hard: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(AutogradError::InvalidArgument {
            op: "gumbel_softmax",
            reason: format!("tau must be > 0, got {tau}"),
        });
    }
    let perturbed = match rng {
        Some(rng) => {
            let shape = tape.shape(logits).to_vec();
            let n: usize = shape.iter().product();
            let g = Tensor::new(shape, (0..n).map(|_| rng.gumbel()).collect()).unwrap();
            let gv = tape.constant(g);
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let soft = tape.softmax(perturbed, 1, tau)?;
    if hard {
        tape.straight_through(soft)
    } else {
        Ok(soft)
    }
}
