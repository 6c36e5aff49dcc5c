//! Shared building blocks: forward context, affine maps, gating.

use autograd::{ParamId, ParamStore, RngStream, Tape, Tensor, Var};

use crate::error::Result;

/// Tape, bound parameter handles and mode for one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a [Var], training: bool) -> Self {
        Ctx { tape, vars, training }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Dropout that draws from `rng` only in training mode.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngStream>) -> Result<Var> {
        match rng {
            Some(rng) if self.training => Ok(self.tape.dropout(x, p, rng, true)?),
            _ => Ok(x),
        }
    }
}

/// `x W + b` with `W: in x out`, weights uniform in `±1/sqrt(in)`, zero bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.p(self.w))?;
        match self.b {
            Some(b) => Ok(ctx.tape.add(y, ctx.p(b))?),
            None => Ok(y),
        }
    }
}

/// `G = sigmoid([z1 | z2] W_g + b_g)`, output `G * z1 + (1 - G) * z2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    pub proj: Linear,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngStream) -> Self {
        Gate {
            proj: Linear::new(store, name, 2 * dim, dim, true, rng),
        }
    }

    /// Returns `(fused, G)`.
    pub fn forward(&self, ctx: &mut Ctx, z1: Var, z2: Var) -> Result<(Var, Var)> {
        if ctx.tape.shape(z1) != ctx.tape.shape(z2) {
            return Err(autograd::AutogradError::ShapeMismatch {
                op: "gate",
                lhs: ctx.tape.shape(z1).to_vec(),
                rhs: ctx.tape.shape(z2).to_vec(),
            }
            .into());
        }
        let cat = ctx.tape.concat(&[z1, z2], 1)?;
        let pre = self.proj.forward(ctx, cat)?;
        let g = ctx.tape.sigmoid(pre);
        let a = ctx.tape.mul(g, z1)?;
        let not_g = ctx.tape.one_minus(g);
        let b = ctx.tape.mul(not_g, z2)?;
        Ok((ctx.tape.add(a, b)?, g))
    }
}
