//! Variational latent causal attention over the five circuit embeddings.
//!
//! The factual branch encodes `H_real = softmax(Q K^T / sqrt(a)) V`; the
//! counterfactual branch replaces the attention with the identity
//! (`H_cf = V`) and reuses the same encoder. The causal effect is the
//! difference of the prediction-head logits.

use std::fmt::Write as _;

use autograd::{reparam_with_noise, standard_normal, ParamStore, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::atlas::Circuit;
use crate::error::Result;
use crate::model::layers::{Ctx, Linear};
use crate::model::rg_fusion::VariationalEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Independent noise per branch.
    Independent,
    /// Both branches share one noise draw.
    Shared,
    /// `z = mu` in both branches.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorType {
    Zero,
    InputMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vlca {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub encoder: VariationalEncoder,
    pub f_pred: Linear,
    pub attn_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct VlcaOutput {
    pub a_real: Var,
    pub h_real: Var,
    pub h_cf: Var,
    /// Flattened `H_real` (`1 x 5a`), the encoder input.
    pub enc_input: Var,
    pub mu_real: Var,
    pub log_var_real: Var,
    pub mu_cf: Var,
    pub log_var_cf: Var,
    pub z_real: Var,
    pub z_cf: Var,
    pub logits_real: Var,
    pub y_effect: Var,
}

impl Vlca {
    pub fn new(store: &mut ParamStore, d: usize, attn_dim: usize, latent: usize, rng: &mut RngStream) -> Self {
        Vlca {
            q: Linear::new(store, "vlca.q", d, attn_dim, false, rng),
            k: Linear::new(store, "vlca.k", d, attn_dim, false, rng),
            v: Linear::new(store, "vlca.v", d, attn_dim, false, rng),
            encoder: VariationalEncoder::new(store, "vlca.enc", 5 * attn_dim, attn_dim, latent, rng),
            f_pred: Linear::new(store, "vlca.f_pred", latent, 2, true, rng),
            attn_dim,
        }
    }

    /// `(A_real, H_real, V)` for a `5 x d` circuit matrix.
    pub fn circuit_attention(&self, ctx: &mut Ctx, h: Var) -> Result<(Var, Var, Var)> {
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let kt = ctx.tape.transpose(k)?;
        let s = ctx.tape.matmul(q, kt)?;
        let s = ctx.tape.scale(s, 1.0 / (self.attn_dim as f64).sqrt());
        let a = ctx.tape.softmax(s, 1, 1.0)?;
        let hr = ctx.tape.matmul(a, v)?;
        Ok((a, hr, v))
    }

    /// Factual and counterfactual branches. `force_identity` replaces the
    /// learned attention with `I_5` in the factual branch too.
    pub fn causal_effect(&self, ctx: &mut Ctx, h: Var, mode: NoiseMode, force_identity: bool, rng: Option<&mut RngStream>) -> Result<VlcaOutput> {
        let (a_real, h_real, v) = if force_identity {
            let (_, _, v) = self.circuit_attention(ctx, h)?;
            let eye = ctx.constant(Tensor::eye(5));
            let hr = ctx.tape.matmul(eye, v)?;
            (eye, hr, v)
        } else {
            self.circuit_attention(ctx, h)?
        };
        let eye = ctx.constant(Tensor::eye(5));
        let h_cf = ctx.tape.matmul(eye, v)?;
        let enc_input = ctx.tape.flatten(h_real);
        let cf_input = ctx.tape.flatten(h_cf);
        let (mu_real, log_var_real) = self.encoder.encode(ctx, enc_input)?;
        let (mu_cf, log_var_cf) = self.encoder.encode(ctx, cf_input)?;
        let shape = ctx.tape.shape(mu_real).to_vec();
        let (z_real, z_cf) = match (mode, rng) {
            (NoiseMode::Deterministic, _) | (_, None) => (mu_real, mu_cf),
            (NoiseMode::Shared, Some(rng)) => {
                let eps = standard_normal(&shape, rng);
                (
                    reparam_with_noise(ctx.tape, mu_real, log_var_real, &eps)?,
                    reparam_with_noise(ctx.tape, mu_cf, log_var_cf, &eps)?,
                )
            }
            (NoiseMode::Independent, Some(rng)) => {
                let e1 = standard_normal(&shape, rng);
                let e2 = standard_normal(&shape, rng);
                (
                    reparam_with_noise(ctx.tape, mu_real, log_var_real, &e1)?,
                    reparam_with_noise(ctx.tape, mu_cf, log_var_cf, &e2)?,
                )
            }
        };
        let logits_real = self.f_pred.forward(ctx, z_real)?;
        let logits_cf = self.f_pred.forward(ctx, z_cf)?;
        let y_effect = ctx.tape.sub(logits_real, logits_cf)?;
        Ok(VlcaOutput {
            a_real,
            h_real,
            h_cf,
            enc_input,
            mu_real,
            log_var_real,
            mu_cf,
            log_var_cf,
            z_real,
            z_cf,
            logits_real,
            y_effect,
        })
    }
}

/// `CE(logits, labels) + beta * KL(N(mu, e^lv) || N(mu_prior, I))` over a
/// batch stacked by rows. `prior_mean` is a `1 x 1` value or `None` for zero.
pub fn vlca_loss(ctx: &mut Ctx, logits: Var, labels: &[usize], mu: Var, log_var: Var, prior_mean: Option<Var>, beta: f64) -> Result<(Var, Var, Var)> {
    let ce = ctx.tape.cross_entropy(logits, labels)?;
    let centered = match prior_mean {
        Some(p) => ctx.tape.sub(mu, p)?,
        None => mu,
    };
    let kl = ctx.tape.gaussian_kl(centered, log_var)?;
    let weighted = ctx.tape.scale(kl, beta);
    Ok((ctx.tape.add(ce, weighted)?, ce, kl))
}

/// Detached `5 x 5` attention of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSnapshot {
    pub subject: String,
    pub weights: [[f64; 5]; 5],
}

impl AttentionSnapshot {
    pub fn from_tensor(subject: &str, a: &Tensor) -> Self {
        let mut weights = [[0.0; 5]; 5];
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                *w = a.get(i, j);
            }
        }
        AttentionSnapshot {
            subject: subject.to_string(),
            weights,
        }
    }
}

/// CSV with header `subject_id,source_circuit,target_circuit,weight`.
pub fn snapshots_to_csv(snaps: &[AttentionSnapshot]) -> String {
    let mut s = String::from("subject_id,source_circuit,target_circuit,weight\n");
    for snap in snaps {
        for (i, src) in Circuit::ALL.iter().enumerate() {
            for (j, dst) in Circuit::ALL.iter().enumerate() {
                let _ = writeln!(s, "{},{src},{dst},{}", snap.subject, snap.weights[i][j]);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Tape;

    fn fixture() -> (ParamStore, Vlca) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(12, "vlca-test");
        let v = Vlca::new(&mut store, 6, 4, 3, &mut rng);
        (store, v)
    }

    fn circuits(seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, "h");
        Tensor::from_fn(5, 6, |_, _| rng.normal())
    }

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let (store, v) = fixture();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let h = ctx.constant(Tensor::from_fn(5, 6, |_, j| j as f64 * 0.1));
        let (a, _, _) = v.circuit_attention(&mut ctx, h).unwrap();
        assert!(tape.value(a).data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn forced_identity_deterministic_effect_is_zero() {
        let (store, v) = fixture();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, true);
        let h = ctx.constant(circuits(1));
        let mut rng = RngStream::new(1, "n");
        let out = v.causal_effect(&mut ctx, h, NoiseMode::Deterministic, true, Some(&mut rng)).unwrap();
        assert!(tape.value(out.y_effect).data().iter().all(|&e| e == 0.0));
        assert_eq!(tape.value(out.a_real), &Tensor::eye(5));
    }

    #[test]
    fn shared_noise_with_identity_is_zero() {
        let (store, v) = fixture();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, true);
        let h = ctx.constant(circuits(2));
        let mut rng = RngStream::new(2, "n");
        let out = v.causal_effect(&mut ctx, h, NoiseMode::Shared, true, Some(&mut rng)).unwrap();
        assert!(tape.value(out.y_effect).data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn kl_closed_form() {
        let mut tape = Tape::new();
        let vars = Vec::new();
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let logits = ctx.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let mu = ctx.constant(Tensor::scalar(1.0));
        let lv = ctx.constant(Tensor::scalar(0.0));
        let (_, _, kl) = vlca_loss(&mut ctx, logits, &[1], mu, lv, None, 1.0).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-15);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let prior = ctx.constant(Tensor::scalar(1.0));
        let (_, _, kl) = vlca_loss(&mut ctx, logits, &[1], mu, lv, Some(prior), 1.0).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn snapshot_rows_stochastic_and_csv_shape() {
        let (store, v) = fixture();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let h = ctx.constant(circuits(3));
        let out = v.causal_effect(&mut ctx, h, NoiseMode::Independent, false, None).unwrap();
        let snap = AttentionSnapshot::from_tensor("s0", tape.value(out.a_real));
        for row in snap.weights {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let csv = snapshots_to_csv(&[snap.clone(), snap]);
        assert_eq!(csv.lines().count(), 51);
    }
}
