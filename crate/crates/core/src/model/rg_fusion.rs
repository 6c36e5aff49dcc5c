//! Residual gated fusion of BOLD dynamics and static connectivity features
//! into per-node variational embeddings.
//!
//! Regions form the transformer's sequence axis (no positional encoding).
//! Every concatenation doubles the width and is projected back to `d`
//! before the next gate.

use autograd::{sample_gaussian_reparam, ParamId, ParamStore, RngStream, Tensor, Var};

use crate::data::BrainGraph;
use crate::error::{Error, Result};
use crate::model::layers::{Ctx, Gate, Linear};

/// Additive logit for non-edges in graph attention.
const MASKED: f64 = -1e30;

/// Dense operators derived from a graph, shared by the SAGE and GAT paths.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOperators {
    /// Row `i` averages the neighbours of `i`; isolated nodes average themselves.
    pub mean_agg: Tensor,
    /// `0` on edges and the diagonal, a large negative value elsewhere.
    pub attn_mask: Tensor,
}

impl GraphOperators {
    pub fn new(graph: &BrainGraph) -> Self {
        let n = graph.n_nodes;
        let nbrs = graph.neighbours();
        let mut mean_agg = Tensor::zeros(n, n);
        let mut attn_mask = Tensor::full(n, n, MASKED);
        for (i, list) in nbrs.iter().enumerate() {
            attn_mask.set(i, i, 0.0);
            if list.is_empty() {
                mean_agg.set(i, i, 1.0);
            }
            for &j in list {
                mean_agg.set(i, j, 1.0 / list.len() as f64);
                attn_mask.set(i, j, 0.0);
            }
        }
        GraphOperators { mean_agg, attn_mask }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    pub input: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub n_heads: usize,
    pub d: usize,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, t: usize, d: usize, n_heads: usize, rng: &mut RngStream) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {n_heads} heads")));
        }
        Ok(TransformerEncoder {
            input: Linear::new(store, "rg.tf.input", t, d, true, rng),
            q: Linear::new(store, "rg.tf.q", d, d, false, rng),
            k: Linear::new(store, "rg.tf.k", d, d, false, rng),
            v: Linear::new(store, "rg.tf.v", d, d, false, rng),
            out: Linear::new(store, "rg.tf.out", d, d, true, rng),
            ffn1: Linear::new(store, "rg.tf.ffn1", d, 2 * d, true, rng),
            ffn2: Linear::new(store, "rg.tf.ffn2", 2 * d, d, true, rng),
            n_heads,
            d,
        })
    }

    /// Returns `H_temp` and the per-head `n x n` attention matrices.
    pub fn forward(&self, ctx: &mut Ctx, x2: Var, dropout: f64, mut rng: Option<&mut RngStream>) -> Result<(Var, Vec<Var>)> {
        if !ctx.tape.value(x2).all_finite() {
            return Err(Error::Numerical("transformer input contains non-finite values".into()));
        }
        let e = self.input.forward(ctx, x2)?;
        let q = self.q.forward(ctx, e)?;
        let k = self.k.forward(ctx, e)?;
        let v = self.v.forward(ctx, e)?;
        let dh = self.d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut attn = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = ctx.tape.slice_cols(q, a, b)?;
            let kh = ctx.tape.slice_cols(k, a, b)?;
            let vh = ctx.tape.slice_cols(v, a, b)?;
            let kt = ctx.tape.transpose(kh)?;
            let s = ctx.tape.matmul(qh, kt)?;
            let s = ctx.tape.scale(s, scale);
            let w = ctx.tape.softmax(s, 1, 1.0)?;
            heads.push(ctx.tape.matmul(w, vh)?);
            attn.push(w);
        }
        let cat = ctx.tape.concat(&heads, 1)?;
        let o = self.out.forward(ctx, cat)?;
        let o = ctx.dropout(o, dropout, rng.as_deref_mut())?;
        let r = ctx.tape.add(e, o)?;
        let h1 = ctx.tape.layer_norm(r)?;
        let f = self.ffn1.forward(ctx, h1)?;
        let f = ctx.tape.leaky_relu(f);
        let f = self.ffn2.forward(ctx, f)?;
        let f = ctx.dropout(f, dropout, rng)?;
        let r = ctx.tape.add(h1, f)?;
        Ok((ctx.tape.layer_norm(r)?, attn))
    }
}

/// Mean-aggregation convolution: `leaky(h W_self + mean_nbr(h) W_nbr + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SageConv {
    pub self_lin: Linear,
    pub nbr_lin: Linear,
}

impl SageConv {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        SageConv {
            self_lin: Linear::new(store, &format!("{name}.self"), fan_in, fan_out, true, rng),
            nbr_lin: Linear::new(store, &format!("{name}.nbr"), fan_in, fan_out, false, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var, mean_agg: Var) -> Result<Var> {
        let s = self.self_lin.forward(ctx, h)?;
        let agg = ctx.tape.matmul(mean_agg, h)?;
        let nb = self.nbr_lin.forward(ctx, agg)?;
        let sum = ctx.tape.add(s, nb)?;
        Ok(ctx.tape.leaky_relu(sum))
    }
}

/// Single-head graph attention over out-neighbours plus a self-loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatConv {
    pub lin: Linear,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub bias: ParamId,
}

impl GatConv {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        GatConv {
            lin: Linear::new(store, &format!("{name}.lin"), fan_in, fan_out, false, rng),
            a_src: store.add_uniform(format!("{name}.a_src"), fan_out, 1, fan_out, rng),
            a_dst: store.add_uniform(format!("{name}.a_dst"), fan_out, 1, fan_out, rng),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out)),
        }
    }

    /// Returns the node outputs and the `n x n` attention coefficients.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, mask: Var) -> Result<(Var, Var)> {
        let wh = self.lin.forward(ctx, h)?;
        let s = ctx.tape.matmul(wh, ctx.p(self.a_src))?;
        let t = ctx.tape.matmul(wh, ctx.p(self.a_dst))?;
        let tt = ctx.tape.transpose(t)?;
        let e = ctx.tape.add(s, tt)?;
        let e = ctx.tape.leaky_relu(e);
        let e = ctx.tape.add(e, mask)?;
        let alpha = ctx.tape.softmax(e, 1, 1.0)?;
        let agg = ctx.tape.matmul(alpha, wh)?;
        let agg = ctx.tape.add(agg, ctx.p(self.bias))?;
        Ok((ctx.tape.leaky_relu(agg), alpha))
    }
}

/// Feature-wise then node-wise softmax reweighting at a fixed temperature.
///
/// `alpha = softmax_cols(H W_f + b_f)` and `H_f = alpha * H`;
/// `beta = softmax_rows(H_f w_n + b_n)` and `H_attn = beta * H_f`.
/// Both stages only shrink entries, so `|H_attn| <= |H|` elementwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStageAttention {
    pub feature: Linear,
    pub node: Linear,
    pub feature_temp: f64,
    pub node_temp: f64,
}

impl TwoStageAttention {
    pub fn new(store: &mut ParamStore, d: usize, feature_temp: f64, node_temp: f64, rng: &mut RngStream) -> Self {
        TwoStageAttention {
            feature: Linear::new(store, "rg.attn.feature", d, d, true, rng),
            node: Linear::new(store, "rg.attn.node", d, 1, true, rng),
            feature_temp,
            node_temp,
        }
    }

    /// Returns `(H_attn, alpha, beta)`.
    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<(Var, Var, Var)> {
        let fl = self.feature.forward(ctx, h)?;
        let alpha = ctx.tape.softmax(fl, 1, self.feature_temp)?;
        let hf = ctx.tape.mul(alpha, h)?;
        let nl = self.node.forward(ctx, hf)?;
        let beta = ctx.tape.softmax(nl, 0, self.node_temp)?;
        let ha = ctx.tape.mul(beta, hf)?;
        Ok((ha, alpha, beta))
    }
}

/// Two affine layers to per-node `mu` and `log_var`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariationalEncoder {
    pub hidden: Linear,
    pub mu: Linear,
    pub log_var: Linear,
}

impl VariationalEncoder {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, latent: usize, rng: &mut RngStream) -> Self {
        VariationalEncoder {
            hidden: Linear::new(store, &format!("{name}.hidden"), fan_in, hidden, true, rng),
            mu: Linear::new(store, &format!("{name}.mu"), hidden, latent, true, rng),
            log_var: Linear::new(store, &format!("{name}.log_var"), hidden, latent, true, rng),
        }
    }

    pub fn encode(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(ctx, x)?;
        let h = ctx.tape.leaky_relu(h);
        Ok((self.mu.forward(ctx, h)?, self.log_var.forward(ctx, h)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NodeEmbeddings {
    pub h_temp: Var,
    pub z_temp: Var,
    pub z_static: Var,
    pub h_attn: Var,
    pub h_final: Var,
    pub z_final: Var,
    pub mu: Var,
    pub log_var: Var,
    pub z_ve: Var,
    pub kl: Var,
    pub static_gate: Var,
    pub final_gate: Var,
    pub feature_alpha: Var,
    pub node_beta: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgFusion {
    pub transformer: TransformerEncoder,
    pub x1_proj: Linear,
    pub sage: SageConv,
    pub gat: GatConv,
    pub temp_out: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub static_gate: Gate,
    pub static_gat: GatConv,
    pub attention: TwoStageAttention,
    pub final_gate: Gate,
    pub encoder: VariationalEncoder,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgFusionDims {
    pub t: usize,
    pub feature_dim: usize,
    pub d: usize,
    pub n_heads: usize,
    pub ve_hidden: usize,
    pub ve_latent: usize,
    pub attn_temp: f64,
    pub dropout: f64,
}

impl RgFusion {
    pub fn new(store: &mut ParamStore, dims: RgFusionDims, rng: &mut RngStream) -> Result<Self> {
        let d = dims.d;
        Ok(RgFusion {
            transformer: TransformerEncoder::new(store, dims.t, d, dims.n_heads, rng)?,
            x1_proj: Linear::new(store, "rg.x1_proj", dims.feature_dim, d, true, rng),
            sage: SageConv::new(store, "rg.sage", 2 * d, d, rng),
            gat: GatConv::new(store, "rg.gat", 2 * d, d, rng),
            temp_out: Linear::new(store, "rg.temp_out", 2 * d, d, true, rng),
            mlp1: Linear::new(store, "rg.mlp1", dims.feature_dim, d, true, rng),
            mlp2: Linear::new(store, "rg.mlp2", d, d, true, rng),
            static_gate: Gate::new(store, "rg.static_gate", d, rng),
            static_gat: GatConv::new(store, "rg.static_gat", d, d, rng),
            attention: TwoStageAttention::new(store, d, dims.attn_temp, dims.attn_temp, rng),
            final_gate: Gate::new(store, "rg.final_gate", d, rng),
            encoder: VariationalEncoder::new(store, "rg.ve", 2 * d, dims.ve_hidden, dims.ve_latent, rng),
            dropout: dims.dropout,
        })
    }

    /// `Z_temp` from the dual-path graph encoder over `[proj(X1) | H_temp]`.
    pub fn graph_encode(&self, ctx: &mut Ctx, x1: Var, h_temp: Var, ops: (Var, Var)) -> Result<Var> {
        let p = self.x1_proj.forward(ctx, x1)?;
        let h2 = ctx.tape.concat(&[p, h_temp], 1)?;
        let a = self.sage.forward(ctx, h2, ops.0)?;
        let (b, _) = self.gat.forward(ctx, h2, ops.1)?;
        let cat = ctx.tape.concat(&[a, b], 1)?;
        self.temp_out.forward(ctx, cat)
    }

    /// `Z_static = GAT(Gate(MLP(X1), H_temp))`; also returns the gate.
    pub fn static_encode(&self, ctx: &mut Ctx, x1: Var, h_temp: Var, mask: Var) -> Result<(Var, Var)> {
        let m = self.mlp1.forward(ctx, x1)?;
        let m = ctx.tape.leaky_relu(m);
        let m = self.mlp2.forward(ctx, m)?;
        let (g, gate) = self.static_gate.forward(ctx, m, h_temp)?;
        let (z, _) = self.static_gat.forward(ctx, g, mask)?;
        Ok((z, gate))
    }

    /// Full forward. `rng` supplies dropout and reparameterization noise in
    /// training mode; evaluation uses `Z_ve = mu`.
    pub fn forward(&self, ctx: &mut Ctx, x1: Var, x2: Var, ops: &GraphOperators, mut rng: Option<&mut RngStream>) -> Result<NodeEmbeddings> {
        let agg = ctx.constant(ops.mean_agg.clone());
        let mask = ctx.constant(ops.attn_mask.clone());
        let (h_temp, _) = self.transformer.forward(ctx, x2, self.dropout, rng.as_deref_mut())?;
        let z_temp = self.graph_encode(ctx, x1, h_temp, (agg, mask))?;
        let z_temp = ctx.dropout(z_temp, self.dropout, rng.as_deref_mut())?;
        let (z_static, static_gate) = self.static_encode(ctx, x1, h_temp, mask)?;
        let z_static = ctx.dropout(z_static, self.dropout, rng.as_deref_mut())?;
        let (h_attn, feature_alpha, node_beta) = self.attention.forward(ctx, h_temp)?;
        let (h_final, final_gate) = self.final_gate.forward(ctx, z_temp, h_attn)?;
        let z_final = ctx.tape.concat(&[h_final, z_static], 1)?;
        let (mu, log_var) = self.encoder.encode(ctx, z_final)?;
        let z_ve = match rng {
            Some(rng) if ctx.training => sample_gaussian_reparam(ctx.tape, mu, log_var, rng)?,
            _ => mu,
        };
        let kl = ctx.tape.gaussian_kl(mu, log_var)?;
        Ok(NodeEmbeddings {
            h_temp,
            z_temp,
            z_static,
            h_attn,
            h_final,
            z_final,
            mu,
            log_var,
            z_ve,
            kl,
            static_gate,
            final_gate,
            feature_alpha,
            node_beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::graph::{knn_graph, Edge};
    use autograd::Tape;

    fn dims() -> RgFusionDims {
        RgFusionDims {
            t: 20,
            feature_dim: 11,
            d: 8,
            n_heads: 2,
            ve_hidden: 6,
            ve_latent: 4,
            attn_temp: 0.1,
            dropout: 0.2,
        }
    }

    fn fixture() -> (ParamStore, RgFusion) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3, "rg-test");
        let rg = RgFusion::new(&mut store, dims(), &mut rng).unwrap();
        (store, rg)
    }

    fn inputs(n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = RngStream::new(seed, "inputs");
        let x1 = Tensor::from_fn(n, 11, |_, _| rng.normal());
        let x2 = Tensor::from_fn(n, 20, |_, _| rng.normal());
        (x1, x2)
    }

    #[test]
    fn transformer_is_permutation_equivariant() {
        let (store, rg) = fixture();
        let (_, x2) = inputs(6, 1);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let x2p = Tensor::from_fn(6, 20, |i, j| x2.get(perm[i], j));
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &vars, false);
            let xv = ctx.constant(x);
            let (h, attn) = rg.transformer.forward(&mut ctx, xv, 0.2, None).unwrap();
            for a in attn {
                for i in 0..6 {
                    assert!((tape.value(a).row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            tape.value(h).clone()
        };
        let h = run(x2);
        let hp = run(x2p);
        assert_eq!(h.shape(), &[6, 8]);
        for i in 0..6 {
            for j in 0..8 {
                assert!((hp.get(i, j) - h.get(perm[i], j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_mean_path_uses_self() {
        let g = BrainGraph {
            n_nodes: 1,
            k: 3,
            edges: vec![],
        };
        let ops = GraphOperators::new(&g);
        assert_eq!(ops.mean_agg.get(0, 0), 1.0);
        assert_eq!(ops.attn_mask.get(0, 0), 0.0);
    }

    #[test]
    fn identical_nodes_on_complete_graph_give_identical_outputs() {
        let (store, rg) = fixture();
        let n = 5;
        let x1 = Tensor::from_fn(n, 11, |_, j| 0.1 * j as f64);
        let x2 = Tensor::from_fn(n, 20, |_, j| (j as f64 * 0.7).sin());
        let g = knn_graph(&Tensor::full(n, n, 0.5), n, false);
        let ops = GraphOperators::new(&g);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let (a, b) = (ctx.constant(x1), ctx.constant(x2));
        let out = rg.forward(&mut ctx, a, b, &ops, None).unwrap();
        let z = tape.value(out.z_temp);
        for i in 1..n {
            for j in 0..8 {
                assert!((z.get(i, j) - z.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_finite_and_eval_deterministic() {
        let (store, rg) = fixture();
        let (x1, x2) = inputs(7, 2);
        let g = BrainGraph {
            n_nodes: 7,
            k: 2,
            edges: (0..7)
                .map(|i| Edge {
                    src: i,
                    dst: (i + 1) % 7,
                    weight: 0.3,
                })
                .collect(),
        };
        let ops = GraphOperators::new(&g);
        let run = || {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &vars, false);
            let (a, b) = (ctx.constant(x1.clone()), ctx.constant(x2.clone()));
            let out = rg.forward(&mut ctx, a, b, &ops, None).unwrap();
            assert_eq!(tape.value(out.z_final).shape(), &[7, 16]);
            assert_eq!(tape.value(out.z_static).shape(), &[7, 8]);
            assert!(tape.value(out.kl).item() >= 0.0);
            tape.value(out.z_ve).clone()
        };
        let a = run();
        assert!(a.all_finite());
        assert_eq!(a, run());
    }

    #[test]
    fn attention_temperature_sharpens() {
        let (store, rg) = fixture();
        let (_, x2) = inputs(6, 5);
        let h0 = Tensor::from_fn(6, 8, |i, j| x2.get(i, j));
        let max_alpha = |temp: f64| {
            let mut att = rg.attention;
            att.feature_temp = temp;
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &vars, false);
            let h = ctx.constant(h0.clone());
            let (ha, alpha, beta) = att.forward(&mut ctx, h).unwrap();
            for (a, b) in tape.value(ha).data().iter().zip(h0.data()) {
                assert!(a.abs() <= b.abs());
            }
            let beta_sum: f64 = tape.value(beta).sum();
            assert!((beta_sum - 1.0).abs() < 1e-12);
            tape.value(alpha).data().iter().cloned().fold(0.0, f64::max)
        };
        assert!(max_alpha(0.1) >= max_alpha(1.0));
    }
}
