//! Circuit-wise hierarchical pooling.
//!
//! Per circuit: mix the subject FC with the two group templates, embed nodes
//! with a GCN, assign them softly to levels with Gumbel-Softmax masks, and
//! fold the levels bottom-up with a child-sum TreeLSTM. Parameters are shared
//! across circuits.

use std::fmt::Write as _;

use autograd::{sample_gumbel_softmax, ParamStore, RngStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::atlas::{Circuit, CircuitAtlas};
use crate::data::GroupTemplates;
use crate::error::{Error, Result};
use crate::model::layers::{Ctx, Linear};

pub const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    /// Both `W` and `U` act on the child sum.
    Literal,
    /// `W` acts on the mean child state, `U` on the child sum; forget gates
    /// also see the mean child state.
    Canonical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChildSumTreeLstm {
    pub w_i: Linear,
    pub u_i: Linear,
    pub w_o: Linear,
    pub u_o: Linear,
    pub w_u: Linear,
    pub u_u: Linear,
    pub u_f: Linear,
    pub w_f: Option<Linear>,
    pub mode: TreeMode,
}

impl ChildSumTreeLstm {
    pub fn new(store: &mut ParamStore, d: usize, mode: TreeMode, rng: &mut RngStream) -> Self {
        let mut lin = |name: &str, bias: bool| Linear::new(store, &format!("hc.tree.{name}"), d, d, bias, rng);
        let w_i = lin("w_i", true);
        let u_i = lin("u_i", false);
        let w_o = lin("w_o", true);
        let u_o = lin("u_o", false);
        let w_u = lin("w_u", true);
        let u_u = lin("u_u", false);
        let u_f = lin("u_f", true);
        let w_f = (mode == TreeMode::Canonical).then(|| lin("w_f", false));
        ChildSumTreeLstm {
            w_i,
            u_i,
            w_o,
            u_o,
            w_u,
            u_u,
            u_f,
            w_f,
            mode,
        }
    }

    /// One step over children stacked as rows of `hs` and `cs` (`k x d`).
    /// Returns `(h, c)`, each `1 x d`.
    pub fn step(&self, ctx: &mut Ctx, hs: Var, cs: Var) -> Result<(Var, Var)> {
        let h_sum = ctx.tape.sum_axis(hs, 0)?;
        let x = match self.mode {
            TreeMode::Literal => h_sum,
            TreeMode::Canonical => ctx.tape.mean_axis(hs, 0)?,
        };
        let gate = |ctx: &mut Ctx, w: &Linear, u: &Linear| -> Result<Var> {
            let a = w.forward(ctx, x)?;
            let b = u.forward(ctx, h_sum)?;
            Ok(ctx.tape.add(a, b)?)
        };
        let i = gate(ctx, &self.w_i, &self.u_i)?;
        let o = gate(ctx, &self.w_o, &self.u_o)?;
        let u = gate(ctx, &self.w_u, &self.u_u)?;
        let i = ctx.tape.sigmoid(i);
        let o = ctx.tape.sigmoid(o);
        let u = ctx.tape.tanh(u);
        let mut f = self.u_f.forward(ctx, hs)?;
        if let Some(w_f) = &self.w_f {
            let wx = w_f.forward(ctx, x)?;
            f = ctx.tape.add(f, wx)?;
        }
        let f = ctx.tape.sigmoid(f);
        let fc = ctx.tape.mul(f, cs)?;
        let fc = ctx.tape.sum_axis(fc, 0)?;
        let iu = ctx.tape.mul(i, u)?;
        let c = ctx.tape.add(iu, fc)?;
        let tc = ctx.tape.tanh(c);
        Ok((ctx.tape.mul(o, tc)?, c))
    }

    /// Child-sum over row blocks; an empty child set is rejected.
    pub fn step_children(&self, ctx: &mut Ctx, hs: &[Var], cs: &[Var]) -> Result<(Var, Var)> {
        if hs.is_empty() || hs.len() != cs.len() {
            return Err(Error::Invariant("child-sum step needs at least one child".into()));
        }
        let h = ctx.tape.concat(hs, 0)?;
        let c = ctx.tape.concat(cs, 0)?;
        self.step(ctx, h, c)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CircuitOutput {
    pub h_root: Var,
    pub adjacency: Var,
    pub mix: Var,
    pub prior_loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    /// `5 x d`, rows in circuit order.
    pub embeddings: Var,
    pub circuits: Vec<CircuitOutput>,
    /// Per circuit, the level masks (`m x 1` each, top level first).
    pub masks: Vec<Vec<Var>>,
    /// Mean over circuits of the squared Frobenius distance to the label template.
    pub prior_loss: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcPooling {
    pub mix1: Linear,
    pub mix2: Linear,
    pub gcn: Linear,
    pub level_heads: Vec<Linear>,
    pub tree: ChildSumTreeLstm,
    pub depth: usize,
    pub eps: f64,
}

/// Rows/columns `idx` of `a`.
pub fn submatrix(a: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::from_fn(idx.len(), idx.len(), |i, j| a.get(idx[i], idx[j]))
}

impl HcPooling {
    pub fn new(store: &mut ParamStore, latent: usize, d: usize, depth: usize, eps: f64, mode: TreeMode, rng: &mut RngStream) -> Result<Self> {
        if !(1..=MAX_DEPTH).contains(&depth) {
            return Err(Error::Config(format!("hierarchy depth must be in 1..={MAX_DEPTH}, got {depth}")));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::Config(format!("mask threshold must be in (0, 1], got {eps}")));
        }
        let mix_hidden = latent.max(4);
        Ok(HcPooling {
            mix1: Linear::new(store, "hc.mix1", latent, mix_hidden, true, rng),
            mix2: Linear::new(store, "hc.mix2", mix_hidden, 3, true, rng),
            gcn: Linear::new(store, "hc.gcn", latent, d, true, rng),
            level_heads: (1..depth)
                .map(|l| Linear::new(store, &format!("hc.level{l}"), d, 2, true, rng))
                .collect(),
            tree: ChildSumTreeLstm::new(store, d, mode, rng),
            depth,
            eps,
        })
    }

    /// `A_c = sum_k softmax(MLP(mean Z_c))_k A_k`; returns `(A_c, weights)`.
    pub fn reconstruct_adjacency(&self, ctx: &mut Ctx, z_c: Var, priors: [&Tensor; 3]) -> Result<(Var, Var)> {
        let pooled = ctx.tape.mean_axis(z_c, 0)?;
        let h = self.mix1.forward(ctx, pooled)?;
        let h = ctx.tape.leaky_relu(h);
        let logits = self.mix2.forward(ctx, h)?;
        self.mix_priors(ctx, logits, priors)
    }

    /// Convex combination of the priors under `softmax(logits)`.
    pub fn mix_priors(&self, ctx: &mut Ctx, logits: Var, priors: [&Tensor; 3]) -> Result<(Var, Var)> {
        let w = ctx.tape.softmax(logits, 1, 1.0)?;
        let mut acc: Option<Var> = None;
        for (k, prior) in priors.iter().enumerate() {
            let wk = ctx.tape.slice_cols(w, k, k + 1)?;
            let p = ctx.constant((*prior).clone());
            let term = ctx.tape.mul(wk, p)?;
            acc = Some(match acc {
                None => term,
                Some(a) => ctx.tape.add(a, term)?,
            });
        }
        Ok((acc.unwrap(), w))
    }

    /// `leaky(D^-1/2 (A + I) D^-1/2 Z W + b)` with `D_ii = sum_j |(A + I)_ij|`.
    pub fn gcn_embed(&self, ctx: &mut Ctx, z_c: Var, a_c: Var) -> Result<Var> {
        let m = ctx.tape.value(a_c).rows();
        let eye = ctx.constant(Tensor::eye(m));
        let a_hat = ctx.tape.add(a_c, eye)?;
        let abs = ctx.tape.abs(a_hat);
        let deg = ctx.tape.sum_axis(abs, 1)?;
        let dinv = ctx.tape.powf(deg, -0.5);
        let dinv_t = ctx.tape.transpose(dinv)?;
        let norm = ctx.tape.mul(a_hat, dinv)?;
        let norm = ctx.tape.mul(norm, dinv_t)?;
        let prop = ctx.tape.matmul(norm, z_c)?;
        let out = self.gcn.forward(ctx, prop)?;
        Ok(ctx.tape.leaky_relu(out))
    }

    /// Level masks (`m x 1`, top level first) that sum to one per node.
    ///
    /// `M_1 = g_1`; for deeper levels `M_l = R_l * g_l * [M_{l-1} < eps]`
    /// where `R_l` is the mass not yet assigned; the last level takes the
    /// remainder. `rng = None` disables Gumbel noise.
    pub fn assign_levels(&self, ctx: &mut Ctx, h: Var, tau: f64, mut rng: Option<&mut RngStream>) -> Result<Vec<Var>> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("Gumbel temperature must be > 0, got {tau}")));
        }
        let m = ctx.tape.value(h).rows();
        if self.depth == 1 {
            return Ok(vec![ctx.constant(Tensor::ones(m, 1))]);
        }
        let mut masks: Vec<Var> = Vec::with_capacity(self.depth);
        let mut remaining: Option<Var> = None;
        for (l, head) in self.level_heads.iter().enumerate() {
            let logits = head.forward(ctx, h)?;
            let y = sample_gumbel_softmax(ctx.tape, logits, tau, rng.as_deref_mut(), false)?;
            let g = ctx.tape.slice_cols(y, 0, 1)?;
            let mask = match (l, remaining) {
                (0, _) => g,
                (_, Some(r)) => {
                    let prev = ctx.tape.value(masks[l - 1]);
                    let eligible = prev.map(|v| if v < self.eps { 1.0 } else { 0.0 });
                    let e = ctx.constant(eligible);
                    let rg = ctx.tape.mul(r, g)?;
                    ctx.tape.mul(rg, e)?
                }
                (_, None) => unreachable!(),
            };
            remaining = Some(match remaining {
                None => ctx.tape.one_minus(mask),
                Some(r) => ctx.tape.sub(r, mask)?,
            });
            masks.push(mask);
        }
        masks.push(remaining.unwrap());
        Ok(masks)
    }

    /// Folds levels from the bottom up; returns `h_root` (`1 x d`).
    pub fn aggregate_bottom_up(&self, ctx: &mut Ctx, h: Var, masks: &[Var]) -> Result<Var> {
        let (m, d) = ctx.tape.value(h).dims2()?;
        let zeros = ctx.constant(Tensor::zeros(m, d));
        let mut carry: Option<(Var, Var)> = None;
        for mask in masks.iter().rev() {
            let hl = ctx.tape.mul(h, *mask)?;
            let (hs, cs) = match carry {
                None => (vec![hl], vec![zeros]),
                Some((hc, cc)) => (vec![hc, hl], vec![cc, zeros]),
            };
            carry = Some(self.tree.step_children(ctx, &hs, &cs)?);
        }
        Ok(carry.expect("depth >= 1").0)
    }

    /// Runs one circuit. `label` selects the template for the prior loss.
    #[allow(clippy::too_many_arguments)]
    pub fn circuit(
        &self,
        ctx: &mut Ctx,
        z_ve: Var,
        members: &[usize],
        subject_fc: &Tensor,
        templates: &GroupTemplates,
        label: Option<u8>,
        tau: f64,
        rng: Option<&mut RngStream>,
    ) -> Result<(CircuitOutput, Vec<Var>)> {
        let z_c = ctx.tape.gather_rows(z_ve, members)?;
        let a1 = submatrix(subject_fc, members);
        let a2 = submatrix(&templates.mdd, members);
        let a3 = submatrix(&templates.hc, members);
        let (adjacency, mix) = self.reconstruct_adjacency(ctx, z_c, [&a1, &a2, &a3])?;
        let h = self.gcn_embed(ctx, z_c, adjacency)?;
        let masks = self.assign_levels(ctx, h, tau, rng)?;
        let h_root = self.aggregate_bottom_up(ctx, h, &masks)?;
        let prior_loss = match label {
            Some(y) => {
                let target = ctx.constant(submatrix(templates.for_label(y), members));
                Some(ctx.tape.squared_error(adjacency, target)?)
            }
            None => None,
        };
        Ok((
            CircuitOutput {
                h_root,
                adjacency,
                mix,
                prior_loss,
            },
            masks,
        ))
    }

    /// All five circuits; per-circuit noise streams are children of `rng`
    /// labelled by circuit name.
    #[allow(clippy::too_many_arguments)]
    pub fn pool(
        &self,
        ctx: &mut Ctx,
        z_ve: Var,
        atlas: &CircuitAtlas,
        subject_fc: &Tensor,
        templates: &GroupTemplates,
        label: Option<u8>,
        tau: f64,
        rng: Option<&RngStream>,
    ) -> Result<PoolOutput> {
        let mut circuits = Vec::with_capacity(5);
        let mut masks = Vec::with_capacity(5);
        for c in Circuit::ALL {
            let mut crng = rng.map(|r| r.child(c.name()));
            let (out, m) = self.circuit(ctx, z_ve, &atlas.members(c), subject_fc, templates, label, tau, crng.as_mut())?;
            circuits.push(out);
            masks.push(m);
        }
        let roots: Vec<Var> = circuits.iter().map(|c| c.h_root).collect();
        let embeddings = ctx.tape.concat(&roots, 0)?;
        let prior_loss = match label {
            Some(_) => {
                let terms: Vec<Var> = circuits.iter().map(|c| c.prior_loss.unwrap()).collect();
                let stacked = ctx.tape.concat(&terms, 0)?;
                Some(ctx.tape.mean(stacked))
            }
            None => None,
        };
        Ok(PoolOutput {
            embeddings,
            circuits,
            masks,
            prior_loss,
        })
    }
}

/// Per-region level masks of one subject, `n_regions x depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSnapshot {
    pub subject: String,
    pub masks: Vec<Vec<f64>>,
}

impl MaskSnapshot {
    pub fn from_pool(subject: &str, pool: &PoolOutput, atlas: &CircuitAtlas, tape: &autograd::Tape) -> Self {
        let mut masks = vec![Vec::new(); atlas.n_regions()];
        for (ci, c) in Circuit::ALL.iter().enumerate() {
            for (pos, &region) in atlas.members(*c).iter().enumerate() {
                masks[region] = pool.masks[ci].iter().map(|m| tape.value(*m).get(pos, 0)).collect();
            }
        }
        MaskSnapshot {
            subject: subject.to_string(),
            masks,
        }
    }

    /// Level index (0 = top) with the largest mask; ties go to the lower level.
    pub fn argmax_level(&self, region: usize) -> usize {
        let row = &self.masks[region];
        let mut best = 0;
        for (l, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = l;
            }
        }
        best
    }

    /// CSV with header `region,circuit,M1,...,ML`.
    pub fn to_csv(&self, atlas: &CircuitAtlas) -> String {
        let depth = self.masks.first().map(|r| r.len()).unwrap_or(0);
        let mut s = String::from("region,circuit");
        for l in 1..=depth {
            let _ = write!(s, ",M{l}");
        }
        s.push('\n');
        for (r, row) in self.masks.iter().enumerate() {
            let _ = write!(s, "{r},{}", atlas.circuit_of(r));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Tape;

    fn fixture(depth: usize, mode: TreeMode) -> (ParamStore, HcPooling) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(8, "hc-test");
        let hc = HcPooling::new(&mut store, 4, 6, depth, 0.5, mode, &mut rng).unwrap();
        (store, hc)
    }

    #[test]
    fn zero_children_zero_biases_give_zero_state() {
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let z = ctx.constant(Tensor::zeros(3, 6));
        let (h, c) = hc.tree.step(&mut ctx, z, z).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn child_order_does_not_matter() {
        for mode in [TreeMode::Literal, TreeMode::Canonical] {
            let (store, hc) = fixture(3, mode);
            let mut rng = RngStream::new(2, "children");
            let hs = Tensor::from_fn(4, 6, |_, _| rng.normal());
            let cs = Tensor::from_fn(4, 6, |_, _| rng.normal());
            let perm = [2usize, 0, 3, 1];
            let run = |h: Tensor, c: Tensor| {
                let mut tape = Tape::new();
                let vars = store.bind(&mut tape);
                let mut ctx = Ctx::new(&mut tape, &vars, false);
                let (hv, cv) = (ctx.constant(h), ctx.constant(c));
                let (out, _) = hc.tree.step(&mut ctx, hv, cv).unwrap();
                tape.value(out).clone()
            };
            let a = run(hs.clone(), cs.clone());
            let b = run(
                Tensor::from_fn(4, 6, |i, j| hs.get(perm[i], j)),
                Tensor::from_fn(4, 6, |i, j| cs.get(perm[i], j)),
            );
            assert!(a.max_abs_diff(&b) < 1e-14);
        }
    }

    #[test]
    fn empty_child_set_rejected() {
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        assert!(hc.tree.step_children(&mut ctx, &[], &[]).is_err());
    }

    #[test]
    fn masks_partition_unity() {
        for depth in 1..=4 {
            let (store, hc) = fixture(depth, TreeMode::Literal);
            let mut rng = RngStream::new(depth as u64, "masks");
            let h0 = Tensor::from_fn(5, 6, |_, _| 3.0 * rng.normal());
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &vars, true);
            let h = ctx.constant(h0);
            let masks = hc.assign_levels(&mut ctx, h, 0.7, Some(&mut rng)).unwrap();
            assert_eq!(masks.len(), depth);
            for i in 0..5 {
                let vals: Vec<f64> = masks.iter().map(|m| tape.value(*m).get(i, 0)).collect();
                assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(vals.iter().all(|&v| (-1e-15..=1.0 + 1e-15).contains(&v)));
            }
        }
    }

    #[test]
    fn saturated_first_level_takes_all_mass() {
        let (mut store, hc) = fixture(3, TreeMode::Literal);
        *store.get_mut(hc.level_heads[0].b.unwrap()) = Tensor::row(vec![50.0, -50.0]).unwrap();
        *store.get_mut(hc.level_heads[0].w) = Tensor::zeros(6, 2);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let h = ctx.constant(Tensor::full(3, 6, 0.3));
        let masks = hc.assign_levels(&mut ctx, h, 1.0, None).unwrap();
        for i in 0..3 {
            assert!(tape.value(masks[0]).get(i, 0) > 1.0 - 1e-12);
            assert!(tape.value(masks[1]).get(i, 0).abs() < 1e-12);
            assert!(tape.value(masks[2]).get(i, 0).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_mix_selects_subject_fc() {
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let a1 = Tensor::from_fn(2, 2, |i, j| (i + j) as f64);
        let a2 = Tensor::full(2, 2, 5.0);
        let a3 = Tensor::full(2, 2, -5.0);
        let logits = ctx.constant(Tensor::row(vec![1e6, -1e6, -1e6]).unwrap());
        let (a, w) = hc.mix_priors(&mut ctx, logits, [&a1, &a2, &a3]).unwrap();
        assert_eq!(tape.value(a), &a1);
        assert_eq!(tape.value(w).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn prior_loss_two_by_two() {
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let t = Tensor::from_fn(2, 2, |i, j| 0.2 * (i * 2 + j) as f64);
        let shifted = t.map(|v| v + 1.0);
        let logits = ctx.constant(Tensor::row(vec![0.0, 0.0, 0.0]).unwrap());
        let (a, _) = hc.mix_priors(&mut ctx, logits, [&shifted, &shifted, &shifted]).unwrap();
        let target = ctx.constant(t);
        let l = ctx.tape.squared_error(a, target).unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gcn_without_edges_is_per_node_affine() {
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let z0 = Tensor::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let z = ctx.constant(z0.clone());
        let a = ctx.constant(Tensor::zeros(3, 3));
        let h = hc.gcn_embed(&mut ctx, z, a).unwrap();
        let w = store.get(hc.gcn.w);
        let expected = z0.matmul(w).unwrap().map(|v| if v < 0.0 { 0.2 * v } else { v });
        assert!(tape.value(h).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn bad_depth_and_tau_rejected() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1, "x");
        assert!(HcPooling::new(&mut store, 4, 6, 5, 0.5, TreeMode::Literal, &mut rng).is_err());
        let (store, hc) = fixture(3, TreeMode::Literal);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let h = ctx.constant(Tensor::zeros(2, 6));
        assert!(hc.assign_levels(&mut ctx, h, 0.0, None).is_err());
    }
}
