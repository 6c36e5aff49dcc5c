//! Composite objective, schedules, the epoch loop and early stopping.

use std::f64::consts::PI;
use std::fmt::Write as _;

use autograd::{AdamConfig, OptimizerState, ParamStore, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::atlas::CircuitAtlas;
use crate::data::{edge_dropout, GroupTemplates};
use crate::error::{Error, Result};
use crate::eval::metrics::{roc_auc, ConfusionCounts};
use crate::model::vlca::vlca_loss;
use crate::model::{Ctx, Model, ModelInput, PriorType, SubjectOutput, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_grad_norm: f64,
    pub kl_max: f64,
    pub kl_warmup: usize,
    pub lambda_vlca: f64,
    pub mse_start: f64,
    pub mse_end: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub edge_dropout: f64,
    /// An auxiliary term above `balance_threshold * L_cls` has its weight
    /// multiplied by `balance_factor` for that step.
    pub balance_threshold: f64,
    pub balance_factor: f64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.1,
            batch_size: 8,
            max_epochs: 50,
            patience: 20,
            max_grad_norm: 1.0,
            kl_max: 0.1,
            kl_warmup: 20,
            lambda_vlca: 1.0,
            mse_start: 0.2,
            mse_end: 1.0,
            tau_start: 1.0,
            tau_end: 0.5,
            edge_dropout: 0.1,
            balance_threshold: 10.0,
            balance_factor: 0.5,
            val_fraction: 0.2,
            seed,
        }
    }

    pub fn full(seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 300,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm must be > 0, got {}", self.max_grad_norm));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return bad(format!("edge_dropout must be in [0, 1), got {}", self.edge_dropout));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("temperatures must be > 0".into());
        }
        if !(self.balance_threshold > 0.0) || !(self.balance_factor > 0.0 && self.balance_factor <= 1.0) {
            return bad("balance_threshold must be > 0 and balance_factor in (0, 1]".into());
        }
        for (name, v) in [("kl_max", self.kl_max), ("lambda_vlca", self.lambda_vlca), ("mse_start", self.mse_start), ("mse_end", self.mse_end)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-epoch weights and Gumbel temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lambda_kl: f64,
    pub lambda_mse: f64,
    pub tau: f64,
}

/// Linear KL warm-up, cosine MSE ramp and exponential temperature decay.
pub fn schedules(epoch: usize, cfg: &TrainConfig) -> Schedule {
    let e = epoch as f64;
    let warm = if cfg.kl_warmup == 0 { 1.0 } else { (e / cfg.kl_warmup as f64).min(1.0) };
    let frac = (e / cfg.max_epochs as f64).min(1.0);
    Schedule {
        lambda_kl: cfg.kl_max * warm,
        lambda_mse: cfg.mse_start + (cfg.mse_end - cfg.mse_start) * (1.0 - (PI * frac).cos()) / 2.0,
        tau: cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub kl: f64,
    pub vlca: f64,
    pub mse: f64,
}

/// Weighted total with the effective weights after balancing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub w_kl: f64,
    pub w_vlca: f64,
    pub w_mse: f64,
    pub total: f64,
}

/// `L_cls + w_kl L_kl + w_vlca L_vlca + w_mse L_mse`, halving the weight of
/// any auxiliary term larger than `threshold * L_cls`.
pub fn total_loss(terms: LossTerms, lambda_kl: f64, lambda_vlca: f64, lambda_mse: f64, threshold: f64, factor: f64) -> Result<LossBreakdown> {
    for (name, v) in [("cls", terms.cls), ("kl", terms.kl), ("vlca", terms.vlca), ("mse", terms.mse)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss term {name} is not finite ({v})")));
        }
    }
    let balance = |w: f64, term: f64| if term > threshold * terms.cls { w * factor } else { w };
    let w_kl = balance(lambda_kl, terms.kl);
    let w_vlca = balance(lambda_vlca, terms.vlca);
    let w_mse = balance(lambda_mse, terms.mse);
    Ok(LossBreakdown {
        terms,
        w_kl,
        w_vlca,
        w_mse,
        total: terms.cls + w_kl * terms.kl + w_vlca * terms.vlca + w_mse * terms.mse,
    })
}

/// Loss variables of one batch on a shared tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the composite loss over `outputs` (one per subject, same tape).
pub fn batch_loss(ctx: &mut Ctx, model: &Model, outputs: &[SubjectOutput], labels: &[u8], schedule: Schedule, cfg: &TrainConfig) -> Result<BatchLoss> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(Error::Invariant(format!("{} outputs for {} labels", outputs.len(), labels.len())));
    }
    let classes: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let stack = |ctx: &mut Ctx, f: &dyn Fn(&SubjectOutput) -> Var| -> Result<Var> {
        let parts: Vec<Var> = outputs.iter().map(f).collect();
        Ok(ctx.tape.concat(&parts, 0)?)
    };
    let logits = stack(ctx, &|o| o.logits)?;
    let cls = ctx.tape.cross_entropy(logits, &classes)?;
    let kls = stack(ctx, &|o| o.nodes.kl)?;
    let kl = ctx.tape.mean(kls);
    let mse = match outputs.iter().map(|o| o.pool.prior_loss).collect::<Option<Vec<Var>>>() {
        Some(parts) => {
            let stacked = ctx.tape.concat(&parts, 0)?;
            ctx.tape.mean(stacked)
        }
        None => ctx.constant(Tensor::scalar(0.0)),
    };
    let vlca = match model.config.variant {
        Variant::StandardAttention => ctx.constant(Tensor::scalar(0.0)),
        variant => {
            let head = match variant {
                Variant::VariationalNoCausal => stack(ctx, &|o| o.vlca.logits_real)?,
                _ => stack(ctx, &|o| o.vlca.y_effect)?,
            };
            let beta = match variant {
                Variant::DeterministicCausal => 0.0,
                _ => model.config.beta,
            };
            let mu = stack(ctx, &|o| o.vlca.mu_real)?;
            let lv = stack(ctx, &|o| o.vlca.log_var_real)?;
            let prior = match model.config.prior {
                PriorType::Zero => None,
                PriorType::InputMean => {
                    let enc = stack(ctx, &|o| o.vlca.enc_input)?;
                    let m = ctx.tape.value(enc).mean();
                    Some(ctx.constant(Tensor::scalar(m)))
                }
            };
            vlca_loss(ctx, head, &classes, mu, lv, prior, beta)?.0
        }
    };
    let item = |ctx: &Ctx, v: Var| ctx.tape.value(v).item();
    let terms = LossTerms {
        cls: item(ctx, cls),
        kl: item(ctx, kl),
        vlca: item(ctx, vlca),
        mse: item(ctx, mse),
    };
    let breakdown = total_loss(terms, schedule.lambda_kl, cfg.lambda_vlca, schedule.lambda_mse, cfg.balance_threshold, cfg.balance_factor)?;
    let mut total = cls;
    for (w, v) in [(breakdown.w_kl, kl), (breakdown.w_vlca, vlca), (breakdown.w_mse, mse)] {
        let t = ctx.tape.scale(v, w);
        total = ctx.tape.add(total, t)?;
    }
    Ok(BatchLoss { total, breakdown })
}

/// Noise stream of one subject in one epoch.
pub fn subject_stream(seed: u64, run: &str, epoch: usize, id: &str) -> RngStream {
    RngStream::new(seed, format!("{run}/epoch{epoch}/subject/{id}"))
}

/// Training-mode forward of a batch; returns the tape, the loss and the
/// parameter variables.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch(
    model: &Model,
    batch: &[&ModelInput],
    atlas: &CircuitAtlas,
    templates: &GroupTemplates,
    cfg: &TrainConfig,
    schedule: Schedule,
    run: &str,
    epoch: usize,
) -> Result<(Tape, Vec<Var>, BatchLoss)> {
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let mut ctx = Ctx::new(&mut tape, &vars, true);
    let mut outputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for input in batch {
        let rng = subject_stream(cfg.seed, run, epoch, &input.id);
        let dropped;
        let input = if cfg.edge_dropout > 0.0 {
            let mut erng = rng.child("edges");
            dropped = input.regraph(edge_dropout(&input.graph, cfg.edge_dropout, &mut erng));
            &dropped
        } else {
            *input
        };
        outputs.push(model.forward_subject(&mut ctx, input, atlas, templates, schedule.tau, Some(input.label), Some(&rng))?);
        labels.push(input.label);
    }
    let loss = batch_loss(&mut ctx, model, &outputs, &labels, schedule, cfg)?;
    Ok((tape, vars, loss))
}

/// Gradients of every parameter, in store order.
pub fn batch_gradients(tape: &mut Tape, vars: &[Var], loss: Var) -> Result<Vec<Tensor>> {
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_steps: usize,
    pub steps: usize,
}

/// Epoch of shuffled mini-batches with Adam and global-norm clipping.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &[ModelInput],
    atlas: &CircuitAtlas,
    templates: &GroupTemplates,
    cfg: &TrainConfig,
    epoch: usize,
    run: &str,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let schedule = schedules(epoch, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    RngStream::new(cfg.seed, format!("{run}/epoch{epoch}/shuffle")).shuffle(&mut order);
    let mut stats = EpochStats::default();
    let mut sums = LossBreakdown::default();
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &data[i]).collect();
        let (mut tape, vars, loss) = forward_batch(model, &batch, atlas, templates, cfg, schedule, run, epoch)
            .map_err(|e| annotate(e, epoch, stats.steps))?;
        let grads = batch_gradients(&mut tape, &vars, loss.total)?;
        let report = opt.step(&mut model.params, grads, cfg.max_grad_norm).map_err(|e| annotate(e.into(), epoch, stats.steps))?;
        let b = loss.breakdown;
        sums.terms.cls += b.terms.cls;
        sums.terms.kl += b.terms.kl;
        sums.terms.vlca += b.terms.vlca;
        sums.terms.mse += b.terms.mse;
        sums.w_kl += b.w_kl;
        sums.w_vlca += b.w_vlca;
        sums.w_mse += b.w_mse;
        sums.total += b.total;
        stats.grad_norm += report.pre_clip_norm;
        stats.clipped_steps += report.clipped as usize;
        stats.steps += 1;
    }
    let n = stats.steps as f64;
    stats.loss = LossBreakdown {
        terms: LossTerms {
            cls: sums.terms.cls / n,
            kl: sums.terms.kl / n,
            vlca: sums.terms.vlca / n,
            mse: sums.terms.mse / n,
        },
        w_kl: sums.w_kl / n,
        w_vlca: sums.w_vlca / n,
        w_mse: sums.w_mse / n,
        total: sums.total / n,
    };
    stats.grad_norm /= n;
    Ok(stats)
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch} step {step}: {msg}")),
        Error::Autograd(inner) => Error::Numerical(format!("epoch {epoch} step {step}: {inner}")),
        other => other,
    }
}

/// Deterministic-mode predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    /// Classifier probability of the MDD class.
    pub scores: Vec<f64>,
    /// Mean cross-entropy of the classifier logits.
    pub loss: f64,
}

impl Predictions {
    pub fn auc(&self) -> Option<f64> {
        roc_auc(&self.scores, &self.labels).ok()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ConfusionCounts::from_scores(&self.scores, &self.labels, 0.5).ok()?.accuracy()
    }
}

/// Evaluation-mode scores: no dropout, no edge dropout, `z = mu` everywhere.
pub fn predict(model: &Model, data: &[ModelInput], atlas: &CircuitAtlas, templates: &GroupTemplates, tau: f64) -> Result<Predictions> {
    let mut out = Predictions {
        ids: Vec::with_capacity(data.len()),
        labels: Vec::with_capacity(data.len()),
        scores: Vec::with_capacity(data.len()),
        loss: 0.0,
    };
    for input in data {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let o = model.forward_subject(&mut ctx, input, atlas, templates, tau, None, None)?;
        let l = tape.value(o.logits);
        let (a, b) = (l.get(0, 0), l.get(0, 1));
        let m = a.max(b);
        let log_z = m + ((a - m).exp() + (b - m).exp()).ln();
        let p1 = (b - log_z).exp();
        if !p1.is_finite() {
            return Err(Error::Numerical(format!("subject {}: non-finite prediction", input.id)));
        }
        out.loss -= if input.label == 1 { b - log_z } else { a - log_z };
        out.ids.push(input.id.clone());
        out.labels.push(input.label);
        out.scores.push(p1);
    }
    if !data.is_empty() {
        out.loss /= data.len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub stats: EpochStats,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
    pub val_acc: Option<f64>,
}

pub const HISTORY_HEADER: &str =
    "epoch,total,cls,kl,vlca,mse,w_kl,w_vlca,w_mse,tau,grad_norm,clipped_steps,val_loss,val_auc,val_acc";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in history {
        let l = &r.stats.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            l.total,
            l.terms.cls,
            l.terms.kl,
            l.terms.vlca,
            l.terms.mse,
            l.w_kl,
            l.w_vlca,
            l.w_mse,
            r.tau,
            r.stats.grad_norm,
            r.stats.clipped_steps,
            r.val_loss,
            opt_field(r.val_auc),
            opt_field(r.val_acc)
        );
    }
    s
}

/// Outcome of [`fit`]; the model holds the best parameters afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    /// Temperature in effect at the best epoch, used at inference.
    pub best_tau: f64,
    pub optimizer: OptimizerState,
}

fn improves(auc: Option<f64>, loss: f64, best: Option<(Option<f64>, f64)>) -> bool {
    let Some((best_auc, best_loss)) = best else {
        return true;
    };
    let a = auc.unwrap_or(f64::NEG_INFINITY);
    let b = best_auc.unwrap_or(f64::NEG_INFINITY);
    a > b || (a == b && loss < best_loss)
}

/// Trains until validation AUC stalls for `patience` epochs and restores the
/// best parameters. `run` namespaces every noise stream.
pub fn fit(
    model: &mut Model,
    train: &[ModelInput],
    val: &[ModelInput],
    atlas: &CircuitAtlas,
    templates: &GroupTemplates,
    cfg: &TrainConfig,
    run: &str,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("empty split: {} training, {} validation subjects", train.len(), val.len())));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(adam, &model.params);
    let mut history = Vec::new();
    let mut best: Option<(Option<f64>, f64)> = None;
    let mut best_params: ParamStore = model.params.clone();
    let mut best_epoch = 0;
    let mut best_tau = cfg.tau_start;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        let stats = train_epoch(model, &mut opt, train, atlas, templates, cfg, epoch, run)?;
        let tau = schedules(epoch, cfg).tau;
        let pred = predict(model, val, atlas, templates, tau)?;
        let (val_auc, val_acc) = (pred.auc(), pred.accuracy());
        history.push(EpochRecord {
            epoch,
            tau,
            stats,
            val_loss: pred.loss,
            val_auc,
            val_acc,
        });
        if improves(val_auc, pred.loss, best) {
            best = Some((val_auc, pred.loss));
            best_params = model.params.clone();
            best_epoch = epoch;
            best_tau = tau;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params = best_params;
    Ok(FitResult {
        history,
        best_epoch,
        best_val_auc: best.and_then(|b| b.0),
        best_tau,
        optimizer: opt,
    })
}
