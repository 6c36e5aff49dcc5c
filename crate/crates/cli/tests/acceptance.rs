//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs every criterion by default; numeric arguments select a subset,
//! e.g. `cargo test --test acceptance -- 3 4`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use autograd::{RngStream, Tape, Tensor};
use circuitnet::data::synth::STRONG_DELTA;
use circuitnet::data::{generate_cohort, group_templates, prepare_all, Cohort, PreparedSubject, Scaler, SynthSpec};
use circuitnet::eval::{loso_splits, roc_auc, run_protocol, stratified_kfold, CvResult, ExperimentConfig, FoldOutcome};
use circuitnet::gradcheck::{model_gradcheck, synthetic_fixture, GradcheckConfig};
use circuitnet::interpret::{frequency_ablation, HIGH_BAND, LOW_BAND};
use circuitnet::model::{Ctx, Model, ModelInput, NoiseMode, Variant};
use circuitnet::run::{fold_dirs, write_protocol, LoadedFold};
use circuitnet::stats::{chi_square_independence, paired_t_test};
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};
use tempfile::TempDir;

const SEED: u64 = 7;
const LADDER_SEEDS: [u64; 5] = [7, 8, 9, 10, 11];

type Outcome = Result<(bool, String), String>;

/// Cohorts and runs shared between criteria.
#[derive(Default)]
struct Shared {
    strong: Option<(Cohort, Vec<PreparedSubject>)>,
    strong_kfold: Option<(Vec<FoldOutcome>, CvResult)>,
}

impl Shared {
    fn strong(&mut self) -> Result<&(Cohort, Vec<PreparedSubject>), String> {
        if self.strong.is_none() {
            let cohort = generate_cohort(&SynthSpec::desk(STRONG_DELTA, SEED)).map_err(|e| e.to_string())?;
            let prepared = prepare_all(&cohort.subjects, &desk_config(&cohort, SEED).features).map_err(|e| e.to_string())?;
            self.strong = Some((cohort, prepared));
        }
        Ok(self.strong.as_ref().unwrap())
    }

    fn strong_kfold(&mut self) -> Result<&(Vec<FoldOutcome>, CvResult), String> {
        if self.strong_kfold.is_none() {
            let (cohort, prepared) = self.strong()?;
            let run = kfold(cohort, prepared, &desk_config(cohort, SEED))?;
            self.strong_kfold = Some(run);
        }
        Ok(self.strong_kfold.as_ref().unwrap())
    }
}

fn desk_config(cohort: &Cohort, seed: u64) -> ExperimentConfig {
    ExperimentConfig::desk(cohort.n_regions(), cohort.n_timepoints(), seed)
}

fn kfold(cohort: &Cohort, prepared: &[PreparedSubject], cfg: &ExperimentConfig) -> Result<(Vec<FoldOutcome>, CvResult), String> {
    let splits = stratified_kfold(&cohort.labels(), 5, cfg.train.seed).map_err(|e| e.to_string())?;
    run_protocol(cohort, prepared, &splits, cfg, "kfold", 1).map_err(|e| e.to_string())
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn(&mut Shared) -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("invariant suite", invariant_suite),
        ("counterfactual null", counterfactual_null),
        ("metric oracles", metric_oracles),
        ("separable cohort", separable_cohort),
        ("leave-one-site-out", leave_one_site_out),
        ("frequency ablation", frequency_ablation_gap),
        ("ablation ladder", ablation_ladder),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f(&mut shared) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n} {name}: {} ({detail}; {:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradient_fidelity(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::desk(STRONG_DELTA, SEED);
    let exp = ExperimentConfig::desk(spec.n_regions, spec.n_timepoints, SEED);
    let fx = synthetic_fixture(&exp, &spec, 4).map_err(|e| e.to_string())?;
    let cfg = GradcheckConfig {
        per_tensor: 8,
        step: 1e-5,
        ..GradcheckConfig::default()
    };
    let r = model_gradcheck(&fx.model, &fx.batch, &fx.atlas, &fx.templates, &fx.train, &cfg).map_err(|e| e.to_string())?;
    let all_groups = r.tensors.len() == fx.model.params.len() && r.tensors.iter().all(|t| t.checked > 0);
    let pass = r.max_rel_err < 1e-4 && all_groups && within(start.elapsed(), 120);
    Ok((pass, format!("max_rel_err={:e} over {} tensors, {} coordinates", r.max_rel_err, r.tensors.len(), r.coordinates)))
}

struct InvariantCounts {
    checks: usize,
    violations: usize,
    first: Option<String>,
}

impl InvariantCounts {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn rows_stochastic(&mut self, t: &Tensor, name: &str) {
        for i in 0..t.rows() {
            let row = t.row_slice(i);
            let sum: f64 = row.iter().sum();
            let ok = (sum - 1.0).abs() <= 1e-12 && row.iter().all(|&v| v >= 0.0);
            self.check(ok, || format!("{name} row {i} sums to {sum}"));
        }
    }
}

fn invariant_suite(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cohort = generate_cohort(&SynthSpec::desk(STRONG_DELTA, 11)).map_err(|e| e.to_string())?;
    let exp = desk_config(&cohort, 11);
    let prepared = prepare_all(&cohort.subjects, &exp.features).map_err(|e| e.to_string())?;
    let scaler = Scaler::fit(prepared.iter().map(|p| &p.raw_x1)).map_err(|e| e.to_string())?;
    let templates = group_templates(prepared.iter().map(|p| (p.id.as_str(), p.label, &p.fc))).map_err(|e| e.to_string())?;
    let inputs: Vec<ModelInput> = prepared.iter().map(|p| ModelInput::new(p, &scaler)).collect();
    let variants = [Variant::Full, Variant::StandardAttention, Variant::DeterministicCausal, Variant::VariationalNoCausal];
    let models: Vec<Model> = (0..8)
        .map(|s| {
            let mut m = exp.model.clone();
            m.variant = variants[s % 4];
            Model::new(m, s as u64)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut draw = RngStream::new(SEED, "acceptance/invariants");
    let mut c = InvariantCounts {
        checks: 0,
        violations: 0,
        first: None,
    };
    const FORWARDS: usize = 1000;
    for it in 0..FORWARDS {
        let model = &models[draw.below(models.len())];
        let k = draw.below(inputs.len());
        let input = &inputs[k];
        let tau = draw.uniform_range(0.1, 2.0);
        let training = draw.bernoulli(0.5);
        let noise = RngStream::new(it as u64, "acceptance/forward");
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, training);
        let out = model
            .forward_subject(&mut ctx, input, &cohort.atlas, &templates, tau, Some(prepared[k].label), Some(&noise))
            .map_err(|e| format!("forward {it}: {e}"))?;
        let x2 = ctx.constant(input.x2.clone());
        let (_, maps) = model.rg.transformer.forward(&mut ctx, x2, 0.0, None).map_err(|e| e.to_string())?;
        let mask = ctx.constant(input.ops.attn_mask.clone());
        let (_, gat) = model.rg.static_gat.forward(&mut ctx, out.nodes.h_temp, mask).map_err(|e| e.to_string())?;
        let kl_real = ctx.tape.gaussian_kl(out.vlca.mu_real, out.vlca.log_var_real).map_err(|e| e.to_string())?;
        let kl_cf = ctx.tape.gaussian_kl(out.vlca.mu_cf, out.vlca.log_var_cf).map_err(|e| e.to_string())?;
        let t = &*ctx.tape;

        for (ci, masks) in out.pool.masks.iter().enumerate() {
            let m = t.value(masks[0]).rows();
            for node in 0..m {
                let vals: Vec<f64> = masks.iter().map(|v| t.value(*v).get(node, 0)).collect();
                let sum: f64 = vals.iter().sum();
                let ok = (sum - 1.0).abs() <= 1e-12 && vals.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v));
                c.check(ok, || format!("forward {it}: circuit {ci} node {node} masks {vals:?}"));
            }
        }
        c.rows_stochastic(t.value(out.nodes.feature_alpha), "feature attention");
        c.rows_stochastic(&t.value(out.nodes.node_beta).transpose(), "node attention");
        c.rows_stochastic(t.value(out.vlca.a_real), "circuit attention");
        for m in &maps {
            c.rows_stochastic(t.value(*m), "transformer attention");
        }
        c.rows_stochastic(t.value(gat), "graph attention");
        for circuit in &out.pool.circuits {
            c.rows_stochastic(t.value(circuit.mix), "prior mix weights");
        }

        let (zt, ha, hf) = (t.value(out.nodes.z_temp), t.value(out.nodes.h_attn), t.value(out.nodes.h_final));
        for ((&a, &b), &f) in zt.data().iter().zip(ha.data()).zip(hf.data()) {
            let slack = 1e-12 * (1.0 + a.abs() + b.abs());
            let ok = f >= a.min(b) - slack && f <= a.max(b) + slack;
            c.check(ok, || format!("forward {it}: gate output {f} outside [{a}, {b}]"));
        }
        for g in [out.nodes.final_gate, out.nodes.static_gate] {
            let ok = t.value(g).data().iter().all(|&v| (0.0..=1.0).contains(&v));
            c.check(ok, || format!("forward {it}: gate value outside [0, 1]"));
        }
        for (name, kl) in [("node", out.nodes.kl), ("latent", kl_real), ("counterfactual latent", kl_cf)] {
            let v = t.value(kl).item();
            c.check(v >= 0.0, || format!("forward {it}: {name} KL = {v}"));
        }
    }
    let pass = c.violations == 0 && within(start.elapsed(), 60);
    let mut detail = format!("{} violations in {} checks over {FORWARDS} forwards", c.violations, c.checks);
    if let Some(f) = c.first {
        detail.push_str(&format!("; first: {f}"));
    }
    Ok((pass, detail))
}

fn counterfactual_null(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = circuitnet::model::ModelConfig::desk(16, 120);
    let mut rng = RngStream::new(SEED, "acceptance/null");
    let mut nonzero = 0;
    let mut cases = 0;
    for seed in 0..4 {
        let model = Model::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        for _ in 0..25 {
            let h = Tensor::from_fn(5, cfg.d_model, |_, _| 3.0 * rng.normal());
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let mut ctx = Ctx::new(&mut tape, &vars, false);
            let hv = ctx.constant(h);
            let out = model
                .vlca
                .causal_effect(&mut ctx, hv, NoiseMode::Deterministic, true, None)
                .map_err(|e| e.to_string())?;
            cases += 1;
            if ctx.tape.value(out.y_effect).data().iter().any(|v| v.to_bits() != 0) {
                nonzero += 1;
            }
        }
    }
    let pass = nonzero == 0 && within(start.elapsed(), 1);
    Ok((pass, format!("{nonzero} of {cases} effects differ from +0.0 bitwise")))
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0 {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

fn metric_oracles(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(SEED, "acceptance/metrics");
    let mut auc_mismatch = 0;
    for set in 0..200 {
        let n = 2 + rng.below(200);
        let levels = if set % 2 == 0 { 5 } else { 1_000_000 };
        let mut labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        if auc != brute_force_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let mut worst_t: f64 = 0.0;
    for _ in 0..200 {
        let k = 2 + rng.below(30);
        let a: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let shift = rng.uniform_range(-1.5, 1.5);
        let b: Vec<f64> = a.iter().map(|x| x + shift + 0.7 * rng.normal()).collect();
        let r = paired_t_test(&a, &b).map_err(|e| e.to_string())?;
        let dist = StudentsT::new(0.0, 1.0, r.df as f64).map_err(|e| e.to_string())?;
        let oracle = 2.0 * dist.cdf(-r.t.abs());
        worst_t = worst_t.max((r.p - oracle).abs());
    }
    let mut worst_chi: f64 = 0.0;
    for _ in 0..200 {
        let rows = 2 + rng.below(2);
        let cols = 2 + rng.below(3);
        let table: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| (1 + rng.below(40)) as f64).collect()).collect();
        let r = chi_square_independence(&table).map_err(|e| e.to_string())?;
        let oracle = ChiSquared::new(r.df as f64).map_err(|e| e.to_string())?.sf(r.statistic);
        worst_chi = worst_chi.max((r.p - oracle).abs());
    }
    let pass = auc_mismatch == 0 && worst_t < 1e-6 && worst_chi < 1e-6 && within(start.elapsed(), 60);
    Ok((
        pass,
        format!("{auc_mismatch}/200 AUC mismatches, max |dp| t-test {worst_t:e}, chi-square {worst_chi:e}"),
    ))
}

fn separable_cohort(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let (_, strong) = shared.strong_kfold()?;
    let (auc, acc) = (strong.mean.auc.unwrap_or(f64::NAN), strong.mean.acc.unwrap_or(f64::NAN));
    let null_cohort = generate_cohort(&SynthSpec::desk(0.0, SEED)).map_err(|e| e.to_string())?;
    let cfg = desk_config(&null_cohort, SEED);
    let prepared = prepare_all(&null_cohort.subjects, &cfg.features).map_err(|e| e.to_string())?;
    let (_, null) = kfold(&null_cohort, &prepared, &cfg)?;
    let null_auc = null.mean.auc.unwrap_or(f64::NAN);
    let pass = auc >= 0.90 && acc >= 0.80 && (null_auc - 0.5).abs() <= 0.07 && within(start.elapsed(), 30 * 60);
    Ok((pass, format!("strong AUC={auc:.4} ACC={acc:.4}; null AUC={null_auc:.4}")))
}

fn leave_one_site_out(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let (cohort, prepared) = shared.strong()?;
    let sites: Vec<String> = cohort.subjects.iter().map(|s| s.site.clone()).collect();
    let splits = loso_splits(&sites).map_err(|e| e.to_string())?;
    let (folds, result) = run_protocol(cohort, prepared, &splits, &desk_config(cohort, SEED), "loso", 1).map_err(|e| e.to_string())?;
    let leaks: usize = folds.iter().map(|f| f.audit.failures()).sum();
    let wacc = result.weighted_avg.acc.unwrap_or(f64::NAN);
    let pass = splits.len() == 4 && wacc >= 0.75 && leaks == 0 && within(start.elapsed(), 30 * 60);
    Ok((pass, format!("{} sites, weighted ACC={wacc:.4}, {leaks} leakage failures", splits.len())))
}

fn frequency_ablation_gap(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    shared.strong_kfold()?;
    let (cohort, _) = shared.strong.as_ref().unwrap();
    let (folds, result) = shared.strong_kfold.as_ref().unwrap();
    let cfg = desk_config(cohort, SEED);
    write_protocol(tmp.path(), &cfg, &cfg, "kfold", folds, result).map_err(|e| e.to_string())?;
    let loaded = fold_dirs(tmp.path())
        .and_then(|dirs| dirs.iter().map(|d| LoadedFold::load(d)).collect::<Result<Vec<_>, _>>())
        .map_err(|e| e.to_string())?;
    let r = frequency_ablation(&loaded, cohort, LOW_BAND, HIGH_BAND).map_err(|e| e.to_string())?;
    let gap = r.mean_low - r.mean_high;
    let p = r.t_test.map_or(f64::NAN, |t| t.p);
    let pass = r.auc_low.len() == 5 && gap >= 0.1 && p < 0.05 && within(start.elapsed(), 10 * 60);
    Ok((pass, format!("AUC low={:.4} high={:.4} gap={gap:.4} p={p:.2e}", r.mean_low, r.mean_high)))
}

fn ablation_ladder(shared: &mut Shared) -> Outcome {
    let mut full = Vec::new();
    let mut standard = Vec::new();
    for seed in LADDER_SEEDS {
        for variant in [Variant::Full, Variant::StandardAttention] {
            let auc = if seed == SEED && variant == Variant::Full {
                shared.strong_kfold()?.1.mean.auc
            } else {
                let (cohort, prepared) = shared.strong()?;
                let mut cfg = desk_config(cohort, seed);
                cfg.model.variant = variant;
                kfold(cohort, prepared, &cfg)?.1.mean.auc
            };
            let auc = auc.ok_or("undefined AUC")?;
            match variant {
                Variant::Full => full.push(auc),
                _ => standard.push(auc),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mf, ms) = (mean(&full), mean(&standard));
    let show = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(",");
    Ok((
        mf >= ms,
        format!(
            "mean AUC full={mf:.4} standard_attention={ms:.4} over seeds {LADDER_SEEDS:?}; per seed full=[{}] standard_attention=[{}]",
            show(&full),
            show(&standard)
        ),
    ))
}

fn cli(args: &[&str], cwd: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_circuitnet")).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read_value(path: &Path) -> Result<Value, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Largest numeric difference between two JSON documents of equal shape.
fn json_diff(a: &Value, b: &Value) -> f64 {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs(),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x.iter().zip(y).map(|(p, q)| json_diff(p, q)).fold(0.0, f64::max),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .map(|(k, v)| y.get(k).map_or(f64::INFINITY, |w| json_diff(v, w)))
            .fold(0.0, f64::max),
        _ if a == b => 0.0,
        _ => f64::INFINITY,
    }
}

fn determinism(_: &mut Shared) -> Outcome {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    fs::write(dir.join("short.toml"), "[train]\nmax_epochs = 6\n").map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();

    cli(&["synth", "--seed", "7", "--out", "c1"], dir)?;
    cli(&["synth", "--seed", "7", "--out", "c2"], dir)?;
    let same_cohort = fs::read_dir(dir.join("c1")).map_err(|e| e.to_string())?.all(|e| {
        let name = e.unwrap().file_name();
        fs::read(dir.join("c1").join(&name)).ok() == fs::read(dir.join("c2").join(&name)).ok()
    });
    if !same_cohort {
        worst = f64::INFINITY;
        notes.push("synth differs".to_string());
    }

    for (cmd, tag) in [("train", "k"), ("loso", "l")] {
        let mut runs = Vec::new();
        for jobs in ["1", "4", "1"] {
            let out = format!("{tag}{}", runs.len());
            cli(&["--jobs", jobs, cmd, "--cohort", "c1", "--seed", "3", "--config", "short.toml", "--out", &out], dir)?;
            runs.push(read_value(&dir.join(&out).join("metrics.json"))?);
        }
        let d = json_diff(&runs[0], &runs[1]).max(json_diff(&runs[0], &runs[2]));
        notes.push(format!("{cmd} jobs 1/4/1 diff={d:e}"));
        worst = worst.max(d);
    }

    let e1 = cli(&["eval", "--run", "k0", "--cohort", "c1"], dir)?;
    let e2 = cli(&["eval", "--run", "k1", "--cohort", "c2"], dir)?;
    if e1 != e2 {
        worst = f64::INFINITY;
        notes.push("eval output differs".to_string());
    }

    for (tag, run) in [("a", "k0"), ("b", "k1")] {
        for mode in ["freq", "hier", "attn"] {
            cli(&["interpret", "--mode", mode, "--run", run, "--cohort", "c1", "--out", &format!("i{tag}")], dir)?;
        }
    }
    let d = json_diff(&read_value(&dir.join("ia/freq_ablation.json"))?, &read_value(&dir.join("ib/freq_ablation.json"))?);
    worst = worst.max(d);
    for f in ["hierarchy_stats.csv", "attention_edges.csv", "chord.json"] {
        if fs::read(dir.join("ia").join(f)).ok() != fs::read(dir.join("ib").join(f)).ok() {
            worst = f64::INFINITY;
            notes.push(format!("{f} differs"));
        }
    }

    let g1 = cli(&["gradcheck"], dir)?;
    let g2 = cli(&["--jobs", "4", "gradcheck"], dir)?;
    if g1 != g2 {
        worst = f64::INFINITY;
        notes.push("gradcheck output differs".to_string());
    }
    Ok((worst <= 1e-10, format!("max diff {worst:e}; {}", notes.join(", "))))
}
