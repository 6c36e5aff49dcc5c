//! `circuitnet` command-line runner.
//!
//! Progress and results go to stdout as `key=value` lines. A failure prints
//! one `error kind=<kind> msg="<message>"` line to stderr and exits with
//! 1 (usage or configuration), 2 (data, io or invariant) or 3 (numerical).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use circuitnet::data::synth::STRONG_DELTA;
use circuitnet::data::{generate_cohort, prepare_all, Cohort, SynthSpec};
use circuitnet::eval::{loso_splits, run_protocol, stratified_kfold, ExperimentConfig};
use circuitnet::gradcheck::{model_gradcheck, synthetic_fixture, GradcheckConfig};
use circuitnet::interpret::{attention_report, collect_snapshots, frequency_ablation, hierarchy_stats};
use circuitnet::run::{fold_dirs, write_json, write_protocol, LoadedFold};
use clap::builder::{PossibleValuesParser, RangedU64ValueParser};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, Preset, Protocol, RunConfig};

const VARIANTS: [&str; 4] = ["full", "standard_attention", "deterministic_causal", "variational_no_causal"];

#[derive(Debug, Parser)]
#[command(name = "circuitnet", version, about = "Circuit-level graph classifier for resting-state fMRI cohorts")]
struct Cli {
    /// Worker threads for folds and sites; results do not depend on it
    #[arg(long, global = true, default_value_t = 1, value_parser = RangedU64ValueParser::<usize>::new().range(1..))]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-site cohort directory
    Synth(SynthArgs),
    /// Stratified k-fold cross-validation
    Train(TrainArgs),
    /// Leave-one-site-out cross-validation
    Loso(LosoArgs),
    /// Rescore a run directory and compare with its stored metrics
    Eval(EvalArgs),
    /// Frequency ablation, hierarchy statistics or circuit attention
    Interpret(InterpretArgs),
    /// Finite-difference check of the composite loss gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Size preset
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Planted effect size
    #[arg(long, default_value_t = STRONG_DELTA)]
    delta: f64,
    /// White-noise standard deviation [default: 0.6]
    #[arg(long)]
    noise: Option<f64>,
    /// Number of sites [default: 4]
    #[arg(long)]
    sites: Option<usize>,
    /// Subjects per site [default: 30 desk, 60 full]
    #[arg(long)]
    per_site: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output cohort directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CommonTrain {
    /// Cohort directory
    #[arg(long)]
    cohort: PathBuf,
    /// Run directory
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// TOML file merged over the preset; flags override it [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size preset [default: desk]
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Training and split seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Model variant [default: full]
    #[arg(long, value_parser = PossibleValuesParser::new(VARIANTS))]
    variant: Option<String>,
    /// Maximum epochs [default: 50 desk, 300 full]
    #[arg(long)]
    epochs: Option<usize>,
    /// Subjects per batch [default: 8 desk, 32 full]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Early-stopping patience in epochs [default: 20]
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrain,
    /// Number of folds [default: 5]
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Debug, Args)]
struct LosoArgs {
    #[command(flatten)]
    common: CommonTrain,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory or a single split directory
    #[arg(long)]
    run: PathBuf,
    /// Cohort directory the run was trained on
    #[arg(long)]
    cohort: PathBuf,
    /// Largest accepted difference from the stored metrics
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Freq,
    Hier,
    Attn,
}

#[derive(Debug, Args)]
struct InterpretArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Run directory
    #[arg(long)]
    run: PathBuf,
    /// Cohort directory the run was trained on
    #[arg(long)]
    cohort: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Low band in Hz as LO:HI
    #[arg(long, default_value = "0.01:0.08", value_parser = parse_band)]
    low_band: (f64, f64),
    /// High band in Hz as LO:HI
    #[arg(long, default_value = "0.1:0.25", value_parser = parse_band)]
    high_band: (f64, f64),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Subjects in the checked batch
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Coordinates checked per parameter tensor
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0 <= lo && lo < hi) {
        return Err(format!("need 0 <= LO < HI, got {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn exit_code(e: &anyhow::Error) -> (u8, &'static str) {
    if let Some(err) = e.chain().find_map(|c| c.downcast_ref::<circuitnet::Error>()) {
        let kind = err.kind();
        let code = match kind {
            "config" => 1,
            "numerical" => 3,
            _ => 2,
        };
        return (code, kind);
    }
    (2, "data")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first:?}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("error kind={kind} msg={:?}", format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => {
            let flags = overrides(&a.common, a.folds);
            train(Protocol::Kfold, &a.common, flags, cli.jobs)
        }
        Command::Loso(a) => {
            let flags = overrides(&a.common, None);
            train(Protocol::Loso, &a.common, flags, cli.jobs)
        }
        Command::Eval(a) => eval(a),
        Command::Interpret(a) => interpret(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match a.preset {
        Preset::Desk => SynthSpec::desk(a.delta, a.seed),
        Preset::Full => SynthSpec::full(a.delta, a.seed),
    };
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    let sites = a.sites.unwrap_or(spec.site_sizes.len());
    let per_site = a.per_site.unwrap_or(spec.site_sizes[0]);
    spec.site_sizes = vec![per_site; sites];
    let cohort = generate_cohort(&spec)?;
    cohort.save(&a.out)?;
    write_json(&a.out.join("synth.json"), &spec)?;
    println!(
        "event=synth out={} subjects={} regions={} timepoints={} sites={sites} delta={} seed={}",
        a.out.display(),
        cohort.len(),
        cohort.n_regions(),
        cohort.n_timepoints(),
        spec.delta,
        spec.seed
    );
    Ok(())
}

fn overrides(c: &CommonTrain, folds: Option<usize>) -> Overrides {
    Overrides {
        preset: c.preset,
        folds,
        seed: c.seed,
        variant: c.variant.clone(),
        epochs: c.epochs,
        batch_size: c.batch_size,
        lr: c.lr,
        patience: c.patience,
    }
}

fn load_cohort(dir: &Path) -> Result<Cohort> {
    Cohort::load(dir).with_context(|| format!("loading cohort {}", dir.display()))
}

fn train(protocol: Protocol, c: &CommonTrain, flags: Overrides, jobs: usize) -> Result<()> {
    let file = c.config.as_deref().map(config::read_file).transpose()?;
    let cohort = load_cohort(&c.cohort)?;
    let cfg: RunConfig = config::resolve(protocol, &c.cohort, (cohort.n_regions(), cohort.n_timepoints()), file, &flags)?;
    let exp: &ExperimentConfig = &cfg.experiment;
    exp.check_cohort(&cohort)?;
    let splits = match protocol {
        Protocol::Kfold => stratified_kfold(&cohort.labels(), cfg.folds, exp.train.seed)?,
        Protocol::Loso => loso_splits(&cohort.subjects.iter().map(|s| s.site.clone()).collect::<Vec<_>>())?,
    };
    println!(
        "event=start protocol={} splits={} subjects={} variant={} seed={} jobs={jobs}",
        protocol.name(),
        splits.len(),
        cohort.len(),
        serde_json::to_value(exp.model.variant)?.as_str().unwrap_or("?"),
        exp.train.seed
    );
    let prepared = prepare_all(&cohort.subjects, &exp.features)?;
    let (folds, result) = run_protocol(&cohort, &prepared, &splits, exp, protocol.name(), jobs)?;
    write_protocol(&c.out, &cfg, exp, protocol.name(), &folds, &result)?;
    for (f, m) in folds.iter().zip(&result.per_split) {
        println!(
            "event=split split={} n={} epochs={} best_epoch={} auc={} acc={} leakage={}",
            m.id,
            m.n,
            f.fit.history.len(),
            f.fit.best_epoch,
            fmt(m.values.auc),
            fmt(m.values.acc),
            f.audit.failures()
        );
    }
    println!(
        "event=done protocol={} out={} mean_auc={} mean_acc={} weighted_acc={}",
        protocol.name(),
        c.out.display(),
        fmt(result.mean.auc),
        fmt(result.mean.acc),
        fmt(result.weighted_avg.acc)
    );
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Split directories of `run`, or `run` itself when it holds a checkpoint.
fn split_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    if run.join("checkpoint.bin").is_file() {
        return Ok(vec![run.to_path_buf()]);
    }
    Ok(fold_dirs(run)?)
}

fn load_folds(run: &Path) -> Result<Vec<LoadedFold>> {
    split_dirs(run)?
        .iter()
        .map(|d| LoadedFold::load(d).with_context(|| format!("loading split {}", d.display())))
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let cohort = load_cohort(&a.cohort)?;
    let folds = load_folds(&a.run)?;
    let mut worst: f64 = 0.0;
    for f in &folds {
        let m = f.evaluate(&cohort)?;
        let stored = f
            .metrics
            .per_split
            .first()
            .ok_or_else(|| circuitnet::Error::Data(format!("split {} has no stored metrics", f.record.id)))?;
        let diff = m.values.max_abs_diff(&stored.values).ok_or_else(|| {
            circuitnet::Error::Invariant(format!("split {}: defined metrics differ from the stored ones", f.record.id))
        })?;
        worst = worst.max(diff);
        println!("event=eval split={} n={} auc={} acc={} max_diff={diff:e}", m.id, m.n, fmt(m.values.auc), fmt(m.values.acc));
    }
    if !(worst <= a.tolerance) {
        return Err(circuitnet::Error::Invariant(format!("metrics differ from the stored ones by {worst:e} > {:e}", a.tolerance)).into());
    }
    println!("event=eval_done splits={} max_diff={worst:e} status=ok", folds.len());
    Ok(())
}

fn interpret(a: InterpretArgs) -> Result<()> {
    let cohort = load_cohort(&a.cohort)?;
    let folds = load_folds(&a.run)?;
    fs::create_dir_all(&a.out).map_err(|e| circuitnet::Error::io(&a.out, e))?;
    match a.mode {
        Mode::Freq => {
            let r = frequency_ablation(&folds, &cohort, a.low_band, a.high_band)?;
            write_json(&a.out.join("freq_ablation.json"), &r)?;
            let (t, p) = r.t_test.map_or((f64::NAN, f64::NAN), |t| (t.t, t.p));
            println!("event=freq mean_low={:.6} mean_high={:.6} t={t:.6} p={p:e}", r.mean_low, r.mean_high);
        }
        Mode::Hier | Mode::Attn => {
            let (mut masks, mut attn, mut labels) = (Vec::new(), Vec::new(), Vec::new());
            for f in &folds {
                let (m, at, y) = collect_snapshots(f, &cohort)?;
                masks.extend(m);
                attn.extend(at);
                labels.extend(y);
            }
            if let Mode::Hier = a.mode {
                let h = hierarchy_stats(&masks, &labels, &cohort.atlas)?;
                let path = a.out.join("hierarchy_stats.csv");
                fs::write(&path, h.to_csv()).map_err(|e| circuitnet::Error::io(&path, e))?;
                let significant = h.rows.iter().filter(|r| r.p < 0.05).count() / h.depth.max(1);
                println!("event=hier subjects={} depth={} regions_p05={significant}", labels.len(), h.depth);
            } else {
                let r = attention_report(&attn, &labels)?;
                let path = a.out.join("attention_edges.csv");
                fs::write(&path, r.edges_csv()).map_err(|e| circuitnet::Error::io(&path, e))?;
                write_json(&a.out.join("chord.json"), &r.chord_json())?;
                println!("event=attn subjects={} edges={}", labels.len(), r.edges.len());
            }
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let spec = match a.preset {
        Preset::Desk => SynthSpec::desk(STRONG_DELTA, a.seed),
        Preset::Full => SynthSpec::full(STRONG_DELTA, a.seed),
    };
    let exp = match a.preset {
        Preset::Desk => ExperimentConfig::desk(spec.n_regions, spec.n_timepoints, a.seed),
        Preset::Full => ExperimentConfig::full(spec.n_regions, spec.n_timepoints, a.seed),
    };
    let fx = synthetic_fixture(&exp, &spec, a.batch)?;
    let cfg = GradcheckConfig {
        per_tensor: a.per_tensor,
        step: a.step,
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradcheckConfig::default()
    };
    let r = model_gradcheck(&fx.model, &fx.batch, &fx.atlas, &fx.templates, &fx.train, &cfg)?;
    for t in &r.tensors {
        println!("event=tensor name={} checked={} max_rel_err={:e}", t.name, t.checked, t.max_rel_err);
    }
    let status = if r.passed(a.tolerance) { "pass" } else { "fail" };
    println!(
        "event=gradcheck loss={:.6} tensors={} coordinates={} max_rel_err={:e} status={status}",
        r.loss,
        r.tensors.len(),
        r.coordinates,
        r.max_rel_err
    );
    if !r.passed(a.tolerance) {
        return Err(circuitnet::Error::Numerical(format!("max relative error {:e} >= {:e}", r.max_rel_err, a.tolerance)).into());
    }
    Ok(())
}
