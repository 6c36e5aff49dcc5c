//! Stratified k-fold and leave-one-site-out protocols.
//!
//! Every split gets its own validation holdout, feature scaler and group
//! templates, all fit on the split's training subjects only. Splits run
//! concurrently on a dedicated thread pool; results are collected in split
//! order, so the thread count never changes the output.

use std::collections::BTreeSet;

use autograd::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{group_templates, Cohort, FeatureConfig, PreparedSubject, Scaler};
use crate::error::{Error, Result};
use crate::eval::metrics::{CvResult, SplitMetrics};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::train::{fit, predict, FitResult, Predictions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub id: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` folds; each class is shuffled and dealt round-robin, the second class
/// continuing where the first stopped so fold sizes differ by at most one.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::Data(format!("class {class} has {} subjects, fewer than {k} folds", idx.len())));
        }
        RngStream::new(seed, format!("kfold/class{class}")).shuffle(&mut idx);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    Ok(folds
        .into_iter()
        .enumerate()
        .map(|(f, mut test)| {
            test.sort_unstable();
            Split {
                id: format!("fold{f}"),
                train: complement(labels.len(), &test),
                test,
            }
        })
        .collect())
}

/// One split per site, in first-appearance order.
pub fn loso_splits(sites: &[String]) -> Result<Vec<Split>> {
    let mut order: Vec<&String> = Vec::new();
    for s in sites {
        if !order.contains(&s) {
            order.push(s);
        }
    }
    if order.len() < 2 {
        return Err(Error::Data("leave-one-site-out needs at least two sites".into()));
    }
    Ok(order
        .into_iter()
        .map(|site| {
            let test: Vec<usize> = (0..sites.len()).filter(|&i| &sites[i] == site).collect();
            Split {
                id: site.clone(),
                train: complement(sites.len(), &test),
                test,
            }
        })
        .collect())
}

fn complement(n: usize, taken: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = taken.iter().copied().collect();
    (0..n).filter(|i| !set.contains(i)).collect()
}

/// Test sets are disjoint and cover `0..n`; each training set is exactly
/// the complement of its test set.
pub fn check_partition(splits: &[Split], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for s in splits {
        for &i in &s.test {
            if i >= n || seen[i] {
                return Err(Error::Invariant(format!("split {}: test index {i} out of range or repeated", s.id)));
            }
            seen[i] = true;
        }
        if s.train != complement(n, &s.test) {
            return Err(Error::Invariant(format!("split {}: training set is not the complement of the test set", s.id)));
        }
    }
    if let Some(i) = seen.iter().position(|&v| !v) {
        return Err(Error::Invariant(format!("subject index {i} is in no test set")));
    }
    Ok(())
}

/// Per-class holdout of `round(fraction * count)` subjects (at least one,
/// leaving at least one). Returns sorted `(fit, val)`.
pub fn stratified_holdout(indices: &[usize], labels: &[u8], fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut fit_set = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!("class {class} has {} training subjects; need 2 for a validation holdout", idx.len())));
        }
        rng.shuffle(&mut idx);
        let n_val = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        fit_set.extend_from_slice(&idx[n_val..]);
    }
    fit_set.sort_unstable();
    val.sort_unstable();
    Ok((fit_set, val))
}

/// Fully resolved experiment settings, stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

impl ExperimentConfig {
    pub fn desk(n_regions: usize, n_timepoints: usize, seed: u64) -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(n_regions, n_timepoints),
            train: TrainConfig::desk(seed),
            features: FeatureConfig::desk(),
        }
    }

    pub fn full(n_regions: usize, n_timepoints: usize, seed: u64) -> Self {
        ExperimentConfig {
            model: ModelConfig::full(n_regions, n_timepoints),
            train: TrainConfig::full(seed),
            features: FeatureConfig::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let f = &self.features;
        if f.window < 3 || f.stride == 0 || f.k == 0 || !(f.tr_s > 0.0) {
            return Err(Error::Config("feature window >= 3, stride >= 1, k >= 1 and tr > 0 required".into()));
        }
        Ok(())
    }

    pub fn check_cohort(&self, cohort: &Cohort) -> Result<()> {
        let m = &self.model;
        if cohort.n_regions() != m.n_regions || cohort.n_timepoints() != m.n_timepoints {
            return Err(Error::Config(format!(
                "model expects {} regions x {} timepoints, cohort has {} x {}",
                m.n_regions,
                m.n_timepoints,
                cohort.n_regions(),
                cohort.n_timepoints()
            )));
        }
        if self.features.window > cohort.n_timepoints() || self.features.k >= cohort.n_regions() {
            return Err(Error::Config("feature window or k too large for the cohort".into()));
        }
        Ok(())
    }
}

/// Subject ids used by one split, stored as `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub id: String,
    pub fit: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Subjects whose FC entered the group templates.
    pub template_members: Vec<String>,
}

/// Overlap counts between held-out subjects and everything fit on the
/// training side; all zero when the split is clean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub split: String,
    pub fit_test_overlap: usize,
    pub val_test_overlap: usize,
    pub template_test_overlap: usize,
}

impl LeakageAudit {
    pub fn of(record: &SplitRecord) -> Self {
        let test: BTreeSet<&String> = record.test.iter().collect();
        let count = |ids: &[String]| ids.iter().filter(|id| test.contains(id)).count();
        LeakageAudit {
            split: record.id.clone(),
            fit_test_overlap: count(&record.fit),
            val_test_overlap: count(&record.val),
            template_test_overlap: count(&record.template_members),
        }
    }

    pub fn failures(&self) -> usize {
        self.fit_test_overlap + self.val_test_overlap + self.template_test_overlap
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub record: SplitRecord,
    pub fit: FitResult,
    pub checkpoint: Checkpoint,
    pub predictions: Predictions,
    pub metrics: SplitMetrics,
    pub audit: LeakageAudit,
}

/// Trains and scores one split.
pub fn run_split(cohort: &Cohort, prepared: &[PreparedSubject], split: &Split, cfg: &ExperimentConfig) -> Result<FoldOutcome> {
    let labels = cohort.labels();
    let mut rng = RngStream::new(cfg.train.seed, format!("{}/val", split.id));
    let (fit_idx, val_idx) = stratified_holdout(&split.train, &labels, cfg.train.val_fraction, &mut rng)?;
    let scaler = Scaler::fit(fit_idx.iter().map(|&i| &prepared[i].raw_x1))?;
    let templates = group_templates(fit_idx.iter().map(|&i| (prepared[i].id.as_str(), prepared[i].label, &prepared[i].fc)))?;
    let inputs = |idx: &[usize]| -> Vec<ModelInput> { idx.iter().map(|&i| ModelInput::new(&prepared[i], &scaler)).collect() };
    let (fit_in, val_in, test_in) = (inputs(&fit_idx), inputs(&val_idx), inputs(&split.test));
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let fit_result = fit(&mut model, &fit_in, &val_in, &cohort.atlas, &templates, &cfg.train, &split.id)?;
    let predictions = predict(&model, &test_in, &cohort.atlas, &templates, fit_result.best_tau)?;
    let metrics = SplitMetrics::compute(&split.id, &predictions.scores, &predictions.labels)?;
    let checkpoint = Checkpoint::build(&model, Some(&fit_result.optimizer), &scaler, &templates, fit_result.best_tau, fit_result.best_epoch);
    let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| prepared[i].id.clone()).collect() };
    let record = SplitRecord {
        id: split.id.clone(),
        fit: ids(&fit_idx),
        val: ids(&val_idx),
        test: ids(&split.test),
        template_members: templates.members.clone(),
    };
    let audit = LeakageAudit::of(&record);
    Ok(FoldOutcome {
        record,
        fit: fit_result,
        checkpoint,
        predictions,
        metrics,
        audit,
    })
}

/// Runs every split on `jobs` threads and aggregates in split order.
pub fn run_protocol(cohort: &Cohort, prepared: &[PreparedSubject], splits: &[Split], cfg: &ExperimentConfig, protocol: &str, jobs: usize) -> Result<(Vec<FoldOutcome>, CvResult)> {
    cfg.validate()?;
    cfg.check_cohort(cohort)?;
    check_partition(splits, cohort.len())?;
    if prepared.len() != cohort.len() {
        return Err(Error::Invariant("prepared features do not match the cohort".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    let outcomes: Vec<FoldOutcome> = pool.install(|| splits.par_iter().map(|s| run_split(cohort, prepared, s, cfg)).collect::<Result<_>>())?;
    let result = CvResult::aggregate(protocol, outcomes.iter().map(|o| o.metrics.clone()).collect());
    Ok((outcomes, result))
}
