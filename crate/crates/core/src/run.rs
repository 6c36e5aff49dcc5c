//! Run directories: one per split plus an aggregate at the root.
//!
//! ```text
//! <out>/config.json  metrics.json  predictions.csv  roc.csv  pr.csv
//!       dca.csv  leakage.json
//! <out>/<split>/config.json  history.csv  checkpoint.bin  metrics.json
//!               split.json  predictions.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{prepare_subject, Cohort, GroupTemplates, PreparedSubject, Scaler};
use crate::error::{Error, Result};
use crate::eval::cv::{ExperimentConfig, FoldOutcome, LeakageAudit, SplitRecord};
use crate::eval::metrics::{curve_csv, decision_curve, pr_curve, roc_curve, CvResult, SplitMetrics};
use crate::model::{Model, ModelInput};
use crate::train::{history_csv, predict, Predictions};

/// Thresholds of the stored decision curve.
pub const DCA_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), e.line())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn predictions_csv(p: &Predictions) -> String {
    let mut s = String::from("subject_id,label,score\n");
    for ((id, y), score) in p.ids.iter().zip(&p.labels).zip(&p.scores) {
        let _ = writeln!(s, "{id},{y},{score}");
    }
    s
}

pub fn write_fold(dir: &Path, cfg: &ExperimentConfig, protocol: &str, fold: &FoldOutcome) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_text(&dir.join("history.csv"), &history_csv(&fold.fit.history))?;
    fold.checkpoint.save(&dir.join("checkpoint.bin"))?;
    write_json(&dir.join("metrics.json"), &CvResult::aggregate(protocol, vec![fold.metrics.clone()]))?;
    write_json(&dir.join("split.json"), &fold.record)?;
    write_text(&dir.join("predictions.csv"), &predictions_csv(&fold.predictions))
}

/// Writes every split directory and the pooled aggregate files.
/// `root_config` becomes the top-level `config.json`.
pub fn write_protocol<C: Serialize>(
    out: &Path,
    root_config: &C,
    cfg: &ExperimentConfig,
    protocol: &str,
    folds: &[FoldOutcome],
    result: &CvResult,
) -> Result<()> {
    create_dir(out)?;
    for fold in folds {
        write_fold(&out.join(&fold.record.id), cfg, protocol, fold)?;
    }
    write_json(&out.join("config.json"), root_config)?;
    write_json(&out.join("metrics.json"), result)?;
    let mut pooled = Predictions {
        ids: Vec::new(),
        labels: Vec::new(),
        scores: Vec::new(),
        loss: 0.0,
    };
    for f in folds {
        pooled.ids.extend(f.predictions.ids.iter().cloned());
        pooled.labels.extend(&f.predictions.labels);
        pooled.scores.extend(&f.predictions.scores);
    }
    write_text(&out.join("predictions.csv"), &predictions_csv(&pooled))?;
    if let Ok(roc) = roc_curve(&pooled.scores, &pooled.labels) {
        let pts = roc.iter().filter(|p| p.threshold.is_finite()).map(|p| (p.fpr, p.tpr));
        write_text(&out.join("roc.csv"), &curve_csv(("fpr", "tpr"), pts))?;
    }
    if let Ok(pr) = pr_curve(&pooled.scores, &pooled.labels) {
        write_text(&out.join("pr.csv"), &curve_csv(("recall", "precision"), pr.iter().map(|p| (p.recall, p.precision))))?;
    }
    let dca = decision_curve(&pooled.scores, &pooled.labels, &DCA_THRESHOLDS)?;
    let mut s = String::from("threshold,model,treat_all,treat_none\n");
    for p in dca {
        let _ = writeln!(s, "{},{},{},{}", p.threshold, p.model, p.treat_all, p.treat_none);
    }
    write_text(&out.join("dca.csv"), &s)?;
    let audits: Vec<&LeakageAudit> = folds.iter().map(|f| &f.audit).collect();
    write_json(&out.join("leakage.json"), &audits)
}

/// A split directory loaded back for scoring or interpretation.
#[derive(Debug, Clone)]
pub struct LoadedFold {
    pub config: ExperimentConfig,
    pub model: Model,
    pub scaler: Scaler,
    pub templates: GroupTemplates,
    pub tau: f64,
    pub record: SplitRecord,
    pub metrics: CvResult,
}

impl LoadedFold {
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ExperimentConfig = read_json(&dir.join("config.json"))?;
        config.validate()?;
        let ck = Checkpoint::load(&dir.join("checkpoint.bin"))?;
        let mut model = Model::new(config.model.clone(), config.train.seed)?;
        ck.restore_params(&mut model)?;
        let record: SplitRecord = read_json(&dir.join("split.json"))?;
        let mut templates = ck.templates()?;
        templates.members = record.template_members.clone();
        Ok(LoadedFold {
            scaler: ck.scaler()?,
            tau: ck.tau()?,
            metrics: read_json(&dir.join("metrics.json"))?,
            config,
            model,
            templates,
            record,
        })
    }

    /// Test subjects of this split, in stored order.
    pub fn test_subjects<'a>(&self, cohort: &'a Cohort) -> Result<Vec<&'a crate::data::Subject>> {
        self.record
            .test
            .iter()
            .map(|id| {
                cohort
                    .index_of(id)
                    .map(|i| &cohort.subjects[i])
                    .ok_or_else(|| Error::Data(format!("subject {id} of split {} is not in the cohort", self.record.id)))
            })
            .collect()
    }

    pub fn inputs(&self, prepared: &[PreparedSubject]) -> Vec<ModelInput> {
        prepared.iter().map(|p| ModelInput::new(p, &self.scaler)).collect()
    }

    /// Scores prepared subjects in evaluation mode.
    pub fn predict(&self, prepared: &[PreparedSubject], cohort: &Cohort) -> Result<Predictions> {
        predict(&self.model, &self.inputs(prepared), &cohort.atlas, &self.templates, self.tau)
    }

    /// Recomputes the split's test metrics from the cohort.
    pub fn evaluate(&self, cohort: &Cohort) -> Result<SplitMetrics> {
        self.config.check_cohort(cohort)?;
        let prepared = self
            .test_subjects(cohort)?
            .into_iter()
            .map(|s| prepare_subject(s, &self.config.features))
            .collect::<Result<Vec<_>>>()?;
        let p = self.predict(&prepared, cohort)?;
        SplitMetrics::compute(&self.record.id, &p.scores, &p.labels)
    }
}

/// Split directories under `out`, in the order of the aggregate metrics.
pub fn fold_dirs(out: &Path) -> Result<Vec<std::path::PathBuf>> {
    let agg: CvResult = read_json(&out.join("metrics.json"))?;
    let dirs: Vec<_> = agg.per_split.iter().map(|s| out.join(&s.id)).collect();
    for d in &dirs {
        if !d.join("checkpoint.bin").is_file() {
            return Err(Error::Data(format!("{} has no checkpoint.bin", d.display())));
        }
    }
    Ok(dirs)
}
