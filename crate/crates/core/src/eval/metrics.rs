//! Classification metrics, ROC/PR curves and decision-curve analysis.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Scores at or above `threshold` are predicted positive.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_lengths(scores, labels)?;
        let mut c = ConfusionCounts::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        let p = self.precision()?;
        let r = self.sensitivity()?;
        if p + r == 0.0 {
            return None;
        }
        Some(2.0 * p * r / (p + r))
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Invariant(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Invariant("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    Ok(())
}

fn desc(a: &f64, b: &f64) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

/// Mann–Whitney AUC with ties counted as one half, via mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invariant("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the positive rank sum keeps mid-ranks integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// `(threshold, tp, fp)` at every distinct score, descending.
fn cumulative_counts(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| desc(&scores[a], &scores[b]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = pos + 1 == order.len() || scores[order[pos + 1]] != scores[k];
        if last {
            out.push((scores[k], tp, fp));
        }
    }
    out
}

/// Step-interpolated average precision: `sum_k (R_k - R_{k-1}) P_k` over
/// distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(Error::Invariant("average precision needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in cumulative_counts(scores, labels) {
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::Invariant("ROC curve needs both classes".into()));
    }
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    pts.extend(cumulative_counts(scores, labels).into_iter().map(|(t, tp, fp)| RocPoint {
        threshold: t,
        fpr: fp as f64 / n_neg,
        tpr: tp as f64 / n_pos,
    }));
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<PrPoint>> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    if n_pos == 0.0 {
        return Err(Error::Invariant("PR curve needs at least one positive".into()));
    }
    Ok(cumulative_counts(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            threshold: t,
            recall: tp as f64 / n_pos,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionPoint {
    pub threshold: f64,
    pub model: f64,
    pub treat_all: f64,
    pub treat_none: f64,
}

/// Net benefit `TP/N - FP/N * p/(1-p)` of the model and the treat-all
/// policy at each threshold `p` in `(0, 1)`.
pub fn decision_curve(scores: &[f64], labels: &[u8], thresholds: &[f64]) -> Result<Vec<DecisionPoint>> {
    check_lengths(scores, labels)?;
    let n = labels.len() as f64;
    if n == 0.0 {
        return Err(Error::Invariant("decision curve needs subjects".into()));
    }
    let prevalence = labels.iter().filter(|&&y| y == 1).count() as f64 / n;
    thresholds
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Invariant(format!("decision threshold must be in (0, 1), got {p}")));
            }
            let c = ConfusionCounts::from_scores(scores, labels, p)?;
            let odds = p / (1.0 - p);
            Ok(DecisionPoint {
                threshold: p,
                model: c.tp as f64 / n - c.fp as f64 / n * odds,
                treat_all: prevalence - (1.0 - prevalence) * odds,
                treat_none: 0.0,
            })
        })
        .collect()
}

/// Two-column CSV with a header.
pub fn curve_csv(header: (&str, &str), points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = format!("{},{}\n", header.0, header.1);
    for (a, b) in points {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

/// The six reported metrics; undefined values are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    #[serde(rename = "ACC")]
    pub acc: Option<f64>,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    #[serde(rename = "SEN")]
    pub sen: Option<f64>,
    #[serde(rename = "SPE")]
    pub spe: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
}

impl MetricValues {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let c = ConfusionCounts::from_scores(scores, labels, 0.5)?;
        Ok(MetricValues {
            acc: c.accuracy(),
            auc: roc_auc(scores, labels).ok(),
            sen: c.sensitivity(),
            spe: c.specificity(),
            f1: c.f1(),
            ap: average_precision(scores, labels).ok(),
        })
    }

    pub fn fields(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("ACC", self.acc),
            ("AUC", self.auc),
            ("SEN", self.sen),
            ("SPE", self.spe),
            ("F1", self.f1),
            ("AP", self.ap),
        ]
    }

    fn from_fn(mut f: impl FnMut(fn(&MetricValues) -> Option<f64>) -> Option<f64>) -> Self {
        MetricValues {
            acc: f(|m| m.acc),
            auc: f(|m| m.auc),
            sen: f(|m| m.sen),
            spe: f(|m| m.spe),
            f1: f(|m| m.f1),
            ap: f(|m| m.ap),
        }
    }

    /// Largest absolute difference over fields defined in both; `None`
    /// when definedness differs.
    pub fn max_abs_diff(&self, other: &MetricValues) -> Option<f64> {
        let mut worst: f64 = 0.0;
        for ((_, a), (_, b)) in self.fields().into_iter().zip(other.fields()) {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return None,
            }
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub id: String,
    pub n: usize,
    #[serde(flatten)]
    pub values: MetricValues,
}

impl SplitMetrics {
    pub fn compute(id: &str, scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(SplitMetrics {
            id: id.to_string(),
            n: labels.len(),
            values: MetricValues::compute(scores, labels)?,
        })
    }
}

/// Aggregate over splits: `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub protocol: String,
    pub per_split: Vec<SplitMetrics>,
    /// Unweighted mean over splits where the metric is defined.
    pub mean: MetricValues,
    /// Sample standard deviation over splits; needs two defined values.
    pub sd: MetricValues,
    /// Mean weighted by split size over splits where the metric is defined.
    pub weighted_avg: MetricValues,
}

impl CvResult {
    pub fn aggregate(protocol: &str, per_split: Vec<SplitMetrics>) -> Self {
        let collect = |get: fn(&MetricValues) -> Option<f64>| -> Vec<(f64, f64)> {
            per_split.iter().filter_map(|s| get(&s.values).map(|v| (v, s.n as f64))).collect()
        };
        let mean = MetricValues::from_fn(|get| {
            let v = collect(get);
            (!v.is_empty()).then(|| v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64)
        });
        let sd = MetricValues::from_fn(|get| {
            let v = collect(get);
            if v.len() < 2 {
                return None;
            }
            let m = v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64;
            Some((v.iter().map(|x| (x.0 - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
        });
        let weighted_avg = MetricValues::from_fn(|get| {
            let v = collect(get);
            let w: f64 = v.iter().map(|x| x.1).sum();
            (w > 0.0).then(|| v.iter().map(|x| x.0 * x.1).sum::<f64>() / w)
        });
        CvResult {
            protocol: protocol.to_string(),
            per_split,
            mean,
            sd,
            weighted_avg,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        };
        assert_eq!(c.precision(), Some(0.75));
        assert_eq!(c.sensitivity(), Some(0.75));
        assert_eq!(c.f1(), Some(0.75));
        assert_eq!(c.accuracy(), Some(0.8));
    }

    #[test]
    fn all_positive_predictions() {
        let c = ConfusionCounts::from_scores(&[0.9; 4], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(c.specificity(), Some(0.0));
        assert_eq!(c.sensitivity(), Some(1.0));
        let none = ConfusionCounts::from_scores(&[0.9; 2], &[1, 1], 0.5).unwrap();
        assert_eq!(none.specificity(), None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.2, 0.8, 0.1], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.3], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.5, 0.3, 0.1], &[1, 0, 0, 0]).unwrap(), 1.0);
        // positives at ranks 2 and 3: (1/2 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7], &[0, 1, 1]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!(average_precision(&[0.1], &[0]).is_err());
    }

    #[test]
    fn decision_curve_examples() {
        // N = 10, TP = 4, FP = 2 at p = 0.5
        let scores = [0.9, 0.9, 0.9, 0.9, 0.8, 0.8, 0.1, 0.1, 0.1, 0.1];
        let labels = [1, 1, 1, 1, 0, 0, 0, 0, 0, 1];
        let d = decision_curve(&scores, &labels, &[0.5]).unwrap();
        assert!((d[0].model - 0.2).abs() < 1e-15);
        assert_eq!(d[0].treat_none, 0.0);
        let perfect = decision_curve(&[1.0, 1.0, 0.0, 0.0, 0.0], &[1, 1, 0, 0, 0], &[0.1, 0.5, 0.9]).unwrap();
        assert!(perfect.iter().all(|p| (p.model - 0.4).abs() < 1e-15));
        assert!(decision_curve(&scores, &labels, &[1.0]).is_err());
    }

    #[test]
    fn weighted_average_by_split_size() {
        let split = |id: &str, n: usize, acc: f64| SplitMetrics {
            id: id.into(),
            n,
            values: MetricValues {
                acc: Some(acc),
                ..MetricValues::default()
            },
        };
        let r = CvResult::aggregate("loso", vec![split("a", 10, 0.6), split("b", 30, 0.8)]);
        assert!((r.weighted_avg.acc.unwrap() - 0.75).abs() < 1e-15);
        assert!((r.mean.acc.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(r.mean.auc, None);
        let eq = CvResult::aggregate("loso", vec![split("a", 20, 0.6), split("b", 20, 0.8)]);
        assert_eq!(eq.weighted_avg.acc, eq.mean.acc);
    }

    #[test]
    fn metrics_json_field_names() {
        let m = SplitMetrics::compute("fold0", &[0.9, 0.1], &[1, 0]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        for key in ["id", "n", "ACC", "AUC", "SEN", "SPE", "F1", "AP"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.9, 0.4, 0.4, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }
}
