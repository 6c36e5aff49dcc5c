//! Post-hoc analyses of trained folds: frequency-band ablation, hierarchy
//! level statistics and pruned inter-circuit attention.
//!
//! All three only read checkpoints.

use std::fmt::Write as _;

use autograd::Tape;
use serde::{Deserialize, Serialize};

use crate::atlas::{Circuit, CircuitAtlas};
use crate::data::{prepare_filtered, prepare_subject, Cohort};
use crate::error::{Error, Result};
use crate::eval::metrics::roc_auc;
use crate::model::{AttentionSnapshot, Ctx, MaskSnapshot, ModelInput};
use crate::run::LoadedFold;
use crate::stats::{chi_square_independence, paired_t_test, TTest};

pub const LOW_BAND: (f64, f64) = (0.01, 0.08);
pub const HIGH_BAND: (f64, f64) = (0.1, 0.25);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyAblationReport {
    pub low_band_hz: (f64, f64),
    pub high_band_hz: (f64, f64),
    pub folds: Vec<String>,
    pub auc_low: Vec<f64>,
    pub auc_high: Vec<f64>,
    pub mean_low: f64,
    pub mean_high: f64,
    /// Paired test of `auc_low - auc_high`; absent with fewer than two folds.
    pub t_test: Option<TTest>,
}

/// Scores each fold's test subjects after band-pass filtering their BOLD
/// into each band; static features are recomputed from the filtered series.
pub fn frequency_ablation(folds: &[LoadedFold], cohort: &Cohort, low: (f64, f64), high: (f64, f64)) -> Result<FrequencyAblationReport> {
    if folds.is_empty() {
        return Err(Error::Data("frequency ablation needs at least one trained fold".into()));
    }
    let mut report = FrequencyAblationReport {
        low_band_hz: low,
        high_band_hz: high,
        folds: Vec::new(),
        auc_low: Vec::new(),
        auc_high: Vec::new(),
        mean_low: 0.0,
        mean_high: 0.0,
        t_test: None,
    };
    for fold in folds {
        fold.config.check_cohort(cohort)?;
        let subjects: Vec<_> = fold.test_subjects(cohort)?.into_iter().cloned().collect();
        let band_auc = |band: (f64, f64)| -> Result<f64> {
            let prepared = prepare_filtered(&subjects, &fold.config.features, band.0, band.1)?;
            let p = fold.predict(&prepared, cohort)?;
            roc_auc(&p.scores, &p.labels).map_err(|_| Error::Data(format!("split {}: test set lacks one class", fold.record.id)))
        };
        let (a, b) = (band_auc(low)?, band_auc(high)?);
        report.folds.push(fold.record.id.clone());
        report.auc_low.push(a);
        report.auc_high.push(b);
    }
    let k = folds.len() as f64;
    report.mean_low = report.auc_low.iter().sum::<f64>() / k;
    report.mean_high = report.auc_high.iter().sum::<f64>() / k;
    if folds.len() >= 2 {
        report.t_test = Some(paired_t_test(&report.auc_low, &report.auc_high)?);
    }
    Ok(report)
}

/// Evaluation-mode masks and circuit attention for each test subject.
pub fn collect_snapshots(fold: &LoadedFold, cohort: &Cohort) -> Result<(Vec<MaskSnapshot>, Vec<AttentionSnapshot>, Vec<u8>)> {
    fold.config.check_cohort(cohort)?;
    let mut masks = Vec::new();
    let mut attn = Vec::new();
    let mut labels = Vec::new();
    for s in fold.test_subjects(cohort)? {
        let p = prepare_subject(s, &fold.config.features)?;
        let input = ModelInput::new(&p, &fold.scaler);
        let mut tape = Tape::new();
        let vars = fold.model.params.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, &vars, false);
        let out = fold.model.forward_subject(&mut ctx, &input, &cohort.atlas, &fold.templates, fold.tau, None, None)?;
        masks.push(MaskSnapshot::from_pool(&s.id, &out.pool, &cohort.atlas, &tape));
        attn.push(AttentionSnapshot::from_tensor(&s.id, tape.value(out.vlca.a_real)));
        labels.push(s.label);
    }
    Ok((masks, attn, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyRow {
    pub region: usize,
    pub circuit: Circuit,
    /// 1-based level.
    pub level: usize,
    pub p_mdd: f64,
    pub p_hc: f64,
    /// `p_mdd - p_hc` divided by the largest absolute difference overall.
    pub diff_norm: f64,
    /// Per-region test over the group x level table (repeated on each level row).
    pub chi2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub depth: usize,
    pub n_mdd: usize,
    pub n_hc: usize,
    pub rows: Vec<HierarchyRow>,
}

/// Per-region level proportions by group, from each subject's argmax level.
pub fn hierarchy_stats(snapshots: &[MaskSnapshot], labels: &[u8], atlas: &CircuitAtlas) -> Result<HierarchyStats> {
    if snapshots.len() != labels.len() {
        return Err(Error::Invariant(format!("{} mask snapshots for {} labels", snapshots.len(), labels.len())));
    }
    let n_mdd = labels.iter().filter(|&&y| y == 1).count();
    let n_hc = labels.len() - n_mdd;
    if n_mdd == 0 || n_hc == 0 {
        return Err(Error::Data("hierarchy statistics need subjects from both groups".into()));
    }
    let n_regions = atlas.n_regions();
    let depth = snapshots[0].masks.first().map_or(0, Vec::len);
    if depth < 2 {
        return Err(Error::Data("hierarchy statistics need at least two levels".into()));
    }
    if snapshots.iter().any(|s| s.masks.len() != n_regions || s.masks.iter().any(|r| r.len() != depth)) {
        return Err(Error::Invariant("mask snapshots disagree on regions or depth".into()));
    }
    // counts[region][group][level], group 0 = MDD, 1 = HC
    let mut counts = vec![vec![vec![0.0; depth]; 2]; n_regions];
    for (snap, &y) in snapshots.iter().zip(labels) {
        let g = if y == 1 { 0 } else { 1 };
        for (r, c) in counts.iter_mut().enumerate() {
            c[g][snap.argmax_level(r)] += 1.0;
        }
    }
    let mut rows = Vec::with_capacity(n_regions * depth);
    let mut max_diff: f64 = 0.0;
    for (r, table) in counts.iter().enumerate() {
        let test = chi_square_independence(table)?;
        for level in 0..depth {
            let p_mdd = table[0][level] / n_mdd as f64;
            let p_hc = table[1][level] / n_hc as f64;
            max_diff = max_diff.max((p_mdd - p_hc).abs());
            rows.push(HierarchyRow {
                region: r,
                circuit: atlas.circuit_of(r),
                level: level + 1,
                p_mdd,
                p_hc,
                diff_norm: p_mdd - p_hc,
                chi2: test.statistic,
                p: test.p,
            });
        }
    }
    for row in &mut rows {
        row.diff_norm = if max_diff > 0.0 { row.diff_norm / max_diff } else { 0.0 };
    }
    Ok(HierarchyStats { depth, n_mdd, n_hc, rows })
}

impl HierarchyStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("region,circuit,level,p_MDD,p_HC,diff_norm,chi2,p\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{},{}", r.region, r.circuit, r.level, r.p_mdd, r.p_hc, r.diff_norm, r.chi2, r.p);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    Retained,
    /// Outside the top two outgoing weights of its source.
    Pruned,
    /// Raw group-mean weight is exactly zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEdge {
    pub group: String,
    pub source: Circuit,
    pub target: Circuit,
    pub raw_weight: f64,
    /// Retained weight over the largest retained weight of both groups; 0
    /// for other edges.
    pub norm_weight: f64,
    pub status: EdgeStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub mean_mdd: [[f64; 5]; 5],
    pub mean_hc: [[f64; 5]; 5],
    /// Every off-diagonal edge of both groups.
    pub edges: Vec<AttentionEdge>,
}

pub const RETAINED_PER_SOURCE: usize = 2;

fn group_mean(snaps: &[&AttentionSnapshot]) -> [[f64; 5]; 5] {
    let mut m = [[0.0; 5]; 5];
    for s in snaps {
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += s.weights[i][j];
            }
        }
    }
    let n = snaps.len() as f64;
    m.iter_mut().flatten().for_each(|v| *v /= n);
    m
}

/// Targets kept for `row` and `source`: the two largest off-diagonal
/// weights, ties to the lower target index.
pub fn top_targets(row: &[f64; 5], source: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (0..5).filter(|&j| j != source).collect();
    cands.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    cands.truncate(RETAINED_PER_SOURCE);
    cands
}

pub fn attention_report(snapshots: &[AttentionSnapshot], labels: &[u8]) -> Result<AttentionReport> {
    if snapshots.len() != labels.len() {
        return Err(Error::Invariant(format!("{} attention snapshots for {} labels", snapshots.len(), labels.len())));
    }
    let mdd: Vec<&AttentionSnapshot> = snapshots.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(s, _)| s).collect();
    let hc: Vec<&AttentionSnapshot> = snapshots.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(s, _)| s).collect();
    if mdd.is_empty() || hc.is_empty() {
        return Err(Error::Data("attention report needs subjects from both groups".into()));
    }
    let (mean_mdd, mean_hc) = (group_mean(&mdd), group_mean(&hc));
    let mut edges = Vec::new();
    let mut max_kept: f64 = 0.0;
    for (group, mean) in [("MDD", &mean_mdd), ("HC", &mean_hc)] {
        for (i, row) in mean.iter().enumerate() {
            let kept = top_targets(row, i);
            for (j, &w) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                let status = if w == 0.0 {
                    EdgeStatus::Zero
                } else if kept.contains(&j) {
                    max_kept = max_kept.max(w);
                    EdgeStatus::Retained
                } else {
                    EdgeStatus::Pruned
                };
                edges.push(AttentionEdge {
                    group: group.to_string(),
                    source: Circuit::ALL[i],
                    target: Circuit::ALL[j],
                    raw_weight: w,
                    norm_weight: 0.0,
                    status,
                });
            }
        }
    }
    for e in &mut edges {
        if e.status == EdgeStatus::Retained && max_kept > 0.0 {
            e.norm_weight = e.raw_weight / max_kept;
        }
    }
    Ok(AttentionReport { mean_mdd, mean_hc, edges })
}

impl AttentionReport {
    pub fn edges_csv(&self) -> String {
        let mut s = String::from("group,source,target,raw_weight,norm_weight,status\n");
        for e in &self.edges {
            let status = match e.status {
                EdgeStatus::Retained => "retained",
                EdgeStatus::Pruned => "pruned",
                EdgeStatus::Zero => "zero",
            };
            let _ = writeln!(s, "{},{},{},{},{},{status}", e.group, e.source, e.target, e.raw_weight, e.norm_weight);
        }
        s
    }

    /// Nodes and retained directed edges per group for chord plots.
    pub fn chord_json(&self) -> serde_json::Value {
        let group = |g: &str| -> Vec<serde_json::Value> {
            self.edges
                .iter()
                .filter(|e| e.group == g && e.status == EdgeStatus::Retained)
                .map(|e| serde_json::json!({"source": e.source.name(), "target": e.target.name(), "weight": e.norm_weight}))
                .collect()
        };
        serde_json::json!({
            "nodes": Circuit::ALL.iter().map(|c| c.name()).collect::<Vec<_>>(),
            "groups": {"MDD": group("MDD"), "HC": group("HC")},
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(id: &str, w: [[f64; 5]; 5]) -> AttentionSnapshot {
        AttentionSnapshot {
            subject: id.into(),
            weights: w,
        }
    }

    #[test]
    fn uniform_attention_keeps_lowest_targets() {
        let w = [[0.2; 5]; 5];
        let r = attention_report(&[snap("a", w), snap("b", w)], &[1, 0]).unwrap();
        assert_eq!(r.mean_mdd, w);
        let kept: Vec<&AttentionEdge> = r.edges.iter().filter(|e| e.status == EdgeStatus::Retained).collect();
        assert_eq!(kept.len(), 20);
        assert!(kept.iter().all(|e| e.norm_weight == 1.0 && e.source != e.target));
        let from_dmn: Vec<Circuit> = kept.iter().filter(|e| e.group == "MDD" && e.source == Circuit::Dmn).map(|e| e.target).collect();
        assert_eq!(from_dmn, [Circuit::Sn, Circuit::Fpn]);
        assert_eq!(top_targets(&[0.2; 5], 1), [0, 2]);
    }

    #[test]
    fn normalization_is_global() {
        let mut a = [[0.1; 5]; 5];
        a[0][3] = 0.5;
        let b = [[0.15; 5]; 5];
        let r = attention_report(&[snap("a", a), snap("b", b)], &[1, 0]).unwrap();
        let max = r.edges.iter().map(|e| e.norm_weight).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        let hc = r.edges.iter().find(|e| e.group == "HC" && e.status == EdgeStatus::Retained).unwrap();
        assert!((hc.norm_weight - 0.3).abs() < 1e-12);
        assert!(attention_report(&[snap("a", a)], &[1]).is_err());
    }

    #[test]
    fn identical_groups_give_null_hierarchy() {
        let atlas = CircuitAtlas::even(10).unwrap();
        let s = |id: &str, lvl: usize| MaskSnapshot {
            subject: id.into(),
            masks: (0..10).map(|r| (0..3).map(|l| if l == (r + lvl) % 3 { 1.0 } else { 0.0 }).collect()).collect(),
        };
        let snaps = [s("a", 0), s("b", 1), s("c", 0), s("d", 1)];
        let h = hierarchy_stats(&snaps, &[1, 1, 0, 0], &atlas).unwrap();
        assert!(h.rows.iter().all(|r| r.diff_norm == 0.0 && r.chi2 == 0.0 && r.p == 1.0));
        assert_eq!(h.rows.len(), 30);
    }

    #[test]
    fn hierarchy_extremes_normalize_to_one() {
        let atlas = CircuitAtlas::even(10).unwrap();
        let s = |id: &str, lvl: usize| MaskSnapshot {
            subject: id.into(),
            masks: (0..10).map(|_| (0..3).map(|l| if l == lvl { 0.9 } else { 0.05 }).collect()).collect(),
        };
        let snaps: Vec<MaskSnapshot> = (0..20).map(|i| s(&format!("s{i}"), if i < 10 { 0 } else { 1 })).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i < 10) as u8).collect();
        let h = hierarchy_stats(&snaps, &labels, &atlas).unwrap();
        let r0 = &h.rows[0];
        assert_eq!((r0.level, r0.p_mdd, r0.p_hc, r0.diff_norm), (1, 1.0, 0.0, 1.0));
        assert!((r0.chi2 - 20.0).abs() < 1e-12);
        assert!((r0.p - (-10f64).exp()).abs() < 1e-12);
        assert_eq!(h.rows[1].diff_norm, -1.0);
        assert!(hierarchy_stats(&snaps[..10], &labels[..10], &atlas).is_err());
    }
}
