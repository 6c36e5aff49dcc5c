//! Per-subject model inputs: node features, normalized series and graph.

use autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::cohort::Subject;
use crate::data::features::{bandpass_filter, sliding_window_features, standardize_rows};
use crate::data::graph::{knn_graph, BrainGraph};
use crate::error::{Error, Result};

/// Number of per-node feature columns beyond the FC row.
pub const EXTRA_NODE_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub window: usize,
    pub stride: usize,
    pub k: usize,
    pub tr_s: f64,
    pub symmetrize: bool,
}

impl FeatureConfig {
    pub fn desk() -> Self {
        FeatureConfig {
            window: 60,
            stride: 30,
            k: 8,
            tr_s: 2.0,
            symmetrize: false,
        }
    }

    pub fn full() -> Self {
        FeatureConfig {
            window: 90,
            stride: 45,
            k: 40,
            tr_s: 2.0,
            symmetrize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSubject {
    pub id: String,
    pub site: String,
    pub label: u8,
    /// Window-averaged Fisher-z FC (the subject's own adjacency prior).
    pub fc: Tensor,
    /// Unscaled node features: FC row, variance, low-band power, age, sex, education.
    pub raw_x1: Tensor,
    /// Row z-scored BOLD.
    pub x2: Tensor,
    pub graph: BrainGraph,
}

impl PreparedSubject {
    pub fn feature_dim(&self) -> usize {
        self.raw_x1.cols()
    }
}

pub fn prepare_subject(s: &Subject, cfg: &FeatureConfig) -> Result<PreparedSubject> {
    let feats = sliding_window_features(&s.bold, cfg.window, cfg.stride, cfg.tr_s)
        .map_err(|e| Error::Data(format!("subject {}: {e}", s.id)))?;
    let n = s.n_regions();
    let width = n + EXTRA_NODE_FEATURES;
    let raw_x1 = Tensor::from_fn(n, width, |i, j| match j {
        j if j < n => feats.fc_fisher.get(i, j),
        j if j == n => feats.variance[i],
        j if j == n + 1 => feats.low_freq_power[i],
        j if j == n + 2 => s.age,
        j if j == n + 3 => s.sex as f64,
        _ => s.education,
    });
    let graph = knn_graph(&feats.fc_fisher, cfg.k, cfg.symmetrize);
    Ok(PreparedSubject {
        id: s.id.clone(),
        site: s.site.clone(),
        label: s.label,
        fc: feats.fc_fisher,
        raw_x1,
        x2: standardize_rows(&s.bold).map_err(|e| Error::Data(format!("subject {}: {e}", s.id)))?,
        graph,
    })
}

pub fn prepare_all(subjects: &[Subject], cfg: &FeatureConfig) -> Result<Vec<PreparedSubject>> {
    subjects.par_iter().map(|s| prepare_subject(s, cfg)).collect()
}

/// Prepares subjects after band-pass filtering their BOLD to `[lo, hi]` Hz.
pub fn prepare_filtered(subjects: &[Subject], cfg: &FeatureConfig, lo_hz: f64, hi_hz: f64) -> Result<Vec<PreparedSubject>> {
    subjects
        .par_iter()
        .map(|s| {
            let bold = bandpass_filter(&s.bold, lo_hz, hi_hz, cfg.tr_s)?;
            prepare_subject(&Subject { bold, ..s.clone() }, cfg)
        })
        .collect()
}

/// Column-wise standardization of node features, fit on training nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Scaler {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for x in features {
            if sum.is_empty() {
                sum = vec![0.0; x.cols()];
                sq = vec![0.0; x.cols()];
            }
            if x.cols() != sum.len() {
                return Err(Error::Data("feature widths differ across subjects".into()));
            }
            for i in 0..x.rows() {
                for (j, &v) in x.row_slice(i).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            count += x.rows();
        }
        if count < 2 {
            return Err(Error::Data("scaler needs at least two feature rows".into()));
        }
        let c = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / c).collect();
        let sd = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / c - m * m).max(0.0) * c / (c - 1.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Scaler { mean, sd })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |i, j| (x.get(i, j) - self.mean[j]) / self.sd[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_cohort, SynthSpec};

    #[test]
    fn feature_layout() {
        let mut spec = SynthSpec::desk(0.5, 4);
        spec.site_sizes = vec![4];
        let c = generate_cohort(&spec).unwrap();
        let p = prepare_subject(&c.subjects[0], &FeatureConfig::desk()).unwrap();
        assert_eq!(p.raw_x1.shape(), &[16, 21]);
        assert_eq!(p.x2.shape(), &[16, 120]);
        assert!((0..16).all(|i| p.graph.out_degree(i) == 8));
        assert_eq!(p.raw_x1.get(3, 18), c.subjects[0].age);
    }

    #[test]
    fn scaler_standardizes_columns() {
        let a = Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let s = Scaler::fit([&a]).unwrap();
        let z = s.apply(&a);
        assert!((z.get(0, 0) + z.get(1, 0)).abs() < 1e-15);
        assert_eq!(z.get(0, 1), 0.0);
    }
}
