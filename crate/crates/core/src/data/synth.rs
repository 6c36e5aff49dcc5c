//! Synthetic multi-site cohorts with planted circuit-level effects.
//!
//! Each circuit carries a latent signal band-limited to 0.01–0.08 Hz. A
//! region's series is its circuit latent scaled by a loading, plus white
//! noise, then a site gain and offset. MDD subjects get a stronger RN→DMN
//! coupling (`+delta`) and a larger DMN amplitude (`1 + delta`). With
//! `delta = 0` the two labels are identically distributed.

use autograd::{RngStream, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{Circuit, CircuitAtlas};
use crate::data::cohort::{Cohort, Subject, MIN_REGIONS, MIN_TIMEPOINTS};
use crate::data::features::{bandpass_filter, standardize_rows};
use crate::error::{Error, Result};

pub const SIGNAL_BAND: (f64, f64) = (0.01, 0.08);
pub const STRONG_DELTA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_regions: usize,
    pub n_timepoints: usize,
    pub tr_s: f64,
    pub site_sizes: Vec<usize>,
    pub delta: f64,
    /// Standard deviation of the white measurement noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// 16 regions, 120 time points, four sites of 30.
    pub fn desk(delta: f64, seed: u64) -> Self {
        SynthSpec {
            n_regions: 16,
            n_timepoints: 120,
            tr_s: 2.0,
            site_sizes: vec![30; 4],
            delta,
            noise: 0.6,
            seed,
        }
    }

    /// 116 regions, 180 time points, four sites of 60.
    pub fn full(delta: f64, seed: u64) -> Self {
        SynthSpec {
            n_regions: 116,
            n_timepoints: 180,
            tr_s: 2.0,
            site_sizes: vec![60; 4],
            delta,
            noise: 0.6,
            seed,
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.site_sizes.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(Error::Config(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.site_sizes.is_empty() || self.site_sizes.iter().any(|&s| s < 4) {
            return Err(Error::Config("every site needs at least 4 subjects".into()));
        }
        if self.n_regions < MIN_REGIONS || self.n_timepoints < MIN_TIMEPOINTS {
            return Err(Error::Config(format!(
                "need at least {MIN_REGIONS} regions and {MIN_TIMEPOINTS} time points"
            )));
        }
        if !(self.noise >= 0.0) || !(self.tr_s > 0.0) {
            return Err(Error::Config("noise must be >= 0 and TR > 0".into()));
        }
        if SIGNAL_BAND.1 > 1.0 / (2.0 * self.tr_s) {
            return Err(Error::Config("TR too long for the 0.08 Hz signal band".into()));
        }
        Ok(())
    }
}

struct Plan {
    id: String,
    site: usize,
    label: u8,
}

fn band_limited(t: usize, tr: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let white = Tensor::row((0..t).map(|_| rng.normal()).collect())?;
    let filtered = bandpass_filter(&white, SIGNAL_BAND.0, SIGNAL_BAND.1, tr)?;
    Ok(standardize_rows(&filtered)?.into_data())
}

fn subject(spec: &SynthSpec, atlas: &CircuitAtlas, loadings: &[f64], site_gain: (f64, f64), plan: &Plan) -> Result<Subject> {
    let (n, t) = (spec.n_regions, spec.n_timepoints);
    let mut rng = RngStream::new(spec.seed, format!("subject/{}", plan.id));
    let mut latent: Vec<Vec<f64>> = Vec::with_capacity(5);
    for _ in Circuit::ALL {
        latent.push(band_limited(t, spec.tr_s, &mut rng)?);
    }
    let y = plan.label as f64;
    let dmn = Circuit::Dmn.index();
    let rn = Circuit::Rn.index();
    let mut coupled = latent.clone();
    for (dst, row) in coupled.iter_mut().enumerate() {
        for (src, l) in latent.iter().enumerate() {
            if src == dst {
                continue;
            }
            let k = if src == rn && dst == dmn {
                rng.uniform_range(0.0, 0.3) + spec.delta * y
            } else {
                rng.uniform_range(-0.1, 0.1)
            };
            for (v, s) in row.iter_mut().zip(l) {
                *v += k * s;
            }
        }
    }
    let amp = 1.0 + spec.delta * y;
    for v in coupled[dmn].iter_mut() {
        *v *= amp;
    }
    let (gain, offset) = site_gain;
    let mut data = Vec::with_capacity(n * t);
    for r in 0..n {
        let lam = loadings[r] * rng.uniform_range(0.9, 1.1);
        let src = &coupled[atlas.circuit_of(r).index()];
        data.extend(src.iter().map(|&s| gain * (lam * s + spec.noise * rng.normal()) + offset));
    }
    let age = (40.0 + 12.0 * rng.normal()).clamp(18.0, 75.0).round();
    let sex = rng.bernoulli(0.5) as u8;
    let education = rng.uniform_range(6.0, 20.0).round();
    Ok(Subject {
        id: plan.id.clone(),
        site: format!("site{:02}", plan.site),
        label: plan.label,
        bold: Tensor::matrix(n, t, data)?,
        age,
        sex,
        education,
    })
}

/// Deterministic in `spec.seed`; subjects are ordered by id.
pub fn generate_cohort(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let atlas = CircuitAtlas::even(spec.n_regions)?;
    let mut lrng = RngStream::new(spec.seed, "loadings");
    let loadings: Vec<f64> = (0..spec.n_regions).map(|_| lrng.uniform_range(0.5, 1.0)).collect();
    let mut plans = Vec::with_capacity(spec.n_subjects());
    let mut gains = Vec::with_capacity(spec.site_sizes.len());
    for (site, &size) in spec.site_sizes.iter().enumerate() {
        let mut srng = RngStream::new(spec.seed, format!("site/{site}"));
        gains.push((srng.uniform_range(0.8, 1.25), srng.uniform_range(-1.0, 1.0)));
        let mut labels: Vec<u8> = (0..size).map(|i| (i < size / 2) as u8).collect();
        srng.shuffle(&mut labels);
        for (i, label) in labels.into_iter().enumerate() {
            plans.push(Plan {
                id: format!("s{site:02}_{i:03}"),
                site,
                label,
            });
        }
    }
    let subjects = plans
        .par_iter()
        .map(|p| subject(spec, &atlas, &loadings, gains[p.site], p))
        .collect::<Result<Vec<_>>>()?;
    Cohort::new(subjects, atlas)
}
