//! Connectivity and spectral features from regional BOLD series.

use autograd::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Fisher-z inputs are clamped to `±(1 - FISHER_CLAMP)`.
pub const FISHER_CLAMP: f64 = 1e-7;

/// Band used for the static low-frequency power feature (Hz).
pub const LOW_FREQ_POWER_BAND: (f64, f64) = (0.01, 0.1);

#[derive(Debug, Clone, PartialEq)]
pub struct StaticFeatures {
    /// Window-averaged Fisher-z FC, symmetric with zero diagonal.
    pub fc_fisher: Tensor,
    pub variance: Vec<f64>,
    pub low_freq_power: Vec<f64>,
    pub n_windows: usize,
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let ss = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, ss)
}

/// Pearson correlation between every pair of rows of `bold` (`n x T`).
pub fn pearson_fc(bold: &Tensor) -> Result<Tensor> {
    let (n, t) = bold.dims2()?;
    let mut centered = Vec::with_capacity(n * t);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = bold.row_slice(i);
        let (mean, ss) = row_stats(row);
        if !(ss > 0.0) || !ss.is_finite() {
            return Err(Error::Data(format!("region {i} has zero variance")));
        }
        centered.extend(row.iter().map(|v| v - mean));
        norms.push(ss.sqrt());
    }
    let mut fc = Tensor::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &centered[i * t..(i + 1) * t];
            let b = &centered[j * t..(j + 1) * t];
            let r = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            fc.set(i, j, r);
            fc.set(j, i, r);
        }
    }
    Ok(fc)
}

pub fn fisher_z_scalar(r: f64) -> f64 {
    r.clamp(-1.0 + FISHER_CLAMP, 1.0 - FISHER_CLAMP).atanh()
}

/// Elementwise `atanh` of the clamped correlations with a zero diagonal.
pub fn fisher_z(fc: &Tensor) -> Tensor {
    let n = fc.rows();
    Tensor::from_fn(n, fc.cols(), |i, j| if i == j { 0.0 } else { fisher_z_scalar(fc.get(i, j)) })
}

/// Frequency (Hz) of DFT bin `k` of a length-`t` series sampled every `tr` s,
/// folded onto `[0, Nyquist]`.
fn bin_frequency(k: usize, t: usize, tr: f64) -> f64 {
    let kk = k.min(t - k);
    kk as f64 / (t as f64 * tr)
}

fn dft_rows(bold: &Tensor) -> Vec<Vec<Complex<f64>>> {
    let (n, t) = bold.dims2().unwrap();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    (0..n)
        .map(|i| {
            let mut buf: Vec<Complex<f64>> = bold.row_slice(i).iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.process(&mut buf);
            buf
        })
        .collect()
}

/// Ideal rectangular band-pass: DFT bins with frequency in `[lo, hi]` are
/// kept, all others zeroed. The 0 Hz bin survives only when `lo == 0`.
pub fn bandpass_filter(bold: &Tensor, lo_hz: f64, hi_hz: f64, tr_s: f64) -> Result<Tensor> {
    let (n, t) = bold.dims2()?;
    let nyquist = 1.0 / (2.0 * tr_s);
    if !(tr_s > 0.0) || lo_hz < 0.0 || !(lo_hz < hi_hz) {
        return Err(Error::Config(format!("invalid band [{lo_hz}, {hi_hz}] Hz with TR {tr_s} s")));
    }
    if hi_hz > nyquist + 1e-12 {
        return Err(Error::Config(format!("band upper edge {hi_hz} Hz exceeds Nyquist {nyquist} Hz")));
    }
    let keep: Vec<bool> = (0..t)
        .map(|k| {
            let f = bin_frequency(k, t, tr_s);
            f >= lo_hz && f <= hi_hz
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(t);
    let mut out = Vec::with_capacity(n * t);
    for mut spec in dft_rows(bold) {
        for (s, &k) in spec.iter_mut().zip(&keep) {
            if !k {
                *s = Complex::new(0.0, 0.0);
            }
        }
        inv.process(&mut spec);
        out.extend(spec.iter().map(|c| c.re / t as f64));
    }
    Ok(Tensor::matrix(n, t, out)?)
}

/// One-sided periodogram power summed over bins in `[lo, hi]` (0 and Nyquist
/// bins excluded), per region. White noise of variance `s2` yields
/// `2 * s2 * K / T` in expectation for `K` in-band bins.
pub fn band_power(bold: &Tensor, lo_hz: f64, hi_hz: f64, tr_s: f64) -> Result<Vec<f64>> {
    let (_, t) = bold.dims2()?;
    Ok(dft_rows(bold)
        .into_iter()
        .map(|spec| {
            (1..t.div_ceil(2))
                .filter(|&k| {
                    let f = bin_frequency(k, t, tr_s);
                    f >= lo_hz && f <= hi_hz
                })
                .map(|k| 2.0 * spec[k].norm_sqr() / (t as f64 * t as f64))
                .sum()
        })
        .collect())
}

/// Number of in-band one-sided bins used by [`band_power`].
pub fn band_bin_count(t: usize, lo_hz: f64, hi_hz: f64, tr_s: f64) -> usize {
    (1..t.div_ceil(2))
        .filter(|&k| {
            let f = bin_frequency(k, t, tr_s);
            f >= lo_hz && f <= hi_hz
        })
        .count()
}

/// Window-averaged Fisher-z FC plus full-series variance and low-band power.
pub fn sliding_window_features(bold: &Tensor, win: usize, stride: usize, tr_s: f64) -> Result<StaticFeatures> {
    let (n, t) = bold.dims2()?;
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if win > t || win < 3 {
        return Err(Error::Config(format!("window length {win} invalid for {t} time points")));
    }
    let n_windows = (t - win) / stride + 1;
    let mut acc = Tensor::zeros(n, n);
    for w in 0..n_windows {
        let start = w * stride;
        let seg = Tensor::from_fn(n, win, |i, j| bold.get(i, start + j));
        let z = fisher_z(&pearson_fc(&seg).map_err(|e| Error::Data(format!("window {w}: {e}")))?);
        for (a, v) in acc.data_mut().iter_mut().zip(z.data()) {
            *a += v;
        }
    }
    let fc_fisher = acc.map(|v| v / n_windows as f64);
    let variance = (0..n)
        .map(|i| row_stats(bold.row_slice(i)).1 / (t as f64 - 1.0))
        .collect();
    let low_freq_power = band_power(bold, LOW_FREQ_POWER_BAND.0, LOW_FREQ_POWER_BAND.1, tr_s)?;
    Ok(StaticFeatures {
        fc_fisher,
        variance,
        low_freq_power,
        n_windows,
    })
}

/// Z-scores every row (zero mean, unit sample variance).
pub fn standardize_rows(bold: &Tensor) -> Result<Tensor> {
    let (n, t) = bold.dims2()?;
    let mut out = Vec::with_capacity(n * t);
    for i in 0..n {
        let row = bold.row_slice(i);
        let (mean, ss) = row_stats(row);
        if !(ss > 0.0) {
            return Err(Error::Data(format!("region {i} has zero variance")));
        }
        let sd = (ss / (t as f64 - 1.0)).sqrt();
        out.extend(row.iter().map(|v| (v - mean) / sd));
    }
    Ok(Tensor::matrix(n, t, out)?)
}
