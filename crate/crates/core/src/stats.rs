//! Special functions and the two hypothesis tests used by the
//! interpretability reports.
//!
//! The incomplete beta and gamma functions use a power series or a
//! modified-Lentz continued fraction, each iterated until the relative
//! update falls below [`TOLERANCE`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-10;
const MAX_ITER: usize = 10_000;
const TINY: f64 = 1e-300;

/// Reported `|t|` when the paired differences have zero variance.
pub const T_CAP: f64 = 1e12;

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(Error::Numerical(format!("incomplete beta undefined at x={x}, a={a}, b={b}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_cf(1.0 - x, b, a)? / b)
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TOLERANCE {
            return Ok(h);
        }
    }
    Err(Error::Numerical(format!("incomplete beta did not converge at x={x}, a={a}, b={b}")))
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> Result<f64> {
    Ok(1.0 - gamma_q(a, x)?)
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(Error::Numerical(format!("incomplete gamma undefined at a={a}, x={x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let log_front = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * TOLERANCE {
                return Ok(1.0 - sum * log_front.exp());
            }
        }
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < TOLERANCE {
                return Ok(log_front.exp() * h);
            }
        }
    }
    Err(Error::Numerical(format!("incomplete gamma did not converge at a={a}, x={x}")))
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    inc_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Upper tail of the chi-square distribution.
pub fn chi_square_sf(x: f64, df: f64) -> Result<f64> {
    gamma_q(df / 2.0, x / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// Differences had zero variance; `t` is 0 or `+-T_CAP`.
    pub degenerate: bool,
}

/// Paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Invariant(format!("paired samples of sizes {} and {}", a.len(), b.len())));
    }
    let k = a.len();
    if k < 2 {
        return Err(Error::Invariant("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    let df = k - 1;
    if sd == 0.0 {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (T_CAP.copysign(mean), 0.0) };
        return Ok(TTest {
            t,
            df,
            p,
            mean_diff: mean,
            sd_diff: 0.0,
            degenerate: true,
        });
    }
    let t = mean / (sd / (k as f64).sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided(t, df as f64)?,
        mean_diff: mean,
        sd_diff: sd,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p: f64,
}

/// Pearson chi-square test of independence. Columns with no observations
/// contribute nothing; the degrees of freedom stay `(r-1)(c-1)`.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Result<ChiSquare> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::Invariant("contingency table must be at least 2x2 and rectangular".into()));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    if row_sums.iter().any(|&s| s <= 0.0) {
        return Err(Error::Invariant("contingency table has an empty group".into()));
    }
    let col_sums: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    let total: f64 = row_sums.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &obs) in row.iter().enumerate() {
            let expected = row_sums[i] * col_sums[j] / total;
            if expected > 0.0 {
                stat += (obs - expected).powi(2) / expected;
            }
        }
    }
    let df = (r - 1) * (c - 1);
    Ok(ChiSquare {
        statistic: stat,
        df,
        p: chi_square_sf(stat, df as f64)?,
    })
}
