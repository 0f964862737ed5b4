//! Seed aggregation and the one-sided paired t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and sample (n − 1) standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 values for a sample standard deviation, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(MeanStd {
        mean,
        std: (ss / (n - 1.0)).sqrt(),
    })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, 9 terms).
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
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction of the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
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
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * beta_inc(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for "a is lower than b".
    pub p: f64,
    /// `p < alpha`.
    pub reject: bool,
    pub alpha: f64,
}

/// Significance level of [`paired_ttest`].
pub const DEFAULT_ALPHA: f64 = 0.05;

/// One-sided paired t-test of H1: `mean(a − b) < 0` (method `a` has the
/// lower error). Pairs are matched by position, i.e. by seed.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let MeanStd { mean, std } = mean_std(&diffs)?;
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let n = diffs.len() as f64;
    let t = mean / (std / n.sqrt());
    let df = n - 1.0;
    let p = student_t_cdf(t, df);
    Ok(TTest {
        t,
        df,
        p,
        reject: p < DEFAULT_ALPHA,
        alpha: DEFAULT_ALPHA,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn two_reports_mean_and_std() {
        let m = mean_std(&[2.0, 4.0]).unwrap();
        assert_eq!(m.mean, 3.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[1.5, 1.5, 1.5]).unwrap().std, 0.0);
        assert!(mean_std(&[1.0]).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_matches_reference_distribution() {
        for df in [1.0, 2.0, 4.0, 9.0, 30.0] {
            let reference = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [-6.0, -2.5, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
                let got = student_t_cdf(t, df);
                assert!((got - reference.cdf(t)).abs() < 1e-12, "df={df} t={t}");
            }
        }
    }

    #[test]
    fn constant_differences_are_degenerate() {
        // Every difference is −2: no spread, so t is undefined.
        let a = [2.0, 3.0, 2.0, 3.0, 2.0];
        let b = [4.0, 5.0, 4.0, 5.0, 4.0];
        assert!(matches!(paired_ttest(&a, &b), Err(Error::ZeroVariance)));
        assert!(matches!(paired_ttest(&a, &a), Err(Error::ZeroVariance)));
    }

    #[test]
    fn swapping_samples_complements_p() {
        let a = [2.0, 3.1, 2.2, 2.9, 2.0];
        let b = [4.0, 5.0, 4.5, 5.2, 3.9];
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        assert!((ab.p + ba.p - 1.0).abs() < 1e-12);
        assert!(ab.reject && !ba.reject);
        assert_eq!(ab.t, -ba.t);
    }

    #[test]
    fn ttest_matches_reference_t_statistic() {
        let a = [2.0, 3.1, 2.2, 2.9, 2.0];
        let b = [4.0, 5.0, 4.5, 5.2, 3.9];
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let t = mean / (sd / n.sqrt());
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.t - t).abs() < 1e-12);
        let p = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
        assert!((r.p - p).abs() < 1e-12);
    }
}
