//! Small statistics toolkit: running means, z-scores, least-squares slopes
//! and the moment report shared by every tester.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RostError};

/// Default statistical pass threshold on |z|.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { mean: value, stderr: 0.0, n: 1 }
    }

    /// Mean and standard error of the mean, accumulated in slice order.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, stderr: f64::NAN, n: 0 };
        }
        if xs.iter().all(|x| *x == xs[0]) {
            return Estimate { mean: xs[0], stderr: 0.0, n };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr, n }
    }

    /// z-score of the estimate against `reference`; 0 when both the deviation
    /// and the stderr vanish.
    pub fn z_against(&self, reference: f64) -> f64 {
        z_score(self.mean - reference, self.stderr)
    }
}

pub fn z_score(deviation: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        deviation / stderr
    } else if deviation == 0.0 {
        0.0
    } else {
        deviation.signum() * f64::INFINITY
    }
}

pub fn pooled_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log cosh(x)` without overflow.
#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() {
        return Err(RostError::LengthMismatch { expected: n, got: y.len() });
    }
    if n < 2 {
        return Err(RostError::Degenerate("need at least two points".into()));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(RostError::Degenerate("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let r = b - intercept - slope * a;
                r * r
            })
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, slope_stderr })
}

/// One row of a [`MomentReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    /// Reference value the z-score is computed against.
    pub reference: f64,
    pub z: f64,
    pub n: usize,
    /// Optional extra columns: (baseline, mapped) for the cavity testers.
    pub baseline: Option<f64>,
    pub mapped: Option<f64>,
}

impl MomentEntry {
    pub fn new(name: impl Into<String>, est: Estimate, reference: f64) -> Self {
        MomentEntry {
            name: name.into(),
            estimate: est.mean,
            stderr: est.stderr,
            reference,
            z: est.z_against(reference),
            n: est.n,
            baseline: None,
            mapped: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub entries: Vec<MomentEntry>,
    pub seed: u64,
    pub samples: usize,
}

impl MomentReport {
    pub fn max_abs_z(&self) -> f64 {
        self.entries.iter().map(|e| e.z.abs()).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_abs_z() < threshold
    }

    pub fn get(&self, name: &str) -> Option<&MomentEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// CSV with columns `monomial,estimate,stderr,z,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("monomial,estimate,stderr,z,n\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{},{}\n", e.name, e.estimate, e.stderr, e.z, e.n));
        }
        out
    }

    /// CSV with columns `monomial,baseline,mapped,deficit,stderr,z`.
    pub fn to_tester_csv(&self) -> String {
        let mut out = String::from("monomial,baseline,mapped,deficit,stderr,z\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.name,
                e.baseline.unwrap_or(f64::NAN),
                e.mapped.unwrap_or(f64::NAN),
                e.estimate,
                e.stderr,
                e.z
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cosh_matches_naive_and_survives_large_arguments() {
        for &x in &[-3.0, -0.5, 0.0, 0.1, 2.0, 10.0] {
            let naive = f64::cosh(x).ln();
            assert!((log_cosh(x) - naive).abs() < 1e-14, "x={x}");
        }
        assert!((log_cosh(1000.0) - (1000.0 - std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
    }

    #[test]
    fn estimate_of_constant_samples_has_zero_stderr() {
        let e = Estimate::from_samples(&[3.0; 10]);
        assert_eq!(e.mean, 3.0);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.z_against(3.0), 0.0);
    }

    #[test]
    fn log_sum_exp_is_shift_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }
}
