//! Monte Carlo summaries, Kolmogorov-Smirnov distances and log-log fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Result};

/// Sample mean and variance with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
}

impl MomentSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n < 2 {
            let mean = xs.first().copied().unwrap_or(f64::NAN);
            return Self {
                n,
                mean,
                mean_se: f64::NAN,
                var: f64::NAN,
                var_se: f64::NAN,
            };
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let var = m2 * nf / (nf - 1.0);
        Self {
            n,
            mean,
            mean_se: (var / nf).sqrt(),
            var,
            // delta-method standard error of the sample variance
            var_se: ((m4 - m2 * m2).max(0.0) / nf).sqrt(),
        }
    }

    /// `|mean_a - mean_b| / sqrt(se_a^2 + se_b^2)`.
    pub fn mean_z(&self, other: &MomentSummary) -> f64 {
        let se = self.mean_se.hypot(other.mean_se);
        if se == 0.0 {
            if self.mean == other.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other.mean).abs() / se
        }
    }

    pub fn var_z(&self, other: &MomentSummary) -> f64 {
        let se = self.var_se.hypot(other.var_se);
        if se == 0.0 {
            if self.var == other.var {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.var - other.var).abs() / se
        }
    }
}

/// Sample covariance.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    a[..n]
        .iter()
        .zip(&b[..n])
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (n - 1) as f64
}

/// Kolmogorov-Smirnov distance of samples in `[0, 1)` from the uniform law.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let lo = x - i as f64 / n;
            let hi = (i + 1) as f64 / n - x;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov distance `sup |F_a - F_b|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic one-sample KS critical value at level `alpha`.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// Least-squares slope of `log(error)` against `log(epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Combined residual and Monte Carlo standard error of the slope.
    pub slope_se: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
}

/// Fits `log e = intercept + slope log eps`. `stderrs` (Monte Carlo standard
/// errors of each `e`) are propagated into the slope uncertainty.
pub fn fit_log_slope(epsilons: &[f64], errors: &[f64], stderrs: &[f64]) -> Result<SlopeFit> {
    let k = epsilons.len();
    if k < 2 || errors.len() != k || stderrs.len() != k {
        return Err(invalid("epsilons", "need at least two matching points"));
    }
    if epsilons.iter().chain(errors).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(invalid("errors", "log-log fit needs positive finite values"));
    }
    let xs: Vec<f64> = epsilons.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let kf = k as f64;
    let mx = xs.iter().sum::<f64>() / kf;
    let my = ys.iter().sum::<f64>() / kf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("epsilons", "need distinct epsilons"));
    }
    let weights: Vec<f64> = xs.iter().map(|x| (x - mx) / sxx).collect();
    let slope: f64 = weights.iter().zip(&ys).map(|(w, y)| w * y).sum();
    let intercept = my - slope * mx;

    // Monte Carlo noise: var(log e_i) ~ (se_i / e_i)^2.
    let mc_var: f64 = weights
        .iter()
        .zip(stderrs.iter().zip(errors))
        .map(|(w, (s, e))| w * w * (s / e).powi(2))
        .sum();
    let (resid_var, quantile) = if k > 2 {
        let rss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let df = kf - 2.0;
        let t = StudentsT::new(0.0, 1.0, df)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.959_963_984_540_054);
        (rss / df / sxx, t)
    } else {
        (0.0, 1.959_963_984_540_054)
    };
    let slope_se = (resid_var + mc_var).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        slope_se,
        ci95: quantile * slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_recovered() {
        let eps = [0.1, 0.05, 0.025, 0.0125];
        let errs: Vec<f64> = eps.iter().map(|e: &f64| 3.0 * e.powf(0.25)).collect();
        let fit = fit_log_slope(&eps, &errs, &[0.0; 4]).unwrap();
        assert!((fit.slope - 0.25).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.ci95 < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_log_slope(&[0.1], &[1.0], &[0.0]).is_err());
        assert!(fit_log_slope(&[0.1, 0.1], &[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(fit_log_slope(&[0.1, 0.05], &[0.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn noisy_fit_has_positive_interval() {
        let eps = [0.1, 0.05, 0.025, 0.0125];
        let errs = [0.5, 0.44, 0.33, 0.29];
        let fit = fit_log_slope(&eps, &errs, &[0.01; 4]).unwrap();
        assert!(fit.ci95 > 0.0 && fit.slope > 0.0);
    }

    #[test]
    fn ks_distances() {
        let grid: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&grid) - 0.005).abs() < 1e-12);
        assert_eq!(ks_two_sample(&grid, &grid), 0.0);
        let shifted: Vec<f64> = grid.iter().map(|x| x + 0.205).collect();
        assert!((ks_two_sample(&grid, &shifted) - 0.21).abs() < 1e-12);
        assert!((ks_critical(5000, 0.01) - 1.627_624 / 5000f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let m = MomentSummary::from_samples(&xs);
        assert_eq!(m.mean, 2.5);
        assert!((m.var - 5.0 / 3.0).abs() < 1e-15);
        assert!((covariance(&xs, &xs) - m.var).abs() < 1e-15);
        assert_eq!(m.mean_z(&m), 0.0);
    }
}
