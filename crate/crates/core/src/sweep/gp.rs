//! Gaussian-process surrogate on the normalized search cube.
//!
//! Objectives are standardized (centered, scaled by sample std with a
//! 1e-6 variance floor); the squared-exponential kernel then acts on the
//! standardized scale, so its variance is the standardized sample
//! variance (1 unless degenerate) and far-away queries revert to the
//! observed mean with the observed standard deviation.

use super::SweepError;

pub const LENGTH_SCALE: f64 = 0.3;
pub const JITTER: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

fn kernel(a: &[f64; 3], b: &[f64; 3], sigma2: f64) -> f64 {
    sigma2 * (-sq_dist(a, b) / (2.0 * LENGTH_SCALE * LENGTH_SCALE)).exp()
}

/// In-place Cholesky factorization of a row-major symmetric matrix,
/// keeping the lower triangle. Fails with a condition estimate when a
/// pivot is not strictly positive.
pub(crate) fn cholesky(a: &mut [f64], n: usize) -> Result<(), SweepError> {
    let max_diag = (0..n)
        .map(|i| a[i * n + i].abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return Err(SweepError::SingularKernel {
                        condition: max_diag / sum.abs().max(f64::MIN_POSITIVE),
                    });
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Solves L x = b for lower-triangular L.
fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l[i * n + j] * x[j];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Solves L^T x = b for lower-triangular L.
fn backward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = b[i];
        for j in i + 1..n {
            sum -= l[j * n + i] * x[j];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Fitted GP posterior over the normalized cube.
#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<[f64; 3]>,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    sigma2: f64,
}

impl GpModel {
    pub fn fit(points: Vec<[f64; 3]>, objectives: &[f64]) -> Result<Self, SweepError> {
        assert_eq!(points.len(), objectives.len(), "points/objectives aligned");
        assert!(!points.is_empty(), "GP needs at least one observation");
        let n = points.len();
        let y_mean = objectives.iter().sum::<f64>() / n as f64;
        let y_var = sample_variance(objectives).max(VARIANCE_FLOOR);
        let y_std = y_var.sqrt();
        let standardized: Vec<f64> = objectives.iter().map(|y| (y - y_mean) / y_std).collect();
        let sigma2 = sample_variance(&standardized).max(VARIANCE_FLOOR);

        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = kernel(&points[i], &points[j], sigma2);
            }
            k[i * n + i] += JITTER;
        }
        cholesky(&mut k, n)?;
        let z = forward_solve(&k, n, &standardized);
        let alpha = backward_solve(&k, n, &z);
        Ok(Self {
            points,
            chol: k,
            alpha,
            y_mean,
            y_std,
            sigma2,
        })
    }

    /// Posterior (mean, stddev) at `query`, on the raw objective scale.
    pub fn posterior(&self, query: &[f64; 3]) -> (f64, f64) {
        let n = self.points.len();
        let k_star: Vec<f64> = self
            .points
            .iter()
            .map(|p| kernel(p, query, self.sigma2))
            .collect();
        let mean_std: f64 = k_star.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = forward_solve(&self.chol, n, &k_star);
        let var_std = (self.sigma2 - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (
            self.y_mean + self.y_std * mean_std,
            self.y_std * var_std.sqrt(),
        )
    }
}

/// Convenience wrapper: fit on observations and query one point.
pub fn gp_posterior(
    observed: &[([f64; 3], f64)],
    query: &[f64; 3],
) -> Result<(f64, f64), SweepError> {
    let points: Vec<[f64; 3]> = observed.iter().map(|(p, _)| *p).collect();
    let objectives: Vec<f64> = observed.iter().map(|(_, y)| *y).collect();
    Ok(GpModel::fit(points, &objectives)?.posterior(query))
}

/// Standard normal CDF via the complementary error function.
pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// PI = Phi((mean - best - xi)/stddev); a degenerate stddev collapses to
/// the indicator of improvement.
pub fn probability_of_improvement(mean: f64, stddev: f64, best_so_far: f64, xi: f64) -> f64 {
    if stddev == 0.0 {
        return if mean > best_so_far + xi { 1.0 } else { 0.0 };
    }
    standard_normal_cdf((mean - best_so_far - xi) / stddev)
}
