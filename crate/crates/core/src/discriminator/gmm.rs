//! Two-component univariate Gaussian mixture fitted by EM, the closed-form
//! intersection threshold between its weighted components, and binarization.

use crate::error::{Error, Result};

/// Lower bound applied to component variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub pi: [f64; 2],
    pub mu: [f64; 2],
    pub var: [f64; 2],
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after initialization and after every EM iteration.
    pub log_likelihood_trace: Vec<f64>,
}

impl GmmParams {
    /// Weighted component density `π_k N(y | μ_k, σ_k²)`.
    pub fn weighted_density(&self, k: usize, y: f64) -> f64 {
        self.pi[k] * normal_pdf(y, self.mu[k], self.var[k])
    }
}

fn normal_pdf(y: f64, mu: f64, var: f64) -> f64 {
    (-(y - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn log_normal_pdf(y: f64, mu: f64, var: f64) -> f64 {
    -(y - mu).powi(2) / (2.0 * var) - 0.5 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// E-step: log-likelihood and responsibilities of component 0.
fn e_step(x: &[f64], p: &GmmParams, resp: &mut [f64]) -> f64 {
    let mut ll = 0.0;
    for (r, &xi) in resp.iter_mut().zip(x) {
        let l0 = p.pi[0].ln() + log_normal_pdf(xi, p.mu[0], p.var[0]);
        let l1 = p.pi[1].ln() + log_normal_pdf(xi, p.mu[1], p.var[1]);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        *r = (l0 - lse).exp();
        ll += lse;
    }
    ll
}

/// Fits a two-component mixture by EM. Initialization is deterministic:
/// means at the 25th and 75th percentiles, equal weights, both variances
/// equal to the sample variance. Stops once the log-likelihood gain drops
/// below `tol` or after `max_iter` iterations. Constant input yields
/// `converged = false` with both means at the common value.
pub fn fit_gmm_1d(scores: &[f64], max_iter: usize, tol: f64) -> Result<GmmParams> {
    if scores.len() < 4 {
        return Err(Error::Argument(format!(
            "mixture fit needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("non-finite score in mixture fit".into()));
    }
    let n = scores.len() as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = scores.iter().sum::<f64>() / n;
    let sample_var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok(GmmParams {
            pi: [0.5, 0.5],
            mu: [sorted[0], sorted[0]],
            var: [VARIANCE_FLOOR, VARIANCE_FLOOR],
            log_likelihood: f64::NAN,
            converged: false,
            iterations: 0,
            log_likelihood_trace: Vec::new(),
        });
    }
    let v0 = sample_var.max(VARIANCE_FLOOR);
    let mut p = GmmParams {
        pi: [0.5, 0.5],
        mu: [percentile(&sorted, 0.25), percentile(&sorted, 0.75)],
        var: [v0, v0],
        log_likelihood: 0.0,
        converged: false,
        iterations: 0,
        log_likelihood_trace: Vec::new(),
    };
    let mut resp = vec![0.0; scores.len()];
    let mut ll = e_step(scores, &p, &mut resp);
    p.log_likelihood_trace.push(ll);
    for it in 1..=max_iter {
        let w0: f64 = resp.iter().sum();
        let w1 = n - w0;
        if w0 <= 0.0 || w1 <= 0.0 {
            break;
        }
        let mu0 = resp.iter().zip(scores).map(|(r, x)| r * x).sum::<f64>() / w0;
        let mu1 = resp.iter().zip(scores).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / w1;
        let var0 = resp
            .iter()
            .zip(scores)
            .map(|(r, x)| r * (x - mu0).powi(2))
            .sum::<f64>()
            / w0;
        let var1 = resp
            .iter()
            .zip(scores)
            .map(|(r, x)| (1.0 - r) * (x - mu1).powi(2))
            .sum::<f64>()
            / w1;
        p.pi = [w0 / n, w1 / n];
        p.mu = [mu0, mu1];
        p.var = [var0.max(VARIANCE_FLOOR), var1.max(VARIANCE_FLOOR)];
        p.iterations = it;
        let next = e_step(scores, &p, &mut resp);
        p.log_likelihood_trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < tol {
            p.converged = true;
            break;
        }
    }
    p.log_likelihood = ll;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    QuadraticRoot,
    MidpointFallback,
}

impl ThresholdMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMethod::QuadraticRoot => "quadratic-root",
            ThresholdMethod::MidpointFallback => "midpoint-fallback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quadratic-root" => Some(ThresholdMethod::QuadraticRoot),
            "midpoint-fallback" => Some(ThresholdMethod::MidpointFallback),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub theta: f64,
    pub method: ThresholdMethod,
    /// `(a, b, c)` of `a y² + b y + c = 0` when a root was used.
    pub coefficients: Option<(f64, f64, f64)>,
}

/// Coefficients of `a y² + b y + c`, which equals
/// `ln(π_1 N(y|μ_1,σ_1²)) − ln(π_2 N(y|μ_2,σ_2²))`.
pub fn threshold_coefficients(p: &GmmParams) -> (f64, f64, f64) {
    let (m1, m2) = (p.mu[0], p.mu[1]);
    let (v1, v2) = (p.var[0], p.var[1]);
    let a = 1.0 / (2.0 * v2) - 1.0 / (2.0 * v1);
    let b = m1 / v1 - m2 / v2;
    let c = m2 * m2 / (2.0 * v2) - m1 * m1 / (2.0 * v1)
        + (p.pi[0] * v2.sqrt() / (p.pi[1] * v1.sqrt())).ln();
    (a, b, c)
}

/// Decision boundary where the two weighted component densities are equal,
/// restricted to the open interval between the means; falls back to the
/// midpoint of the means when no such root exists.
pub fn gmm_threshold(p: &GmmParams) -> ThresholdResult {
    let midpoint = ThresholdResult {
        theta: 0.5 * (p.mu[0] + p.mu[1]),
        method: ThresholdMethod::MidpointFallback,
        coefficients: None,
    };
    let (lo, hi) = (p.mu[0].min(p.mu[1]), p.mu[0].max(p.mu[1]));
    if !(lo < hi) {
        return midpoint;
    }
    let (a, b, c) = threshold_coefficients(p);
    let f = |y: f64| (a * y + b) * y + c;
    let roots: Vec<f64> = if a == 0.0 {
        if b == 0.0 {
            Vec::new()
        } else {
            vec![-c / b]
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            Vec::new()
        } else {
            // cancellation-free pair of roots
            let q = -0.5 * (b + b.signum() * disc.sqrt());
            if q == 0.0 {
                vec![-b / (2.0 * a)]
            } else {
                vec![q / a, c / q]
            }
        }
    };
    roots
        .into_iter()
        .filter(|r| r.is_finite() && *r > lo && *r < hi)
        .min_by(|x, y| f(*x).abs().total_cmp(&f(*y).abs()))
        .map_or(midpoint, |theta| ThresholdResult {
            theta,
            method: ThresholdMethod::QuadraticRoot,
            coefficients: Some((a, b, c)),
        })
}

/// Calls a spot positive when its score is at least `theta`.
pub fn binarize(scores: &[f64], theta: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= theta)).collect()
}
