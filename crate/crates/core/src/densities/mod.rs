//! Conditional densities, their negative log-likelihoods and pooling rules.
//!
//! Log-linear pooling of two members of the same exponential family stays in
//! the family: natural parameters combine affinely,
//! `φ* = λ φ_i + (1 − λ) φ_j`, and the normalizer is recomputed. Only the two
//! specializations the models need are implemented:
//!
//! * diagonal Gaussian, natural parameters `(μ/σ², −1/(2σ²))`, so precisions
//!   and precision-weighted means combine affinely;
//! * categorical, natural parameters are the logits themselves.
//!
//! Linear pooling produces an exact two-component [`MixtureDensity`].
//!
//! [`expr`] holds the same formulas as differentiable tape expressions.

pub mod expr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower bound applied to every Gaussian variance on construction.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// `½ log(2π)`.
pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `λ a + (1 − λ) b`, elementwise. Log-linear pooling of any exponential
/// family member is this map applied to the natural parameters.
pub fn affine_natural_combination(a: &[f64], b: &[f64], lambda: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| lambda * x + (1.0 - lambda) * y)
        .collect()
}

/// Common interface for evaluating densities at a point.
pub trait LogDensity {
    type Point: ?Sized;

    fn log_density(&self, y: &Self::Point) -> Result<f64>;

    fn nll(&self, y: &Self::Point) -> Result<f64> {
        self.log_density(y).map(|l| -l)
    }
}

/// Diagonal Gaussian `N(mean, diag(variance))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDensity {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl GaussianDensity {
    /// Variances must be positive; values below [`VARIANCE_FLOOR`] are raised to it.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                actual: variance.len(),
            });
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("variance must be positive and finite, got {v}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mean must be finite"));
        }
        let variance = variance.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
        Ok(Self { mean, variance })
    }

    pub fn univariate(mean: f64, variance: f64) -> Result<Self> {
        Self::new(vec![mean], vec![variance])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }
}

/// `−Σ_d [−½log(2π) − ½log σ²_d − (y_d − μ_d)² / (2σ²_d)]`.
pub fn gaussian_nll(p: &GaussianDensity, y: &[f64]) -> Result<f64> {
    if y.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            actual: y.len(),
        });
    }
    Ok(p
        .mean
        .iter()
        .zip(&p.variance)
        .zip(y)
        .map(|((m, v), y)| HALF_LOG_TWO_PI + 0.5 * v.ln() + (y - m).powi(2) / (2.0 * v))
        .sum())
}

impl LogDensity for GaussianDensity {
    type Point = [f64];

    fn log_density(&self, y: &[f64]) -> Result<f64> {
        gaussian_nll(self, y).map(|n| -n)
    }
}

/// Class distribution stored as unnormalized logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDensity {
    logits: Vec<f64>,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let top = values.iter().position(|v| *v == m).unwrap_or(0);
    let rest: f64 = values
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + rest.ln_1p()
}

impl CategoricalDensity {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("categorical density needs at least one class"));
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::invalid("logits must not be NaN or +inf"));
        }
        Ok(Self { logits })
    }

    /// Builds logits `log p_k`; zero probabilities become `−∞` logits.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) || probs.iter().all(|p| *p == 0.0) {
            return Err(Error::invalid("probabilities must be non-negative with positive mass"));
        }
        Self::from_logits(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn argmax(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
            .0
    }
}

/// `−(logits_k − logsumexp(logits))`.
pub fn categorical_nll(p: &CategoricalDensity, k: usize) -> Result<f64> {
    if k >= p.num_classes() {
        return Err(Error::ClassIndex {
            index: k,
            classes: p.num_classes(),
        });
    }
    if p.logits[k] == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    let shifted: Vec<f64> = p.logits.iter().map(|l| l - p.logits[k]).collect();
    Ok(log_sum_exp(&shifted))
}

impl LogDensity for CategoricalDensity {
    type Point = usize;

    fn log_density(&self, k: &usize) -> Result<f64> {
        categorical_nll(self, *k).map(|n| -n)
    }
}

/// Log-linear (geometric) pooling of two Gaussians, computed in precision
/// space: `1/σ*² = λ/σ_i² + (1−λ)/σ_j²`,
/// `μ* = σ*² (λ μ_i/σ_i² + (1−λ) μ_j/σ_j²)`.
pub fn gaussian_log_linear_fuse(
    p_i: &GaussianDensity,
    p_j: &GaussianDensity,
    lambda: f64,
) -> Result<GaussianDensity> {
    check_lambda(lambda)?;
    if p_i.dim() != p_j.dim() {
        return Err(Error::Dimension {
            expected: p_i.dim(),
            actual: p_j.dim(),
        });
    }
    if lambda == 1.0 {
        return Ok(p_i.clone());
    }
    if lambda == 0.0 {
        return Ok(p_j.clone());
    }
    let precision = affine_natural_combination(&p_i.precision(), &p_j.precision(), lambda);
    let weighted_i: Vec<f64> = p_i.mean.iter().zip(&p_i.variance).map(|(m, v)| m / v).collect();
    let weighted_j: Vec<f64> = p_j.mean.iter().zip(&p_j.variance).map(|(m, v)| m / v).collect();
    let weighted = affine_natural_combination(&weighted_i, &weighted_j, lambda);

    let mut mean = Vec::with_capacity(p_i.dim());
    let mut variance = Vec::with_capacity(p_i.dim());
    for d in 0..p_i.dim() {
        if p_i.variance[d] == p_j.variance[d] {
            // Equal variances: the fused variance is unchanged and the mean
            // is the plain interpolation.
            variance.push(p_i.variance[d]);
            mean.push(lambda * p_i.mean[d] + (1.0 - lambda) * p_j.mean[d]);
        } else {
            let v = 1.0 / precision[d];
            variance.push(v);
            mean.push(v * weighted[d]);
        }
    }
    GaussianDensity::new(mean, variance)
}

/// Log-linear pooling of two categoricals: logits combine affinely and the
/// normalization is left to the softmax.
pub fn categorical_log_linear_fuse(
    p_i: &CategoricalDensity,
    p_j: &CategoricalDensity,
    lambda: f64,
) -> Result<CategoricalDensity> {
    check_lambda(lambda)?;
    if p_i.num_classes() != p_j.num_classes() {
        return Err(Error::Dimension {
            expected: p_i.num_classes(),
            actual: p_j.num_classes(),
        });
    }
    if lambda == 1.0 {
        return Ok(p_i.clone());
    }
    if lambda == 0.0 {
        return Ok(p_j.clone());
    }
    CategoricalDensity::from_logits(affine_natural_combination(&p_i.logits, &p_j.logits, lambda))
}

/// Two-component mixture `λ p_first + (1 − λ) p_second`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity<D> {
    pub first: D,
    pub second: D,
    pub weight: f64,
}

/// Linear pooling; represented exactly as a mixture.
pub fn linear_fuse<D: Clone>(p_i: &D, p_j: &D, lambda: f64) -> Result<MixtureDensity<D>> {
    check_lambda(lambda)?;
    Ok(MixtureDensity {
        first: p_i.clone(),
        second: p_j.clone(),
        weight: lambda,
    })
}

/// Two-term log-sum-exp over `log λ + log p_i(y)` and `log(1−λ) + log p_j(y)`.
/// Zero-weight components are dropped so they never contribute NaN.
pub fn mixture_nll<D: LogDensity>(m: &MixtureDensity<D>, y: &D::Point) -> Result<f64> {
    let mut terms = Vec::with_capacity(2);
    if m.weight > 0.0 {
        terms.push(m.weight.ln() + m.first.log_density(y)?);
    }
    if m.weight < 1.0 {
        terms.push((1.0 - m.weight).ln() + m.second.log_density(y)?);
    }
    Ok(-log_sum_exp(&terms))
}

impl<D: LogDensity> LogDensity for MixtureDensity<D> {
    type Point = D::Point;

    fn log_density(&self, y: &D::Point) -> Result<f64> {
        mixture_nll(self, y).map(|n| -n)
    }
}

/// `μ + √σ² ⊙ ε`.
pub fn sample_gaussian_reparameterized(p: &GaussianDensity, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::Dimension {
            expected: p.dim(),
            actual: noise.len(),
        });
    }
    Ok(p.mean
        .iter()
        .zip(&p.variance)
        .zip(noise)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect())
}

pub fn sample_gaussian<R: Rng + ?Sized>(p: &GaussianDensity, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..p.dim()).map(|_| StandardNormal.sample(rng)).collect();
    sample_gaussian_reparameterized(p, &noise).expect("noise has the density's dimension")
}

/// Draws a class index from `softmax(logits)` by inversion.
pub fn sample_categorical<R: Rng + ?Sized>(p: &CategoricalDensity, rng: &mut R) -> usize {
    sample_from_probs(&p.probs(), rng)
}

pub(crate) fn sample_from_probs<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding can leave acc slightly below 1; fall back to the last class
    // with positive mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests;
