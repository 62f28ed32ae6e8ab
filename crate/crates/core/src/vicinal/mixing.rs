use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::densities::log_sum_exp;
use crate::error::{Error, Result};
use crate::graphs::{sample_edges, SamplingGraph};
use crate::linalg::Matrix;
use crate::rng::RunStreams;

use super::{LabelMode, Pooling};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MixingDistribution {
    /// `λ ~ Beta(α, α)`.
    Beta { alpha: f64 },
    /// A point mass, for tests and endpoint checks.
    Fixed(f64),
}

pub fn sample_lambda<R: Rng + ?Sized>(dist: MixingDistribution, rng: &mut R) -> Result<f64> {
    match dist {
        MixingDistribution::Fixed(l) if (0.0..=1.0).contains(&l) => Ok(l),
        MixingDistribution::Fixed(l) => Err(Error::invalid(format!("λ = {l} outside [0, 1]"))),
        MixingDistribution::Beta { alpha } => {
            let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("Beta({alpha}, {alpha}): {e}")))?;
            Ok(beta.sample(rng).clamp(0.0, 1.0))
        }
    }
}

pub fn mix_inputs(x_i: &[f64], x_j: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if x_i.len() != x_j.len() {
        return Err(Error::Dimension {
            expected: x_i.len(),
            actual: x_j.len(),
        });
    }
    Ok(x_i.iter().zip(x_j).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// A draw from, or the full form of, the fused target distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum FusedTarget {
    Response(Vec<f64>),
    Class(usize),
    /// Class weights summing to one.
    Distribution(Vec<f64>),
}

/// Fused regression target from precomputed randomness: `noise` is a
/// standard-normal vector and `u` a uniform used to pick the component
/// under linear pooling.
pub(crate) fn regression_target(
    y_i: &[f64],
    y_j: &[f64],
    lambda: f64,
    beta: f64,
    pooling: Pooling,
    noise: &[f64],
    u: f64,
) -> Vec<f64> {
    let sd = beta.sqrt();
    let center: Vec<f64> = match pooling {
        Pooling::LogLinear => y_i.iter().zip(y_j).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect(),
        Pooling::Linear => if u < lambda { y_i } else { y_j }.to_vec(),
    };
    if beta == 0.0 {
        return center;
    }
    center.iter().zip(noise).map(|(c, e)| c + sd * e).collect()
}

/// Draw from the fusion of `N(y_i, βI)` and `N(y_j, βI)`. Under log-linear
/// pooling this is `N(λy_i + (1−λ)y_j, βI)`; `β = 0` is deterministic.
pub fn fuse_perturbed_regression<R: Rng + ?Sized>(
    y_i: &[f64],
    y_j: &[f64],
    lambda: f64,
    beta: f64,
    pooling: Pooling,
    rng: &mut R,
) -> Result<FusedTarget> {
    if y_i.len() != y_j.len() {
        return Err(Error::Dimension {
            expected: y_i.len(),
            actual: y_j.len(),
        });
    }
    if beta < 0.0 {
        return Err(Error::invalid("β must be non-negative"));
    }
    let noise: Vec<f64> = (0..y_i.len()).map(|_| rng.sample(StandardNormal)).collect();
    let u: f64 = rng.random();
    Ok(FusedTarget::Response(regression_target(y_i, y_j, lambda, beta, pooling, &noise, u)))
}

/// `P(ỹ = k | y) ∝ 1[y = k] + β`.
pub fn perturbed_one_hot(y: usize, beta: f64, classes: usize) -> Vec<f64> {
    let z = 1.0 + classes as f64 * beta;
    (0..classes).map(|k| (if k == y { 1.0 } else { 0.0 } + beta) / z).collect()
}

/// The fused distribution of two perturbed labels. Terms with a zero
/// coefficient are dropped, so the endpoints work even with `β = 0`.
pub fn fused_label_distribution(
    y_i: usize,
    y_j: usize,
    lambda: f64,
    beta: f64,
    classes: usize,
    pooling: Pooling,
) -> Result<Vec<f64>> {
    if y_i >= classes || y_j >= classes {
        return Err(Error::ClassIndex {
            index: y_i.max(y_j),
            classes,
        });
    }
    let (s_i, s_j) = (perturbed_one_hot(y_i, beta, classes), perturbed_one_hot(y_j, beta, classes));
    let terms: Vec<(f64, &[f64])> = [(lambda, s_i.as_slice()), (1.0 - lambda, s_j.as_slice())]
        .into_iter()
        .filter(|(w, _)| *w > 0.0)
        .collect();
    match pooling {
        Pooling::Linear => Ok((0..classes).map(|k| terms.iter().map(|(w, s)| w * s[k]).sum()).collect()),
        Pooling::LogLinear => {
            let logits: Vec<f64> = (0..classes)
                .map(|k| terms.iter().map(|(w, s)| w * s[k].ln()).sum())
                .collect();
            let norm = log_sum_exp(&logits);
            if norm == f64::NEG_INFINITY {
                return Err(Error::EmptyFusedSupport { a: y_i, b: y_j });
            }
            Ok(logits.iter().map(|l| (l - norm).exp()).collect())
        }
    }
}

pub(crate) fn class_from_uniform(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
pub fn fuse_perturbed_classification<R: Rng + ?Sized>(
    y_i: usize,
    y_j: usize,
    lambda: f64,
    beta: f64,
    classes: usize,
    pooling: Pooling,
    mode: LabelMode,
    rng: &mut R,
) -> Result<FusedTarget> {
    let probs = fused_label_distribution(y_i, y_j, lambda, beta, classes, pooling)?;
    Ok(match mode {
        LabelMode::Exact => FusedTarget::Distribution(probs),
        LabelMode::Sampled => FusedTarget::Class(class_from_uniform(&probs, rng.random())),
    })
}

/// Sizes of the random inputs one loss evaluation consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawShape {
    pub batch: usize,
    pub mc_samples: usize,
    pub target_dim: usize,
    pub embed_dim: usize,
}

/// All randomness of one loss evaluation, drawn up front so that the loss
/// itself is a deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub pairs: Vec<(usize, usize)>,
    /// `lambda[k][b]` for Monte Carlo draw `k` of pair `b`.
    pub lambda: Vec<Vec<f64>>,
    /// Standard normals for regression target perturbation, `batch × d_y` per draw.
    pub target_noise: Vec<Matrix>,
    /// Uniforms for sampled labels and linear-pool component choice.
    pub uniform: Vec<Vec<f64>>,
    /// Standard normals for embedding reparameterization, `batch × d_z` per draw.
    pub embed_noise: Vec<Matrix>,
}

fn normals<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

impl Draws {
    pub fn sample(graph: &SamplingGraph, dist: MixingDistribution, shape: DrawShape, streams: &mut RunStreams) -> Result<Self> {
        let pairs = sample_edges(graph, shape.batch, &mut streams.edges);
        Self::for_pairs(pairs, dist, shape, streams)
    }

    /// Draws for a given list of pairs.
    pub fn for_pairs(pairs: Vec<(usize, usize)>, dist: MixingDistribution, shape: DrawShape, streams: &mut RunStreams) -> Result<Self> {
        let b = pairs.len();
        let mut lambda = Vec::with_capacity(shape.mc_samples);
        let mut target_noise = Vec::with_capacity(shape.mc_samples);
        let mut uniform = Vec::with_capacity(shape.mc_samples);
        let mut embed_noise = Vec::with_capacity(shape.mc_samples);
        for _ in 0..shape.mc_samples {
            lambda.push((0..b).map(|_| sample_lambda(dist, &mut streams.lambda)).collect::<Result<Vec<_>>>()?);
            target_noise.push(normals(&mut streams.perturb, b, shape.target_dim));
            uniform.push((0..b).map(|_| streams.perturb.random::<f64>()).collect());
            embed_noise.push(normals(&mut streams.noise, b, shape.embed_dim));
        }
        Ok(Self {
            pairs,
            lambda,
            target_noise,
            uniform,
            embed_noise,
        })
    }

    pub fn mc_samples(&self) -> usize {
        self.lambda.len()
    }

    pub fn batch(&self) -> usize {
        self.pairs.len()
    }

    pub fn first(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn second(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// The same draws with every λ replaced by `value`.
    pub fn with_lambda(mut self, value: f64) -> Self {
        for row in &mut self.lambda {
            row.iter_mut().for_each(|l| *l = value);
        }
        self
    }

    /// The same draws with all Gaussian noise set to zero.
    pub fn without_noise(mut self) -> Self {
        for m in self.target_noise.iter_mut().chain(self.embed_noise.iter_mut()) {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        self
    }
}
