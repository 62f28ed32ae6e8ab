//! Vicinal risk: λ sampling, perturbed-target fusion, and the loss builders
//! for ERM, mixup, manifold mixup, ProbMix and M-ProbMix (each optionally
//! local, i.e. driven by a nearest-neighbour graph).

mod losses;
mod mixing;

pub use losses::{
    erm_loss, loss, manifold_mixup_loss, mixup_loss, m_probmix_loss, probmix_loss, Batch,
};
pub use mixing::{
    fuse_perturbed_classification, fuse_perturbed_regression, fused_label_distribution, mix_inputs,
    perturbed_one_hot, sample_lambda, Draws, DrawShape, FusedTarget, MixingDistribution,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Mix,
    #[serde(rename = "loc-mix")]
    LocMix,
    MMix,
    #[serde(rename = "loc-m-mix")]
    LocMMix,
    #[serde(rename = "probmix")]
    ProbMix,
    #[serde(rename = "loc-probmix")]
    LocProbMix,
    #[serde(rename = "m-probmix")]
    MProbMix,
    #[serde(rename = "loc-m-probmix")]
    LocMProbMix,
}

/// The loss construction a method uses, ignoring locality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Erm,
    Mix,
    ManifoldMix,
    ProbMix,
    ManifoldProbMix,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Erm,
        Method::Mix,
        Method::LocMix,
        Method::MMix,
        Method::LocMMix,
        Method::ProbMix,
        Method::LocProbMix,
        Method::MProbMix,
        Method::LocMProbMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Mix => "mix",
            Method::LocMix => "loc-mix",
            Method::MMix => "m-mix",
            Method::LocMMix => "loc-m-mix",
            Method::ProbMix => "probmix",
            Method::LocProbMix => "loc-probmix",
            Method::MProbMix => "m-probmix",
            Method::LocMProbMix => "loc-m-probmix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    pub fn family(self) -> Family {
        match self {
            Method::Erm => Family::Erm,
            Method::Mix | Method::LocMix => Family::Mix,
            Method::MMix | Method::LocMMix => Family::ManifoldMix,
            Method::ProbMix | Method::LocProbMix => Family::ProbMix,
            Method::MProbMix | Method::LocMProbMix => Family::ManifoldProbMix,
        }
    }

    /// Whether pairs come from the nearest-neighbour graph.
    pub fn is_local(self) -> bool {
        matches!(
            self,
            Method::LocMix | Method::LocMMix | Method::LocProbMix | Method::LocMProbMix
        )
    }

    pub fn needs_embedding(self) -> bool {
        self.family() == Family::ManifoldProbMix
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Linear,
    LogLinear,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Linear => "linear",
            Pooling::LogLinear => "log-linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    ExpectedLog,
    LogExpected,
}

/// How classification targets enter the loss: the full fused label
/// distribution, or one class sampled from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Exact,
    Sampled,
}

fn default_method() -> Method {
    Method::Erm
}
fn default_pooling() -> Pooling {
    Pooling::LogLinear
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.01
}
fn default_k() -> usize {
    5
}
fn default_mc() -> usize {
    1
}
fn default_mix_layer() -> usize {
    1
}
fn default_criterion() -> Criterion {
    Criterion::ExpectedLog
}
fn default_label_mode() -> LabelMode {
    LabelMode::Exact
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Fusion of predictive densities (ProbMix) or embeddings (M-ProbMix).
    #[serde(default = "default_pooling")]
    pub pooling: Pooling,
    /// Fusion of perturbed targets; follows `pooling` when unset.
    #[serde(default)]
    pub target_pooling: Option<Pooling>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_k")]
    pub k_neighbors: usize,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default = "default_mix_layer")]
    pub mix_layer: usize,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default = "default_label_mode")]
    pub label_mode: LabelMode,
    /// Use this λ for every pair instead of drawing from Beta(α, α).
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
    /// M-ProbMix: decode the fused embedding mean instead of a sample.
    #[serde(default)]
    pub propagate_mean: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            method: default_method(),
            pooling: default_pooling(),
            target_pooling: None,
            alpha: default_alpha(),
            beta: default_beta(),
            k_neighbors: default_k(),
            mc_samples: default_mc(),
            mix_layer: default_mix_layer(),
            criterion: default_criterion(),
            label_mode: default_label_mode(),
            fixed_lambda: None,
            propagate_mean: false,
        }
    }
}

impl RegularizerConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn target_pooling(&self) -> Pooling {
        self.target_pooling.unwrap_or(self.pooling)
    }

    /// Monte Carlo draws per edge; only the ProbMix families use more than one.
    pub fn effective_mc(&self) -> usize {
        match self.method.family() {
            Family::ProbMix | Family::ManifoldProbMix => self.mc_samples,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.method.is_local() && self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("fixed_lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn mixing(&self) -> MixingDistribution {
        match self.fixed_lambda {
            Some(l) => MixingDistribution::Fixed(l),
            None => MixingDistribution::Beta { alpha: self.alpha },
        }
    }
}
