use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Algorithm {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    FullBatchGd,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Algorithm {
    pub fn adam() -> Self {
        Algorithm::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer bookkeeping owned by a single training run.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, learning_rate: f64, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, v)| Matrix::zeros(v.rows(), v.cols()))
                .collect::<Vec<_>>()
        };
        let (first_moment, second_moment) = match algorithm {
            Algorithm::Adam { .. } => (zeros(), zeros()),
            Algorithm::FullBatchGd => (Vec::new(), Vec::new()),
        };
        Self {
            algorithm,
            learning_rate,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update according to the configured algorithm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        match self.algorithm {
            Algorithm::Adam { .. } => adam_step(params, grads, self),
            Algorithm::FullBatchGd => gd_step(params, grads, self),
        }
    }
}

fn check_grads(params: &ParamSet, grads: &ParamSet) -> Result<()> {
    params.check_same_layout(grads)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
        });
    }
    Ok(())
}

/// Adam with bias correction. Leaves `params` untouched on error.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    let Algorithm::Adam { beta1, beta2, eps } = state.algorithm else {
        return Err(Error::invalid("adam_step called with a non-Adam optimizer state"));
    };
    check_grads(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let lr_t = state.learning_rate / (1.0 - beta1.powi(t));
    let v_corr = 1.0 - beta2.powi(t);
    for (((p, (_, _, g)), m), v) in params
        .values_mut()
        .zip(grads.iter())
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let p = p.as_mut_slice();
        let g = g.as_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            p[i] -= lr_t * m[i] / ((v[i] / v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent: `θ ← θ − η ∇`.
pub fn gd_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    if state.algorithm != Algorithm::FullBatchGd {
        return Err(Error::invalid("gd_step called with a non-GD optimizer state"));
    }
    check_grads(params, grads)?;
    state.step += 1;
    let lr = state.learning_rate;
    for (p, (_, _, g)) in params.values_mut().zip(grads.iter()) {
        for (pi, gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}
