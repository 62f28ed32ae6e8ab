//! Batched densities as tape expressions.
//!
//! A batch of `n` diagonal Gaussians over `ℝ^d` is a pair of `n × d` nodes; a
//! batch of categoricals is an `n × C` logits node. Mixing weights `λ` are
//! per-row constants supplied as plain slices.

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::HALF_LOG_TWO_PI;

#[derive(Clone, Copy, Debug)]
pub struct GaussianExpr {
    pub mean: Var,
    pub var: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CategoricalExpr {
    pub logits: Var,
}

/// Per-row mixing coefficients with their complements as tape constants.
pub struct MixWeights {
    pub lambda: Var,
    pub complement: Var,
}

impl MixWeights {
    pub fn new(tape: &Tape, lambda: &[f64]) -> Self {
        Self {
            lambda: tape.constant(Matrix::column(lambda)),
            complement: tape.constant(Matrix::column(
                &lambda.iter().map(|l| 1.0 - l).collect::<Vec<_>>(),
            )),
        }
    }

    /// `log λ` and `log(1 − λ)`; either may be `−∞`.
    pub fn logs(tape: &Tape, lambda: &[f64]) -> (Var, Var) {
        let log_l: Vec<f64> = lambda.iter().map(|l| l.ln()).collect();
        let log_c: Vec<f64> = lambda.iter().map(|l| (1.0 - l).ln()).collect();
        (
            tape.constant(Matrix::column(&log_l)),
            tape.constant(Matrix::column(&log_c)),
        )
    }
}

fn rows_of(tape: &Tape, v: Var) -> usize {
    tape.value(v).rows()
}

fn check_rows(tape: &Tape, v: Var, lambda: &[f64]) -> Result<()> {
    let rows = rows_of(tape, v);
    if rows != lambda.len() {
        return Err(Error::Dimension {
            expected: rows,
            actual: lambda.len(),
        });
    }
    Ok(())
}

/// Row-wise `λ a + (1 − λ) b`.
pub fn interpolate(tape: &Tape, a: Var, b: Var, lambda: &[f64]) -> Result<Var> {
    check_rows(tape, a, lambda)?;
    let w = MixWeights::new(tape, lambda);
    let left = tape.mul(a, w.lambda)?;
    let right = tape.mul(b, w.complement)?;
    tape.add(left, right)
}

/// Per-row Gaussian negative log-likelihood, `n × 1`.
pub fn gaussian_nll(tape: &Tape, p: GaussianExpr, y: Var) -> Result<Var> {
    let d = tape.value(p.mean).cols();
    let resid = tape.sub(y, p.mean)?;
    let sq = tape.square(resid);
    let quad = tape.div(sq, p.var)?;
    let half_quad = tape.scale(quad, 0.5);
    let half_log_var = tape.scale(tape.log(p.var), 0.5);
    let terms = tape.add(half_quad, half_log_var)?;
    Ok(tape.offset(tape.row_sum(terms), d as f64 * HALF_LOG_TWO_PI))
}

/// Per-row categorical negative log-likelihood against class weights
/// (one-hot rows for hard labels, probability rows for soft ones), `n × 1`.
pub fn categorical_nll(tape: &Tape, log_probs: Var, targets: Var) -> Result<Var> {
    let weighted = tape.mul(log_probs, targets)?;
    Ok(tape.neg(tape.row_sum(weighted)))
}

pub fn log_softmax(tape: &Tape, p: CategoricalExpr) -> Var {
    tape.log_softmax_rows(p.logits)
}

/// Log-linear pooling of two Gaussian batches.
///
/// Written as a convex combination with per-element weight
/// `w = λσ_j² / (λσ_j² + (1−λ)σ_i²)`: then `μ* = wμ_i + (1−w)μ_j` and
/// `σ*² = wσ_i² + (1−w)σ_j²`, which equals the precision-space form and is
/// exact at `λ ∈ {0, 1}`.
pub fn gaussian_log_linear_fuse(
    tape: &Tape,
    a: GaussianExpr,
    b: GaussianExpr,
    lambda: &[f64],
) -> Result<GaussianExpr> {
    check_rows(tape, a.mean, lambda)?;
    let w = MixWeights::new(tape, lambda);
    let num = tape.mul(b.var, w.lambda)?;
    let other = tape.mul(a.var, w.complement)?;
    let den = tape.add(num, other)?;
    let weight = tape.div(num, den)?;
    let one_minus = tape.offset(tape.neg(weight), 1.0);
    let combine = |x: Var, y: Var| -> Result<Var> {
        let l = tape.mul(x, weight)?;
        let r = tape.mul(y, one_minus)?;
        tape.add(l, r)
    };
    Ok(GaussianExpr {
        mean: combine(a.mean, b.mean)?,
        var: combine(a.var, b.var)?,
    })
}

/// Log-density of the linear pool `λ p_i + (1−λ) p_j` at `y`, `n × 1`.
pub fn gaussian_linear_log_density(
    tape: &Tape,
    a: GaussianExpr,
    b: GaussianExpr,
    lambda: &[f64],
    y: Var,
) -> Result<Var> {
    check_rows(tape, a.mean, lambda)?;
    let (log_l, log_c) = MixWeights::logs(tape, lambda);
    let la = tape.neg(gaussian_nll(tape, a, y)?);
    let lb = tape.neg(gaussian_nll(tape, b, y)?);
    let left = tape.add(la, log_l)?;
    let right = tape.add(lb, log_c)?;
    tape.log_add_exp(left, right)
}

/// Log-linear pooling of categorical batches: logits combine affinely.
pub fn categorical_log_linear_fuse(
    tape: &Tape,
    a: CategoricalExpr,
    b: CategoricalExpr,
    lambda: &[f64],
) -> Result<CategoricalExpr> {
    Ok(CategoricalExpr {
        logits: interpolate(tape, a.logits, b.logits, lambda)?,
    })
}

/// Class log-probabilities of the linear pool, `n × C`.
pub fn categorical_linear_log_probs(
    tape: &Tape,
    a: CategoricalExpr,
    b: CategoricalExpr,
    lambda: &[f64],
) -> Result<Var> {
    check_rows(tape, a.logits, lambda)?;
    let (log_l, log_c) = MixWeights::logs(tape, lambda);
    let left = tape.add(log_softmax(tape, a), log_l)?;
    let right = tape.add(log_softmax(tape, b), log_c)?;
    tape.log_add_exp(left, right)
}

/// `μ + √σ² ⊙ ε` for a fixed standard-normal draw `ε`.
pub fn reparameterize(tape: &Tape, p: GaussianExpr, noise: Matrix) -> Result<Var> {
    let std = tape.exp(tape.scale(tape.log(p.var), 0.5));
    let eps = tape.constant(noise);
    let scaled = tape.mul(std, eps)?;
    tape.add(p.mean, scaled)
}
