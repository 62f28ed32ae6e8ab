use crate::data::{Dataset, Targets};
use crate::densities::expr::{self, GaussianExpr};
use crate::diffcore::{BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{DensityModel, OutputExpr};

use super::mixing::{class_from_uniform, fused_label_distribution, regression_target};
use super::{Criterion, Draws, Family, LabelMode, Pooling, RegularizerConfig};

/// Inputs and targets a loss is evaluated on.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub targets: &'a Targets,
}

impl<'a> Batch<'a> {
    pub fn new(x: &'a Matrix, targets: &'a Targets) -> Result<Self> {
        if x.rows() != targets.len() {
            return Err(Error::Dimension {
                expected: x.rows(),
                actual: targets.len(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(Self { x, targets })
    }

    pub fn of(ds: &'a Dataset) -> Result<Self> {
        Self::new(&ds.features, &ds.targets)
    }
}

/// Per-row NLL of an output distribution against regression targets or
/// class-weight rows.
fn nll_rows(tape: &Tape, out: OutputExpr, target: Matrix) -> Result<Var> {
    let target = tape.constant(target);
    match out {
        OutputExpr::Gaussian(g) => expr::gaussian_nll(tape, g, target),
        OutputExpr::Categorical(c) => expr::categorical_nll(tape, expr::log_softmax(tape, c), target),
    }
}

/// Mean NLL over the batch.
pub fn erm_loss<M: DensityModel + ?Sized>(tape: &Tape, p: &BoundParams, model: &M, batch: &Batch) -> Result<Var> {
    let out = model.forward(tape, p, tape.constant(batch.x.clone()))?;
    let rows = nll_rows(tape, out, batch.targets.as_matrix())?;
    Ok(tape.mean(rows))
}

/// Targets for Monte Carlo draw `k`. Mixup families interpolate labels
/// (one-hot rows for classes); ProbMix families fuse perturbed labels.
fn fused_targets(batch: &Batch, draws: &Draws, k: usize, cfg: &RegularizerConfig) -> Result<Matrix> {
    let probabilistic = matches!(cfg.method.family(), Family::ProbMix | Family::ManifoldProbMix);
    let (beta, pooling) = if probabilistic {
        (cfg.beta, cfg.target_pooling())
    } else {
        (0.0, Pooling::Linear)
    };
    let lambda = &draws.lambda[k];
    let uniform = &draws.uniform[k];
    match batch.targets {
        Targets::Regression(y) => {
            let pooling = if probabilistic { pooling } else { Pooling::LogLinear };
            let mut out = Matrix::zeros(draws.batch(), y.cols());
            for (b, &(i, j)) in draws.pairs.iter().enumerate() {
                let noise = if draws.target_noise[k].cols() == y.cols() {
                    draws.target_noise[k].row(b).to_vec()
                } else {
                    vec![0.0; y.cols()]
                };
                let t = regression_target(y.row(i), y.row(j), lambda[b], beta, pooling, &noise, uniform[b]);
                out.row_mut(b).copy_from_slice(&t);
            }
            Ok(out)
        }
        Targets::Classification { labels, classes } => {
            let mut out = Matrix::zeros(draws.batch(), *classes);
            for (b, &(i, j)) in draws.pairs.iter().enumerate() {
                let probs = fused_label_distribution(labels[i], labels[j], lambda[b], beta, *classes, pooling)?;
                match cfg.label_mode {
                    LabelMode::Exact => out.row_mut(b).copy_from_slice(&probs),
                    LabelMode::Sampled => out.set(b, class_from_uniform(&probs, uniform[b]), 1.0),
                }
            }
            Ok(out)
        }
    }
}

fn endpoints(tape: &Tape, batch: &Batch, draws: &Draws) -> (Var, Var) {
    (
        tape.constant(batch.x.select_rows(&draws.first())),
        tape.constant(batch.x.select_rows(&draws.second())),
    )
}

fn check_draws(draws: &Draws) -> Result<()> {
    if draws.pairs.is_empty() || draws.lambda.is_empty() {
        return Err(Error::invalid("no pairs drawn"));
    }
    Ok(())
}

/// Combines per-pair NLL columns from `K` draws into a scalar.
fn aggregate(tape: &Tape, per_draw: &[Var], criterion: Criterion) -> Result<Var> {
    let all = tape.concat_cols(per_draw)?;
    match criterion {
        Criterion::ExpectedLog => Ok(tape.mean(all)),
        Criterion::LogExpected => {
            let lse = tape.log_sum_exp_rows(tape.neg(all));
            let per_pair = tape.neg(tape.offset(lse, -(per_draw.len() as f64).ln()));
            Ok(tape.mean(per_pair))
        }
    }
}

/// Vanilla mixup: the density at `λx_i + (1−λ)x_j` scored against the mixed
/// target. Locality only changes which pairs are drawn.
pub fn mixup_loss<M: DensityModel + ?Sized>(
    tape: &Tape,
    p: &BoundParams,
    model: &M,
    batch: &Batch,
    draws: &Draws,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    manifold_mixup_loss(tape, p, model, batch, draws, cfg, 0)
}

/// Manifold mixup: interpolate the features after `mix_layer` hidden layers.
pub fn manifold_mixup_loss<M: DensityModel + ?Sized>(
    tape: &Tape,
    p: &BoundParams,
    model: &M,
    batch: &Batch,
    draws: &Draws,
    cfg: &RegularizerConfig,
    mix_layer: usize,
) -> Result<Var> {
    check_draws(draws)?;
    let (xi, xj) = endpoints(tape, batch, draws);
    let zi = model.features(tape, p, xi, mix_layer)?;
    let zj = model.features(tape, p, xj, mix_layer)?;
    let z = expr::interpolate(tape, zi, zj, &draws.lambda[0])?;
    let out = model.decode(tape, p, z, mix_layer)?;
    let rows = nll_rows(tape, out, fused_targets(batch, draws, 0, cfg)?)?;
    Ok(tape.mean(rows))
}

/// Per-pair NLL of the pooled predictive density.
fn pooled_nll(tape: &Tape, a: OutputExpr, b: OutputExpr, lambda: &[f64], pooling: Pooling, target: Matrix) -> Result<Var> {
    match (a, b, pooling) {
        (OutputExpr::Gaussian(ga), OutputExpr::Gaussian(gb), Pooling::LogLinear) => {
            let f = expr::gaussian_log_linear_fuse(tape, ga, gb, lambda)?;
            expr::gaussian_nll(tape, f, tape.constant(target))
        }
        (OutputExpr::Gaussian(ga), OutputExpr::Gaussian(gb), Pooling::Linear) => {
            let ld = expr::gaussian_linear_log_density(tape, ga, gb, lambda, tape.constant(target))?;
            Ok(tape.neg(ld))
        }
        (OutputExpr::Categorical(ca), OutputExpr::Categorical(cb), Pooling::LogLinear) => {
            let f = expr::categorical_log_linear_fuse(tape, ca, cb, lambda)?;
            expr::categorical_nll(tape, expr::log_softmax(tape, f), tape.constant(target))
        }
        (OutputExpr::Categorical(ca), OutputExpr::Categorical(cb), Pooling::Linear) => {
            let lp = expr::categorical_linear_log_probs(tape, ca, cb, lambda)?;
            expr::categorical_nll(tape, lp, tape.constant(target))
        }
        _ => Err(Error::invalid("cannot pool densities of different kinds")),
    }
}

/// ProbMix: pool `p(·|x_i)` and `p(·|x_j)` and score the fused density at
/// the fused perturbed target, over `K` Monte Carlo draws.
pub fn probmix_loss<M: DensityModel + ?Sized>(
    tape: &Tape,
    p: &BoundParams,
    model: &M,
    batch: &Batch,
    draws: &Draws,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    check_draws(draws)?;
    let (xi, xj) = endpoints(tape, batch, draws);
    let oi = model.forward(tape, p, xi)?;
    let oj = model.forward(tape, p, xj)?;
    let per_draw = (0..draws.mc_samples())
        .map(|k| pooled_nll(tape, oi, oj, &draws.lambda[k], cfg.pooling, fused_targets(batch, draws, k, cfg)?))
        .collect::<Result<Vec<_>>>()?;
    aggregate(tape, &per_draw, cfg.criterion)
}

/// An embedding drawn from (or the mean of) the pooled `q(z|x_i)`, `q(z|x_j)`.
fn pooled_embedding(
    tape: &Tape,
    qi: GaussianExpr,
    qj: GaussianExpr,
    lambda: &[f64],
    uniform: &[f64],
    noise: &Matrix,
    pooling: Pooling,
    propagate_mean: bool,
) -> Result<Var> {
    match pooling {
        Pooling::LogLinear => {
            let q = expr::gaussian_log_linear_fuse(tape, qi, qj, lambda)?;
            if propagate_mean {
                Ok(q.mean)
            } else {
                expr::reparameterize(tape, q, noise.clone())
            }
        }
        Pooling::Linear => {
            if propagate_mean {
                return expr::interpolate(tape, qi.mean, qj.mean, lambda);
            }
            let pick: Vec<f64> = lambda.iter().zip(uniform).map(|(l, u)| if u < l { 1.0 } else { 0.0 }).collect();
            let zi = expr::reparameterize(tape, qi, noise.clone())?;
            let zj = expr::reparameterize(tape, qj, noise.clone())?;
            expr::interpolate(tape, zi, zj, &pick)
        }
    }
}

/// M-ProbMix: pool the embedding distributions at the mix layer, decode a
/// reparameterized draw, and score it at the fused perturbed target.
///
/// With an auxiliary variance network the loss has two parts: the decoder
/// is trained on the interpolated embedding means, and the auxiliary network
/// is fit through a sampled path whose means and decoder are held fixed.
pub fn m_probmix_loss<M: DensityModel + ?Sized>(
    tape: &Tape,
    p: &BoundParams,
    model: &M,
    batch: &Batch,
    draws: &Draws,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    check_draws(draws)?;
    let layer = model.embedding_layer().ok_or(Error::MissingHead("embedding distribution"))?;
    let (xi, xj) = endpoints(tape, batch, draws);
    let k_draws = draws.mc_samples();
    let targets = (0..k_draws)
        .map(|k| fused_targets(batch, draws, k, cfg))
        .collect::<Result<Vec<_>>>()?;

    if model.has_auxiliary() {
        let mi = model.features(tape, p, xi, layer)?;
        let mj = model.features(tape, p, xj, layer)?;
        let frozen = p.detached(tape);
        let (di, dj) = (tape.detach(mi), tape.detach(mj));
        let qi = GaussianExpr { mean: di, var: model.auxiliary_variance(tape, p, xi)? };
        let qj = GaussianExpr { mean: dj, var: model.auxiliary_variance(tape, p, xj)? };
        let mut mean_path = Vec::with_capacity(k_draws);
        let mut var_path = Vec::with_capacity(k_draws);
        for (k, target) in targets.into_iter().enumerate() {
            let z = expr::interpolate(tape, mi, mj, &draws.lambda[k])?;
            let out = model.decode(tape, p, z, layer)?;
            mean_path.push(nll_rows(tape, out, target.clone())?);
            let zs = pooled_embedding(tape, qi, qj, &draws.lambda[k], &draws.uniform[k], &draws.embed_noise[k], cfg.pooling, false)?;
            let out = model.decode(tape, &frozen, zs, layer)?;
            var_path.push(nll_rows(tape, out, target)?);
        }
        let a = aggregate(tape, &mean_path, cfg.criterion)?;
        let b = aggregate(tape, &var_path, cfg.criterion)?;
        return tape.add(a, b);
    }

    let qi = model.embedding(tape, p, xi)?;
    let qj = model.embedding(tape, p, xj)?;
    let per_draw = targets
        .into_iter()
        .enumerate()
        .map(|(k, target)| {
            let z = pooled_embedding(
                tape,
                qi,
                qj,
                &draws.lambda[k],
                &draws.uniform[k],
                &draws.embed_noise[k],
                cfg.pooling,
                cfg.propagate_mean,
            )?;
            let out = model.decode(tape, p, z, layer)?;
            nll_rows(tape, out, target)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(tape, &per_draw, cfg.criterion)
}

/// The training objective selected by `cfg.method`. ERM ignores `draws`.
pub fn loss<M: DensityModel + ?Sized>(
    tape: &Tape,
    p: &BoundParams,
    model: &M,
    batch: &Batch,
    draws: &Draws,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    match cfg.method.family() {
        Family::Erm => erm_loss(tape, p, model, batch),
        Family::Mix => mixup_loss(tape, p, model, batch, draws, cfg),
        Family::ManifoldMix => manifold_mixup_loss(tape, p, model, batch, draws, cfg, cfg.mix_layer),
        Family::ProbMix => probmix_loss(tape, p, model, batch, draws, cfg),
        Family::ManifoldProbMix => m_probmix_loss(tape, p, model, batch, draws, cfg),
    }
}
