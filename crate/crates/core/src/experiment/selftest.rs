use crate::data::Targets;
use crate::densities::{
    categorical_log_linear_fuse, gaussian_log_linear_fuse, gaussian_nll, CategoricalDensity, GaussianDensity,
};
use crate::diffcore::{evaluate, finite_difference_check};
use crate::error::Result;
use crate::graphs::fully_connected;
use crate::linalg::Matrix;
use crate::models::{build_affine_model, Activation, CubicGroundTruth, EmbeddingVariance, HeadKind, MlpSpec, Model};
use crate::rng::{stream, RunStreams, Stream};
use crate::vicinal::{
    erm_loss, loss, mixup_loss, probmix_loss, Batch, Criterion, DrawShape, Draws, Method, MixingDistribution, Pooling,
    RegularizerConfig,
};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct SelfTestCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfTestCheck {
    SelfTestCheck { name, passed, detail }
}

/// Runs the fusion golden values, the endpoint reductions, the linear
/// equivalences, the Jensen ordering and a gradient check.
pub fn selftest() -> Vec<SelfTestCheck> {
    [golden, endpoints, linear_equivalence, jensen, gradients]
        .iter()
        .map(|f| f().unwrap_or_else(|e| check("error", false, e.to_string())))
        .collect()
}

fn golden() -> Result<SelfTestCheck> {
    let p = GaussianDensity::univariate(125.0, 182.25)?;
    let q = GaussianDensity::univariate(-125.0, 182.25)?;
    let f = gaussian_log_linear_fuse(&p, &q, 0.8)?;
    let fuse_ok = (f.mean()[0] - 75.0).abs() < 1e-9 && (f.variance()[0] - 182.25).abs() < 1e-9;

    let x = Matrix::column(&[5.0, -5.0]);
    let y = Targets::Regression(Matrix::column(&[130.0, -120.0]));
    let batch = Batch::new(&x, &y)?;
    let shape = DrawShape { batch: 1, mc_samples: 1, target_dim: 1, embed_dim: 0 };
    let draws = Draws::for_pairs(vec![(0, 1)], MixingDistribution::Fixed(0.8), shape, &mut RunStreams::new(0))?;
    let empty = crate::diffcore::ParamSet::new();
    let mix = evaluate(&empty, |t, p| {
        mixup_loss(t, p, &CubicGroundTruth, &batch, &draws, &RegularizerConfig::for_method(Method::Mix))
    })?;
    let cfg = RegularizerConfig { beta: 0.0, ..RegularizerConfig::for_method(Method::ProbMix) };
    let prob = evaluate(&empty, |t, p| probmix_loss(t, p, &CubicGroundTruth, &batch, &draws, &cfg))?;
    let at3 = gaussian_nll(&GaussianDensity::univariate(27.0, 30.25)?, &[80.0])?;
    let passed = fuse_ok && (mix - 49.05).abs() < 0.01 && (prob - 3.59).abs() < 0.01 && (mix - at3).abs() < 1e-9;
    Ok(check("golden values", passed, format!("fused N({}, {}), NLL {mix:.4} / {prob:.4}", f.mean()[0], f.variance()[0])))
}

const EMBED: usize = 5;

fn small_model(head: HeadKind, seed: u64) -> Result<Model> {
    let spec = MlpSpec {
        input_dim: 2,
        hidden: vec![EMBED, 4],
        activation: Activation::Tanh,
        head,
        output_dim: if head == HeadKind::Softmax { 3 } else { 1 },
        mix_layer: 1,
        embedding: Some(EmbeddingVariance::Shared),
    };
    Model::init(spec, &mut stream(seed, Stream::Init))
}

fn random_batch(n: usize, classification: bool, seed: u64) -> (Matrix, Targets) {
    let mut rng = stream(seed, Stream::Data);
    let x = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect());
    let y = if classification {
        Targets::Classification { labels: (0..n).map(|_| rng.random_range(0..3)).collect(), classes: 3 }
    } else {
        Targets::Regression(Matrix::from_vec(n, 1, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()))
    };
    (x, y)
}

fn endpoints() -> Result<SelfTestCheck> {
    let mut worst = 0.0f64;
    for (seed, head) in [(1, HeadKind::GaussianHeteroscedastic), (2, HeadKind::Softmax)] {
        let model = small_model(head, seed)?;
        let (x, y) = random_batch(6, head == HeadKind::Softmax, seed);
        let batch = Batch::new(&x, &y)?;
        let pairs: Vec<(usize, usize)> = (0..6).map(|i| (i, (i + 2) % 6)).collect();
        for (lambda, pick) in [(1.0, 0), (0.0, 1)] {
            let idx: Vec<usize> = pairs.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
            let (xe, ye) = (x.select_rows(&idx), y.select(&idx));
            let erm = evaluate(model.params(), |t, p| erm_loss(t, p, &model, &Batch::new(&xe, &ye)?))?;
            let shape = DrawShape { batch: 6, mc_samples: 1, target_dim: 1, embed_dim: EMBED };
            let draws = Draws::for_pairs(pairs.clone(), MixingDistribution::Fixed(lambda), shape, &mut RunStreams::new(seed))?
                .without_noise();
            for method in Method::ALL {
                for pooling in [Pooling::LogLinear, Pooling::Linear] {
                    let cfg = RegularizerConfig { pooling, beta: 0.0, ..RegularizerConfig::for_method(method) };
                    if method == Method::Erm {
                        continue;
                    }
                    let v = evaluate(model.params(), |t, p| loss(t, p, &model, &batch, &draws, &cfg))?;
                    worst = worst.max((v - erm).abs());
                }
            }
        }
    }
    Ok(check("endpoint reduction", worst == 0.0, format!("max |loss − ERM| = {worst:e}")))
}

fn linear_equivalence() -> Result<SelfTestCheck> {
    let mut worst = 0.0f64;
    let mut rng = stream(3, Stream::Init);
    for trial in 0..20u64 {
        for head in [HeadKind::GaussianHomoscedastic, HeadKind::Softmax] {
            let out = if head == HeadKind::Softmax { 3 } else { 1 };
            let a = Matrix::from_vec(out, 2, (0..2 * out).map(|_| rng.random_range(-1.0..1.0)).collect());
            let b: Vec<f64> = (0..out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let model = build_affine_model(&a, &b, head)?;
            let (x, y) = random_batch(5, head == HeadKind::Softmax, 100 + trial);
            let batch = Batch::new(&x, &y)?;
            let shape = DrawShape { batch: 5, mc_samples: 1, target_dim: 1, embed_dim: 0 };
            let draws = Draws::sample(
                &fully_connected(5)?,
                MixingDistribution::Beta { alpha: 0.5 },
                shape,
                &mut RunStreams::new(trial),
            )?;
            let mix_cfg = RegularizerConfig::for_method(Method::Mix);
            // Noise-free targets coincide with the mixed label: log-linear for
            // Gaussians, linear for one-hot rows.
            let target_pooling = if head == HeadKind::Softmax { Pooling::Linear } else { Pooling::LogLinear };
            let prob_cfg = RegularizerConfig {
                beta: 0.0,
                target_pooling: Some(target_pooling),
                ..RegularizerConfig::for_method(Method::ProbMix)
            };
            let m = evaluate(model.params(), |t, p| mixup_loss(t, p, &model, &batch, &draws, &mix_cfg))?;
            let q = evaluate(model.params(), |t, p| probmix_loss(t, p, &model, &batch, &draws, &prob_cfg))?;
            worst = worst.max((m - q).abs());
        }
    }
    let pi = CategoricalDensity::from_logits(vec![0.3, -1.0, 2.0])?;
    let pj = CategoricalDensity::from_logits(vec![1.0, 0.5, -0.5])?;
    let f = categorical_log_linear_fuse(&pi, &pj, 0.25)?;
    let expected = [0.25 * 0.3 + 0.75, 0.25 * -1.0 + 0.75 * 0.5, 0.5 - 0.75 * 0.5];
    let cat = f.logits().iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(check(
        "linear equivalence",
        worst < 1e-10 && cat < 1e-12,
        format!("max |ProbMix − Mix| = {worst:e}"),
    ))
}

fn jensen() -> Result<SelfTestCheck> {
    let model = small_model(HeadKind::GaussianHeteroscedastic, 4)?;
    let (x, y) = random_batch(8, false, 4);
    let batch = Batch::new(&x, &y)?;
    let graph = fully_connected(8)?;
    let mut streams = RunStreams::new(4);
    let mut violations = 0;
    for _ in 0..100 {
        let shape = DrawShape { batch: 8, mc_samples: 4, target_dim: 1, embed_dim: EMBED };
        let draws = Draws::sample(&graph, MixingDistribution::Beta { alpha: 0.5 }, shape, &mut streams)?;
        let mut cfg = RegularizerConfig { mc_samples: 4, ..RegularizerConfig::for_method(Method::ProbMix) };
        let el = evaluate(model.params(), |t, p| loss(t, p, &model, &batch, &draws, &cfg))?;
        cfg.criterion = Criterion::LogExpected;
        let le = evaluate(model.params(), |t, p| loss(t, p, &model, &batch, &draws, &cfg))?;
        violations += usize::from(le > el);
    }
    Ok(check("jensen ordering", violations == 0, format!("{violations} violations in 100 batches")))
}

fn gradients() -> Result<SelfTestCheck> {
    let model = small_model(HeadKind::GaussianHeteroscedastic, 5)?;
    let (x, y) = random_batch(6, false, 5);
    let batch = Batch::new(&x, &y)?;
    let shape = DrawShape { batch: 6, mc_samples: 2, target_dim: 1, embed_dim: EMBED };
    let draws = Draws::sample(&fully_connected(6)?, MixingDistribution::Beta { alpha: 0.5 }, shape, &mut RunStreams::new(5))?;
    let mut worst = 0.0f64;
    for method in Method::ALL {
        let cfg = RegularizerConfig { mc_samples: 2, ..RegularizerConfig::for_method(method) };
        let r = finite_difference_check(model.params(), 1e-5, |t, p| loss(t, p, &model, &batch, &draws, &cfg))?;
        worst = worst.max(r.max_rel_error);
    }
    Ok(check("gradient check", worst < 1e-4, format!("max relative error {worst:e}")))
}
