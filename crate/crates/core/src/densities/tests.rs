use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for k in 1..steps {
        acc += f(lo + k as f64 * h);
    }
    acc * h
}

fn n(mean: f64, var: f64) -> GaussianDensity {
    GaussianDensity::univariate(mean, var).unwrap()
}

#[test]
fn gaussian_nll_golden_values() {
    let mix = gaussian_nll(&n(27.0, 30.25), &[80.0]).unwrap();
    assert!((mix - 49.05).abs() < 0.01, "{mix}");
    let prob = gaussian_nll(&n(75.0, 182.25), &[80.0]).unwrap();
    assert!((prob - 3.59).abs() < 0.01, "{prob}");
    let std = gaussian_nll(&n(0.0, 1.0), &[0.0]).unwrap();
    assert!((std - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
}

#[test]
fn gaussian_construction_errors_and_floor() {
    assert!(GaussianDensity::univariate(0.0, 0.0).is_err());
    assert!(GaussianDensity::univariate(0.0, -1.0).is_err());
    assert!(GaussianDensity::new(vec![0.0], vec![1.0, 1.0]).is_err());
    assert_eq!(n(0.0, 1e-9).variance(), &[VARIANCE_FLOOR]);
    assert!(gaussian_nll(&n(0.0, 1.0), &[1.0, 2.0]).is_err());
}

#[test]
fn categorical_nll_values() {
    let u = CategoricalDensity::from_logits(vec![0.0; 3]).unwrap();
    assert!((categorical_nll(&u, 1).unwrap() - 3f64.ln()).abs() < 1e-15);
    // -log(e^10 / (e^10 + 1)) = log(1 + e^-10)
    let c = CategoricalDensity::from_logits(vec![10.0, 0.0]).unwrap();
    let expected = (-10f64).exp().ln_1p();
    assert!((categorical_nll(&c, 0).unwrap() - expected).abs() < 1e-12 * expected);
    assert!((expected - 4.54e-5).abs() < 1e-7);
    assert!(matches!(
        categorical_nll(&c, 2),
        Err(Error::ClassIndex { index: 2, classes: 2 })
    ));
}

#[test]
fn categorical_shift_invariance() {
    let a = CategoricalDensity::from_logits(vec![0.3, -1.2, 2.0]).unwrap();
    let b = CategoricalDensity::from_logits(vec![100.3, 98.8, 102.0]).unwrap();
    for k in 0..3 {
        let d = categorical_nll(&a, k).unwrap() - categorical_nll(&b, k).unwrap();
        assert!(d.abs() < 1e-12);
    }
    assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn gaussian_fusion_golden() {
    let f = gaussian_log_linear_fuse(&n(125.0, 182.25), &n(-125.0, 182.25), 0.8).unwrap();
    assert!((f.mean()[0] - 75.0).abs() < 1e-9);
    assert!((f.variance()[0] - 182.25).abs() < 1e-9);
}

#[test]
fn gaussian_fusion_endpoints_and_closure() {
    let a = GaussianDensity::new(vec![1.0, -3.0], vec![0.5, 2.0]).unwrap();
    let b = GaussianDensity::new(vec![4.0, 0.0], vec![3.0, 0.25]).unwrap();
    assert_eq!(gaussian_log_linear_fuse(&a, &b, 1.0).unwrap(), a);
    assert_eq!(gaussian_log_linear_fuse(&a, &b, 0.0).unwrap(), b);
    let lambda = 0.3;
    let f = gaussian_log_linear_fuse(&a, &b, lambda).unwrap();
    for d in 0..2 {
        let prec = lambda / a.variance()[d] + (1.0 - lambda) / b.variance()[d];
        let mean = (lambda * a.mean()[d] / a.variance()[d]
            + (1.0 - lambda) * b.mean()[d] / b.variance()[d])
            / prec;
        assert!((1.0 / f.variance()[d] - prec).abs() < 1e-12);
        assert!((f.mean()[d] - mean).abs() < 1e-12);
    }
    assert!(gaussian_log_linear_fuse(&a, &b, 1.5).is_err());
}

#[test]
fn gaussian_fusion_is_normalized() {
    let f = gaussian_log_linear_fuse(&n(-1.0, 0.3), &n(2.5, 4.0), 0.35).unwrap();
    let (m, s) = (f.mean()[0], f.variance()[0].sqrt());
    let mass = trapezoid(|y| (-gaussian_nll(&f, &[y]).unwrap()).exp(), m - 10.0 * s, m + 10.0 * s, 20_000);
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
}

#[test]
fn homoscedastic_fusion_interpolates_means() {
    let a = GaussianDensity::new(vec![1.7, -2.0], vec![0.7, 0.7]).unwrap();
    let b = GaussianDensity::new(vec![-0.4, 5.0], vec![0.7, 0.7]).unwrap();
    for &l in &[0.0, 0.13, 0.5, 0.91, 1.0] {
        let f = gaussian_log_linear_fuse(&a, &b, l).unwrap();
        assert_eq!(f.variance(), &[0.7, 0.7]);
        for d in 0..2 {
            assert_eq!(f.mean()[d], l * a.mean()[d] + (1.0 - l) * b.mean()[d]);
        }
    }
}

#[test]
fn categorical_fusion() {
    let p = CategoricalDensity::from_probs(&[0.8, 0.2]).unwrap();
    let q = CategoricalDensity::from_probs(&[0.2, 0.8]).unwrap();
    let f = categorical_log_linear_fuse(&p, &q, 0.5).unwrap();
    // sqrt(0.8 * 0.2) for both classes, normalized to 1/2 each.
    for prob in f.probs() {
        assert!((prob - 0.5).abs() < 1e-12);
    }
    assert_eq!(categorical_log_linear_fuse(&p, &q, 0.0).unwrap(), q);
    let same = categorical_log_linear_fuse(&p, &p, 0.37).unwrap();
    for (a, b) in same.probs().iter().zip(p.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
    let l = 0.37;
    let logits: Vec<f64> = p.logits().iter().zip(q.logits()).map(|(a, b)| l * a + (1.0 - l) * b).collect();
    assert_eq!(categorical_log_linear_fuse(&p, &q, l).unwrap().logits(), &logits[..]);
    let three = CategoricalDensity::from_logits(vec![0.0; 3]).unwrap();
    assert!(categorical_log_linear_fuse(&p, &three, 0.5).is_err());
}

#[test]
fn linear_pooling() {
    let a = n(0.0, 1.0);
    let b = n(4.0, 1.0);
    let m = linear_fuse(&a, &b, 0.5).unwrap();
    let direct = -((-gaussian_nll(&a, &[2.0]).unwrap()).exp() * 0.5
        + (-gaussian_nll(&b, &[2.0]).unwrap()).exp() * 0.5)
        .ln();
    assert!((mixture_nll(&m, &[2.0]).unwrap() - direct).abs() < 1e-12);

    let end = linear_fuse(&a, &b, 1.0).unwrap();
    for y in [-3.0, 0.0, 1.5, 40.0] {
        assert_eq!(mixture_nll(&end, &[y]).unwrap(), gaussian_nll(&a, &[y]).unwrap());
    }
    let same = linear_fuse(&a, &a, 0.5).unwrap();
    let v = mixture_nll(&same, &[0.0]).unwrap();
    assert!((v - HALF_LOG_TWO_PI).abs() < 1e-12);
}

#[test]
fn mixture_zero_weight_never_nan() {
    let a = CategoricalDensity::from_probs(&[1.0, 0.0]).unwrap();
    let b = CategoricalDensity::from_probs(&[0.0, 1.0]).unwrap();
    let m = linear_fuse(&a, &b, 1.0).unwrap();
    assert_eq!(mixture_nll(&m, &0).unwrap(), 0.0);
    assert_eq!(mixture_nll(&m, &1).unwrap(), f64::INFINITY);
    let half = linear_fuse(&a, &b, 0.5).unwrap();
    assert!((mixture_nll(&half, &1).unwrap() - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn mixture_is_normalized() {
    let m = linear_fuse(&n(-2.0, 0.5), &n(3.0, 2.0), 0.3).unwrap();
    let mass = trapezoid(|y| (-mixture_nll(&m, &[y]).unwrap()).exp(), -12.0, 18.0, 30_000);
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
}

#[test]
fn reparameterized_sampling() {
    let p = n(3.0, 4.0);
    assert_eq!(sample_gaussian_reparameterized(&p, &[0.0]).unwrap(), vec![3.0]);
    assert_eq!(sample_gaussian_reparameterized(&n(0.0, 4.0), &[1.0]).unwrap(), vec![2.0]);
    assert!(sample_gaussian_reparameterized(&p, &[0.0, 1.0]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = n(1.0, 2.0);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_gaussian(&q, &mut rng)[0]).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
    assert!((var - 2.0).abs() < 0.1, "{var}");
}

#[test]
fn categorical_sampling_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let degenerate = CategoricalDensity::from_logits(vec![1e9, 0.0, 0.0]).unwrap();
    assert!((0..1000).all(|_| sample_categorical(&degenerate, &mut rng) == 0));

    let uniform = CategoricalDensity::from_logits(vec![0.0; 3]).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        counts[sample_categorical(&uniform, &mut rng)] += 1;
    }
    for c in counts {
        assert!((c as f64 / 1e5 - 1.0 / 3.0).abs() < 0.01);
    }

    let two = CategoricalDensity::from_logits(vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
    let zeros = (0..100_000).filter(|_| sample_categorical(&two, &mut rng) == 0).count();
    assert!((zeros as f64 / 1e5 - 0.8).abs() < 0.01);
}
