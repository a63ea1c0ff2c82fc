use localmh::local_gp::{fit_gp, gp_draw, gp_sample_count, GpHyperparameters, GpModel, GpOptions, LocalFrame};
use localmh::rng::{stream, Stream};
use localmh::sample_store::Sample;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn rbf(x: &[f64], y: &[f64], l: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).zip(l).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    (-0.5 * s).exp()
}

/// Draws one path of a zero-mean unit-variance GP with lengthscales `l` at `points`.
fn draw_gp(points: &[Vec<f64>], l: &[f64], seed: u64) -> Vec<f64> {
    let n = points.len();
    let mut k = DMatrix::from_fn(n, n, |i, j| rbf(&points[i], &points[j], l));
    for i in 0..n {
        k[(i, i)] += 1e-8;
    }
    let chol = k.cholesky().unwrap();
    let mut rng = stream(seed, Stream::Data);
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
    (chol.l() * z).iter().copied().collect()
}

#[test]
fn recovers_known_lengthscales() {
    let truth = [0.6, 1.5];
    let mut within = 0;
    for seed in 0..10u64 {
        let mut rng = stream(seed, Stream::Data);
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let y = draw_gp(&points, &truth, seed + 100);
        let samples: Vec<Sample> = points.iter().zip(&y).map(|(p, v)| Sample::new(p.clone(), vec![*v])).collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut opt_rng = stream(seed, Stream::Surrogate);
        let gp = fit_gp(&refs, LocalFrame::new(vec![0.0, 0.0], 1.0), &GpOptions::default(), &mut opt_rng).unwrap();
        let l = &gp.hyperparameters().lengthscales;
        if l.iter().zip(&truth).all(|(a, b)| (a / b).ln().abs() <= 2f64.ln()) {
            within += 1;
        }
    }
    assert!(within >= 8, "only {within} of 10 seeds recovered the lengthscales");
}

#[test]
fn draws_have_predictive_spread() {
    let pred = [(1.0, 4.0), (-2.0, 0.25), (5.0, 0.0)];
    let mut rng = stream(9, Stream::Surrogate);
    let n = 20_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| gp_draw(&pred, &mut rng)).collect();
    for (j, (m, v)) in pred.iter().enumerate() {
        let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - m).abs() < 4.0 * (v / n as f64).sqrt() + 1e-12);
        if *v > 0.0 {
            assert!((var.sqrt() / v.sqrt() - 1.0).abs() < 0.03);
        } else {
            assert_eq!(var, 0.0);
        }
    }
}

#[test]
fn frame_scaling_is_invisible_to_fixed_hyperparameter_predictions() {
    let pts: Vec<Vec<f64>> = (0..12).map(|i| vec![0.1 * i as f64, (0.37 * i as f64).sin()]).collect();
    let samples: Vec<Sample> = pts.iter().map(|p| Sample::new(p.clone(), vec![p[0] * p[1] + 1.0])).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let opts = GpOptions::default();
    let a = GpModel::condition(
        &refs,
        LocalFrame::new(vec![0.0, 0.0], 1.0),
        GpHyperparameters { lengthscales: vec![0.5, 0.5], nugget: 1e-6 },
        &opts,
    )
    .unwrap();
    let b = GpModel::condition(
        &refs,
        LocalFrame::new(vec![0.5, 0.5], 2.0),
        GpHyperparameters { lengthscales: vec![0.25, 0.25], nugget: 1e-6 },
        &opts,
    )
    .unwrap();
    for p in [[0.3, 0.2], [1.4, -0.5]] {
        let (ma, va) = a.predict(&p)[0];
        let (mb, vb) = b.predict(&p)[0];
        assert!((ma - mb).abs() < 1e-9);
        assert!((va - vb).abs() < 1e-9);
    }
}

#[test]
fn sample_count_rule() {
    assert_eq!(gp_sample_count(2, 10), 10);
    assert_eq!(gp_sample_count(3, 10), 16);
    assert_eq!(gp_sample_count(9, 10), 243);
}
