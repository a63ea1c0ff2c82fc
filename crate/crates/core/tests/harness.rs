use localmh::approx_mh::{RefinementCause, RefinementEvent, Site, StepRecord};
use localmh::harness::{
    burn_in_count, cost_trace, geometric_grid, pooled_reference, refinement_breakdown, relative_cov_error_trace,
    relative_error,
};
use localmh::rng::{stream, Stream};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

/// Two-pass sample covariance, written independently of the library.
fn two_pass_cov(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    DMatrix::from_fn(d, d, |a, b| {
        rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0)
    })
}

fn gaussian_chain(seed: u64, len: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Stream::Data);
    (0..len)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            vec![a, 0.5 * a + b, 3.0 + 0.1 * b]
        })
        .collect()
}

#[test]
fn pooled_reference_matches_two_pass_oracle() {
    let chains: Vec<Vec<Vec<f64>>> = (0..4).map(|s| gaussian_chain(s, 500)).collect();
    let pooled = pooled_reference(&chains, 0.1).unwrap();
    let rows: Vec<Vec<f64>> = chains.iter().flat_map(|c| c[50..].iter().cloned()).collect();
    let oracle = two_pass_cov(&rows);
    assert!((&pooled - &oracle).abs().max() < 1e-12);
}

#[test]
fn error_trace_matches_recomputation_at_every_grid_point() {
    let chain = gaussian_chain(7, 2000);
    let reference = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.25, 0.1, 0.0, 0.1, 0.01]);
    let trace = relative_cov_error_trace(&chain, &reference, 0.1, Some(40));
    let burn = burn_in_count(chain.len(), 0.1);
    assert_eq!(trace.last().unwrap().step, 2000);
    for p in &trace {
        let cov = two_pass_cov(&chain[burn..p.step]);
        let direct = (&cov - &reference).norm() / reference.norm();
        assert!((p.value - direct).abs() < 1e-10, "step {}", p.step);
    }
    assert!(trace.last().unwrap().value < 0.2);
    let full = relative_cov_error_trace(&chain, &reference, 0.1, None);
    assert_eq!(full.len(), chain.len() - burn - 1);
}

#[test]
fn relative_error_is_scale_free() {
    let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let c = DMatrix::from_row_slice(2, 2, &[2.2, 0.1, 0.1, 0.9]);
    assert!((relative_error(&c, &r) - relative_error(&(&c * 7.0), &(&r * 7.0))).abs() < 1e-14);
    assert_eq!(relative_error(&r, &r), 0.0);
}

#[test]
fn cost_trace_reads_cumulative_counts() {
    let records: Vec<StepRecord> = (1..=100)
        .map(|s| StepRecord {
            step: s,
            position: vec![0.0],
            accepted: true,
            model_evals: 10 + s / 3,
            eps_plus: f64::NAN,
            eps_minus: f64::NAN,
            refinements: Vec::new(),
        })
        .collect();
    let trace = cost_trace(&records, Some(10));
    assert_eq!(trace.last().unwrap().step, 100);
    for p in &trace {
        assert_eq!(p.value, (10 + p.step / 3) as f64);
    }
    assert!(trace.windows(2).all(|w| w[0].value <= w[1].value));
}

#[test]
fn breakdown_counts_by_window() {
    let causes = [RefinementCause::Random, RefinementCause::Cv, RefinementCause::FitFailure];
    let log: Vec<RefinementEvent> = (0..90)
        .map(|i| RefinementEvent {
            step: 1 + i * 10,
            cause: causes[i % 3],
            site: Site::Minus,
        })
        .collect();
    let b = refinement_breakdown(&log, 900, 300);
    assert_eq!(b.len(), 3);
    for share in b {
        assert!((share.unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn geometric_grid_is_strict_and_bounded(first in 1usize..1000, span in 0usize..1_000_000, points in 1usize..300) {
        let last = first + span;
        let g = geometric_grid(first, last, points);
        prop_assert_eq!(*g.last().unwrap(), last);
        prop_assert!(g[0] >= first);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(g.len() <= points + 1);
    }
}
