//! Accuracy and cost bookkeeping for sampler experiments.
//!
//! Accuracy is the relative Frobenius error of a chain's running covariance
//! estimate against a reference covariance pooled from exact-model chains.
//! Cost is the cumulative number of true-model evaluations.

use nalgebra::DMatrix;

use crate::approx_mh::{RefinementCause, RefinementEvent, StepRecord};
use crate::error::{Error, Result};
use crate::moments::{sample_covariance, RunningMoments};

/// Default fraction of each chain discarded as burn-in.
pub const DEFAULT_BURN_IN: f64 = 0.1;

/// Default number of points on the trace grid.
pub const DEFAULT_TRACE_POINTS: usize = 200;

/// Default window, in steps, of the refinement breakdown.
pub const DEFAULT_WINDOW: usize = 10_000;

/// Steps discarded from a chain of length `len`.
pub fn burn_in_count(len: usize, fraction: f64) -> usize {
    assert!((0.0..1.0).contains(&fraction), "burn-in fraction must lie in [0, 1)");
    (fraction * len as f64).floor() as usize
}

/// Sample covariance (denominator `count - 1`) of all post-burn-in states
/// of all chains.
pub fn pooled_reference(chains: &[Vec<Vec<f64>>], burn_in_fraction: f64) -> Result<DMatrix<f64>> {
    let d = chains
        .iter()
        .find_map(|c| c.first().map(|r| r.len()))
        .ok_or_else(|| Error::InvalidArgument("no chain states to pool".into()))?;
    let rows = chains
        .iter()
        .flat_map(|c| c[burn_in_count(c.len(), burn_in_fraction)..].iter());
    let count: usize = chains
        .iter()
        .map(|c| c.len() - burn_in_count(c.len(), burn_in_fraction))
        .sum();
    if count < d + 2 {
        return Err(Error::InsufficientSamples {
            needed: d + 2,
            available: count,
        });
    }
    sample_covariance(rows.map(|r| r.as_slice()), d).ok_or(Error::InsufficientSamples {
        needed: d + 2,
        available: count,
    })
}

/// `|C - C_ref|_F / |C_ref|_F`.
pub fn relative_error(covariance: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (covariance - reference).norm() / reference.norm()
}

/// Roughly `points` step indices from `first` to `last` (inclusive),
/// geometrically spaced, strictly increasing, always containing `last`.
pub fn geometric_grid(first: usize, last: usize, points: usize) -> Vec<usize> {
    if last < first {
        return Vec::new();
    }
    if points <= 1 || first == last {
        return vec![last];
    }
    let (a, b) = ((first.max(1)) as f64, last as f64);
    let mut grid: Vec<usize> = (0..points)
        .map(|k| (a * (b / a).powf(k as f64 / (points - 1) as f64)).round() as usize)
        .map(|s| s.clamp(first, last))
        .collect();
    grid.push(last);
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// One point of an error or cost trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    /// One-based step index.
    pub step: usize,
    pub value: f64,
}

/// Relative covariance error of the post-burn-in states up to each step on
/// a geometric grid of about `points` steps (every step when `points` is
/// `None`). Steps before the second post-burn-in state are skipped.
pub fn relative_cov_error_trace(
    chain: &[Vec<f64>],
    reference: &DMatrix<f64>,
    burn_in_fraction: f64,
    points: Option<usize>,
) -> Vec<TracePoint> {
    let len = chain.len();
    let burn = burn_in_count(len, burn_in_fraction);
    if len < burn + 2 {
        return Vec::new();
    }
    let first = burn + 2;
    let grid = match points {
        Some(p) => geometric_grid(first, len, p),
        None => (first..=len).collect(),
    };
    let mut moments = RunningMoments::new(reference.nrows());
    let mut out = Vec::with_capacity(grid.len());
    let mut next = grid.iter().peekable();
    for (i, row) in chain.iter().enumerate().skip(burn) {
        moments.push(row);
        let step = i + 1;
        if next.peek() == Some(&&step) {
            next.next();
            let cov = moments.covariance().expect("two or more states");
            out.push(TracePoint {
                step,
                value: relative_error(&cov, reference),
            });
        }
    }
    out
}

/// Cumulative model evaluations at each step of a geometric grid over the
/// whole chain (every step when `points` is `None`).
pub fn cost_trace(records: &[StepRecord], points: Option<usize>) -> Vec<TracePoint> {
    let grid = match points {
        Some(p) => geometric_grid(1, records.len(), p),
        None => (1..=records.len()).collect(),
    };
    grid.into_iter()
        .map(|step| TracePoint {
            step,
            value: records[step - 1].model_evals as f64,
        })
        .collect()
}

/// Share of refinements with cause `Random` in consecutive windows of
/// `window` steps over `steps` steps, in percent. `None` for windows with no
/// refinement.
pub fn refinement_breakdown(log: &[RefinementEvent], steps: usize, window: usize) -> Vec<Option<f64>> {
    assert!(window > 0);
    let windows = steps.div_ceil(window);
    let mut random = vec![0usize; windows];
    let mut total = vec![0usize; windows];
    for e in log {
        let w = (e.step.max(1) - 1) / window;
        if w < windows {
            total[w] += 1;
            if e.cause == RefinementCause::Random {
                random[w] += 1;
            }
        }
    }
    random
        .iter()
        .zip(&total)
        .map(|(&r, &t)| (t > 0).then(|| 100.0 * r as f64 / t as f64))
        .collect()
}

/// Share of random-cause refinements among refinements in steps
/// `first..=last`, in percent; `None` if there were none.
pub fn random_share(log: &[RefinementEvent], first: usize, last: usize) -> Option<f64> {
    let (mut r, mut t) = (0usize, 0usize);
    for e in log.iter().filter(|e| e.step >= first && e.step <= last) {
        t += 1;
        if e.cause == RefinementCause::Random {
            r += 1;
        }
    }
    (t > 0).then(|| 100.0 * r as f64 / t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx_mh::Site;

    #[test]
    fn burn_in_arithmetic() {
        assert_eq!(burn_in_count(100, 0.1), 10);
        assert_eq!(burn_in_count(5, 0.0), 0);
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let chain = vec![vec![1.0, 2.0]; 50];
        let c = pooled_reference(&[chain], 0.1).unwrap();
        assert_eq!(c, DMatrix::zeros(2, 2));
    }

    #[test]
    fn too_few_pooled_samples() {
        let chain = vec![vec![1.0, 2.0]; 3];
        assert!(pooled_reference(&[chain], 0.0).is_err());
    }

    #[test]
    fn frobenius_arithmetic() {
        let r = DMatrix::<f64>::identity(2, 2);
        assert!((relative_error(&(&r * 2.0), &r) - 1.0).abs() < 1e-15);
        assert!((relative_error(&DMatrix::zeros(2, 2), &r) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_shape() {
        let g = geometric_grid(12, 100_000, 200);
        assert_eq!(*g.first().unwrap(), 12);
        assert_eq!(*g.last().unwrap(), 100_000);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.len() <= 201 && g.len() > 150);
        assert_eq!(geometric_grid(5, 5, 10), vec![5]);
    }

    fn event(step: usize, cause: RefinementCause) -> RefinementEvent {
        RefinementEvent {
            step,
            cause,
            site: Site::Plus,
        }
    }

    #[test]
    fn breakdown_windows() {
        let log = vec![
            event(1, RefinementCause::Cv),
            event(5, RefinementCause::Random),
            event(25, RefinementCause::Random),
        ];
        let b = refinement_breakdown(&log, 30, 10);
        assert_eq!(b, vec![Some(50.0), None, Some(100.0)]);
        assert_eq!(random_share(&log, 1, 10), Some(50.0));
        assert_eq!(random_share(&log, 11, 20), None);
    }
}
