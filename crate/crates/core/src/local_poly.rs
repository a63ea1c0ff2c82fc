//! Weighted local linear and quadratic regression.
//!
//! A model is fit on the `N` nearest samples of a center point. Coordinates
//! are shifted to the center and scaled by the distance `R` to the farthest
//! sample, so the fit lives on the unit ball, and each sample is weighted by a
//! tricube profile that is flat out to the `N_def`-th neighbor and decays to
//! zero at `R`. Each output is fit independently but all outputs share one QR
//! factorization of the weighted design matrix.
//!
//! The basis columns are ordered
//! `1, x_1..x_d, x_1^2/2..x_d^2/2, x_1 x_2, .., x_{d-1} x_d`
//! so the coefficient vector reads `a, b, diag(H), upper(H)` for the model
//! `a + b^T x + x^T H x / 2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample_store::{distance, Sample};

/// Default lower bound on the `N / N_def` multiplier.
pub const DEFAULT_LOW_D_FLOOR: f64 = 1.5;

/// Relative magnitude of the smallest `R` diagonal entry below which the
/// weighted design matrix is treated as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Leverage `h_ii` closer to one than this makes a leave-one-out system singular.
const LEVERAGE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyOrder {
    Linear,
    Quadratic,
}

/// Sample counts for one local fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitSpec {
    /// Samples that fully determine the polynomial.
    pub n_def: usize,
    /// Samples used in the regression.
    pub n: usize,
}

/// Number of basis functions, which equals `N_def`.
pub fn basis_size(dimension: usize, order: PolyOrder) -> usize {
    match order {
        PolyOrder::Linear => dimension + 1,
        PolyOrder::Quadratic => (dimension + 1) * (dimension + 2) / 2,
    }
}

/// `N_def` for the order and `N = ceil(max(sqrt(d), low_d_floor) * N_def)`.
pub fn sample_counts(dimension: usize, order: PolyOrder, low_d_floor: f64) -> FitSpec {
    assert!(dimension >= 1);
    let n_def = basis_size(dimension, order);
    let multiplier = (dimension as f64).sqrt().max(low_d_floor);
    // Guard the ceiling against products that land a hair above an integer.
    let raw = multiplier * n_def as f64;
    let n = (raw - 1e-9).ceil().max(n_def as f64) as usize;
    FitSpec { n_def, n }
}

/// Tricube weight that is one inside `r_def` and zero beyond `r`.
pub fn tricube_weight(dist: f64, r_def: f64, r: f64) -> f64 {
    if dist <= r_def {
        return 1.0;
    }
    if dist > r {
        return 0.0;
    }
    // r > r_def here, otherwise one of the branches above fired.
    let u = (dist - r_def) / (r - r_def);
    let inner = 1.0 - u * u * u;
    inner * inner * inner
}

fn basis_row(x: &[f64], order: PolyOrder, out: &mut [f64]) {
    let d = x.len();
    out[0] = 1.0;
    out[1..=d].copy_from_slice(x);
    if order == PolyOrder::Quadratic {
        for k in 0..d {
            out[1 + d + k] = 0.5 * x[k] * x[k];
        }
        let mut col = 1 + 2 * d;
        for k in 0..d {
            for l in (k + 1)..d {
                out[col] = x[k] * x[l];
                col += 1;
            }
        }
    }
}

/// A fitted local polynomial for every output.
///
/// Coefficients are stored in the scaled coordinates `(theta - center) / radius`;
/// [`PolyModel::evaluate`] takes raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    order: PolyOrder,
    center: Vec<f64>,
    radius: f64,
    constants: Vec<f64>,
    linear: Vec<Vec<f64>>,
    hessians: Vec<Vec<f64>>,
}

impl PolyModel {
    /// The model that returns zero everywhere.
    pub fn zero(order: PolyOrder, center: Vec<f64>, radius: f64, outputs: usize) -> Self {
        let d = center.len();
        Self {
            order,
            center,
            radius,
            constants: vec![0.0; outputs],
            linear: vec![vec![0.0; d]; outputs],
            hessians: match order {
                PolyOrder::Linear => Vec::new(),
                PolyOrder::Quadratic => vec![vec![0.0; d * d]; outputs],
            },
        }
    }

    fn from_coefficients(order: PolyOrder, center: &[f64], radius: f64, z: &DMatrix<f64>) -> Self {
        let d = center.len();
        let outputs = z.ncols();
        let mut model = Self::zero(order, center.to_vec(), radius, outputs);
        for j in 0..outputs {
            model.constants[j] = z[(0, j)];
            for k in 0..d {
                model.linear[j][k] = z[(1 + k, j)];
            }
            if order == PolyOrder::Quadratic {
                let h = &mut model.hessians[j];
                for k in 0..d {
                    h[k * d + k] = z[(1 + d + k, j)];
                }
                let mut row = 1 + 2 * d;
                for k in 0..d {
                    for l in (k + 1)..d {
                        h[k * d + l] = z[(row, j)];
                        h[l * d + k] = z[(row, j)];
                        row += 1;
                    }
                }
            }
        }
        model
    }

    pub fn order(&self) -> PolyOrder {
        self.order
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn output_dim(&self) -> usize {
        self.constants.len()
    }

    /// The model value at its center.
    pub fn constants(&self) -> &[f64] {
        &self.constants
    }

    /// Gradient of output `j` at the center, in raw coordinates.
    pub fn linear_terms(&self, j: usize) -> Vec<f64> {
        self.linear[j].iter().map(|b| b / self.radius).collect()
    }

    /// Row-major Hessian of output `j` in raw coordinates, or `None` for a
    /// linear model.
    pub fn hessian(&self, j: usize) -> Option<Vec<f64>> {
        let r2 = self.radius * self.radius;
        self.hessians
            .get(j)
            .map(|h| h.iter().map(|v| v / r2).collect())
    }

    pub fn evaluate(&self, point: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        assert_eq!(point.len(), d, "evaluation point has wrong dimension");
        let x: Vec<f64> = point
            .iter()
            .zip(&self.center)
            .map(|(p, c)| (p - c) / self.radius)
            .collect();
        (0..self.constants.len())
            .map(|j| {
                let mut v = self.constants[j];
                v += self.linear[j].iter().zip(&x).map(|(b, xi)| b * xi).sum::<f64>();
                if let Some(h) = self.hessians.get(j) {
                    let mut quad = 0.0;
                    for k in 0..d {
                        for l in 0..d {
                            quad += x[k] * h[k * d + l] * x[l];
                        }
                    }
                    v += 0.5 * quad;
                }
                v
            })
            .collect()
    }
}

/// The weighted least-squares problem on one neighborhood.
struct WeightedSystem {
    /// Unweighted basis rows, one per neighbor.
    phi: DMatrix<f64>,
    weights: Vec<f64>,
    /// Outputs, one row per neighbor.
    y: DMatrix<f64>,
    radius: f64,
}

impl WeightedSystem {
    fn build(neighbors: &[&Sample], center: &[f64], order: PolyOrder) -> Result<Self> {
        let d = center.len();
        let n_def = basis_size(d, order);
        let m = n_def;
        if neighbors.len() < n_def {
            return Err(Error::InsufficientSamples {
                needed: n_def,
                available: neighbors.len(),
            });
        }
        let outputs = neighbors[0].values.len();
        let dists: Vec<f64> = neighbors
            .iter()
            .map(|s| {
                if s.location.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: s.location.len(),
                    });
                }
                Ok(distance(&s.location, center))
            })
            .collect::<Result<_>>()?;
        let radius = dists.iter().copied().fold(0.0, f64::max);
        if radius <= 0.0 {
            return Err(Error::RankDeficient { ratio: 0.0 });
        }
        let mut sorted = dists.clone();
        sorted.sort_by(f64::total_cmp);
        let r_def = sorted[n_def - 1] / radius;

        let mut phi = DMatrix::zeros(neighbors.len(), m);
        let mut y = DMatrix::zeros(neighbors.len(), outputs);
        let mut weights = Vec::with_capacity(neighbors.len());
        let mut row = vec![0.0; m];
        let mut scaled = vec![0.0; d];
        for (i, s) in neighbors.iter().enumerate() {
            for k in 0..d {
                scaled[k] = (s.location[k] - center[k]) / radius;
            }
            basis_row(&scaled, order, &mut row);
            for (c, v) in row.iter().enumerate() {
                phi[(i, c)] = *v;
            }
            for (j, v) in s.values.iter().enumerate() {
                y[(i, j)] = *v;
            }
            weights.push(tricube_weight(dists[i] / radius, r_def, 1.0));
        }
        Ok(Self {
            phi,
            weights,
            y,
            radius,
        })
    }

    /// Solves the weighted problem with the given rows, returning the
    /// coefficients and the triangular factor.
    fn solve(&self, rows: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.phi.ncols();
        let mut a = DMatrix::zeros(rows.len(), m);
        let mut b = DMatrix::zeros(rows.len(), self.y.ncols());
        for (r, &i) in rows.iter().enumerate() {
            let sw = self.weights[i].sqrt();
            for c in 0..m {
                a[(r, c)] = sw * self.phi[(i, c)];
            }
            for c in 0..self.y.ncols() {
                b[(r, c)] = sw * self.y[(i, c)];
            }
        }
        let qr = a.qr();
        let r = qr.r();
        check_rank(&r)?;
        qr.q_tr_mul(&mut b);
        let rhs = b.rows(0, m).into_owned();
        let z = r
            .solve_upper_triangular(&rhs)
            .ok_or(Error::RankDeficient { ratio: 0.0 })?;
        Ok((z, r))
    }
}

fn check_rank(r: &DMatrix<f64>) -> Result<()> {
    let diag: Vec<f64> = (0..r.ncols().min(r.nrows())).map(|i| r[(i, i)].abs()).collect();
    if diag.len() < r.ncols() {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio >= RANK_TOLERANCE) {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(())
}

/// Fits the local model on `neighbors` (sorted by distance from `center`).
///
/// With `omit_index = Some(j)` row `j` is removed from the weighted system;
/// the scaling radius and the weights of the remaining rows are unchanged.
pub fn fit(
    neighbors: &[&Sample],
    center: &[f64],
    order: PolyOrder,
    omit_index: Option<usize>,
) -> Result<PolyModel> {
    let system = WeightedSystem::build(neighbors, center, order)?;
    let n_def = basis_size(center.len(), order);
    let rows: Vec<usize> = match omit_index {
        Some(j) => {
            if j >= neighbors.len() {
                return Err(Error::InvalidArgument(format!("omit index {j} out of range")));
            }
            if neighbors.len() - 1 < n_def {
                return Err(Error::InsufficientSamples {
                    needed: n_def + 1,
                    available: neighbors.len(),
                });
            }
            (0..neighbors.len()).filter(|&i| i != j).collect()
        }
        None => (0..neighbors.len()).collect(),
    };
    let (z, _) = system.solve(&rows)?;
    Ok(PolyModel::from_coefficients(order, center, system.radius, &z))
}

/// A full fit together with every leave-one-out value at the center.
#[derive(Debug, Clone)]
pub struct CrossValidatedFit {
    pub model: PolyModel,
    /// `loo_values[i]` is the fit without neighbor `i`, evaluated at the
    /// center; `None` when dropping that neighbor leaves a singular system.
    pub loo_values: Vec<Option<Vec<f64>>>,
}

/// Fits the full model and obtains each leave-one-out prediction at the
/// center by a rank-one downdate of the full factorization.
///
/// Removing row `i` changes the coefficients by
/// `-(A^-1 phi_i) w_i r_i / (1 - h_i)` with `A = Phi^T W Phi = R^T R`,
/// residual `r_i` and leverage `h_i = w_i phi_i^T A^-1 phi_i`. Only the
/// constant coefficient is needed because the prediction is at the center.
pub fn fit_cross_validated(
    neighbors: &[&Sample],
    center: &[f64],
    order: PolyOrder,
) -> Result<CrossValidatedFit> {
    let system = WeightedSystem::build(neighbors, center, order)?;
    let all: Vec<usize> = (0..neighbors.len()).collect();
    let (z, r) = system.solve(&all)?;
    let model = PolyModel::from_coefficients(order, center, system.radius, &z);

    let m = r.ncols();
    let rt = r.transpose();
    let mut e0 = DVector::zeros(m);
    e0[0] = 1.0;
    let rho = rt
        .solve_lower_triangular(&e0)
        .ok_or(Error::RankDeficient { ratio: 0.0 })?;
    let n_def = m;
    let can_drop = neighbors.len() > n_def;

    let mut loo_values = Vec::with_capacity(neighbors.len());
    for i in 0..neighbors.len() {
        if !can_drop {
            loo_values.push(None);
            continue;
        }
        let w = system.weights[i];
        if w == 0.0 {
            loo_values.push(Some(model.constants.clone()));
            continue;
        }
        let phi_i = system.phi.row(i).transpose();
        let g = match rt.solve_lower_triangular(&phi_i) {
            Some(g) => g,
            None => {
                loo_values.push(None);
                continue;
            }
        };
        let leverage = w * g.norm_squared();
        if 1.0 - leverage < LEVERAGE_TOLERANCE {
            loo_values.push(None);
            continue;
        }
        let scale = rho.dot(&g) * w / (1.0 - leverage);
        let fitted = phi_i.transpose() * &z;
        let values = (0..z.ncols())
            .map(|j| {
                let residual = system.y[(i, j)] - fitted[(0, j)];
                model.constants[j] - scale * residual
            })
            .collect();
        loo_values.push(Some(values));
    }
    Ok(CrossValidatedFit { model, loo_values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples_from(points: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Sample> {
        points.iter().map(|p| Sample::new(p.clone(), f(p))).collect()
    }

    fn sorted_by_distance(mut s: Vec<Sample>, center: &[f64]) -> Vec<Sample> {
        s.sort_by(|a, b| distance(&a.location, center).total_cmp(&distance(&b.location, center)));
        s
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, center: &[f64], r: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|k| center[k] + r * rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn counts_match_formulae() {
        assert_eq!(sample_counts(6, PolyOrder::Quadratic, DEFAULT_LOW_D_FLOOR), FitSpec { n_def: 28, n: 69 });
        assert_eq!(sample_counts(2, PolyOrder::Linear, DEFAULT_LOW_D_FLOOR).n_def, 3);
        assert_eq!(sample_counts(2, PolyOrder::Quadratic, DEFAULT_LOW_D_FLOOR), FitSpec { n_def: 6, n: 9 });
        assert_eq!(sample_counts(6, PolyOrder::Linear, DEFAULT_LOW_D_FLOOR), FitSpec { n_def: 7, n: 18 });
        // A multiplier of exactly 2 must not round up past the product.
        assert_eq!(sample_counts(4, PolyOrder::Linear, 1.0).n, 10);
    }

    #[test]
    fn tricube_reference_values() {
        assert_eq!(tricube_weight(0.5, 0.5, 1.0), 1.0);
        assert_eq!(tricube_weight(1.0, 0.5, 1.0), 0.0);
        assert_eq!(tricube_weight(0.75, 0.5, 1.0), 0.669921875);
        assert_eq!(tricube_weight(1.5, 0.5, 1.0), 0.0);
        // Degenerate plateau.
        assert_eq!(tricube_weight(1.0, 1.0, 1.0), 1.0);
        assert_eq!(tricube_weight(1.0 + 1e-12, 1.0, 1.0), 0.0);
    }

    #[test]
    fn tricube_is_continuous() {
        let (r_def, r) = (0.3, 0.8);
        let grid: Vec<f64> = (0..=2000).map(|i| i as f64 * 1e-3).collect();
        for w in grid.windows(2) {
            let jump = (tricube_weight(w[1], r_def, r) - tricube_weight(w[0], r_def, r)).abs();
            assert!(jump < 1e-2, "jump {jump} between {} and {}", w[0], w[1]);
        }
        let eps = 1e-9;
        assert!((tricube_weight(r_def + eps, r_def, r) - 1.0).abs() < 1e-6);
        assert!(tricube_weight(r - eps, r_def, r) < 1e-6);
    }

    #[test]
    fn reproduces_linear_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 7, 2, &[0.0, 0.0], 1.0);
        let s = sorted_by_distance(samples_from(&pts, |p| vec![2.0 + 3.0 * p[0] - p[1]]), &[0.0, 0.0]);
        let refs: Vec<&Sample> = s.iter().collect();
        let model = fit(&refs, &[0.0, 0.0], PolyOrder::Linear, None).unwrap();
        assert!((model.constants()[0] - 2.0).abs() < 1e-8);
        let b = model.linear_terms(0);
        assert!((b[0] - 3.0).abs() < 1e-8 && (b[1] + 1.0).abs() < 1e-8);
        assert!(model.hessian(0).is_none());
    }

    #[test]
    fn reproduces_pure_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 12, 2, &[0.0, 0.0], 1.0);
        let s = sorted_by_distance(samples_from(&pts, |p| vec![p[0] * p[0]]), &[0.0, 0.0]);
        let refs: Vec<&Sample> = s.iter().collect();
        let model = fit(&refs, &[0.0, 0.0], PolyOrder::Quadratic, None).unwrap();
        let h = model.hessian(0).unwrap();
        assert!((h[0] - 2.0).abs() < 1e-8);
        for v in [h[1], h[2], h[3], model.constants()[0]] {
            assert!(v.abs() < 1e-8);
        }
        assert!(model.linear_terms(0).iter().all(|b| b.abs() < 1e-8));
        assert!((model.evaluate(&[3.0, 0.0])[0] - 9.0).abs() < 1e-7);
    }

    #[test]
    fn leave_one_out_on_exact_data_matches_full_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = [0.2, -0.1];
        let pts = random_points(&mut rng, 10, 2, &c, 0.5);
        let f = |p: &[f64]| vec![1.0 + p[0] - 2.0 * p[1] + p[0] * p[1] + 0.5 * p[1] * p[1]];
        let s = sorted_by_distance(samples_from(&pts, f), &c);
        let refs: Vec<&Sample> = s.iter().collect();
        let full = fit(&refs, &c, PolyOrder::Quadratic, None).unwrap();
        for j in 0..refs.len() {
            let loo = fit(&refs, &c, PolyOrder::Quadratic, Some(j));
            // The farthest point has zero weight; dropping any other may still
            // leave a full-rank system on random data.
            if let Ok(loo) = loo {
                for p in &pts {
                    assert!((loo.evaluate(p)[0] - full.evaluate(p)[0]).abs() < 1e-8);
                }
            }
        }
        let cv = fit_cross_validated(&refs, &c, PolyOrder::Quadratic).unwrap();
        for v in cv.loo_values.iter().flatten() {
            assert!((v[0] - full.constants()[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn evaluation_basics() {
        let zero = PolyModel::zero(PolyOrder::Quadratic, vec![1.0, 2.0], 0.5, 3);
        assert_eq!(zero.evaluate(&[10.0, -4.0]), vec![0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = [0.3, 0.4];
        let pts = random_points(&mut rng, 9, 2, &c, 0.3);
        let s = sorted_by_distance(samples_from(&pts, |p| vec![p[0].exp(), p[1].sin()]), &c);
        let refs: Vec<&Sample> = s.iter().collect();
        let model = fit(&refs, &c, PolyOrder::Quadratic, None).unwrap();
        assert_eq!(model.evaluate(&c), model.constants().to_vec());
        // Symmetric Hessian storage.
        let h = model.hessian(1).unwrap();
        assert_eq!(h[1], h[2]);
    }

    #[test]
    fn collinear_points_are_rank_deficient() {
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.1, i as f64 * 0.2]).collect();
        let s = sorted_by_distance(samples_from(&pts, |p| vec![p[0]]), &[0.0, 0.0]);
        let refs: Vec<&Sample> = s.iter().collect();
        assert!(matches!(
            fit(&refs, &[0.0, 0.0], PolyOrder::Linear, None),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn too_few_neighbors() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let s = samples_from(&pts, |p| vec![p[0]]);
        let refs: Vec<&Sample> = s.iter().collect();
        assert!(matches!(
            fit(&refs, &[0.0, 0.0], PolyOrder::Linear, None),
            Err(Error::InsufficientSamples { .. })
        ));
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = samples_from(&pts, |p| vec![p[0]]);
        let refs: Vec<&Sample> = s.iter().collect();
        assert!(fit(&refs, &[0.0, 0.0], PolyOrder::Linear, None).is_ok());
        assert!(matches!(
            fit(&refs, &[0.0, 0.0], PolyOrder::Linear, Some(0)),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn quadratic_error_is_third_order() {
        // Same point geometry scaled into balls of radius 0.4, 0.2, 0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let unit: Vec<Vec<f64>> = (0..40)
            .map(|_| loop {
                let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                if p[0] * p[0] + p[1] * p[1] <= 1.0 {
                    break p.to_vec();
                }
            })
            .collect();
        let c = [0.2, -0.3];
        let spec = sample_counts(2, PolyOrder::Quadratic, DEFAULT_LOW_D_FLOOR);
        let mut errors = Vec::new();
        for r in [0.4, 0.2, 0.1] {
            let pts: Vec<Vec<f64>> = unit.iter().map(|u| vec![c[0] + r * u[0], c[1] + r * u[1]]).collect();
            let s = sorted_by_distance(samples_from(&pts, |p| vec![p[0].exp()]), &c);
            let refs: Vec<&Sample> = s[..spec.n].iter().collect();
            let model = fit(&refs, &c, PolyOrder::Quadratic, None).unwrap();
            let ball = model.radius();
            let mut worst: f64 = 0.0;
            for i in -20..=20 {
                for j in -20..=20 {
                    let p = [c[0] + ball * i as f64 / 20.0, c[1] + ball * j as f64 / 20.0];
                    if distance(&p, &c) <= ball {
                        worst = worst.max((model.evaluate(&p)[0] - p[0].exp()).abs());
                    }
                }
            }
            errors.push(worst);
        }
        assert!(errors[0] / errors[1] >= 6.0, "{errors:?}");
        assert!(errors[1] / errors[2] >= 6.0, "{errors:?}");
    }
}
