//! The problem abstraction and the analytic and ODE benchmark problems.
//!
//! A [`Problem`] bundles an expensive deterministic map `f`, a prior and a
//! likelihood of the model outputs. Log-densities drop additive constants;
//! only differences enter the acceptance ratio.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The region where the prior density is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Unbounded,
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl Support {
    pub fn unit_cube(dimension: usize) -> Self {
        Support::Box {
            lower: vec![-1.0; dimension],
            upper: vec![1.0; dimension],
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            Support::Unbounded => true,
            Support::Box { lower, upper } => theta
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi),
        }
    }

    /// Clamps `theta` into the support componentwise.
    pub fn clamp(&self, theta: &mut [f64]) {
        if let Support::Box { lower, upper } = self {
            for (x, (lo, hi)) in theta.iter_mut().zip(lower.iter().zip(upper)) {
                *x = x.clamp(*lo, *hi);
            }
        }
    }
}

/// An inference problem: parameters `theta` of dimension `d`, an expensive
/// map to `n` outputs, and a posterior proportional to
/// `likelihood(f(theta)) * prior(theta)`.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// The expensive forward model.
    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// `-inf` exactly outside [`Problem::support`].
    fn log_prior(&self, theta: &[f64]) -> f64;

    /// Log-likelihood of the observed data given model outputs.
    fn log_likelihood(&self, outputs: &[f64]) -> f64;

    fn support(&self) -> Support;

    /// A draw from the prior, or `None` when the prior is improper.
    fn sample_prior(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }

    /// Exact log-posterior; skips the forward model outside the support.
    fn log_posterior(&self, theta: &[f64]) -> Result<f64> {
        let lp = self.log_prior(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        Ok(lp + self.log_likelihood(&self.evaluate(theta)?))
    }
}

/// Independent Gaussian observation errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoiseModel {
    pub data: Vec<f64>,
    pub sds: Vec<f64>,
}

impl GaussianNoiseModel {
    pub fn new(data: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        if data.len() != sds.len() {
            return Err(Error::DimensionMismatch {
                expected: data.len(),
                got: sds.len(),
            });
        }
        if sds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("noise standard deviations must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed data"));
        }
        Ok(Self { data, sds })
    }

    /// Data drawn as `outputs + sds * z`.
    pub fn synthetic<R: Rng + ?Sized>(outputs: &[f64], sds: Vec<f64>, rng: &mut R) -> Result<Self> {
        let data = outputs
            .iter()
            .zip(&sds)
            .map(|(o, s)| {
                let z: f64 = StandardNormal.sample(rng);
                o + s * z
            })
            .collect();
        Self::new(data, sds)
    }

    pub fn log_likelihood(&self, outputs: &[f64]) -> f64 {
        gaussian_loglike(outputs, self)
    }
}

/// `-1/2 sum ((d_i - out_i) / sigma_i)^2`, normalizing constants dropped.
pub fn gaussian_loglike(outputs: &[f64], noise: &GaussianNoiseModel) -> f64 {
    debug_assert_eq!(outputs.len(), noise.data.len());
    -0.5 * outputs
        .iter()
        .zip(noise.data.iter().zip(&noise.sds))
        .map(|(o, (d, s))| ((d - o) / s).powi(2))
        .sum::<f64>()
}

/// `log p(theta) = -theta_1^4 / 10 - (2 theta_2 - theta_1^2)^2 / 2`.
pub fn expquartic_logdensity(theta: &[f64]) -> f64 {
    let (a, b) = (theta[0], theta[1]);
    let r = 2.0 * b - a * a;
    -0.1 * a.powi(4) - 0.5 * r * r
}

/// The two-dimensional exponential-quartic target. The "forward model" is
/// the log-density itself, with a flat prior, so the output is the
/// log-posterior in either approximation mode.
#[derive(Debug, Clone, Default)]
pub struct ExpQuartic;

impl Problem for ExpQuartic {
    fn name(&self) -> &str {
        "exp_quartic"
    }

    fn dimension(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![expquartic_logdensity(theta)])
    }

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn log_likelihood(&self, outputs: &[f64]) -> f64 {
        outputs[0]
    }

    fn support(&self) -> Support {
        Support::Unbounded
    }
}

/// A Gaussian log-density `-1/2 (x - m)^T C^-1 (x - m)` exposed like
/// [`ExpQuartic`]: a globally quadratic log-target for exactness and sanity
/// checks.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::InvalidArgument("target covariance is not positive definite".into()))?;
        Ok(Self {
            mean,
            precision: chol.inverse(),
            covariance,
        })
    }

    pub fn standard(dimension: usize) -> Self {
        Self::new(vec![0.0; dimension], DMatrix::identity(dimension, dimension)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

impl Problem for GaussianTarget {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn dimension(&self) -> usize {
        self.mean.len()
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let r = DVector::from_iterator(theta.len(), theta.iter().zip(&self.mean).map(|(x, m)| x - m));
        Ok(vec![-0.5 * (&self.precision * &r).dot(&r)])
    }

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn log_likelihood(&self, outputs: &[f64]) -> f64 {
        outputs[0]
    }

    fn support(&self) -> Support {
        Support::Unbounded
    }
}

/// Nominal values of `(alpha1, alpha2, beta, gamma, eta, K)`.
pub const TOGGLE_NOMINAL: [f64; 6] = [156.25, 15.6, 2.5, 1.0, 2.0015, 2.9618e-5];

/// Relative half-widths of the parameter ranges.
pub const TOGGLE_SPREAD: [f64; 6] = [0.20, 0.15, 0.15, 0.15, 0.30, 0.2];

/// Normalizing steady state for the observed `v`.
pub const TOGGLE_V_REF: f64 = 15.5990;

/// Observed `v / v_ref` values of the published data set.
pub const TOGGLE_DATA: [f64; 6] = [0.00798491, 1.07691684, 1.05514201, 0.95429837, 1.02147051, 1.0];

/// Observation standard deviations of the published data set.
pub const TOGGLE_SDS: [f64; 6] = [4.0e-5, 0.005, 0.005, 0.005, 0.005, 0.005];

/// Outputs below this `v / v_ref` count as the low state of the switch.
pub const TOGGLE_LOW_STATE: f64 = 0.5;

/// Published observation error for an output in the state of `output`:
/// the first table entry for the low state, the others for the high state.
pub fn toggle_state_sd(output: f64) -> f64 {
    if output < TOGGLE_LOW_STATE {
        TOGGLE_SDS[0]
    } else {
        TOGGLE_SDS[1]
    }
}

/// Maps normalized parameters in `[-1, 1]^6` to physical values
/// `Z_i = nominal_i (1 + spread_i theta_i)`.
///
/// The components are, in order, the two maximal synthesis rates
/// `alpha1, alpha2`, the cooperativities `beta, gamma`, the IPTG
/// cooperativity exponent `eta` and the IPTG dissociation constant `K`.
pub fn toggle_denormalize(theta: &[f64]) -> [f64; 6] {
    let mut z = [0.0; 6];
    for i in 0..6 {
        z[i] = TOGGLE_NOMINAL[i] * (1.0 + TOGGLE_SPREAD[i] * theta[i]);
    }
    z
}

/// Steady state of the toggle switch at one inducer concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToggleState {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

const TOGGLE_MAX_ITER: usize = 100_000;
const TOGGLE_TOL: f64 = 1e-10;

/// Steady state of
/// `du/dt = alpha1 / (1 + v^beta) - u`, `dv/dt = alpha2 / (1 + w^gamma) - v`,
/// `w = u / (1 + iptg / K)^eta`, found by fixed-point iteration from
/// `(alpha1 / 2, alpha2 / 2)`; a half-damped iteration is tried if the plain
/// one does not settle.
pub fn toggle_steady_state(z: &[f64; 6], iptg: f64) -> Result<ToggleState> {
    toggle_steady_state_from(z, iptg, z[0] / 2.0, z[1] / 2.0)
}

/// [`toggle_steady_state`] from an arbitrary initial state.
pub fn toggle_steady_state_from(z: &[f64; 6], iptg: f64, u0: f64, v0: f64) -> Result<ToggleState> {
    let [alpha1, alpha2, beta, gamma, eta, k] = *z;
    if z.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(iptg >= 0.0) {
        return Err(Error::ModelFailure(format!("invalid toggle parameters {z:?}, iptg {iptg}")));
    }
    let induction = (1.0 + iptg / k).powf(eta);
    let sweep = |v: f64| {
        let u = alpha1 / (1.0 + v.powf(beta));
        let w = u / induction;
        (u, w, alpha2 / (1.0 + w.powf(gamma)))
    };
    for damping in [1.0, 0.5] {
        let mut u = u0;
        let mut v = v0;
        for _ in 0..TOGGLE_MAX_ITER {
            let (un, _, vn) = sweep(v);
            let next = damping * vn + (1.0 - damping) * v;
            let change = (next - v).abs();
            u = un;
            v = next;
            if change <= TOGGLE_TOL * v.abs() {
                let (u, w, _) = sweep(v);
                return Ok(ToggleState { u, v, w });
            }
        }
        log::debug!("toggle iteration did not settle with damping {damping} (u={u}, v={v})");
    }
    Err(Error::ModelFailure(format!(
        "toggle steady state did not converge for {z:?} at iptg {iptg}"
    )))
}

/// `v / v_ref` at each inducer concentration.
pub fn toggle_forward(theta: &[f64], iptg: &[f64]) -> Result<Vec<f64>> {
    let z = toggle_denormalize(theta);
    iptg.iter()
        .map(|&c| toggle_steady_state(&z, c).map(|s| s.v / TOGGLE_V_REF))
        .collect()
}

/// The genetic toggle-switch calibration problem: uniform prior on
/// `[-1, 1]^6`, Gaussian observation errors on `v / v_ref`.
#[derive(Debug, Clone)]
pub struct ToggleSwitch {
    iptg: Vec<f64>,
    noise: GaussianNoiseModel,
}

impl ToggleSwitch {
    pub fn new(iptg: Vec<f64>, noise: GaussianNoiseModel) -> Result<Self> {
        if iptg.is_empty() || iptg.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument("IPTG concentrations must be nonnegative".into()));
        }
        if iptg.len() != noise.data.len() {
            return Err(Error::DimensionMismatch {
                expected: iptg.len(),
                got: noise.data.len(),
            });
        }
        Ok(Self { iptg, noise })
    }

    /// Synthetic data generated at `theta_true`, each observation with
    /// the published error of the state it lands in.
    pub fn synthetic<R: Rng + ?Sized>(iptg: Vec<f64>, theta_true: &[f64], rng: &mut R) -> Result<Self> {
        let outputs = toggle_forward(theta_true, &iptg)?;
        let sds = outputs.iter().map(|&o| toggle_state_sd(o)).collect();
        Self::synthetic_with_sds(iptg, theta_true, sds, rng)
    }

    /// Synthetic data generated at `theta_true` with explicit errors.
    pub fn synthetic_with_sds<R: Rng + ?Sized>(
        iptg: Vec<f64>,
        theta_true: &[f64],
        sds: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if theta_true.len() != 6 {
            return Err(Error::DimensionMismatch {
                expected: 6,
                got: theta_true.len(),
            });
        }
        if sds.len() != iptg.len() {
            return Err(Error::DimensionMismatch {
                expected: iptg.len(),
                got: sds.len(),
            });
        }
        let outputs = toggle_forward(theta_true, &iptg)?;
        let noise = GaussianNoiseModel::synthetic(&outputs, sds, rng)?;
        Self::new(iptg, noise)
    }

    pub fn iptg(&self) -> &[f64] {
        &self.iptg
    }

    pub fn noise(&self) -> &GaussianNoiseModel {
        &self.noise
    }
}

impl Problem for ToggleSwitch {
    fn name(&self) -> &str {
        "toggle_switch"
    }

    fn dimension(&self) -> usize {
        6
    }

    fn output_dim(&self) -> usize {
        self.iptg.len()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        toggle_forward(theta, &self.iptg)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if self.support().contains(theta) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn log_likelihood(&self, outputs: &[f64]) -> f64 {
        self.noise.log_likelihood(outputs)
    }

    fn support(&self) -> Support {
        Support::unit_cube(6)
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        Some((0..6).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }
}
