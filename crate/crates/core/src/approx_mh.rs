//! The surrogate-driven Metropolis-Hastings kernel.
//!
//! Every step proposes `theta+` from the current state `theta-`, builds local
//! approximations of the log-posterior at both points from the evaluated
//! sample set, and accepts with the resulting nominal probability. Before
//! accepting, the kernel may refine the sample set: at random with a slowly
//! decaying probability `beta_t`, or where the cross-validation indicators
//! show that the acceptance probability is sensitive to the local fit (above
//! the threshold `gamma_t`). A refinement evaluates the true model at a point
//! near the chosen site that is as far as possible from the existing samples.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_models::{Problem, Support};
use crate::local_gp::{
    gp_draw, gp_sample_count, optimize_hyperparameters, select_neighbors, GpHyperparameters, GpModel, GpOptions,
    HyperMode,
};
use crate::local_poly::{fit_cross_validated, sample_counts, PolyOrder, DEFAULT_LOW_D_FLOOR};
use crate::moments::RunningMoments;
use crate::rng::ChainRngs;
use crate::sample_store::{Sample, SampleSet, DEFAULT_DEDUP_TOLERANCE};

/// What the local surrogates approximate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// A scalar surrogate of `log(likelihood * prior)`.
    ApproximateLogPosterior,
    /// One surrogate per model output; prior and likelihood are exact.
    ApproximateForwardModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxKind {
    Linear,
    Quadratic,
    GaussianProcess,
}

impl ApproxKind {
    fn poly_order(self) -> Option<PolyOrder> {
        match self {
            ApproxKind::Linear => Some(PolyOrder::Linear),
            ApproxKind::Quadratic => Some(PolyOrder::Quadratic),
            ApproxKind::GaussianProcess => None,
        }
    }
}

/// `beta_t = beta0 t^-beta_exp` and `gamma_t = gamma0 t^-gamma_exp` for the
/// one-based step index `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSchedule {
    pub beta0: f64,
    pub beta_exp: f64,
    pub gamma0: f64,
    pub gamma_exp: f64,
}

impl Default for RefinementSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.01,
            beta_exp: 0.2,
            gamma0: 0.1,
            gamma_exp: 0.1,
        }
    }
}

impl RefinementSchedule {
    /// Never refines.
    pub fn disabled() -> Self {
        Self {
            beta0: 0.0,
            beta_exp: 0.0,
            gamma0: f64::INFINITY,
            gamma_exp: 0.0,
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta0 * (t.max(1) as f64).powf(-self.beta_exp)
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma0 * (t.max(1) as f64).powf(-self.gamma_exp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta0) {
            return Err(Error::Config(format!("schedule.beta0 = {} is not in [0, 1]", self.beta0)));
        }
        if !(self.beta_exp >= 0.0 && self.beta_exp.is_finite()) {
            return Err(Error::Config("schedule.beta_exp must be nonnegative".into()));
        }
        if !(self.gamma0 > 0.0) {
            return Err(Error::Config("schedule.gamma0 must be positive".into()));
        }
        if !(self.gamma_exp >= 0.0 && self.gamma_exp.is_finite()) {
            return Err(Error::Config("schedule.gamma_exp must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Symmetric Gaussian proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalConfig {
    RandomWalk {
        covariance: Vec<Vec<f64>>,
    },
    /// Uses `initial_covariance` for the first `adaptation_start` steps, then
    /// `2.4^2 / d (C + epsilon I)` with `C` the covariance of the chain so far.
    AdaptiveMetropolis {
        initial_covariance: Vec<Vec<f64>>,
        adaptation_start: usize,
        epsilon: f64,
    },
}

impl ProposalConfig {
    /// Random walk with covariance `variance * I`.
    pub fn isotropic(dimension: usize, variance: f64) -> Self {
        ProposalConfig::RandomWalk {
            covariance: diagonal_rows(dimension, variance),
        }
    }

    fn initial_covariance(&self) -> &[Vec<f64>] {
        match self {
            ProposalConfig::RandomWalk { covariance } => covariance,
            ProposalConfig::AdaptiveMetropolis {
                initial_covariance, ..
            } => initial_covariance,
        }
    }
}

pub(crate) fn diagonal_rows(dimension: usize, value: f64) -> Vec<Vec<f64>> {
    (0..dimension)
        .map(|i| (0..dimension).map(|j| if i == j { value } else { 0.0 }).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], dimension: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dimension || rows.iter().any(|r| r.len() != dimension) {
        return Err(Error::Config(format!("proposal covariance must be {dimension}x{dimension}")));
    }
    let m = DMatrix::from_fn(dimension, dimension, |i, j| rows[i][j]);
    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config("proposal covariance must be symmetric".into()));
    }
    Ok(m)
}

/// The proposal's mutable state.
#[derive(Debug, Clone)]
pub struct Proposal {
    config: ProposalConfig,
    factor: DMatrix<f64>,
    history: RunningMoments,
}

impl Proposal {
    pub fn new(config: &ProposalConfig, dimension: usize) -> Result<Self> {
        let cov = matrix_from_rows(config.initial_covariance(), dimension)?;
        let factor = Cholesky::new(cov)
            .ok_or_else(|| Error::Config("proposal covariance must be positive definite".into()))?
            .unpack();
        if let ProposalConfig::AdaptiveMetropolis { epsilon, .. } = config {
            if !(*epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(Error::Config("proposal.epsilon must be nonnegative".into()));
            }
        }
        Ok(Self {
            config: config.clone(),
            factor,
            history: RunningMoments::new(dimension),
        })
    }

    /// `current + L z` with `L L^T` the current proposal covariance.
    pub fn propose<R: Rng + ?Sized>(&self, current: &[f64], rng: &mut R) -> Vec<f64> {
        let d = current.len();
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let step = &self.factor * z;
        current.iter().zip(step.iter()).map(|(c, s)| c + s).collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Records the chain's new state and adapts the covariance if enabled.
    pub fn update(&mut self, position: &[f64]) {
        self.history.push(position);
        let ProposalConfig::AdaptiveMetropolis {
            adaptation_start,
            epsilon,
            ..
        } = self.config
        else {
            return;
        };
        if self.history.count() < adaptation_start.max(2) {
            return;
        }
        let Some(empirical) = self.history.covariance() else {
            return;
        };
        let d = position.len();
        let scale = 2.4 * 2.4 / d as f64;
        let mut eps = epsilon;
        for _ in 0..20 {
            let cov = (&empirical + DMatrix::identity(d, d) * eps) * scale;
            if let Some(chol) = Cholesky::new(cov) {
                self.factor = chol.unpack();
                return;
            }
            eps = if eps > 0.0 { eps * 10.0 } else { 1e-12 * empirical.diagonal().amax().max(1e-300) };
        }
        log::warn!("adaptive covariance stayed singular; keeping the previous proposal");
    }
}

/// How the initial sample set is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedMode {
    /// Uniform in the ball of this radius about the chain's start.
    AroundStart { radius: f64 },
    FromPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedingConfig {
    pub mode: SeedMode,
    /// Defaults to one more than the approximation's sample count.
    pub count: Option<usize>,
}

impl Default for SeedingConfig {
    fn default() -> Self {
        Self {
            mode: SeedMode::AroundStart { radius: 1.0 },
            count: None,
        }
    }
}

/// When local GP hyperparameters are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpHyperUpdate {
    /// Batch estimates and a final optimization for every fit.
    EveryFit,
    /// Optimize, warm-started from the last values, only at the first fit
    /// after the sample set has grown by `gp_refresh_growth`; reuse the
    /// values otherwise.
    OnGrowth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub target_mode: TargetMode,
    pub approx_kind: ApproxKind,
    pub proposal: ProposalConfig,
    /// Indicator and random refinements allowed per step; `None` is
    /// unlimited. Refinements forced by failed fits do not count.
    pub max_refinements_per_step: Option<usize>,
    pub schedule: RefinementSchedule,
    pub seed: u64,
    pub steps: usize,
    pub seeding: SeedingConfig,
    /// Lower bound on the `N / N_def` ratio for polynomial fits.
    pub low_d_floor: f64,
    pub gp: GpOptions,
    pub gp_hyper_update: GpHyperUpdate,
    /// Relative growth of the sample set that triggers a new optimization
    /// under [`GpHyperUpdate::OnGrowth`]; zero means any growth.
    pub gp_refresh_growth: f64,
    /// Objective evaluations for one maximin refinement search.
    pub maximin_budget: usize,
    pub dedup_tolerance: f64,
    /// Refinements forced by failing fits within one step before giving up.
    pub max_forced_refinements: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            target_mode: TargetMode::ApproximateLogPosterior,
            approx_kind: ApproxKind::Quadratic,
            proposal: ProposalConfig::isotropic(2, 1.0),
            max_refinements_per_step: Some(2),
            schedule: RefinementSchedule::default(),
            seed: 0,
            steps: 1000,
            seeding: SeedingConfig::default(),
            low_d_floor: DEFAULT_LOW_D_FLOOR,
            gp: GpOptions::default(),
            gp_hyper_update: GpHyperUpdate::OnGrowth,
            gp_refresh_growth: 0.0,
            maximin_budget: 200,
            dedup_tolerance: DEFAULT_DEDUP_TOLERANCE,
            max_forced_refinements: 50,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self, dimension: usize) -> Result<()> {
        self.schedule.validate()?;
        Proposal::new(&self.proposal, dimension)?;
        self.gp.priors.validate()?;
        if !(self.low_d_floor >= 1.0) {
            return Err(Error::Config("low_d_floor must be at least 1".into()));
        }
        if !(self.gp_refresh_growth >= 0.0 && self.gp_refresh_growth.is_finite()) {
            return Err(Error::Config("gp_refresh_growth must be a nonnegative number".into()));
        }
        if self.maximin_budget == 0 {
            return Err(Error::Config("maximin_budget must be positive".into()));
        }
        if let SeedMode::AroundStart { radius } = self.seeding.mode {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(Error::Config("seeding.mode.radius must be positive".into()));
            }
        }
        if let Some(count) = self.seeding.count {
            let needed = self.sample_count(dimension) + 1;
            if count < needed {
                return Err(Error::Config(format!(
                    "seeding.count = {count} is below the {needed} samples the first fit needs"
                )));
            }
        }
        Ok(())
    }

    /// Samples per local fit (`N`).
    pub fn sample_count(&self, dimension: usize) -> usize {
        match self.approx_kind.poly_order() {
            Some(order) => sample_counts(dimension, order, self.low_d_floor).n,
            None => gp_sample_count(dimension, self.gp.min_samples),
        }
    }
}

/// `exp(min(0, x))`, i.e. `min(1, e^x)`, with `-inf -> 0`.
fn capped(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// `zeta = exp(lp_plus - lp_minus)` and `alpha = min(1, zeta)`. A current
/// state of zero density accepts any move to positive density; two states of
/// zero density stay put.
pub fn acceptance_quantities(logpost_plus: f64, logpost_minus: f64) -> (f64, f64) {
    match (logpost_plus == f64::NEG_INFINITY, logpost_minus == f64::NEG_INFINITY) {
        (true, true) => (0.0, 0.0),
        (false, true) => (f64::INFINITY, 1.0),
        _ => {
            let diff = logpost_plus - logpost_minus;
            (diff.exp(), capped(diff))
        }
    }
}

/// One term of the indicator maximum for nominal `log zeta` and a perturbed
/// `log zeta`: `|min(1, z) - min(1, z')| + |min(1, 1/z) - min(1, 1/z')|`.
pub fn indicator_term(log_zeta: f64, log_zeta_perturbed: f64) -> f64 {
    if log_zeta.is_nan() || log_zeta_perturbed.is_nan() {
        return f64::INFINITY;
    }
    (capped(log_zeta) - capped(log_zeta_perturbed)).abs() + (capped(-log_zeta) - capped(-log_zeta_perturbed)).abs()
}

/// A local estimate of the log-posterior at one point together with its
/// perturbations: leave-one-out refits for polynomials, predictive draws
/// for GPs. `None` marks a perturbation that could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub log_post: f64,
    pub perturbed: Vec<Option<f64>>,
}

/// `(eps_plus, eps_minus)` from the estimates at both points. Perturbing the
/// plus side changes `log zeta` to `p_j - lp_minus`, the minus side to
/// `lp_plus - p_j`. Missing perturbations make the indicator infinite.
pub fn cv_indicators(plus: &LocalEstimate, minus: &LocalEstimate) -> (f64, f64) {
    let log_zeta = plus.log_post - minus.log_post;
    let side = |perturbed: &[Option<f64>], shift: &dyn Fn(f64) -> f64| {
        perturbed.iter().fold(0.0f64, |acc, p| match p {
            Some(v) => acc.max(indicator_term(log_zeta, shift(*v))),
            None => f64::INFINITY,
        })
    };
    let eps_plus = side(&plus.perturbed, &|p| p - minus.log_post);
    let eps_minus = side(&minus.perturbed, &|p| plus.log_post - p);
    (eps_plus, eps_minus)
}

/// Result of a maximin search.
#[derive(Debug, Clone)]
pub struct MaximinResult {
    /// Best point found.
    pub point: Vec<f64>,
    /// Its distance to the nearest candidate.
    pub min_distance: f64,
    /// Every evaluated point with its objective, best first.
    pub trail: Vec<(Vec<f64>, f64)>,
}

fn nearest_distance(x: &[f64], candidates: &[&[f64]]) -> f64 {
    candidates
        .iter()
        .map(|c| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn project(x: &mut [f64], theta: &[f64], radius: f64, support: &Support) {
    support.clamp(x);
    let dist = x.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist > radius {
        let s = radius / dist;
        for (xi, ti) in x.iter_mut().zip(theta) {
            *xi = ti + (*xi - ti) * s;
        }
    }
}

/// Locally maximizes `min_c |x - c|` over `|x - theta| <= radius` (and the
/// support) by a pattern search started at `theta`: coordinate and random
/// diagonal polls of step `radius / 2`, halving the step whenever no poll
/// improves.
pub fn maximin_point<R: Rng + ?Sized>(
    theta: &[f64],
    radius: f64,
    candidates: &[&[f64]],
    support: &Support,
    budget: usize,
    rng: &mut R,
) -> MaximinResult {
    let d = theta.len();
    let mut x = theta.to_vec();
    project(&mut x, theta, radius, support);
    let mut fx = nearest_distance(&x, candidates);
    let mut trail = vec![(x.clone(), fx)];
    let mut evals = 1;
    let mut step = 0.5 * radius;
    let min_step = 1e-6 * radius;
    while evals < budget && step > min_step {
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(2 * d + 4);
        for m in 0..d {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; d];
                e[m] = sign;
                directions.push(e);
            }
        }
        for _ in 0..2 {
            let v: Vec<f64> = (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
            let norm = (d as f64).sqrt();
            directions.push(v.iter().map(|c| c / norm).collect());
            directions.push(v.iter().map(|c| -c / norm).collect());
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for dir in &directions {
            if evals >= budget {
                break;
            }
            let mut y: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + step * b).collect();
            project(&mut y, theta, radius, support);
            let fy = nearest_distance(&y, candidates);
            evals += 1;
            trail.push((y.clone(), fy));
            if fy > fx && best.as_ref().is_none_or(|(_, fb)| fy > *fb) {
                best = Some((y, fy));
            }
        }
        match best {
            Some((y, fy)) => {
                x = y;
                fx = fy;
            }
            None => step *= 0.5,
        }
    }
    trail.sort_by(|a, b| b.1.total_cmp(&a.1));
    MaximinResult {
        point: x,
        min_distance: fx,
        trail,
    }
}

/// Why a refinement happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementCause {
    Random,
    Cv,
    /// A local fit failed (too few or degenerate samples).
    FitFailure,
}

impl RefinementCause {
    pub fn label(self) -> &'static str {
        match self {
            RefinementCause::Random => "random",
            RefinementCause::Cv => "cv",
            RefinementCause::FitFailure => "fit_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Plus,
    Minus,
}

impl Site {
    pub fn label(self) -> &'static str {
        match self {
            Site::Plus => "plus",
            Site::Minus => "minus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub step: usize,
    pub cause: RefinementCause,
    pub site: Site,
}

/// One step of the chain as recorded in traces.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub position: Vec<f64>,
    pub accepted: bool,
    /// Cumulative true-model evaluations after this step.
    pub model_evals: usize,
    /// Indicators before any refinement in this step; `NaN` when the
    /// proposal was rejected outright or no indicators were computed.
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub refinements: Vec<(RefinementCause, Site)>,
}

/// Evaluates the quantity a sample stores: the model outputs, or the
/// log-posterior as a 1-vector.
fn sample_values(problem: &dyn Problem, mode: TargetMode, theta: &[f64]) -> Result<Vec<f64>> {
    let values = match mode {
        TargetMode::ApproximateForwardModel => problem.evaluate(theta)?,
        TargetMode::ApproximateLogPosterior => vec![problem.log_posterior(theta)?],
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelFailure(format!("non-finite model output at {theta:?}")));
    }
    Ok(values)
}

fn output_dim(problem: &dyn Problem, mode: TargetMode) -> usize {
    match mode {
        TargetMode::ApproximateForwardModel => problem.output_dim(),
        TargetMode::ApproximateLogPosterior => 1,
    }
}

const SEED_ATTEMPTS: usize = 100;

/// Evaluates the model at `count` seed points. Points outside the support or
/// where the model fails are redrawn up to 100 times each. Returns the set
/// and the number of model evaluations spent.
pub fn seed_sample_set(
    problem: &dyn Problem,
    mode: TargetMode,
    start: &[f64],
    count: usize,
    seed_mode: &SeedMode,
    dedup_tolerance: f64,
    rng: &mut dyn RngCore,
) -> Result<(SampleSet, usize)> {
    let d = problem.dimension();
    if start.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: start.len(),
        });
    }
    let support = problem.support();
    let mut set = SampleSet::with_tolerance(d, output_dim(problem, mode), dedup_tolerance);
    let mut evals = 0;
    while set.len() < count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > SEED_ATTEMPTS {
                return Err(Error::ModelFailure(format!(
                    "no usable seed point after {SEED_ATTEMPTS} attempts"
                )));
            }
            let point = match seed_mode {
                SeedMode::AroundStart { radius } => {
                    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                    start.iter().zip(&z).map(|(s, v)| s + r * v / norm).collect::<Vec<f64>>()
                }
                SeedMode::FromPrior => problem
                    .sample_prior(rng)
                    .ok_or_else(|| Error::Config("seeding from the prior needs a proper prior".into()))?,
            };
            if !support.contains(&point) || set.is_duplicate(&point) {
                continue;
            }
            evals += 1;
            match sample_values(problem, mode, &point) {
                Ok(values) => {
                    set.insert(Sample::new(point, values))?;
                    break;
                }
                Err(Error::ModelFailure(msg)) => {
                    log::debug!("seed point rejected: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((set, evals))
}

/// Builds local estimates of the log-posterior and caches recent ones.
struct Approximator {
    kind: ApproxKind,
    mode: TargetMode,
    n: usize,
    gp: GpOptions,
    gp_update: GpHyperUpdate,
    gp_refresh_growth: f64,
    /// Hyperparameters and the sample-set size they were fitted at.
    gp_hyper: Option<(GpHyperparameters, usize)>,
    /// Recent polynomial estimates or GP models keyed by point and set size.
    cache: VecDeque<(Vec<u64>, usize, Cached)>,
}

#[derive(Clone)]
enum Cached {
    Poly(LocalEstimate),
    Gp(Box<GpModel>),
}

fn point_key(theta: &[f64]) -> Vec<u64> {
    theta.iter().map(|v| v.to_bits()).collect()
}

impl Approximator {
    fn new(config: &ChainConfig, dimension: usize) -> Self {
        Self {
            kind: config.approx_kind,
            mode: config.target_mode,
            n: config.sample_count(dimension),
            gp: config.gp.clone(),
            gp_update: config.gp_hyper_update,
            gp_refresh_growth: config.gp_refresh_growth,
            gp_hyper: None,
            cache: VecDeque::with_capacity(3),
        }
    }

    fn log_post(&self, problem: &dyn Problem, theta: &[f64], values: &[f64]) -> f64 {
        match self.mode {
            TargetMode::ApproximateLogPosterior => values[0],
            TargetMode::ApproximateForwardModel => problem.log_prior(theta) + problem.log_likelihood(values),
        }
    }

    fn estimate(
        &mut self,
        problem: &dyn Problem,
        set: &SampleSet,
        theta: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<LocalEstimate> {
        let key = point_key(theta);
        let hit = self
            .cache
            .iter()
            .find(|(k, len, _)| *len == set.len() && *k == key)
            .map(|(_, _, c)| c.clone());
        let cached = match hit {
            Some(c) => c,
            None => {
                let fresh = match self.kind.poly_order() {
                    Some(order) => Cached::Poly(self.fit_poly(problem, set, theta, order)?),
                    None => Cached::Gp(Box::new(self.fit_gp(set, theta, rng)?)),
                };
                if self.cache.len() == 3 {
                    self.cache.pop_front();
                }
                self.cache.push_back((key, set.len(), fresh.clone()));
                fresh
            }
        };
        Ok(match cached {
            Cached::Poly(e) => e,
            Cached::Gp(model) => {
                let prediction = model.predict(theta);
                let mean: Vec<f64> = prediction.iter().map(|(m, _)| *m).collect();
                let perturbed = (0..self.n)
                    .map(|_| Some(self.log_post(problem, theta, &gp_draw(&prediction, rng))))
                    .collect();
                LocalEstimate {
                    log_post: self.log_post(problem, theta, &mean),
                    perturbed,
                }
            }
        })
    }

    fn fit_poly(&self, problem: &dyn Problem, set: &SampleSet, theta: &[f64], order: PolyOrder) -> Result<LocalEstimate> {
        let hood = set.nearest_with_ties(theta, self.n)?;
        let refs: Vec<&Sample> = hood.indices().map(|i| set.get(i)).collect();
        let fit = fit_cross_validated(&refs, theta, order)?;
        Ok(LocalEstimate {
            log_post: self.log_post(problem, theta, fit.model.constants()),
            perturbed: fit
                .loo_values
                .iter()
                .map(|v| v.as_ref().map(|v| self.log_post(problem, theta, v)))
                .collect(),
        })
    }

    fn fit_gp(&mut self, set: &SampleSet, theta: &[f64], rng: &mut dyn RngCore) -> Result<GpModel> {
        let reuse = match (&self.gp_hyper, self.gp_update) {
            (Some((h, len)), GpHyperUpdate::OnGrowth)
                if set.len() == *len || (set.len() as f64) < *len as f64 * (1.0 + self.gp_refresh_growth) =>
            {
                Some(h.clone())
            }
            _ => None,
        };
        if let Some(hyper) = reuse {
            let sel = select_neighbors(set, theta, self.n, &self.gp, HyperMode::Fixed(&hyper), rng)?;
            let refs: Vec<&Sample> = sel.indices.iter().map(|&i| set.get(i)).collect();
            return GpModel::condition(&refs, sel.frame, hyper, &self.gp);
        }
        let warm = match self.gp_update {
            GpHyperUpdate::OnGrowth => self.gp_hyper.as_ref().map(|(h, _)| h.clone()),
            GpHyperUpdate::EveryFit => None,
        };
        // Later refreshes polish the previous optimum from a single start.
        let opts = match warm {
            Some(_) => GpOptions {
                starts: 1,
                ..self.gp.clone()
            },
            None => self.gp.clone(),
        };
        let sel = select_neighbors(
            set,
            theta,
            self.n,
            &opts,
            HyperMode::Estimate {
                warm_start: warm.as_ref(),
            },
            rng,
        )?;
        let refs: Vec<&Sample> = sel.indices.iter().map(|&i| set.get(i)).collect();
        let start = sel.hyperparameters.as_ref().or(warm.as_ref());
        let hyper = optimize_hyperparameters(&refs, &sel.frame, &opts, start, rng)?;
        let model = GpModel::condition(&refs, sel.frame, hyper, &self.gp)?;
        self.gp_hyper = Some((model.hyperparameters().clone(), set.len()));
        Ok(model)
    }
}

/// Mutable state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    /// Steps taken so far.
    pub step: usize,
    pub sample_set: SampleSet,
    /// True-model evaluations, seeds included.
    pub model_evals: usize,
    pub seed_evals: usize,
    pub refinement_log: Vec<RefinementEvent>,
    pub proposal: Proposal,
}

/// Evaluates the true model near `theta` at a local maximin point and adds
/// it to `set`. Returns the inserted point and the evaluations spent.
#[allow(clippy::too_many_arguments)]
pub fn refine_near(
    problem: &dyn Problem,
    mode: TargetMode,
    set: &mut SampleSet,
    theta: &[f64],
    n: usize,
    budget: usize,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, usize)> {
    let k = n.min(set.len());
    let radius = set.nearest(theta, k)?.radius;
    if radius <= 0.0 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            available: set.len(),
        });
    }
    let ball = set.within_ball(theta, 3.0 * radius)?;
    let candidates: Vec<&[f64]> = ball.iter().map(|nb| set.get(nb.index).location.as_slice()).collect();
    let result = maximin_point(theta, radius, &candidates, &problem.support(), budget, rng);
    let tol = set.dedup_tolerance();
    let mut options = result.trail.iter().filter(|(p, f)| *f > tol && !set.is_duplicate(p));
    let mut evals = 0;
    for attempt in 0..2 {
        let Some((point, _)) = options.next() else {
            break;
        };
        evals += 1;
        match sample_values(problem, mode, point) {
            Ok(values) => {
                let point = point.clone();
                set.insert(Sample::new(point.clone(), values))?;
                return Ok((point, evals));
            }
            Err(Error::ModelFailure(msg)) => {
                log::warn!("refinement point failed (attempt {}): {msg}", attempt + 1);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::ModelFailure(format!(
        "no usable refinement point near {theta:?} ({evals} failed evaluations)"
    )))
}

/// A surrogate-driven chain.
pub struct Chain<'p> {
    problem: &'p dyn Problem,
    config: ChainConfig,
    state: ChainState,
    rngs: ChainRngs,
    approximator: Approximator,
}

impl<'p> Chain<'p> {
    /// Seeds the sample set per the configuration and positions the chain at
    /// `initial`.
    pub fn new(problem: &'p dyn Problem, config: ChainConfig, initial: &[f64]) -> Result<Self> {
        let d = problem.dimension();
        config.validate(d)?;
        let mut rngs = ChainRngs::new(config.seed);
        let count = config.seeding.count.unwrap_or(config.sample_count(d) + 1);
        let (set, evals) = seed_sample_set(
            problem,
            config.target_mode,
            initial,
            count,
            &config.seeding.mode,
            config.dedup_tolerance,
            &mut rngs.seeding,
        )?;
        Self::with_sample_set(problem, config, initial, set, evals, rngs)
    }

    /// Starts from an existing sample set whose creation cost `seed_evals`.
    pub fn with_sample_set(
        problem: &'p dyn Problem,
        config: ChainConfig,
        initial: &[f64],
        set: SampleSet,
        seed_evals: usize,
        rngs: ChainRngs,
    ) -> Result<Self> {
        let d = problem.dimension();
        config.validate(d)?;
        if initial.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: initial.len(),
            });
        }
        if problem.log_prior(initial) == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument("initial point has zero prior density".into()));
        }
        let mut proposal = Proposal::new(&config.proposal, d)?;
        proposal.update(initial);
        let approximator = Approximator::new(&config, d);
        Ok(Self {
            problem,
            state: ChainState {
                position: initial.to_vec(),
                step: 0,
                sample_set: set,
                model_evals: seed_evals,
                seed_evals,
                refinement_log: Vec::new(),
                proposal,
            },
            config,
            rngs,
            approximator,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    /// Advances the chain by one step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.state.step + 1;
        let minus = self.state.position.clone();
        let plus = self.state.proposal.propose(&minus, &mut self.rngs.proposal);
        let mut record = StepRecord {
            step: t,
            position: minus.clone(),
            accepted: false,
            model_evals: self.state.model_evals,
            eps_plus: f64::NAN,
            eps_minus: f64::NAN,
            refinements: Vec::new(),
        };
        if self.problem.log_prior(&plus) == f64::NEG_INFINITY {
            self.finish(record.clone());
            return Ok(record);
        }

        let beta = self.config.schedule.beta(t);
        let gamma = self.config.schedule.gamma(t);
        let mut counted = 0;
        let mut forced = 0;
        let alpha = loop {
            let est_plus = self
                .approximator
                .estimate(self.problem, &self.state.sample_set, &plus, &mut self.rngs.surrogate);
            let est_minus = self
                .approximator
                .estimate(self.problem, &self.state.sample_set, &minus, &mut self.rngs.surrogate);
            let (est_plus, est_minus) = match (est_plus, est_minus) {
                (Ok(p), Ok(m)) => (p, m),
                (p, m) => {
                    let (site, err) = match (p, m) {
                        (Err(e), _) => (Site::Plus, e),
                        (_, Err(e)) => (Site::Minus, e),
                        _ => unreachable!(),
                    };
                    if !err.is_geometric() {
                        return Err(err);
                    }
                    if record.eps_plus.is_nan() {
                        record.eps_plus = if site == Site::Plus { f64::INFINITY } else { record.eps_plus };
                        record.eps_minus = if site == Site::Minus { f64::INFINITY } else { record.eps_minus };
                    }
                    forced += 1;
                    if forced > self.config.max_forced_refinements {
                        return Err(Error::Factorization(format!(
                            "local fit still failing after {} refinements: {err}",
                            self.config.max_forced_refinements
                        )));
                    }
                    let point = if site == Site::Plus { &plus } else { &minus };
                    self.refine_at(point, t, RefinementCause::FitFailure, site, &mut record)?;
                    continue;
                }
            };
            let (_, alpha) = acceptance_quantities(est_plus.log_post, est_minus.log_post);
            let (eps_plus, eps_minus) = cv_indicators(&est_plus, &est_minus);
            if record.eps_plus.is_nan() && record.eps_minus.is_nan() {
                record.eps_plus = eps_plus;
                record.eps_minus = eps_minus;
            }
            if self.config.max_refinements_per_step.is_some_and(|cap| counted >= cap) {
                break alpha;
            }
            if self.rngs.refine.random::<f64>() < beta {
                let site = if self.rngs.refine.random::<bool>() { Site::Plus } else { Site::Minus };
                let point = if site == Site::Plus { &plus } else { &minus };
                self.refine_at(point, t, RefinementCause::Random, site, &mut record)?;
                counted += 1;
                continue;
            }
            if eps_plus >= eps_minus && eps_plus >= gamma {
                self.refine_at(&plus, t, RefinementCause::Cv, Site::Plus, &mut record)?;
                counted += 1;
                continue;
            }
            if eps_minus > eps_plus && eps_minus >= gamma {
                self.refine_at(&minus, t, RefinementCause::Cv, Site::Minus, &mut record)?;
                counted += 1;
                continue;
            }
            break alpha;
        };
        if self.rngs.accept.random::<f64>() < alpha {
            record.accepted = true;
            record.position = plus;
        }
        record.model_evals = self.state.model_evals;
        self.finish(record.clone());
        Ok(record)
    }

    fn refine_at(
        &mut self,
        point: &[f64],
        t: usize,
        cause: RefinementCause,
        site: Site,
        record: &mut StepRecord,
    ) -> Result<()> {
        let (_, evals) = refine_near(
            self.problem,
            self.config.target_mode,
            &mut self.state.sample_set,
            point,
            self.approximator.n,
            self.config.maximin_budget,
            &mut self.rngs.refine,
        )?;
        self.state.model_evals += evals;
        self.state.refinement_log.push(RefinementEvent { step: t, cause, site });
        record.refinements.push((cause, site));
        Ok(())
    }

    fn finish(&mut self, record: StepRecord) {
        self.state.step = record.step;
        self.state.position = record.position;
        self.state.proposal.update(&self.state.position);
    }

    /// Runs `config.steps` steps.
    pub fn run(mut self) -> Result<ChainOutput> {
        let steps = self.config.steps;
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            records.push(self.step()?);
        }
        Ok(ChainOutput {
            records,
            model_evals: self.state.model_evals,
            seed_evals: self.state.seed_evals,
            refinement_log: self.state.refinement_log,
            sample_set: Some(self.state.sample_set),
        })
    }
}

/// Everything a finished chain produced.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub records: Vec<StepRecord>,
    pub model_evals: usize,
    pub seed_evals: usize,
    pub refinement_log: Vec<RefinementEvent>,
    /// `None` for reference chains, which keep no samples.
    pub sample_set: Option<SampleSet>,
}

impl ChainOutput {
    /// The chain's states after each step, one row per step.
    pub fn positions(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.position.clone()).collect()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.accepted).count() as f64 / self.records.len() as f64
    }
}

/// Seeds and runs a surrogate chain.
pub fn run_chain(problem: &dyn Problem, config: &ChainConfig, initial: &[f64]) -> Result<ChainOutput> {
    Chain::new(problem, config.clone(), initial)?.run()
}

/// Runs plain Metropolis-Hastings on the exact posterior with the same
/// proposal and random streams as [`run_chain`]. The initial state costs one
/// evaluation and every in-support proposal one more.
pub fn run_reference_chain(problem: &dyn Problem, config: &ChainConfig, initial: &[f64]) -> Result<ChainOutput> {
    let d = problem.dimension();
    if initial.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: initial.len(),
        });
    }
    config.schedule.validate()?;
    let mut rngs = ChainRngs::new(config.seed);
    let mut proposal = Proposal::new(&config.proposal, d)?;
    proposal.update(initial);
    let mut position = initial.to_vec();
    let mut current = problem.log_posterior(&position)?;
    if current == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("initial point has zero posterior density".into()));
    }
    let mut evals = 1;
    let mut records = Vec::with_capacity(config.steps);
    for t in 1..=config.steps {
        let plus = proposal.propose(&position, &mut rngs.proposal);
        let mut accepted = false;
        if problem.log_prior(&plus) != f64::NEG_INFINITY {
            evals += 1;
            let candidate = match problem.log_posterior(&plus) {
                Ok(v) if !v.is_nan() => v,
                Ok(_) => f64::NEG_INFINITY,
                Err(Error::ModelFailure(msg)) => {
                    log::warn!("proposal rejected after model failure: {msg}");
                    f64::NEG_INFINITY
                }
                Err(e) => return Err(e),
            };
            let (_, alpha) = acceptance_quantities(candidate, current);
            if rngs.accept.random::<f64>() < alpha {
                position = plus;
                current = candidate;
                accepted = true;
            }
        }
        proposal.update(&position);
        records.push(StepRecord {
            step: t,
            position: position.clone(),
            accepted,
            model_evals: evals,
            eps_plus: f64::NAN,
            eps_minus: f64::NAN,
            refinements: Vec::new(),
        });
    }
    Ok(ChainOutput {
        records,
        model_evals: evals,
        seed_evals: 0,
        refinement_log: Vec::new(),
        sample_set: None,
    })
}
