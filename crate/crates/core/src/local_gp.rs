//! Local Gaussian-process regression.
//!
//! Inputs are expressed in a local frame: shifted to the query center and
//! divided by a length unit (the distance to the `N`-th nearest sample), so
//! the hyperpriors read in units of the neighborhood size. Each output is
//! centered and scaled by its sample mean and standard deviation before
//! fitting.
//!
//! The kernel is `s_j^2 (C + g I)` with the separable squared-exponential
//! correlation `C(x, y) = exp(-sum_m (x_m - y_m)^2 / (2 l_m^2))`. The signal
//! variance `s_j^2` of every output has an inverse-gamma prior and is set to
//! its conditional MAP in closed form. Lengthscales `l_m` and nugget `g` are
//! shared across outputs and set to the mode of (profiled marginal likelihood
//! times gamma priors) by a bounded quasi-Newton search in log space with
//! several starts.
//!
//! Predictions are for the latent function: the nugget regularizes the fit
//! but is not added to the predictive variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample_store::{Sample, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpHyperPriors {
    pub variance_shape: f64,
    pub variance_scale: f64,
    pub lengthscale_shape: f64,
    pub lengthscale_rate: f64,
    pub nugget_shape: f64,
    pub nugget_rate: f64,
}

impl Default for GpHyperPriors {
    fn default() -> Self {
        Self {
            variance_shape: 2.0,
            variance_scale: 1.0,
            lengthscale_shape: 2.0,
            lengthscale_rate: 1.0,
            nugget_shape: 2.0,
            nugget_rate: 100.0,
        }
    }
}

impl GpHyperPriors {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.variance_shape,
            self.variance_scale,
            self.lengthscale_shape,
            self.lengthscale_rate,
            self.nugget_shape,
            self.nugget_rate,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("GP hyperprior parameters must be positive".into()))
        }
    }
}

/// Tuning knobs for local GP construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpOptions {
    pub priors: GpHyperPriors,
    /// Neighbor-selection batches; the first is pure nearest neighbors.
    pub batches: usize,
    /// Optimizer starts; the first is at the initial guess.
    pub starts: usize,
    /// Quasi-Newton iterations per start.
    pub max_iterations: usize,
    /// Lower bound on the sample count for very low dimensions.
    pub min_samples: usize,
    pub initial_lengthscale: f64,
    pub initial_nugget: f64,
    /// Search box is `[initial / bound_ratio, initial * bound_ratio]`.
    pub bound_ratio: f64,
    /// Times the nugget is multiplied by ten when a factorization fails.
    pub jitter_retries: usize,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            priors: GpHyperPriors::default(),
            batches: 4,
            starts: 5,
            max_iterations: 60,
            min_samples: 10,
            initial_lengthscale: 1.0,
            initial_nugget: 0.01,
            bound_ratio: 1e3,
            jitter_retries: 3,
        }
    }
}

/// `max(ceil(d^(5/2)), floor)`.
pub fn gp_sample_count(dimension: usize, floor: usize) -> usize {
    assert!(dimension >= 1);
    let raw = (dimension as f64).powf(2.5);
    ((raw - 1e-9).ceil() as usize).max(floor)
}

/// Shift and scale mapping raw parameters into a GP's input space.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFrame {
    pub center: Vec<f64>,
    pub length: f64,
}

impl LocalFrame {
    pub fn new(center: Vec<f64>, length: f64) -> Self {
        assert!(length > 0.0, "frame length must be positive");
        Self { center, length }
    }

    fn map(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .map(|(v, c)| (v - c) / self.length)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    /// In frame units.
    pub lengthscales: Vec<f64>,
    /// Relative to the signal variance.
    pub nugget: f64,
}

impl GpHyperparameters {
    pub fn initial(dimension: usize, opts: &GpOptions) -> Self {
        Self {
            lengthscales: vec![opts.initial_lengthscale; dimension],
            nugget: opts.initial_nugget,
        }
    }
}

fn correlation(x: &[f64], y: &[f64], lengthscales: &[f64]) -> f64 {
    let mut s = 0.0;
    for m in 0..x.len() {
        let t = (x[m] - y[m]) / lengthscales[m];
        s += t * t;
    }
    (-0.5 * s).exp()
}

fn correlation_matrix(inputs: &[Vec<f64>], lengthscales: &[f64]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut c = DMatrix::identity(n, n);
    for i in 0..n {
        for k in (i + 1)..n {
            let v = correlation(&inputs[i], &inputs[k], lengthscales);
            c[(i, k)] = v;
            c[(k, i)] = v;
        }
    }
    c
}

/// Centered/scaled outputs. Outputs with no spread are kept as constants and
/// excluded from the likelihood.
#[derive(Debug, Clone)]
struct Standardized {
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Indices of outputs with positive spread.
    active: Vec<usize>,
    /// One column per active output.
    y: DMatrix<f64>,
}

fn standardize(subset: &[&Sample]) -> Standardized {
    let n = subset.len();
    let outputs = subset[0].values.len();
    let mut means = vec![0.0; outputs];
    let mut scales = vec![1.0; outputs];
    let mut active = Vec::new();
    for j in 0..outputs {
        let mean = subset.iter().map(|s| s.values[j]).sum::<f64>() / n as f64;
        let var = subset.iter().map(|s| (s.values[j] - mean).powi(2)).sum::<f64>() / n as f64;
        means[j] = mean;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1e-300) && sd > 0.0 {
            scales[j] = sd;
            active.push(j);
        }
    }
    let mut y = DMatrix::zeros(n, active.len());
    for (c, &j) in active.iter().enumerate() {
        for (i, s) in subset.iter().enumerate() {
            y[(i, c)] = (s.values[j] - means[j]) / scales[j];
        }
    }
    Standardized {
        means,
        scales,
        active,
        y,
    }
}

/// Log of (profiled marginal likelihood x hyperpriors) and its gradient with
/// respect to `(log l_1, .., log l_d, log g)`. Additive constants dropped.
fn objective(
    inputs: &[Vec<f64>],
    y: &DMatrix<f64>,
    hyper: &GpHyperparameters,
    priors: &GpHyperPriors,
    want_gradient: bool,
) -> Option<(f64, Vec<f64>)> {
    let n = inputs.len();
    let d = hyper.lengthscales.len();
    let corr = correlation_matrix(inputs, &hyper.lengthscales);
    let mut k = corr.clone();
    for i in 0..n {
        k[(i, i)] += hyper.nugget;
    }
    let chol = Cholesky::new(k)?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    let c = priors.variance_shape + 1.0 + 0.5 * n as f64;
    let b = priors.variance_scale;
    let outputs = y.ncols();

    let mut value = 0.0;
    let mut coef = Vec::with_capacity(outputs);
    for j in 0..outputs {
        let q = y.column(j).dot(&alpha.column(j));
        value += -0.5 * log_det - c * (b + 0.5 * q).ln();
        coef.push(c / (b + 0.5 * q));
    }
    let (ks, kr) = (priors.lengthscale_shape, priors.lengthscale_rate);
    for l in &hyper.lengthscales {
        value += (ks - 1.0) * l.ln() - kr * l;
    }
    let (gs, gr) = (priors.nugget_shape, priors.nugget_rate);
    value += (gs - 1.0) * hyper.nugget.ln() - gr * hyper.nugget;
    if !value.is_finite() {
        return None;
    }
    if !want_gradient {
        return Some((value, Vec::new()));
    }

    // grad_p = 1/2 tr((B - outputs K^-1) dK/dp) with B = sum_j coef_j a_j a_j^T.
    let mut w = spd_inverse(chol.l_dirty());
    w *= -(outputs as f64);
    for j in 0..outputs {
        let a = alpha.column(j);
        w.ger(coef[j], &a, &a, 1.0);
    }
    let mut grad = vec![0.0; d + 1];
    for m in 0..d {
        let l2 = hyper.lengthscales[m] * hyper.lengthscales[m];
        let mut acc = 0.0;
        for kk in 0..n {
            let (wc, cc) = (w.column(kk), corr.column(kk));
            let xk = inputs[kk][m];
            for i in 0..kk {
                let diff = inputs[i][m] - xk;
                acc += wc[i] * cc[i] * diff * diff;
            }
        }
        acc /= l2;
        // Off-diagonal pairs counted once; the symmetric half doubles them.
        grad[m] = acc + (ks - 1.0) - kr * hyper.lengthscales[m];
    }
    grad[d] = 0.5 * hyper.nugget * w.trace() + (gs - 1.0) - gr * hyper.nugget;
    Some((value, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(L L^T)^-1` from a lower Cholesky factor whose strict upper triangle
/// may hold garbage.
fn spd_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Columns of m = L^-1 by forward substitution on unit vectors.
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut col = m.column_mut(j);
        let x = col.as_mut_slice();
        x[j] = 1.0;
        for k in j..n {
            let lk = l.column(k);
            let lk = lk.as_slice();
            x[k] /= lk[k];
            let xk = x[k];
            if xk != 0.0 {
                for (xi, li) in x[k + 1..].iter_mut().zip(&lk[k + 1..]) {
                    *xi -= xk * li;
                }
            }
        }
    }
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mj = m.column(j);
        let mj = mj.as_slice();
        for i in j..n {
            let mi = m.column(i);
            let mi = mi.as_slice();
            let v = dot(&mi[i..], &mj[i..]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv
}

/// Maximizes `f` over the box `[lo, hi]` with a projected BFGS iteration.
fn maximize_in_box<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], max_iterations: usize) -> Option<(Vec<f64>, f64)>
where
    F: Fn(&[f64], bool) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let (mut fx, mut g) = f(&x, true)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iterations {
        // Free variables: not pinned at a bound by an outward gradient.
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] < 0.0) || (x[i] >= hi[i] && g[i] > 0.0)))
            .collect();
        let pg: f64 = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg < 1e-6 {
            break;
        }
        let gv = DVector::from_iterator(n, (0..n).map(|i| if free[i] { g[i] } else { 0.0 }));
        let mut p = &h * &gv;
        for i in 0..n {
            if !free[i] {
                p[i] = 0.0;
            }
        }
        if p.dot(&gv) <= 0.0 {
            h = DMatrix::identity(n, n);
            p = gv.clone();
        }
        let norm = p.amax();
        if norm > 2.0 {
            p *= 2.0 / norm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + t * p[i]).collect();
            clamp(&mut trial);
            let gain: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            if let Some((ft, gt)) = f(&trial, true) {
                if ft >= fx + 1e-4 * gain && ft > fx - 1e-12 * fx.abs() {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else { break };
        let s = DVector::from_iterator(n, (0..n).map(|i| xn[i] - x[i]));
        // Minimizing -f: y = -(g_new - g).
        let yv = DVector::from_iterator(n, (0..n).map(|i| g[i] - gn[i]));
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let improvement = fnew - fx;
        x = xn;
        fx = fnew;
        g = gn;
        if improvement.abs() < 1e-10 * (1.0 + fx.abs()) {
            break;
        }
    }
    Some((x, fx))
}

/// Hyperparameter mode for `subset` in `frame`.
pub fn optimize_hyperparameters<R: Rng + ?Sized>(
    subset: &[&Sample],
    frame: &LocalFrame,
    opts: &GpOptions,
    warm_start: Option<&GpHyperparameters>,
    rng: &mut R,
) -> Result<GpHyperparameters> {
    if subset.len() < 3 {
        return Err(Error::InsufficientSamples {
            needed: 3,
            available: subset.len(),
        });
    }
    let d = frame.center.len();
    let inputs: Vec<Vec<f64>> = subset.iter().map(|s| frame.map(&s.location)).collect();
    let st = standardize(subset);
    let initial = GpHyperparameters::initial(d, opts);
    if st.active.is_empty() {
        return Ok(initial);
    }
    let ln_ratio = opts.bound_ratio.ln();
    let mut lo = vec![opts.initial_lengthscale.ln() - ln_ratio; d];
    let mut hi = vec![opts.initial_lengthscale.ln() + ln_ratio; d];
    lo.push(opts.initial_nugget.ln() - ln_ratio);
    hi.push(opts.initial_nugget.ln() + ln_ratio);

    let unpack = |x: &[f64]| GpHyperparameters {
        lengthscales: x[..d].iter().map(|v| v.exp()).collect(),
        nugget: x[d].exp(),
    };
    let f = |x: &[f64], grad: bool| objective(&inputs, &st.y, &unpack(x), &opts.priors, grad);

    let first = warm_start.unwrap_or(&initial);
    let mut starts: Vec<Vec<f64>> = vec![first
        .lengthscales
        .iter()
        .map(|l| l.ln())
        .chain(std::iter::once(first.nugget.ln()))
        .collect()];
    for _ in 1..opts.starts.max(1) {
        let mut s: Vec<f64> = (0..d)
            .map(|_| opts.initial_lengthscale.ln() + rng.random_range(-1.6..1.6))
            .collect();
        s.push(opts.initial_nugget.ln() + rng.random_range(-4.6..2.3));
        starts.push(s);
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in &starts {
        if let Some((x, fx)) = maximize_in_box(f, s, &lo, &hi, opts.max_iterations) {
            if best.as_ref().is_none_or(|(_, fb)| fx > *fb) {
                best = Some((x, fx));
            }
        }
    }
    match best {
        Some((x, _)) => Ok(unpack(&x)),
        None => Err(Error::Factorization("no optimizer start produced a factorizable kernel".into())),
    }
}

/// A fitted local GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    frame: LocalFrame,
    inputs: Vec<Vec<f64>>,
    hyper: GpHyperparameters,
    chol: Cholesky<f64, Dyn>,
    means: Vec<f64>,
    scales: Vec<f64>,
    active: Vec<usize>,
    /// Standardized signal variance per active output.
    variances: Vec<f64>,
    /// `K^-1 y` per active output.
    alpha: DMatrix<f64>,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `subset`, inflating the
    /// nugget tenfold up to `opts.jitter_retries` times if `K` is not
    /// numerically positive definite.
    pub fn condition(
        subset: &[&Sample],
        frame: LocalFrame,
        hyper: GpHyperparameters,
        opts: &GpOptions,
    ) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, available: 0 });
        }
        let inputs: Vec<Vec<f64>> = subset.iter().map(|s| frame.map(&s.location)).collect();
        let st = standardize(subset);
        let corr = correlation_matrix(&inputs, &hyper.lengthscales);
        let mut hyper = hyper;
        for attempt in 0..=opts.jitter_retries {
            let mut k = corr.clone();
            for i in 0..inputs.len() {
                k[(i, i)] += hyper.nugget;
            }
            if let Some(chol) = Cholesky::new(k) {
                let alpha = chol.solve(&st.y);
                let c = opts.priors.variance_shape + 1.0 + 0.5 * inputs.len() as f64;
                let variances = (0..st.active.len())
                    .map(|j| (opts.priors.variance_scale + 0.5 * st.y.column(j).dot(&alpha.column(j))) / c)
                    .collect();
                return Ok(Self {
                    frame,
                    inputs,
                    hyper,
                    chol,
                    means: st.means,
                    scales: st.scales,
                    active: st.active,
                    variances,
                    alpha,
                });
            }
            if attempt < opts.jitter_retries {
                hyper.nugget *= 10.0;
            }
        }
        Err(Error::Factorization(format!(
            "kernel not positive definite with nugget {:.3e}",
            hyper.nugget
        )))
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_dim(&self) -> usize {
        self.means.len()
    }

    /// Signal variance of output `j` in the output's own units.
    pub fn signal_variance(&self, j: usize) -> f64 {
        match self.active.iter().position(|&a| a == j) {
            Some(c) => self.variances[c] * self.scales[j] * self.scales[j],
            None => 0.0,
        }
    }

    /// The kernel matrix `C + g I` as factorized.
    pub fn kernel_matrix(&self) -> DMatrix<f64> {
        let mut k = correlation_matrix(&self.inputs, &self.hyper.lengthscales);
        for i in 0..self.inputs.len() {
            k[(i, i)] += self.hyper.nugget;
        }
        k
    }

    /// Predictive `(mean, variance)` for every output at `point`.
    pub fn predict(&self, point: &[f64]) -> Vec<(f64, f64)> {
        let x = self.frame.map(point);
        let kstar = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| correlation(&x, xi, &self.hyper.lengthscales)),
        );
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .map(|v| v.norm_squared())
            .unwrap_or(0.0);
        let reduction = (1.0 - v).max(0.0);
        let mut out: Vec<(f64, f64)> = self.means.iter().map(|m| (*m, 0.0)).collect();
        for (c, &j) in self.active.iter().enumerate() {
            let mean = self.means[j] + self.scales[j] * kstar.dot(&self.alpha.column(c));
            let var = self.scales[j] * self.scales[j] * self.variances[c] * reduction;
            out[j] = (mean, var);
        }
        out
    }

    pub fn predict_mean(&self, point: &[f64]) -> Vec<f64> {
        self.predict(point).into_iter().map(|(m, _)| m).collect()
    }
}

/// Optimizes hyperparameters on `subset` and conditions the GP.
pub fn fit_gp<R: Rng + ?Sized>(
    subset: &[&Sample],
    frame: LocalFrame,
    opts: &GpOptions,
    rng: &mut R,
) -> Result<GpModel> {
    let hyper = optimize_hyperparameters(subset, &frame, opts, None, rng)?;
    GpModel::condition(subset, frame, hyper, opts)
}

/// One draw per output from independent normal predictive marginals.
pub fn gp_draw<R: Rng + ?Sized>(prediction: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    prediction
        .iter()
        .map(|(m, v)| {
            let z: f64 = StandardNormal.sample(rng);
            m + v.max(0.0).sqrt() * z
        })
        .collect()
}

/// How [`select_neighbors`] obtains the lengthscales that weight later batches.
#[derive(Debug, Clone, Copy)]
pub enum HyperMode<'a> {
    /// Re-estimate on the current subset before every batch, starting the
    /// first estimate from `warm_start` when given.
    Estimate { warm_start: Option<&'a GpHyperparameters> },
    /// Use these values throughout.
    Fixed(&'a GpHyperparameters),
}

/// The selected subset and the frame it was selected in.
#[derive(Debug, Clone)]
pub struct NeighborSelection {
    /// Insertion indices into the sample set; nearest batch first.
    pub indices: Vec<usize>,
    pub frame: LocalFrame,
    /// Hyperparameters from the last batch estimate, if any was made.
    pub hyperparameters: Option<GpHyperparameters>,
}

/// Picks `n` samples around `center`: the nearest `n / batches` first, then
/// batch by batch further samples drawn without replacement with probability
/// proportional to their correlation with the center under the current
/// lengthscales.
///
/// With [`HyperMode::Fixed`] no estimation is done between batches.
pub fn select_neighbors<R: Rng + ?Sized>(
    set: &SampleSet,
    center: &[f64],
    n: usize,
    opts: &GpOptions,
    mode: HyperMode<'_>,
    rng: &mut R,
) -> Result<NeighborSelection> {
    let hood = set.nearest(center, n)?;
    let length = if hood.radius > 0.0 {
        hood.radius
    } else {
        return Err(Error::InsufficientSamples {
            needed: n + 1,
            available: set.len(),
        });
    };
    let frame = LocalFrame::new(center.to_vec(), length);
    let mut batches = opts.batches.max(1);
    while batches > 1 && n / batches < 3 {
        batches -= 1;
    }
    if batches == 1 || n == set.len() {
        return Ok(NeighborSelection {
            indices: hood.indices().collect(),
            frame,
            hyperparameters: None,
        });
    }
    let base = n / batches;
    let mut sizes = vec![base; batches];
    for s in sizes.iter_mut().take(n - base * batches) {
        *s += 1;
    }
    let mut chosen: Vec<usize> = hood.indices().take(sizes[0]).collect();
    let mut taken = vec![false; set.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let mut estimated: Option<GpHyperparameters> = None;
    for &size in &sizes[1..] {
        let current = match mode {
            HyperMode::Fixed(h) => h.clone(),
            HyperMode::Estimate { warm_start } => {
                let subset: Vec<&Sample> = chosen.iter().map(|&i| set.get(i)).collect();
                let warm = estimated.as_ref().or(warm_start);
                let h = optimize_hyperparameters(&subset, &frame, opts, warm, rng)?;
                estimated = Some(h.clone());
                h
            }
        };
        // Gumbel-top-k on log weights samples without replacement.
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(set.len() - chosen.len());
        for (i, s) in set.samples().iter().enumerate() {
            if taken[i] {
                continue;
            }
            let x = frame.map(&s.location);
            let log_w: f64 = -0.5
                * x.iter()
                    .zip(&current.lengthscales)
                    .map(|(v, l)| (v / l) * (v / l))
                    .sum::<f64>();
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            keyed.push((log_w - (-u.ln()).ln(), i));
        }
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(size) {
            taken[i] = true;
            chosen.push(i);
        }
    }
    Ok(NeighborSelection {
        indices: chosen,
        frame,
        hyperparameters: estimated,
    })
}
