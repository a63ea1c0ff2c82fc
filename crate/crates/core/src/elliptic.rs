//! Elliptic PDE benchmark: `div(k grad u) = 0` on the unit square with a
//! log-normal diffusivity parameterized by a truncated Karhunen-Loeve
//! expansion.
//!
//! Boundary conditions are `u = s1` on `s2 = 0`, `u = 1 - s1` on `s2 = 1`,
//! and zero flux on `s1 = 0` and `s1 = 1`. The solution is computed with
//! bilinear (Q1) finite elements on a uniform mesh and observed on an
//! `11 x 11` grid.
//!
//! The KL modes of the squared-exponential covariance are computed by a
//! Nystrom discretization with trapezoidal weights on a uniform grid. Both
//! the kernel and the weights factor over the two coordinates, so the 2-D
//! eigenproblem is the Kronecker square of a 1-D one. Modes are carried to
//! other grids with the Nystrom extension
//! `phi(s) = lambda^-1 sum_k w_k C(s, s_k) phi(s_k)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_models::{GaussianNoiseModel, Problem, Support};

/// Uniform square mesh of `elements x elements` bilinear elements.
///
/// Node `(i, j)` sits at `(i h, j h)` and has index `j (elements + 1) + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mesh {
    pub elements: usize,
}

impl Mesh {
    pub fn new(elements: usize) -> Self {
        assert!(elements >= 1);
        Self { elements }
    }

    pub fn nodes_per_side(&self) -> usize {
        self.elements + 1
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_side() * self.nodes_per_side()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.elements as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes_per_side() + i
    }

    /// Coordinates of node `index`.
    pub fn node(&self, index: usize) -> (f64, f64) {
        let n = self.nodes_per_side();
        let h = self.spacing();
        ((index % n) as f64 * h, (index / n) as f64 * h)
    }

    /// The four node indices of element `(ex, ey)`, counterclockwise from
    /// the lower left.
    pub fn element_nodes(&self, ex: usize, ey: usize) -> [usize; 4] {
        [
            self.index(ex, ey),
            self.index(ex + 1, ey),
            self.index(ex + 1, ey + 1),
            self.index(ex, ey + 1),
        ]
    }
}

/// Trapezoidal weights for `points` equispaced nodes on `[0, 1]`.
fn trapezoid_weights(points: usize) -> Vec<f64> {
    let h = 1.0 / (points - 1) as f64;
    (0..points)
        .map(|k| if k == 0 || k == points - 1 { 0.5 * h } else { h })
        .collect()
}

fn grid_1d(points: usize) -> Vec<f64> {
    (0..points).map(|k| k as f64 / (points - 1) as f64).collect()
}

/// Truncated KL expansion of a squared-exponential Gaussian field.
#[derive(Debug, Clone)]
pub struct KlBasis {
    pub variance: f64,
    pub lengthscale: f64,
    /// Nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Nodal values of each mode on the quadrature grid.
    pub modes: Vec<DVector<f64>>,
    /// Quadrature grid the modes live on.
    pub grid: Mesh,
    /// One-dimensional factors `(a, b)` of each mode: the mode is
    /// `v_a(s1) v_b(s2)`.
    factors: Vec<(usize, usize)>,
    /// One-dimensional eigenvalues and eigenvectors (scaled to be orthonormal
    /// under the trapezoid rule).
    eig_1d: Vec<f64>,
    vec_1d: Vec<DVector<f64>>,
}

fn correlation_1d(x: f64, y: f64, lengthscale: f64) -> f64 {
    let t = (x - y) / lengthscale;
    (-0.5 * t * t).exp()
}

impl KlBasis {
    /// Computes the `mode_count` leading modes of the covariance
    /// `variance exp(-|s - s'|^2 / (2 lengthscale^2))` on the nodes of `grid`.
    pub fn build(grid: Mesh, variance: f64, lengthscale: f64, mode_count: usize) -> Result<Self> {
        if mode_count == 0 || mode_count > grid.node_count() {
            return Err(Error::InvalidArgument(format!("cannot build {mode_count} KL modes")));
        }
        if !(variance > 0.0 && lengthscale > 0.0) {
            return Err(Error::InvalidArgument("KL variance and lengthscale must be positive".into()));
        }
        let p = grid.nodes_per_side();
        let x = grid_1d(p);
        let w = trapezoid_weights(p);
        let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
        let b = DMatrix::from_fn(p, p, |i, j| sw[i] * correlation_1d(x[i], x[j], lengthscale) * sw[j]);
        let eig = SymmetricEigen::new(b);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let eig_1d: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vec_1d: Vec<DVector<f64>> = order
            .iter()
            .map(|&i| {
                let v = eig.eigenvectors.column(i);
                DVector::from_iterator(p, (0..p).map(|k| v[k] / sw[k]))
            })
            .collect();

        let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
        let lam = |&(a, b): &(usize, usize)| variance * eig_1d[a] * eig_1d[b];
        pairs.sort_by(|u, v| lam(v).total_cmp(&lam(u)).then(u.cmp(v)));
        pairs.truncate(mode_count);

        let mut basis = Self {
            variance,
            lengthscale,
            eigenvalues: pairs.iter().map(lam).collect(),
            modes: Vec::new(),
            grid,
            factors: pairs,
            eig_1d,
            vec_1d,
        };
        if basis.eigenvalues.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Factorization("KL eigenvalues lost positivity".into()));
        }
        basis.modes = basis.modes_on(grid);
        Ok(basis)
    }

    pub fn mode_count(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Every discrete eigenvalue of the Nystrom operator (not only the
    /// retained ones), largest first.
    pub fn all_eigenvalues(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .eig_1d
            .iter()
            .flat_map(|a| self.eig_1d.iter().map(move |b| self.variance * a * b))
            .collect();
        all.sort_by(|a, b| b.total_cmp(a));
        all
    }

    /// Quadrature weights of the grid nodes.
    pub fn weights(&self) -> Vec<f64> {
        let w = trapezoid_weights(self.grid.nodes_per_side());
        (0..self.grid.node_count())
            .map(|k| {
                let n = self.grid.nodes_per_side();
                w[k % n] * w[k / n]
            })
            .collect()
    }

    /// One-dimensional factor `a` evaluated at `s` by the Nystrom extension.
    fn factor_at(&self, a: usize, s: f64) -> f64 {
        let p = self.grid.nodes_per_side();
        let x = grid_1d(p);
        let w = trapezoid_weights(p);
        let v = &self.vec_1d[a];
        let mut acc = 0.0;
        for k in 0..p {
            acc += w[k] * correlation_1d(s, x[k], self.lengthscale) * v[k];
        }
        acc / self.eig_1d[a]
    }

    /// The retained modes at the nodes of `mesh`, with the sign convention
    /// of the quadrature grid (first entry above `1e-8` in magnitude is
    /// positive there) carried over.
    pub fn modes_on(&self, mesh: Mesh) -> Vec<DVector<f64>> {
        let p = mesh.nodes_per_side();
        let same_grid = mesh == self.grid;
        let coords = grid_1d(p);
        let mut out = Vec::with_capacity(self.mode_count());
        for &(a, b) in &self.factors {
            let fa: Vec<f64> = if same_grid {
                self.vec_1d[a].iter().copied().collect()
            } else {
                coords.iter().map(|&s| self.factor_at(a, s)).collect()
            };
            let fb: Vec<f64> = if same_grid {
                self.vec_1d[b].iter().copied().collect()
            } else {
                coords.iter().map(|&s| self.factor_at(b, s)).collect()
            };
            let sign = self.sign_of(a, b);
            out.push(DVector::from_iterator(
                mesh.node_count(),
                (0..mesh.node_count()).map(|k| sign * fa[k % p] * fb[k / p]),
            ));
        }
        out
    }

    fn sign_of(&self, a: usize, b: usize) -> f64 {
        let p = self.grid.nodes_per_side();
        let (va, vb) = (&self.vec_1d[a], &self.vec_1d[b]);
        for k in 0..p * p {
            let v = va[k % p] * vb[k / p];
            if v.abs() > 1e-8 {
                return v.signum();
            }
        }
        1.0
    }
}

/// Clamp on the log-diffusivity exponent.
const LOG_K_LIMIT: f64 = 40.0;

/// `k(s) = exp(sum_i theta_i sqrt(lambda_i) phi_i(s))` at every node of the
/// mesh the `modes` are given on.
pub fn diffusivity_field(theta: &[f64], eigenvalues: &[f64], modes: &[DVector<f64>]) -> DVector<f64> {
    let n = modes[0].len();
    let mut log_k = DVector::zeros(n);
    for ((t, l), m) in theta.iter().zip(eigenvalues).zip(modes) {
        log_k.axpy(t * l.sqrt(), m, 1.0);
    }
    let mut clamped = false;
    let k = log_k.map(|v| {
        if v.abs() > LOG_K_LIMIT {
            clamped = true;
        }
        v.clamp(-LOG_K_LIMIT, LOG_K_LIMIT).exp()
    });
    if clamped {
        log::warn!("log-diffusivity clamped to +-{LOG_K_LIMIT}");
    }
    k
}

const GAUSS: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];

/// Q1 shape functions on `[-1, 1]^2` in the element's node order.
fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

fn shape_gradients(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ]
}

/// Element stiffness `int k grad N_a . grad N_b` with 2x2 Gauss quadrature
/// and `k` interpolated bilinearly from its nodal values.
fn element_stiffness(k_nodes: &[f64; 4]) -> [[f64; 4]; 4] {
    // Square element of side h: gradients scale by 2/h, the Jacobian by
    // h^2/4, and the two factors cancel.
    let mut ke = [[0.0; 4]; 4];
    for &xi in &GAUSS {
        for &eta in &GAUSS {
            let n = shape(xi, eta);
            let g = shape_gradients(xi, eta);
            let k: f64 = (0..4).map(|a| n[a] * k_nodes[a]).sum();
            for a in 0..4 {
                for b in 0..4 {
                    ke[a][b] += k * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                }
            }
        }
    }
    ke
}

/// The full global stiffness matrix before boundary conditions, dense.
/// Intended for inspection and tests.
pub fn assemble_dense(k: &DVector<f64>, mesh: Mesh) -> DMatrix<f64> {
    let n = mesh.node_count();
    let mut a = DMatrix::zeros(n, n);
    for ey in 0..mesh.elements {
        for ex in 0..mesh.elements {
            let nodes = mesh.element_nodes(ex, ey);
            let ke = element_stiffness(&nodes.map(|i| k[i]));
            for p in 0..4 {
                for q in 0..4 {
                    a[(nodes[p], nodes[q])] += ke[p][q];
                }
            }
        }
    }
    a
}

/// Symmetric positive definite banded matrix stored by lower diagonals:
/// `band[i][m] = A(i, i - m)` for `m <= bandwidth`.
struct BandMatrix {
    n: usize,
    bandwidth: usize,
    band: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            band: vec![0.0; n * (bandwidth + 1)],
        }
    }

    fn at(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i >= j && i - j <= self.bandwidth);
        &mut self.band[i * (self.bandwidth + 1) + (i - j)]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.band[i * (self.bandwidth + 1) + (i - j)]
    }

    /// In-place banded Cholesky followed by the two triangular solves.
    fn solve(mut self, rhs: &mut [f64]) -> Result<()> {
        let (n, bw) = (self.n, self.bandwidth);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = self.get(i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::Factorization(format!(
                            "stiffness matrix not positive definite at row {i}"
                        )));
                    }
                    *self.at(i, i) = s.sqrt();
                } else {
                    *self.at(i, j) = s / self.get(j, j);
                }
            }
        }
        for i in 0..n {
            let mut s = rhs[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.get(i, k) * rhs[k];
            }
            rhs[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= self.get(k, i) * rhs[k];
            }
            rhs[i] = s / self.get(i, i);
        }
        Ok(())
    }
}

/// Dirichlet value at a node on the bottom or top edge.
fn boundary_value(mesh: Mesh, i: usize, j: usize) -> Option<f64> {
    let s1 = i as f64 * mesh.spacing();
    if j == 0 {
        Some(s1)
    } else if j == mesh.elements {
        Some(1.0 - s1)
    } else {
        None
    }
}

/// Solves for the nodal solution with the benchmark's boundary conditions.
pub fn fem_solve(k: &DVector<f64>, mesh: Mesh) -> Result<DVector<f64>> {
    fem_solve_with(k, mesh, |i, j| boundary_value(mesh, i, j))
}

/// Solves with Dirichlet data on the bottom and top edges given by
/// `dirichlet(i, j)` (called for `j = 0` and `j = elements` only).
pub fn fem_solve_with<F>(k: &DVector<f64>, mesh: Mesh, dirichlet: F) -> Result<DVector<f64>>
where
    F: Fn(usize, usize) -> Option<f64>,
{
    if k.len() != mesh.node_count() {
        return Err(Error::DimensionMismatch {
            expected: mesh.node_count(),
            got: k.len(),
        });
    }
    if k.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::ModelFailure("diffusivity must be positive and finite".into()));
    }
    let p = mesh.nodes_per_side();
    let e = mesh.elements;
    let mut u = DVector::zeros(mesh.node_count());
    for i in 0..p {
        for j in [0, e] {
            u[mesh.index(i, j)] = dirichlet(i, j)
                .ok_or_else(|| Error::InvalidArgument(format!("missing boundary value at node ({i}, {j})")))?;
        }
    }
    // Unknowns are the interior rows j = 1..e-1, numbered row by row.
    let unknowns = p * (e - 1);
    let unknown = |node: usize| {
        let j = node / p;
        (j >= 1 && j < e).then(|| node - p)
    };
    let mut a = BandMatrix::zeros(unknowns, p + 1);
    let mut rhs = vec![0.0; unknowns];
    for ey in 0..e {
        for ex in 0..e {
            let nodes = mesh.element_nodes(ex, ey);
            let ke = element_stiffness(&nodes.map(|i| k[i]));
            for r in 0..4 {
                let Some(row) = unknown(nodes[r]) else { continue };
                for c in 0..4 {
                    match unknown(nodes[c]) {
                        Some(col) if col <= row => *a.at(row, col) += ke[r][c],
                        Some(_) => {}
                        None => rhs[row] -= ke[r][c] * u[nodes[c]],
                    }
                }
            }
        }
    }
    a.solve(&mut rhs)?;
    for (idx, v) in rhs.into_iter().enumerate() {
        u[idx + p] = v;
    }
    Ok(u)
}

/// Bilinear interpolation of a nodal field at `(s1, s2)` in the unit square.
pub fn interpolate(u: &DVector<f64>, mesh: Mesh, s1: f64, s2: f64) -> f64 {
    let e = mesh.elements;
    let locate = |s: f64| {
        let x = s * e as f64;
        let cell = (x.floor().max(0.0) as usize).min(e - 1);
        (cell, x - cell as f64)
    };
    let (ex, tx) = locate(s1);
    let (ey, ty) = locate(s2);
    let [a, b, c, d] = mesh.element_nodes(ex, ey);
    (1.0 - tx) * (1.0 - ty) * u[a] + tx * (1.0 - ty) * u[b] + tx * ty * u[c] + (1.0 - tx) * ty * u[d]
}

/// Points per side of the observation grid.
pub const OBSERVATION_GRID: usize = 11;

/// The solution on the `11 x 11` grid `(i/10, j/10)`, `j` outer, `i` inner.
pub fn observe(u: &DVector<f64>, mesh: Mesh) -> Vec<f64> {
    let m = OBSERVATION_GRID - 1;
    let mut out = Vec::with_capacity(OBSERVATION_GRID * OBSERVATION_GRID);
    for j in 0..=m {
        for i in 0..=m {
            let s1 = (i * mesh.elements) as f64 / (m * mesh.elements) as f64;
            let s2 = (j * mesh.elements) as f64 / (m * mesh.elements) as f64;
            out.push(interpolate(u, mesh, s1, s2));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticConfig {
    /// Elements per side of the FEM mesh.
    pub elements: usize,
    /// Elements per side of the KL quadrature grid.
    pub kl_elements: usize,
    pub modes: usize,
    pub variance: f64,
    pub lengthscale: f64,
    pub noise_sd: f64,
    /// Parameters generating the synthetic data; a prior draw from
    /// `data_seed` when absent.
    pub theta_true: Option<Vec<f64>>,
    pub data_seed: u64,
}

impl Default for EllipticConfig {
    fn default() -> Self {
        Self {
            elements: 30,
            kl_elements: 30,
            modes: 6,
            variance: 1.0,
            lengthscale: 0.2,
            noise_sd: 0.1,
            theta_true: None,
            data_seed: 0,
        }
    }
}

/// The elliptic inverse problem: standard normal prior on the KL weights,
/// Gaussian noise on the 121 observations.
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    mesh: Mesh,
    eigenvalues: Vec<f64>,
    modes: Vec<DVector<f64>>,
    noise: GaussianNoiseModel,
    theta_true: Vec<f64>,
}

impl EllipticProblem {
    /// Builds the basis, draws `theta_true` if needed, and synthesizes data
    /// from the same forward model plus seeded noise.
    pub fn new(config: &EllipticConfig, rng: &mut dyn RngCore) -> Result<Self> {
        if config.elements < 2 || config.kl_elements < 1 {
            return Err(Error::Config("elliptic mesh needs at least 2 elements per side".into()));
        }
        if !(config.noise_sd > 0.0) {
            return Err(Error::Config("elliptic.noise_sd must be positive".into()));
        }
        let basis = KlBasis::build(Mesh::new(config.kl_elements), config.variance, config.lengthscale, config.modes)?;
        let mesh = Mesh::new(config.elements);
        let theta_true = match &config.theta_true {
            Some(t) if t.len() == config.modes => t.clone(),
            Some(t) => {
                return Err(Error::Config(format!(
                    "elliptic.theta_true has {} entries, expected {}",
                    t.len(),
                    config.modes
                )))
            }
            None => (0..config.modes).map(|_| StandardNormal.sample(&mut *rng)).collect(),
        };
        let mut problem = Self {
            mesh,
            eigenvalues: basis.eigenvalues.clone(),
            modes: basis.modes_on(mesh),
            noise: GaussianNoiseModel::new(vec![0.0; OBSERVATION_GRID * OBSERVATION_GRID], vec![config.noise_sd; OBSERVATION_GRID * OBSERVATION_GRID])?,
            theta_true: theta_true.clone(),
        };
        let clean = problem.forward(&theta_true)?;
        problem.noise = GaussianNoiseModel::synthetic(&clean, vec![config.noise_sd; clean.len()], rng)?;
        Ok(problem)
    }

    pub fn theta_true(&self) -> &[f64] {
        &self.theta_true
    }

    pub fn noise(&self) -> &GaussianNoiseModel {
        &self.noise
    }

    pub fn mesh(&self) -> Mesh {
        self.mesh
    }

    pub fn diffusivity(&self, theta: &[f64]) -> DVector<f64> {
        diffusivity_field(theta, &self.eigenvalues, &self.modes)
    }

    /// Observations of the solution for parameters `theta`.
    pub fn forward(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.eigenvalues.len() {
            return Err(Error::DimensionMismatch {
                expected: self.eigenvalues.len(),
                got: theta.len(),
            });
        }
        let u = fem_solve(&self.diffusivity(theta), self.mesh)?;
        Ok(observe(&u, self.mesh))
    }
}

impl Problem for EllipticProblem {
    fn name(&self) -> &str {
        "elliptic_pde"
    }

    fn dimension(&self) -> usize {
        self.eigenvalues.len()
    }

    fn output_dim(&self) -> usize {
        OBSERVATION_GRID * OBSERVATION_GRID
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.forward(theta)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        -0.5 * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn log_likelihood(&self, outputs: &[f64]) -> f64 {
        self.noise.log_likelihood(outputs)
    }

    fn support(&self) -> Support {
        Support::Unbounded
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        Some((0..self.dimension()).map(|_| StandardNormal.sample(&mut *rng)).collect())
    }
}
