use localmh::elliptic::{
    assemble_dense, diffusivity_field, fem_solve, fem_solve_with, observe, EllipticConfig, EllipticProblem, KlBasis, Mesh,
};
use localmh::forward_models::Problem;
use localmh::rng::{stream, Stream};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

fn random_field(mesh: Mesh, seed: u64) -> DVector<f64> {
    let basis = KlBasis::build(mesh, 1.0, 0.2, 6).unwrap();
    let mut rng = stream(seed, Stream::Data);
    let theta: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
    diffusivity_field(&theta, &basis.eigenvalues, &basis.modes)
}

#[test]
fn unit_diffusivity_centerline_and_symmetries() {
    for elements in [10, 20, 30] {
        let mesh = Mesh::new(elements);
        let u = fem_solve(&DVector::from_element(mesh.node_count(), 1.0), mesh).unwrap();
        let c = elements / 2;
        for i in 0..=elements {
            assert!((u[mesh.index(i, c)] - 0.5).abs() < 1e-8);
        }
        for j in 0..=elements {
            for i in 0..=elements {
                let v = u[mesh.index(i, j)];
                assert!((v + u[mesh.index(i, elements - j)] - 1.0).abs() < 1e-10);
                assert!((v - u[mesh.index(elements - i, elements - j)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn discrete_maximum_principle() {
    let mesh = Mesh::new(30);
    for seed in 0..10 {
        let k = random_field(mesh, seed);
        let u = fem_solve(&k, mesh).unwrap();
        assert!(u.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)), "seed {seed}");
    }
}

#[test]
fn stiffness_is_symmetric_with_zero_row_sums() {
    let mesh = Mesh::new(12);
    let a = assemble_dense(&random_field(mesh, 4), mesh);
    let asym = (&a - a.transpose()).abs().max();
    assert!(asym <= 1e-12 * a.abs().max());
    for r in 0..a.nrows() {
        assert!(a.row(r).sum().abs() < 1e-10);
    }
}

#[test]
fn solution_is_linear_in_boundary_data() {
    let mesh = Mesh::new(16);
    let k = random_field(mesh, 2);
    let g1 = |i: usize, j: usize| Some(((i + 3 * j) as f64 * 0.37).sin());
    let g2 = |i: usize, _j: usize| Some((i as f64) * 0.1 - 0.4);
    let u1 = fem_solve_with(&k, mesh, g1).unwrap();
    let u2 = fem_solve_with(&k, mesh, g2).unwrap();
    let u12 = fem_solve_with(&k, mesh, |i, j| Some(g1(i, j).unwrap() + 2.0 * g2(i, j).unwrap())).unwrap();
    assert!((u12 - (u1 + u2 * 2.0)).abs().max() < 1e-10);
}

#[test]
fn constant_boundary_gives_constant_solution() {
    let mesh = Mesh::new(10);
    let u = fem_solve_with(&random_field(mesh, 9), mesh, |_, _| Some(0.7)).unwrap();
    assert!(u.iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn observations_converge_under_refinement() {
    let config = EllipticConfig::default();
    let problem = EllipticProblem::new(&config, &mut stream(0, Stream::Data)).unwrap();
    let theta = problem.theta_true().to_vec();
    let fine = EllipticProblem::new(
        &EllipticConfig {
            elements: 60,
            theta_true: Some(theta.clone()),
            ..config
        },
        &mut stream(0, Stream::Data),
    )
    .unwrap();
    let a = problem.forward(&theta).unwrap();
    let b = fine.forward(&theta).unwrap();
    let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-3, "drift {drift}");
}

#[test]
fn observation_grid_has_121_points_and_matches_nodes() {
    let mesh = Mesh::new(20);
    let u = fem_solve(&random_field(mesh, 1), mesh).unwrap();
    let obs = observe(&u, mesh);
    assert_eq!(obs.len(), 121);
    assert_eq!(obs[0], u[mesh.index(0, 0)]);
    assert_eq!(obs[12], u[mesh.index(2, 2)]);
    assert_eq!(obs[120], u[mesh.index(20, 20)]);
}

#[test]
fn kl_eigenvalue_trace_matches_variance() {
    let basis = KlBasis::build(Mesh::new(30), 1.0, 0.2, 6).unwrap();
    let trace: f64 = basis.all_eigenvalues().iter().sum();
    assert!((trace - 1.0).abs() <= 0.02, "trace {trace}");
    assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn kl_modes_are_orthonormal_under_quadrature() {
    let basis = KlBasis::build(Mesh::new(30), 1.0, 0.2, 10).unwrap();
    let w = basis.weights();
    for (a, fa) in basis.modes.iter().enumerate() {
        for (b, fb) in basis.modes.iter().enumerate() {
            let ip: f64 = fa.iter().zip(fb.iter()).zip(&w).map(|((x, y), w)| w * x * y).sum();
            let expect = if a == b { 1.0 } else { 0.0 };
            assert!((ip - expect).abs() < 1e-6, "({a}, {b}): {ip}");
        }
    }
}

#[test]
fn kl_signs_are_deterministic() {
    let a = KlBasis::build(Mesh::new(20), 1.0, 0.2, 6).unwrap();
    let b = KlBasis::build(Mesh::new(20), 1.0, 0.2, 6).unwrap();
    for (x, y) in a.modes.iter().zip(&b.modes) {
        assert_eq!(x, y);
        let first = x.iter().find(|v| v.abs() > 1e-8).unwrap();
        assert!(*first > 0.0);
    }
}

#[test]
fn kl_matches_dense_nystrom_eigenproblem() {
    let mesh = Mesh::new(10);
    let (variance, ell) = (1.0, 0.2);
    let basis = KlBasis::build(mesh, variance, ell, 6).unwrap();
    let n = mesh.node_count();
    let w = basis.weights();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let b = DMatrix::from_fn(n, n, |i, j| {
        let (xi, yi) = mesh.node(i);
        let (xj, yj) = mesh.node(j);
        let r2 = (xi - xj).powi(2) + (yi - yj).powi(2);
        sw[i] * variance * (-0.5 * r2 / (ell * ell)).exp() * sw[j]
    });
    let eig = SymmetricEigen::new(b);
    let mut dense: Vec<(f64, usize)> = eig.eigenvalues.iter().copied().zip(0..).collect();
    dense.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (k, lam) in basis.eigenvalues.iter().enumerate() {
        assert!((lam - dense[k].0).abs() < 1e-10 * dense[0].0, "eigenvalue {k}");
    }
    // Each retained mode lies in the span of dense eigenvectors with the same eigenvalue.
    for (k, mode) in basis.modes.iter().enumerate() {
        let lam = basis.eigenvalues[k];
        let scaled = DVector::from_iterator(n, mode.iter().zip(&sw).map(|(v, s)| v * s));
        let mut projected = 0.0;
        for &(l, idx) in &dense {
            if (l - lam).abs() < 1e-8 * dense[0].0 {
                projected += scaled.dot(&eig.eigenvectors.column(idx)).powi(2);
            }
        }
        assert!((projected - 1.0).abs() < 1e-8, "mode {k}");
    }
}

#[test]
fn problem_shapes_and_reproducible_data() {
    let config = EllipticConfig::default();
    let a = EllipticProblem::new(&config, &mut stream(3, Stream::Data)).unwrap();
    let b = EllipticProblem::new(&config, &mut stream(3, Stream::Data)).unwrap();
    assert_eq!(a.dimension(), 6);
    assert_eq!(a.output_dim(), 121);
    assert_eq!(a.theta_true(), b.theta_true());
    assert_eq!(a.noise(), b.noise());
    let y = a.evaluate(a.theta_true()).unwrap();
    assert!(a.log_likelihood(&y).is_finite());
    assert!(EllipticProblem::new(&EllipticConfig { theta_true: Some(vec![0.0; 3]), ..config }, &mut stream(0, Stream::Data)).is_err());
}

#[test]
fn constant_diffusivity_scale_does_not_matter() {
    let mesh = Mesh::new(12);
    let one = fem_solve(&DVector::from_element(mesh.node_count(), 1.0), mesh).unwrap();
    for c in [1e-3, 0.5, 40.0] {
        let u = fem_solve(&DVector::from_element(mesh.node_count(), c), mesh).unwrap();
        assert!((u - &one).abs().max() < 1e-10);
    }
}
