use localmh::approx_mh::{
    acceptance_quantities, cv_indicators, indicator_term, maximin_point, refine_near, run_chain, run_reference_chain,
    seed_sample_set, ApproxKind, Chain, ChainConfig, LocalEstimate, Proposal, ProposalConfig, RefinementCause,
    RefinementSchedule, SeedMode, TargetMode,
};
use localmh::forward_models::{ExpQuartic, GaussianTarget, Problem, Support, ToggleSwitch};
use localmh::rng::{stream, Stream};
use localmh::sample_store::SampleSet;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn estimate(log_post: f64, perturbed: &[f64]) -> LocalEstimate {
    LocalEstimate {
        log_post,
        perturbed: perturbed.iter().map(|v| Some(*v)).collect(),
    }
}

#[test]
fn acceptance_examples() {
    assert_eq!(acceptance_quantities(0.3, 0.3), (1.0, 1.0));
    let (_, a) = acceptance_quantities(-2f64.ln(), 0.0);
    assert!((a - 0.5).abs() < 1e-15);
    assert_eq!(acceptance_quantities(f64::NEG_INFINITY, 0.0), (0.0, 0.0));
    assert_eq!(acceptance_quantities(1.0, f64::NEG_INFINITY).1, 1.0);
    assert_eq!(acceptance_quantities(f64::NEG_INFINITY, f64::NEG_INFINITY).1, 0.0);
}

#[test]
fn indicator_hand_example() {
    let plus = estimate(0.0, &[0.0, 0.1, 0.0]);
    let minus = estimate(0.0, &[0.0, 0.0]);
    let (ep, em) = cv_indicators(&plus, &minus);
    assert!((ep - (1.0 - (-0.1f64).exp())).abs() < 1e-9);
    assert!((ep - 0.09516258196404048).abs() < 1e-9);
    assert_eq!(em, 0.0);
}

#[test]
fn indicator_vanishes_for_coinciding_fits() {
    let plus = estimate(-1.3, &[-1.3; 5]);
    let minus = estimate(0.7, &[0.7; 5]);
    assert_eq!(cv_indicators(&plus, &minus), (0.0, 0.0));
}

#[test]
fn missing_perturbation_is_infinite() {
    let plus = LocalEstimate {
        log_post: 0.0,
        perturbed: vec![Some(0.0), None],
    };
    let minus = estimate(0.0, &[0.0]);
    assert_eq!(cv_indicators(&plus, &minus).0, f64::INFINITY);
    assert_eq!(indicator_term(f64::NAN, 0.0), f64::INFINITY);
}

proptest! {
    #[test]
    fn indicators_are_bounded_and_swap_symmetric(
        lp in -20.0f64..20.0,
        lm in -20.0f64..20.0,
        pp in proptest::collection::vec(-25.0f64..25.0, 1..8),
        pm in proptest::collection::vec(-25.0f64..25.0, 1..8),
    ) {
        let plus = estimate(lp, &pp);
        let minus = estimate(lm, &pm);
        let (ep, em) = cv_indicators(&plus, &minus);
        prop_assert!((0.0..=2.0).contains(&ep));
        prop_assert!((0.0..=2.0).contains(&em));
        let (sp, sm) = cv_indicators(&minus, &plus);
        prop_assert_eq!(sp, em);
        prop_assert_eq!(sm, ep);
    }

    #[test]
    fn acceptance_probability_is_a_probability(lp in -50.0f64..50.0, lm in -50.0f64..50.0) {
        let (z, a) = acceptance_quantities(lp, lm);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - z.min(1.0)).abs() < 1e-12);
    }
}

#[test]
fn maximin_singleton_moves_to_the_ball() {
    let theta = [0.3, -0.2];
    let c: Vec<&[f64]> = vec![&theta];
    let mut rng = stream(1, Stream::Refine);
    let r = maximin_point(&theta, 0.5, &c, &Support::Unbounded, 200, &mut rng);
    let dist = ((r.point[0] - theta[0]).powi(2) + (r.point[1] - theta[1]).powi(2)).sqrt();
    assert!(dist <= 0.5 + 1e-12);
    assert!(dist > 0.25);
    assert!((r.min_distance - dist).abs() < 1e-12);
}

#[test]
fn maximin_one_dimensional_pair() {
    let (a, b) = ([0.0], [1.0]);
    let c: Vec<&[f64]> = vec![&a, &b];
    // Brute force over a grid of the ball [-1, 1].
    let brute = (0..=2000)
        .map(|i| -1.0 + i as f64 * 1e-3)
        .map(|x: f64| x.abs().min((x - 1.0).abs()))
        .fold(0.0f64, f64::max);
    assert!((brute - 1.0).abs() < 1e-12);
    for seed in 0..10 {
        let mut rng = stream(seed, Stream::Refine);
        let r = maximin_point(&[0.0], 1.0, &c, &Support::Unbounded, 200, &mut rng);
        assert!(r.point[0].abs() <= 1.0 + 1e-12);
        assert!(r.min_distance >= 0.5 - 1e-9, "seed {seed}: {:?}", r.point);
        assert!(r.trail.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn maximin_respects_support_near_a_corner() {
    let support = Support::unit_cube(2);
    let theta = [0.98, -0.97];
    let others = [[0.9, -0.9], [0.95, -0.99]];
    let c: Vec<&[f64]> = vec![&theta, &others[0], &others[1]];
    let mut rng = stream(4, Stream::Refine);
    let r = maximin_point(&theta, 0.3, &c, &support, 200, &mut rng);
    assert!(support.contains(&r.point));
    assert!(r.min_distance >= 0.0);
}

#[test]
fn refine_near_grows_the_set_and_counts_one_evaluation() {
    let problem = ExpQuartic;
    let mut set = SampleSet::new(2, 1);
    let mut rng = stream(2, Stream::Seeding);
    let (seeded, evals) = seed_sample_set(
        &problem,
        TargetMode::ApproximateLogPosterior,
        &[0.0, 0.0],
        8,
        &SeedMode::AroundStart { radius: 1.0 },
        1e-10,
        &mut rng,
    )
    .unwrap();
    assert_eq!(evals, 8);
    for s in seeded.samples() {
        set.insert(s.clone()).unwrap();
    }
    let theta = [0.1, 0.1];
    let before = set.min_distance(&theta);
    let radius = set.nearest(&theta, 6).unwrap().radius;
    let mut rng = stream(2, Stream::Refine);
    let (point, evals) = refine_near(
        &problem,
        TargetMode::ApproximateLogPosterior,
        &mut set,
        &theta,
        6,
        200,
        &mut rng,
    )
    .unwrap();
    assert_eq!(evals, 1);
    assert_eq!(set.len(), 9);
    let dist = ((point[0] - 0.1f64).powi(2) + (point[1] - 0.1f64).powi(2)).sqrt();
    assert!(dist <= radius + 1e-12);
    let mut without = SampleSet::new(2, 1);
    for s in &set.samples()[..8] {
        without.insert(s.clone()).unwrap();
    }
    assert!(without.min_distance(&point) >= before - 1e-12);
}

#[test]
fn seeding_is_deterministic_and_respects_support() {
    let problem = ToggleSwitch::synthetic(vec![2e-4, 5e-4, 1e-3, 3e-3, 1e-2, 1e-1], &[0.0; 6], &mut stream(0, Stream::Data))
        .unwrap();
    let seed = |s| {
        seed_sample_set(
            &problem,
            TargetMode::ApproximateForwardModel,
            &[0.0; 6],
            12,
            &SeedMode::FromPrior,
            1e-10,
            &mut stream(s, Stream::Seeding),
        )
        .unwrap()
        .0
    };
    let a = seed(5);
    let b = seed(5);
    assert_eq!(a.samples(), b.samples());
    assert!(a.samples().iter().all(|s| Support::unit_cube(6).contains(&s.location)));
    assert_ne!(a.samples(), seed(6).samples());
}

fn rw_config(kind: ApproxKind, schedule: RefinementSchedule, steps: usize) -> ChainConfig {
    ChainConfig {
        approx_kind: kind,
        proposal: ProposalConfig::isotropic(2, 1.0),
        schedule,
        steps,
        seed: 9,
        max_refinements_per_step: Some(2),
        ..ChainConfig::default()
    }
}

#[test]
fn first_fit_needs_no_refinement() {
    let problem = ExpQuartic;
    let mut chain = Chain::new(&problem, rw_config(ApproxKind::Quadratic, RefinementSchedule::disabled(), 1), &[0.0, 0.0])
        .unwrap();
    let rec = chain.step().unwrap();
    assert!(rec.refinements.iter().all(|(c, _)| *c != RefinementCause::FitFailure));
}

#[test]
fn beta_one_refines_every_step() {
    let problem = ExpQuartic;
    let schedule = RefinementSchedule {
        beta0: 1.0,
        beta_exp: 0.0,
        ..RefinementSchedule::default()
    };
    let out = run_chain(&problem, &rw_config(ApproxKind::Quadratic, schedule, 40), &[0.0, 0.0]).unwrap();
    for r in &out.records {
        assert!(r.refinements.iter().any(|(c, _)| *c == RefinementCause::Random), "step {}", r.step);
    }
}

#[test]
fn disabled_schedule_never_refines() {
    let problem = ExpQuartic;
    let out = run_chain(
        &problem,
        &rw_config(ApproxKind::Linear, RefinementSchedule::disabled(), 300),
        &[0.0, 0.0],
    )
    .unwrap();
    assert!(out.refinement_log.is_empty());
    assert_eq!(out.model_evals, out.seed_evals);
    assert_eq!(out.sample_set.unwrap().len(), out.seed_evals);
}

#[test]
fn eval_count_matches_set_growth() {
    let problem = ExpQuartic;
    let out = run_chain(
        &problem,
        &rw_config(ApproxKind::Quadratic, RefinementSchedule::default(), 500),
        &[0.0, 0.0],
    )
    .unwrap();
    let set = out.sample_set.as_ref().unwrap();
    assert_eq!(out.model_evals, set.len());
    assert_eq!(out.model_evals - out.seed_evals, out.refinement_log.len());
    assert!(out.records.windows(2).all(|w| w[0].model_evals <= w[1].model_evals));
}

#[test]
fn empty_chain() {
    let problem = ExpQuartic;
    let out = run_chain(&problem, &rw_config(ApproxKind::Quadratic, RefinementSchedule::default(), 0), &[0.0, 0.0]).unwrap();
    assert!(out.records.is_empty());
}

#[test]
fn chains_are_reproducible() {
    let problem = ExpQuartic;
    let config = rw_config(ApproxKind::Quadratic, RefinementSchedule::default(), 300);
    let a = run_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    let b = run_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    assert_eq!(a.positions(), b.positions());
    assert_eq!(a.model_evals, b.model_evals);
}

#[test]
fn quadratic_target_matches_the_exact_chain() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let problem = GaussianTarget::new(vec![0.5, -0.2], cov).unwrap();
    let mut config = rw_config(ApproxKind::Quadratic, RefinementSchedule::disabled(), 2000);
    config.schedule.gamma0 = 0.1;
    let surrogate = run_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    let exact = run_reference_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    let a: Vec<bool> = surrogate.records.iter().map(|r| r.accepted).collect();
    let b: Vec<bool> = exact.records.iter().map(|r| r.accepted).collect();
    assert_eq!(a, b);
    assert!(surrogate.refinement_log.is_empty());
}

#[test]
fn reference_chain_counts_evaluations() {
    let problem = ExpQuartic;
    let config = rw_config(ApproxKind::Quadratic, RefinementSchedule::default(), 1000);
    let out = run_reference_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    assert_eq!(out.records.len(), 1000);
    assert_eq!(out.model_evals, 1001);
    assert!(out.sample_set.is_none());
}

#[test]
fn out_of_support_proposals_cost_nothing() {
    let problem = ToggleSwitch::synthetic(vec![2e-4, 5e-4, 1e-3, 3e-3, 1e-2, 1e-1], &[0.0; 6], &mut stream(0, Stream::Data))
        .unwrap();
    let config = ChainConfig {
        proposal: ProposalConfig::isotropic(6, 4.0),
        steps: 200,
        ..ChainConfig::default()
    };
    let out = run_reference_chain(&problem, &config, &[0.0; 6]).unwrap();
    assert!(out.model_evals < 201);
    assert!(out.records.iter().all(|r| Support::unit_cube(6).contains(&r.position)));
}

#[test]
fn adaptive_metropolis_learns_correlation_sign() {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0]);
    let problem = GaussianTarget::new(vec![0.0, 0.0], cov).unwrap();
    let config = ChainConfig {
        proposal: ProposalConfig::AdaptiveMetropolis {
            initial_covariance: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            adaptation_start: 500,
            epsilon: 1e-6,
        },
        steps: 10_000,
        seed: 3,
        ..ChainConfig::default()
    };
    let out = run_reference_chain(&problem, &config, &[0.0, 0.0]).unwrap();
    let mut proposal = Proposal::new(&config.proposal, 2).unwrap();
    for p in std::iter::once(vec![0.0, 0.0]).chain(out.positions()) {
        proposal.update(&p);
    }
    let c = proposal.covariance();
    assert!(c[(0, 1)] > 0.0);
    assert!(c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt() > 0.5);
}

#[test]
fn random_walk_proposals_are_reproducible() {
    let p = Proposal::new(&ProposalConfig::isotropic(3, 2.0), 3).unwrap();
    let a = p.propose(&[0.0; 3], &mut stream(1, Stream::Proposal));
    let b = p.propose(&[0.0; 3], &mut stream(1, Stream::Proposal));
    assert_eq!(a, b);
}

#[test]
fn invalid_configurations_are_rejected() {
    let problem = ExpQuartic;
    let mut config = ChainConfig::default();
    config.schedule.gamma0 = 0.0;
    assert!(run_chain(&problem, &config, &[0.0, 0.0]).is_err());
    let config = ChainConfig {
        proposal: ProposalConfig::RandomWalk {
            covariance: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        },
        ..ChainConfig::default()
    };
    assert!(run_chain(&problem, &config, &[0.0, 0.0]).is_err());
}

#[test]
fn samples_in_the_set_are_true_values() {
    let problem = ExpQuartic;
    let out = run_chain(
        &problem,
        &rw_config(ApproxKind::Quadratic, RefinementSchedule::default(), 200),
        &[0.0, 0.0],
    )
    .unwrap();
    for s in out.sample_set.unwrap().samples() {
        let truth = problem.evaluate(&s.location).unwrap();
        assert_eq!(s.values, truth);
    }
}
