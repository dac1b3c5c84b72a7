//! Worked examples with known answers, one or two per operation.

use exitlab::backbone::{
    atoms_from_counts, immigrate_mass, simulate_backbone, BackboneTree, ConditionedSampler, LabelSet, Motion, NodeEnd,
    RhoFamily, SeedSampler,
};
use exitlab::conditioning::{
    martingale_convergence_experiment, rejection_condition_extinction, rejection_condition_poisson,
    sample_poisson_statistic, AcceptanceRule, TestFunctional,
};
use exitlab::domain_pde::{
    grad_log, green_apply, poisson_kernel, solve_constant_data, solve_dirichlet_semilinear, solve_large_solution,
};
use exitlab::harness::two_sample_test;
use exitlab::sbm_sim::{
    laplace_functional, replicate, sample_exit_chain, sample_exit_measure, tilt_rate, ExtinctionSampler,
    SimulationLaw,
};
use exitlab::seeding::rng_for;
use exitlab::{AtomicMeasure, Domain1D, Engine, Grid, GridFunction, Side, Simulator};

fn unit() -> Domain1D {
    Domain1D::unit()
}

fn lattice() -> Simulator {
    Simulator::new(unit(), Engine::lattice(48, 1e-3)).unwrap()
}

#[test]
fn zero_data_gives_zero_solution() {
    let v = solve_dirichlet_semilinear(unit(), (0.0, 0.0), 256).unwrap();
    assert!(v.values.iter().all(|x| *x == 0.0));
}

#[test]
fn large_solution_blows_up_like_three_halves_over_s_squared() {
    let u = solve_large_solution(unit(), 4096).unwrap();
    for s in [1e-3, 2e-3, 5e-3, 1e-2] {
        let c = u.eval(s) * s * s;
        assert!((c / 1.5 - 1.0).abs() < 0.05, "s={s}: {c}");
    }
}

#[test]
fn green_of_one_without_killing_is_parabola() {
    let grid = Grid::new(unit(), 200);
    let g = green_apply(unit(), &GridFunction::zeros(grid), &GridFunction::constant(grid, 1.0)).unwrap();
    for j in 0..=200 {
        let x = grid.x(j);
        assert!((g.values[j] - x * (1.0 - x)).abs() < 1e-10);
    }
}

#[test]
fn right_kernel_without_killing_is_linear() {
    let grid = Grid::new(unit(), 200);
    let h = poisson_kernel(unit(), &GridFunction::zeros(grid), Side::Right).unwrap();
    for j in 0..=200 {
        assert!((h.values[j] - grid.x(j)).abs() < 1e-12);
    }
}

#[test]
fn grad_log_of_identity_is_reciprocal() {
    let grid = Grid::new(unit(), 1000);
    let g = grad_log(&GridFunction::from_fn(grid, |x| x)).unwrap();
    for j in [100, 300, 500, 900] {
        let x = grid.x(j);
        assert!((g.values[j] * x - 1.0).abs() < 1e-3, "x={x}");
    }
}

#[test]
fn empty_initial_measure_exits_nothing() {
    let sim = lattice();
    let mut rng = rng_for(1, "oracle.empty", 0);
    for _ in 0..20 {
        let x = sample_exit_measure(&sim, &AtomicMeasure::zero(), &SimulationLaw::plain(), &unit(), &mut rng).unwrap();
        assert!(x.is_zero());
    }
}

#[test]
fn laplace_of_zero_function_is_one() {
    let est = laplace_functional(&lattice(), &AtomicMeasure::dirac(0.5, 1.0), &SimulationLaw::plain(), (0.0, 0.0), 50, 2)
        .unwrap();
    assert_eq!(est.estimate, 1.0);
    assert_eq!(est.stderr, 0.0);
}

#[test]
fn laplace_matches_lattice_oracle_for_two_atoms() {
    let sim = lattice();
    let mu = AtomicMeasure::from_pairs(&[(0.25, 0.5), (0.75, 0.5)]);
    let est = laplace_functional(&sim, &mu, &SimulationLaw::plain(), (1.0, 1.0), 20_000, 3).unwrap();
    let u1 = solve_constant_data(unit(), 1.0, 48).unwrap();
    let target = (-mu.integrate(|x| u1.eval(x))).exp();
    assert!((est.estimate - target).abs() < 4.0 * est.stderr, "{} ± {} vs {target}", est.estimate, est.stderr);
}

#[test]
fn chain_of_length_one_is_a_single_exit() {
    let sim = lattice();
    let mu = AtomicMeasure::dirac(0.5, 1.0);
    for i in 0..10 {
        let a = sample_exit_chain(&sim, &mu, &SimulationLaw::plain(), &[unit()], &mut rng_for(4, "oracle.chain", i)).unwrap();
        let b = sample_exit_measure(&sim, &mu, &SimulationLaw::plain(), &unit(), &mut rng_for(4, "oracle.chain", i)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0], b);
    }
}

#[test]
fn extinction_chain_ends_at_zero() {
    let sim = lattice();
    let u = solve_large_solution(unit(), 2048).unwrap();
    let ex = sim.exhaustion(3).unwrap();
    let sampler = ExtinctionSampler::new(&sim, &u, &ex).unwrap();
    let paths = replicate(300, 5, "oracle.extinction", |rng| sampler.sample(&AtomicMeasure::dirac(0.5, 1.0), rng)).unwrap();
    assert!(paths.iter().all(|p| p.len() == 4 && p[3].is_zero()));
    assert!(paths.iter().any(|p| !p[0].is_zero()));
}

#[test]
fn zero_exit_measure_gives_zero_counts() {
    let mut rng = rng_for(6, "oracle.poisson", 0);
    for n in [1, 10, 1000] {
        let s = sample_poisson_statistic(&AtomicMeasure::zero(), n, &unit(), &mut rng);
        assert_eq!(s.counts, [0, 0]);
    }
}

#[test]
fn empty_target_acceptance_matches_pde() {
    let sim = lattice();
    let mu = AtomicMeasure::dirac(0.5, 1.0);
    let n = 4;
    let out = rejection_condition_poisson(&sim, &mu, &[], [0, 0], n, AcceptanceRule::LikelihoodRatio, 200, 100_000, 7)
        .unwrap();
    let target = (-solve_constant_data(unit(), n as f64, 48).unwrap().eval(0.5)).exp();
    let r = out.report;
    assert!((r.acceptance_rate - target).abs() < 3.0 * r.acceptance_stderr, "{} ± {} vs {target}", r.acceptance_rate, r.acceptance_stderr);
    let e = r.event_probability;
    assert!((e.estimate - target).abs() < 3.0 * e.stderr, "{} ± {} vs {target}", e.estimate, e.stderr);
    // Unconditioned exit mass has mean 1; accepted paths sit far below it.
    let mean_mass = out.samples.iter().map(|c| c.exit().total_mass()).sum::<f64>() / out.samples.len() as f64;
    assert!(mean_mass < 0.5, "{mean_mass}");
}

#[test]
fn extinction_acceptance_matches_pde() {
    let sim = lattice();
    let mu = AtomicMeasure::dirac(0.5, 0.25);
    let u = solve_large_solution(unit(), 2048).unwrap();
    let first = vec![sim.exhaustion(1).unwrap()[0]];
    let out = rejection_condition_extinction(&sim, &mu, &first, &u, 300, 30_000, 8).unwrap();
    let d1 = first[0];
    let cells = (d1.length() * 48.0).round() as usize;
    let v = solve_dirichlet_semilinear(d1, (u.eval(d1.left), u.eval(d1.right)), cells).unwrap();
    let target = (-0.25 * v.eval(0.5)).exp();
    let r = out.report;
    assert!((r.acceptance_rate - target).abs() < 3.0 * r.acceptance_stderr, "{} ± {} vs {target}", r.acceptance_rate, r.acceptance_stderr);
    assert!(out.samples.iter().all(|p| p.last().unwrap().is_zero()));
}

#[test]
fn constant_functional_has_no_dispersion() {
    let rows = martingale_convergence_experiment(
        &lattice(),
        &AtomicMeasure::dirac(0.5, 1.0),
        TestFunctional::Constant { value: 0.7 },
        &[1, 4, 16],
        40,
        4,
        9,
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.dispersion == 0.0));
}

#[test]
fn singleton_rho_is_the_poisson_kernel() {
    let fam = RhoFamily::build(unit(), &atoms_from_counts([1, 1]), 2, 48).unwrap();
    let kill = tilt_rate(&solve_constant_data(unit(), 2.0, 48).unwrap());
    assert_eq!(fam.rho(LabelSet::singleton(0)).values, poisson_kernel(unit(), &kill, Side::Left).unwrap().values);
    assert_eq!(fam.rho(LabelSet::singleton(1)).values, poisson_kernel(unit(), &kill, Side::Right).unwrap().values);
}

#[test]
fn single_atom_seed_and_tree() {
    let fam = RhoFamily::build(unit(), &atoms_from_counts([0, 1]), 1, 48).unwrap();
    let seeds = SeedSampler::new(&fam, &AtomicMeasure::dirac(0.5, 1.0)).unwrap();
    let mut rng = rng_for(10, "oracle.single", 0);
    for _ in 0..50 {
        let s = seeds.sample(&mut rng);
        assert_eq!(s.blocks, vec![LabelSet::singleton(0)]);
        for motion in [Motion::Lattice, Motion::Diffusion { dt: 1e-4 }] {
            let t = simulate_backbone(&s, &fam, motion, &mut rng).unwrap();
            assert_eq!(t.nodes.len(), 1);
            assert!(matches!(t.nodes[0].end, NodeEnd::Exit { side: Side::Right, .. }));
        }
    }
}

#[test]
fn empty_tree_immigrates_nothing() {
    let sim = lattice();
    let ex = sim.exhaustion(3).unwrap();
    let mut rng = rng_for(11, "oracle.immigration", 0);
    let y = immigrate_mass(&sim, &BackboneTree::empty(unit()), &SimulationLaw::plain(), &ex, &mut rng).unwrap();
    assert_eq!(y.len(), 3);
    assert!(y.iter().all(AtomicMeasure::is_zero));
}

#[test]
fn backbone_matches_rejection_for_one_left_atom() {
    let sim = lattice();
    let mu = AtomicMeasure::dirac(0.5, 1.0);
    let samples = 2000;
    let rej = rejection_condition_poisson(&sim, &mu, &[], [1, 0], 1, AcceptanceRule::LikelihoodRatio, samples, 200_000, 12)
        .unwrap();
    let a: Vec<f64> = rej.samples.iter().map(|c| c.exit().side_masses(&unit())[0]).collect();
    let sampler = ConditionedSampler::new(&sim, &mu, [1, 0], 1, &[], 48).unwrap();
    let b: Vec<f64> = replicate(samples, 12, "oracle.backbone", |rng| {
        Ok(sampler.sample(rng).expect("backbone draw").exit().side_masses(&unit())[0])
    })
    .unwrap();
    let report = two_sample_test("left_mass", &a, &b, 0.01).unwrap();
    assert!(report.passed, "KS {} p={:?}", report.statistic, report.p_value);
}

#[test]
fn identical_samples_have_zero_distance() {
    let a: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
    let r = two_sample_test("same", &a, &a, 0.01).unwrap();
    assert_eq!(r.statistic, 0.0);
    assert!(r.passed);
}
