use exitlab::backbone::{
    atoms_from_counts, enumerate_partitions, simulate_backbone, LabelSet, Motion, NodeEnd, RhoFamily, SeedSampler,
};
use exitlab::domain_pde::{
    grad_log, green_apply, poisson_kernel, solve_dirichlet_semilinear, solve_constant_data, solve_large_solution,
};
use exitlab::sbm_sim::{replicate, tilt_rate};
use exitlab::seeding::rng_for;
use exitlab::{AtomicMeasure, Domain1D, ExperimentConfig, Grid, GridFunction, Side};
use proptest::prelude::*;
use rand::Rng;

const CELLS: usize = 64;

fn unit() -> Domain1D {
    Domain1D::unit()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn comparison_principle(a in 0.0..20.0f64, b in 0.0..20.0f64, da in 0.0..5.0f64, db in 0.0..5.0f64) {
        let lo = solve_dirichlet_semilinear(unit(), (a, b), CELLS).unwrap();
        let hi = solve_dirichlet_semilinear(unit(), (a + da, b + db), CELLS).unwrap();
        for (x, y) in lo.values.iter().zip(&hi.values) {
            prop_assert!(*x <= *y + 1e-12);
        }
    }

    #[test]
    fn solutions_stay_between_zero_and_boundary_max(a in 0.0..50.0f64, b in 0.0..50.0f64) {
        let v = solve_dirichlet_semilinear(unit(), (a, b), CELLS).unwrap();
        for x in &v.values {
            prop_assert!(*x >= 0.0 && *x <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn constant_data_stays_below_large_solution(n in 1u32..200) {
        let un = solve_constant_data(unit(), n as f64, 128).unwrap();
        let large = solve_large_solution(unit(), 128).unwrap();
        for j in 1..128 {
            prop_assert!(un.values[j] <= large.values[j] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn green_operator_is_linear_and_positive(
        n in 1u32..20,
        c1 in -3.0..3.0f64,
        c2 in -3.0..3.0f64,
        p in 0.1..4.0f64,
    ) {
        let un = solve_constant_data(unit(), n as f64, CELLS).unwrap();
        let kill = tilt_rate(&un);
        let grid = Grid::new(unit(), CELLS);
        let f = GridFunction::from_fn(grid, |x| (x * p).sin().abs() + 0.1);
        let g = GridFunction::from_fn(grid, |x| x.powf(p));
        let combo = GridFunction::from_fn(grid, |x| c1 * ((x * p).sin().abs() + 0.1) + c2 * x.powf(p));
        let gf = green_apply(unit(), &kill, &f).unwrap();
        let gg = green_apply(unit(), &kill, &g).unwrap();
        let gc = green_apply(unit(), &kill, &combo).unwrap();
        for j in 0..=CELLS {
            let lin = c1 * gf.values[j] + c2 * gg.values[j];
            prop_assert!((gc.values[j] - lin).abs() <= 1e-10 * (1.0 + lin.abs()));
            prop_assert!(gf.values[j] >= 0.0 && gg.values[j] >= 0.0);
        }
        prop_assert!(gf.values[CELLS / 2] > 0.0);
    }

    #[test]
    fn poisson_kernels_are_subprobabilities(n in 1u32..50) {
        let un = solve_constant_data(unit(), n as f64, CELLS).unwrap();
        let kill = tilt_rate(&un);
        let kl = poisson_kernel(unit(), &kill, Side::Left).unwrap();
        let kr = poisson_kernel(unit(), &kill, Side::Right).unwrap();
        prop_assert!((kl.values[0] - 1.0).abs() < 1e-12 && kl.values[CELLS].abs() < 1e-12);
        for j in 1..CELLS {
            let s = kl.values[j] + kr.values[j];
            prop_assert!(kl.values[j] > 0.0 && kr.values[j] > 0.0 && s < 1.0);
            // Symmetric data gives mirrored kernels.
            prop_assert!((kl.values[j] - kr.values[CELLS - j]).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_log_ignores_scale(c in 0.01..100.0f64, p in 0.5..3.0f64) {
        let grid = Grid::new(unit(), CELLS);
        let h = GridFunction::from_fn(grid, |x| 1.0 + x.powf(p));
        let a = grad_log(&h).unwrap();
        let b = grad_log(&h.scaled(c)).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn label_set_splits(bits in 1u16..(1 << 10)) {
        let c = LabelSet(bits);
        let k = c.len();
        prop_assert_eq!(c.proper_subsets().count(), (1usize << k) - 2);
        let splits: Vec<LabelSet> = c.unordered_splits().collect();
        prop_assert_eq!(splits.len(), (1usize << (k - 1)) - 1);
        for a in splits {
            let b = c.minus(a);
            prop_assert!(!a.is_empty() && !b.is_empty());
            prop_assert!(a.disjoint(b));
            prop_assert_eq!(a.union(b), c);
        }
    }

    #[test]
    fn merging_atoms_keeps_mass(pairs in prop::collection::vec((0.01..0.99f64, 0.0..3.0f64), 0..20)) {
        let m = AtomicMeasure::from_pairs(&pairs);
        let merged = m.merged();
        prop_assert!((m.total_mass() - merged.total_mass()).abs() < 1e-12);
        prop_assert!(merged.atoms.len() <= m.atoms.len());
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        grid in 16usize..5000,
        reps in 0usize..100_000,
        left in 0u64..5,
        right in 0u64..5,
        level in 1u32..10,
    ) {
        prop_assume!(left + right > 0);
        let cfg = ExperimentConfig {
            seed,
            grid_size: grid,
            replicates: reps,
            nu_counts: [left, right],
            nu_level: level,
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_json_str(&cfg.to_json_string()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn seeding_is_deterministic(seed in any::<u64>(), index in any::<u64>()) {
        let mut a = rng_for(seed, "prop", index);
        let mut b = rng_for(seed, "prop", index);
        let xa: Vec<u64> = (0..8).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.random()).collect();
        prop_assert_eq!(xa, xb);
        let mut c = rng_for(seed, "prop", index.wrapping_add(1));
        let mut d = rng_for(seed, "prop", index);
        prop_assert_ne!(c.random::<u64>(), d.random::<u64>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rho_mirrors_under_reflection(left in 0u64..3, right in 0u64..3, n in 1u32..3) {
        prop_assume!(left + right > 0);
        let a = RhoFamily::build(unit(), &atoms_from_counts([left, right]), n, 48).unwrap();
        let b = RhoFamily::build(unit(), &atoms_from_counts([right, left]), n, 48).unwrap();
        let ra = a.rho(LabelSet::full(a.k()));
        let rb = b.rho(LabelSet::full(b.k()));
        for j in 1..48 {
            let (x, y) = (ra.values[j], rb.values[48 - j]);
            prop_assert!(x > 0.0);
            prop_assert!((x - y).abs() <= 1e-9 * x);
        }
    }

    #[test]
    fn seeds_and_trees_conserve_labels(left in 0u64..3, right in 0u64..3, draw in any::<u64>()) {
        prop_assume!(left + right > 0);
        let k = (left + right) as usize;
        let family = RhoFamily::build(unit(), &atoms_from_counts([left, right]), 1, 48).unwrap();
        let mu = AtomicMeasure::from_pairs(&[(0.25, 0.5), (0.625, 1.0)]);
        let sampler = SeedSampler::new(&family, &mu).unwrap();
        let mut rng = rng_for(draw, "prop.tree", 0);
        let seed = sampler.sample(&mut rng);
        prop_assert!(seed.is_partition_of(k));
        prop_assert!(seed.starts.iter().all(|x| *x == 0.25 || *x == 0.625));
        for motion in [Motion::Lattice, Motion::Diffusion { dt: 1e-4 }] {
            let tree = simulate_backbone(&seed, &family, motion, &mut rng).unwrap();
            if let Err(e) = tree.verify() {
                prop_assert!(false, "{e} {motion:?}");
            }
            let mut covered = LabelSet(0);
            for leaf in tree.leaves() {
                prop_assert!(leaf.label.is_singleton());
                prop_assert!(matches!(leaf.end, NodeEnd::Exit { .. }), "leaf must exit");
                prop_assert!(covered.disjoint(leaf.label));
                covered = covered.union(leaf.label);
                if let NodeEnd::Exit { side, .. } = leaf.end {
                    prop_assert_eq!(side, tree.atoms[leaf.label.min_label()]);
                }
            }
            prop_assert_eq!(covered, LabelSet::full(k));
        }
    }
}

#[test]
fn partitions_are_counted_by_bell_numbers() {
    let bell = [1, 1, 2, 5, 15, 52, 203];
    for (k, b) in bell.iter().enumerate().skip(1) {
        let parts = enumerate_partitions(k);
        assert_eq!(parts.len(), *b);
        for p in parts {
            let mut acc = LabelSet(0);
            for block in p {
                assert!(acc.disjoint(block) && !block.is_empty());
                acc = acc.union(block);
            }
            assert_eq!(acc, LabelSet::full(k));
        }
    }
}

#[test]
fn replicate_ignores_thread_scheduling() {
    let draw = |rng: &mut exitlab::seeding::SimRng| Ok(rng.random::<f64>());
    let a = replicate(500, 3, "prop.replicate", draw).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| replicate(500, 3, "prop.replicate", draw).unwrap());
    assert_eq!(a, b);
}
