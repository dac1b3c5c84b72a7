use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use exitlab::backbone::ConditionedSampler;
use exitlab::domain_pde::{solve_constant_data, solve_large_solution};
use exitlab::sbm_sim::SimulationLaw;
use exitlab::seeding::rng_for;
use exitlab::Domain1D;
use exitlab_bench::{center_mass, lattice_simulator, particle_simulator, SEED};
use std::hint::black_box;

fn pde(c: &mut Criterion) {
    let mut g = c.benchmark_group("pde");
    for cells in [256, 2048] {
        g.bench_with_input(BenchmarkId::new("u1", cells), &cells, |b, &m| {
            b.iter(|| solve_constant_data(Domain1D::unit(), 1.0, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("large", cells), &cells, |b, &m| {
            b.iter(|| solve_large_solution(Domain1D::unit(), m).unwrap())
        });
    }
    g.finish();
}

fn exit_measure(c: &mut Criterion) {
    let mut g = c.benchmark_group("exit_measure");
    g.sample_size(20);
    let mu = center_mass(1.0);
    let lattice = lattice_simulator(48);
    let stage = lattice.stage(&SimulationLaw::plain(), &lattice.domain).unwrap();
    let mut rng = rng_for(SEED, "bench.lattice", 0);
    g.bench_function("lattice_48", |b| b.iter(|| black_box(stage.run(&mu, &[], &mut rng).unwrap())));
    let particles = particle_simulator(200);
    let stage = particles.stage(&SimulationLaw::plain(), &particles.domain).unwrap();
    let mut rng = rng_for(SEED, "bench.particles", 0);
    g.bench_function("particles_200", |b| b.iter(|| black_box(stage.run(&mu, &[], &mut rng).unwrap())));
    g.finish();
}

fn backbone(c: &mut Criterion) {
    let mut g = c.benchmark_group("backbone");
    g.sample_size(20);
    let sim = lattice_simulator(48);
    let mu = center_mass(1.0);
    let ex = sim.exhaustion(5).unwrap();
    for (counts, n) in [([1, 0], 1), ([2, 2], 1)] {
        let sampler = ConditionedSampler::new(&sim, &mu, counts, n, &ex, 48).unwrap();
        let mut rng = rng_for(SEED, "bench.backbone", 0);
        let id = format!("{}_{}_n{n}", counts[0], counts[1]);
        g.bench_function(id, |b| b.iter(|| black_box(sampler.sample(&mut rng).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, pde, exit_measure, backbone);
criterion_main!(benches);
