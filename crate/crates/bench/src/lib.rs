//! Fixtures shared by the benches.

use exitlab::{AtomicMeasure, Domain1D, Engine, Simulator};

pub const SEED: u64 = 11;

pub fn lattice_simulator(cells: usize) -> Simulator {
    Simulator::new(Domain1D::unit(), Engine::lattice(cells, 1e-3)).expect("valid lattice")
}

pub fn particle_simulator(particles: usize) -> Simulator {
    Simulator::new(Domain1D::unit(), Engine::particles(particles, 1e-3)).expect("valid engine")
}

pub fn center_mass(weight: f64) -> AtomicMeasure {
    AtomicMeasure::dirac(0.5, weight)
}
