//! Branching Brownian particles of mass `1/N` with critical binary branching
//! at rate `γN`.

use super::{AtomicMeasure, ImmigrationSegment, ParticleParams, SimError, SimulationLaw, IMMIGRATION_RATE};
use crate::domain_pde::{Domain1D, GridFunction, Side};
use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson, StandardNormal};

const HORIZON: f64 = 1.0e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParticleStatus {
    Alive,
    Frozen(Side),
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub position: f64,
    pub mass: f64,
    pub status: ParticleStatus,
}

/// Alive and frozen particles, all of mass `epsilon`. Dead particles are
/// dropped when a step completes.
#[derive(Debug, Clone)]
pub struct ParticlePopulation {
    pub particles: Vec<Particle>,
    pub epsilon: f64,
    pub clock: f64,
}

/// Exact offspring count over `Δt` for binary critical branching at total
/// rate `b`, with `a = bΔt/2`: zero with probability `a/(1+a)`, otherwise
/// geometric on `{1, 2, …}` with success probability `1/(1+a)`.
pub(crate) fn offspring<R: Rng + ?Sized>(a: f64, rng: &mut R) -> u64 {
    let p0 = a / (1.0 + a);
    if rng.random::<f64>() < p0 {
        return 0;
    }
    1 + Geometric::new(1.0 / (1.0 + a)).expect("valid probability").sample(rng)
}

impl ParticlePopulation {
    pub fn new(epsilon: f64) -> Self {
        ParticlePopulation { particles: Vec::new(), epsilon, clock: 0.0 }
    }

    pub fn alive(&self) -> usize {
        self.particles.iter().filter(|p| p.status == ParticleStatus::Alive).count()
    }

    pub fn add(&mut self, position: f64, count: u64, sub: &Domain1D) {
        let status = match sub.side_of(position) {
            Some(s) => ParticleStatus::Frozen(s),
            None => ParticleStatus::Alive,
        };
        let position = match status {
            ParticleStatus::Frozen(s) => sub.endpoint(s),
            _ => position,
        };
        for _ in 0..count {
            self.particles.push(Particle { position, mass: self.epsilon, status });
        }
    }

    /// Frozen mass on each side, `[left, right]`.
    pub fn frozen_mass(&self) -> [f64; 2] {
        let mut out = [0.0; 2];
        for p in &self.particles {
            if let ParticleStatus::Frozen(s) = p.status {
                out[s.index()] += p.mass;
            }
        }
        out
    }

    /// One step: Gaussian move with bridge-corrected exit detection, killing
    /// at the midpoint, then branching.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        sub: &Domain1D,
        kill: Option<&GridFunction>,
        offspring_a: f64,
        dt: f64,
        keep_frozen: bool,
        rng: &mut R,
    ) {
        let sd = dt.sqrt();
        let mut out = Vec::with_capacity(self.particles.len());
        for p in self.particles.drain(..) {
            if p.status != ParticleStatus::Alive {
                if matches!(p.status, ParticleStatus::Frozen(_)) {
                    out.push(p);
                }
                continue;
            }
            let x0 = p.position;
            let z: f64 = StandardNormal.sample(rng);
            let x1 = x0 + sd * z;
            let exit = if x1 <= sub.left {
                Some(Side::Left)
            } else if x1 >= sub.right {
                Some(Side::Right)
            } else {
                let pl = (-2.0 * (x0 - sub.left) * (x1 - sub.left) / dt).exp();
                let pr = (-2.0 * (sub.right - x0) * (sub.right - x1) / dt).exp();
                let u: f64 = rng.random();
                if u < pl {
                    Some(Side::Left)
                } else if u < pl + pr {
                    Some(Side::Right)
                } else {
                    None
                }
            };
            if let Some(s) = exit {
                if keep_frozen {
                    out.push(Particle { position: sub.endpoint(s), mass: p.mass, status: ParticleStatus::Frozen(s) });
                }
                continue;
            }
            if let Some(k) = kill {
                let rate = k.eval(0.5 * (x0 + x1));
                if rng.random::<f64>() >= (-rate * dt).exp() {
                    continue;
                }
            }
            let c = offspring(offspring_a, rng);
            for _ in 0..c {
                out.push(Particle { position: x1, mass: p.mass, status: ParticleStatus::Alive });
            }
        }
        self.particles = out;
        self.clock += dt;
    }
}

#[derive(Debug, Clone)]
pub struct ParticleStage {
    params: ParticleParams,
    sub: Domain1D,
    kill: Option<GridFunction>,
    discard_exits: bool,
}

impl ParticleStage {
    pub(super) fn new(params: ParticleParams, law: &SimulationLaw, sub: &Domain1D, discard_exits: bool) -> Self {
        ParticleStage { params, sub: *sub, kill: law.kill_field.clone(), discard_exits }
    }

    pub fn subdomain(&self) -> Domain1D {
        self.sub
    }

    pub(super) fn run<R: Rng + ?Sized>(
        &self,
        initial: &AtomicMeasure,
        immigration: &[ImmigrationSegment],
        rng: &mut R,
    ) -> Result<AtomicMeasure, SimError> {
        let p = self.params;
        let nf = p.n as f64;
        let eps = 1.0 / nf;
        let mut pop = ParticlePopulation::new(eps);
        for a in &initial.atoms {
            let count = (a.weight * nf - 1e-9).ceil().max(0.0) as u64;
            pop.add(a.point, count, &self.sub);
        }
        // Spawn times: a Poisson process at rate IMMIGRATION_RATE·N per path.
        let mut spawns: Vec<(f64, f64)> = Vec::new();
        for seg in immigration {
            let len = seg.t1 - seg.t0;
            if len <= 0.0 {
                continue;
            }
            let k = Poisson::new(IMMIGRATION_RATE * nf * len).map(|d| d.sample(rng)).unwrap_or(0.0) as u64;
            for _ in 0..k {
                let t = seg.t0 + len * rng.random::<f64>();
                spawns.push((t, seg.at(t)));
            }
        }
        spawns.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut si = 0;
        let a = 0.5 * p.branching * nf * p.dt;
        let max_steps = (HORIZON / p.dt).ceil() as u64;
        let mut steps = 0u64;
        loop {
            let alive = pop.alive();
            if alive == 0 {
                if si == spawns.len() {
                    break;
                }
                pop.clock = pop.clock.max((spawns[si].0 / p.dt).floor() * p.dt);
            }
            while si < spawns.len() && spawns[si].0 < pop.clock + p.dt {
                pop.add(spawns[si].1, 1, &self.sub);
                si += 1;
            }
            if alive > p.cap {
                return Err(SimError::PopulationCap { cap: p.cap });
            }
            if steps >= max_steps {
                return Err(SimError::Horizon { steps });
            }
            pop.step(&self.sub, self.kill.as_ref(), a, p.dt, !self.discard_exits, rng);
            steps += 1;
        }
        if self.discard_exits {
            return Ok(AtomicMeasure::zero());
        }
        Ok(AtomicMeasure::from_sides(&self.sub, pop.frozen_mass()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offspring_law_is_critical() {
        let mut rng = crate::seeding::rng_for(3, "test", 0);
        let a = 2.0;
        let n = 200_000;
        let draws: Vec<u64> = (0..n).map(|_| offspring(a, &mut rng)).collect();
        let mean = draws.iter().sum::<u64>() as f64 / n as f64;
        let p0 = draws.iter().filter(|k| **k == 0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        assert!((p0 - 2.0 / 3.0).abs() < 0.005, "{p0}");
    }

    #[test]
    fn frozen_particles_sit_on_the_boundary() {
        let d = Domain1D::unit();
        let mut pop = ParticlePopulation::new(0.01);
        let mut rng = crate::seeding::rng_for(4, "test", 0);
        pop.add(0.02, 50, &d);
        for _ in 0..200 {
            pop.step(&d, None, 0.0, 1e-3, true, &mut rng);
        }
        for p in &pop.particles {
            if let ParticleStatus::Frozen(s) = p.status {
                assert_eq!(p.position, d.endpoint(s));
            }
        }
        assert!(pop.frozen_mass()[0] > 0.0);
    }
}
