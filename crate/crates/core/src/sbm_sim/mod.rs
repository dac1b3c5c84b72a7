//! Simulation of super-Brownian exit measures on an interval.
//!
//! Two engines share one interface:
//!
//! * [`Engine::Lattice`]: the superprocess whose motion is the continuous-time
//!   random walk generated by the finite-difference Laplacian. Each time step
//!   applies the exact Feller branching transition at every node and the
//!   exact linear flow `exp(Δt(L_h − k))`. Its log-Laplace equation is the
//!   same difference equation the PDE layer solves, so PDE outputs on the
//!   lattice grid are exact oracles for it.
//! * [`Engine::Particles`]: critical binary branching Brownian particles of
//!   mass `1/N`.

mod lattice;
mod particles;

pub use lattice::LatticeStage;
pub use particles::{Particle, ParticlePopulation, ParticleStage, ParticleStatus};

use crate::domain_pde::{
    solve_dirichlet_semilinear, BoundaryKind, Domain1D, Grid, GridFunction, PdeError, BRANCHING_COEFF,
};
use crate::seeding;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mass immigrated per unit of backbone time.
pub const IMMIGRATION_RATE: f64 = 2.0 * BRANCHING_COEFF;

/// Offspring rate multiplier `γ` (rate `γN` per particle); `ψ(λ) = (γ/2)λ²`.
pub const DEFAULT_BRANCHING: f64 = 2.0 * BRANCHING_COEFF;

pub const DEFAULT_POPULATION_CAP: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial atom at {point} lies outside [{left}, {right}]")]
    AtomOutside { point: f64, left: f64, right: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("population cap of {cap} particles exceeded")]
    PopulationCap { cap: usize },
    #[error("simulation still running after {steps} steps")]
    Horizon { steps: u64 },
    #[error(transparent)]
    Pde(#[from] PdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: f64,
    pub weight: f64,
}

/// Finite atomic measure. Exit measures, `ν`, `ν_n` and `U_n` live on the
/// boundary; initial measures may have interior atoms. Repeated points are
/// allowed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AtomicMeasure {
    pub atoms: Vec<Atom>,
}

impl AtomicMeasure {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dirac(point: f64, weight: f64) -> Self {
        let mut m = Self::zero();
        m.push(point, weight);
        m
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let mut m = Self::zero();
        for &(p, w) in pairs {
            m.push(p, w);
        }
        m
    }

    /// Adds an atom; nonpositive weights are ignored.
    pub fn push(&mut self, point: f64, weight: f64) {
        if weight > 0.0 {
            self.atoms.push(Atom { point, weight });
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(a.point)).sum()
    }

    /// Total weight of atoms within `1e-12` of `point`.
    pub fn mass_at(&self, point: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| (a.point - point).abs() <= 1e-12 * (1.0 + point.abs()))
            .map(|a| a.weight)
            .sum()
    }

    /// Masses at the two endpoints of `domain`, as `[left, right]`.
    pub fn side_masses(&self, domain: &Domain1D) -> [f64; 2] {
        [self.mass_at(domain.left), self.mass_at(domain.right)]
    }

    pub fn sum(&self, other: &AtomicMeasure) -> AtomicMeasure {
        let mut out = self.clone();
        out.atoms.extend_from_slice(&other.atoms);
        out.merged()
    }

    /// Coalesces atoms at equal points, sorted by position.
    pub fn merged(&self) -> AtomicMeasure {
        let mut atoms = self.atoms.clone();
        atoms.sort_by(|a, b| a.point.total_cmp(&b.point));
        let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match out.last_mut() {
                Some(last) if (last.point - a.point).abs() <= 1e-12 * (1.0 + a.point.abs()) => {
                    last.weight += a.weight
                }
                _ => out.push(a),
            }
        }
        AtomicMeasure { atoms: out }
    }

    pub fn from_sides(domain: &Domain1D, masses: [f64; 2]) -> AtomicMeasure {
        AtomicMeasure::from_pairs(&[(domain.left, masses[0]), (domain.right, masses[1])])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawVariant {
    Plain,
    Killed { n: u32 },
    ExtinctionConditioned,
}

/// Which superprocess to run. `kill_field` holds the killing *rate*: for
/// `Killed{n}` it is `ψ'(u⁽ⁿ⁾) = 4u⁽ⁿ⁾`, the rate produced by tilting with
/// `e^{−⟨X_D, n⟩}`; for the extinction law it is `4u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationLaw {
    pub variant: LawVariant,
    pub kill_field: Option<GridFunction>,
}

/// Killing rate produced by tilting with a solution `v` of the PDE.
pub fn tilt_rate(v: &GridFunction) -> GridFunction {
    v.scaled(2.0 * BRANCHING_COEFF)
}

impl SimulationLaw {
    pub fn plain() -> Self {
        SimulationLaw { variant: LawVariant::Plain, kill_field: None }
    }

    /// Killed law from the solution `u⁽ⁿ⁾`.
    pub fn killed(n: u32, u_n: &GridFunction) -> Self {
        SimulationLaw { variant: LawVariant::Killed { n }, kill_field: Some(tilt_rate(u_n)) }
    }

    /// Killed law with `u⁽ⁿ⁾` solved on a `cells` grid over `domain`.
    pub fn killed_at_level(n: u32, domain: Domain1D, cells: usize) -> Result<Self, PdeError> {
        let u = solve_dirichlet_semilinear(domain, (n as f64, n as f64), cells)?;
        Ok(Self::killed(n, &u))
    }

    /// Extinction-conditioned law from the large solution (or any solution
    /// that plays its role on a subdomain).
    pub fn extinction_conditioned(u: &GridFunction) -> Self {
        SimulationLaw { variant: LawVariant::ExtinctionConditioned, kill_field: Some(tilt_rate(u)) }
    }

    pub fn kill_rate(&self, x: f64) -> f64 {
        self.kill_field.as_ref().map_or(0.0, |k| k.eval(x))
    }

    fn validate(&self) -> Result<(), SimError> {
        match (&self.variant, &self.kill_field) {
            (LawVariant::Plain, None) => Ok(()),
            (LawVariant::Plain, Some(_)) => Err(SimError::Input("plain law carries a kill field".into())),
            (_, None) => Err(SimError::Input("killed law without kill field".into())),
            (_, Some(k)) => {
                if k.interior().iter().all(|v| v.is_finite() && *v >= 0.0) {
                    Ok(())
                } else {
                    Err(SimError::Input("kill field must be finite and nonnegative inside".into()))
                }
            }
        }
    }

    /// True when mass reaching the boundary of `subdomain` is to be dropped:
    /// the extinction law on the domain where its kill field blows up.
    fn discards_exits(&self, subdomain: &Domain1D) -> bool {
        match &self.kill_field {
            Some(k) if self.variant == LawVariant::ExtinctionConditioned => {
                k.boundary_kind == BoundaryKind::BlowUp && {
                    let d = k.grid.domain;
                    let tol = 1e-9 * d.length();
                    (d.left - subdomain.left).abs() <= tol && (d.right - subdomain.right).abs() <= tol
                }
            }
            _ => false,
        }
    }
}

fn default_branching() -> f64 {
    DEFAULT_BRANCHING
}

fn default_cap() -> usize {
    DEFAULT_POPULATION_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeParams {
    pub cells: usize,
    pub dt: f64,
    #[serde(default = "default_branching")]
    pub branching: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleParams {
    pub n: usize,
    pub dt: f64,
    #[serde(default = "default_branching")]
    pub branching: f64,
    #[serde(default = "default_cap")]
    pub cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    Lattice(LatticeParams),
    Particles(ParticleParams),
}

impl Engine {
    pub fn lattice(cells: usize, dt: f64) -> Self {
        Engine::Lattice(LatticeParams { cells, dt, branching: DEFAULT_BRANCHING })
    }

    pub fn particles(n: usize, dt: f64) -> Self {
        Engine::Particles(ParticleParams { n, dt, branching: DEFAULT_BRANCHING, cap: DEFAULT_POPULATION_CAP })
    }

    pub fn branching(&self) -> f64 {
        match self {
            Engine::Lattice(p) => p.branching,
            Engine::Particles(p) => p.branching,
        }
    }

    pub fn with_branching(mut self, gamma: f64) -> Self {
        match &mut self {
            Engine::Lattice(p) => p.branching = gamma,
            Engine::Particles(p) => p.branching = gamma,
        }
        self
    }

    pub fn dt(&self) -> f64 {
        match self {
            Engine::Lattice(p) => p.dt,
            Engine::Particles(p) => p.dt,
        }
    }
}

/// A piece of backbone path along which mass immigrates at
/// [`IMMIGRATION_RATE`]. Position moves linearly from `x0` to `x1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImmigrationSegment {
    pub t0: f64,
    pub t1: f64,
    pub x0: f64,
    pub x1: f64,
}

impl ImmigrationSegment {
    pub fn at(&self, t: f64) -> f64 {
        if self.t1 <= self.t0 {
            return self.x0;
        }
        let th = ((t - self.t0) / (self.t1 - self.t0)).clamp(0.0, 1.0);
        (1.0 - th) * self.x0 + th * self.x1
    }
}

/// Engine plus the ambient domain `D` (the lattice spans `D`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulator {
    pub domain: Domain1D,
    pub engine: Engine,
}

impl Simulator {
    pub fn new(domain: Domain1D, engine: Engine) -> Result<Self, SimError> {
        match engine {
            Engine::Lattice(p) => {
                if p.cells < 4 || !(p.dt > 0.0) || !(p.branching > 0.0) {
                    return Err(SimError::Input(format!("bad lattice parameters {p:?}")));
                }
            }
            Engine::Particles(p) => {
                if p.n == 0 || !(p.dt > 0.0) || !(p.branching > 0.0) || p.cap == 0 {
                    return Err(SimError::Input(format!("bad particle parameters {p:?}")));
                }
            }
        }
        Ok(Simulator { domain, engine })
    }

    /// Lattice grid over `D`, if this is a lattice simulator.
    pub fn lattice_grid(&self) -> Option<Grid> {
        match self.engine {
            Engine::Lattice(p) => Some(Grid::new(self.domain, p.cells)),
            Engine::Particles(_) => None,
        }
    }

    /// Moves the endpoints of `d` to the nearest lattice nodes (identity for
    /// the particle engine).
    pub fn snap(&self, d: &Domain1D) -> Result<Domain1D, SimError> {
        match self.lattice_grid() {
            None => Ok(*d),
            Some(g) => {
                let a = g.nearest_node(d.left);
                let b = g.nearest_node(d.right);
                if b <= a + 1 {
                    return Err(SimError::Input(format!("subdomain {d:?} has no interior lattice node")));
                }
                Ok(Domain1D { left: g.x(a), right: g.x(b) })
            }
        }
    }

    /// Default exhaustion `D_1 ⋐ … ⋐ D_depth`, snapped to the lattice.
    pub fn exhaustion(&self, depth: usize) -> Result<Vec<Domain1D>, SimError> {
        let raw = self.domain.exhaustion(depth);
        self.snap_exhaustion(&raw)
    }

    pub fn snap_exhaustion(&self, raw: &[Domain1D]) -> Result<Vec<Domain1D>, SimError> {
        let snapped = raw.iter().map(|d| self.snap(d)).collect::<Result<Vec<_>, _>>()?;
        for w in snapped.windows(2) {
            if !w[0].compactly_inside(&w[1]) {
                return Err(SimError::Input(format!(
                    "exhaustion members {:?} and {:?} are not strictly nested on this lattice; use more cells",
                    w[0], w[1]
                )));
            }
        }
        if let Some(last) = snapped.last() {
            if !last.compactly_inside(&self.domain) {
                return Err(SimError::Input("last exhaustion member touches the boundary".into()));
            }
        }
        Ok(snapped)
    }

    /// Prepares a stage: the law run until exit from `subdomain`.
    pub fn stage(&self, law: &SimulationLaw, subdomain: &Domain1D) -> Result<Stage, SimError> {
        law.validate()?;
        if !(subdomain.left >= self.domain.left - 1e-12 && subdomain.right <= self.domain.right + 1e-12) {
            return Err(SimError::Input(format!("subdomain {subdomain:?} leaves the domain")));
        }
        let discard = law.discards_exits(subdomain);
        Ok(match self.engine {
            Engine::Lattice(p) => {
                let sub = self.snap(subdomain)?;
                Stage::Lattice(LatticeStage::new(self.domain, p, law, &sub, discard)?)
            }
            Engine::Particles(p) => Stage::Particles(ParticleStage::new(p, law, subdomain, discard)),
        })
    }
}

/// A law prepared on one subdomain.
#[derive(Debug, Clone)]
pub enum Stage {
    Lattice(LatticeStage),
    Particles(ParticleStage),
}

impl Stage {
    pub fn subdomain(&self) -> Domain1D {
        match self {
            Stage::Lattice(s) => s.subdomain(),
            Stage::Particles(s) => s.subdomain(),
        }
    }

    /// One exit measure from `initial` plus immigration along `immigration`.
    pub fn run<R: Rng + ?Sized>(
        &self,
        initial: &AtomicMeasure,
        immigration: &[ImmigrationSegment],
        rng: &mut R,
    ) -> Result<AtomicMeasure, SimError> {
        let sub = self.subdomain();
        for a in &initial.atoms {
            if !(a.point >= sub.left - 1e-12 && a.point <= sub.right + 1e-12) {
                return Err(SimError::AtomOutside { point: a.point, left: sub.left, right: sub.right });
            }
        }
        match self {
            Stage::Lattice(s) => s.run(initial, immigration, rng),
            Stage::Particles(s) => s.run(initial, immigration, rng),
        }
    }
}

pub fn sample_exit_measure<R: Rng + ?Sized>(
    sim: &Simulator,
    mu: &AtomicMeasure,
    law: &SimulationLaw,
    subdomain: &Domain1D,
    rng: &mut R,
) -> Result<AtomicMeasure, SimError> {
    sim.stage(law, subdomain)?.run(mu, &[], rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub replicates: usize,
}

impl MeanEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanEstimate { estimate: f64::NAN, stderr: f64::NAN, replicates: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        MeanEstimate { estimate: mean, stderr: (var / n as f64).sqrt(), replicates: n }
    }
}

/// Runs `replicates` independent draws in parallel, each with its own
/// generator derived from `(seed, module, index)`.
pub fn replicate<T, F>(replicates: usize, seed: u64, module: &str, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(&mut seeding::SimRng) -> Result<T, SimError> + Sync,
{
    (0..replicates)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::rng_for(seed, module, i as u64);
            f(&mut rng)
        })
        .collect()
}

/// Monte Carlo estimate of `E_μ e^{−⟨X_D, f⟩}` for boundary values `f`.
pub fn laplace_functional(
    sim: &Simulator,
    mu: &AtomicMeasure,
    law: &SimulationLaw,
    f: (f64, f64),
    replicates: usize,
    seed: u64,
) -> Result<MeanEstimate, SimError> {
    if !(f.0 >= 0.0 && f.1 >= 0.0 && f.0.is_finite() && f.1.is_finite()) {
        return Err(SimError::Input("boundary function must be finite and nonnegative".into()));
    }
    let stage = sim.stage(law, &sim.domain)?;
    let d = stage.subdomain();
    let values = replicate(replicates, seed, "sbm_sim.laplace", |rng| {
        let x = stage.run(mu, &[], rng)?;
        let [l, r] = x.side_masses(&d);
        Ok((-(f.0 * l + f.1 * r)).exp())
    })?;
    Ok(MeanEstimate::from_samples(&values))
}

/// Stages for a chain of subdomains, prepared once and reused.
#[derive(Debug, Clone)]
pub struct ChainSampler {
    pub stages: Vec<Stage>,
}

impl ChainSampler {
    pub fn new(sim: &Simulator, law: &SimulationLaw, domains: &[Domain1D]) -> Result<Self, SimError> {
        if domains.is_empty() {
            return Err(SimError::Input("empty exhaustion".into()));
        }
        for w in domains.windows(2) {
            if !(w[0].left >= w[1].left && w[0].right <= w[1].right) {
                return Err(SimError::Input("chain subdomains must increase".into()));
            }
        }
        let stages = domains.iter().map(|d| sim.stage(law, d)).collect::<Result<Vec<_>, _>>()?;
        Ok(ChainSampler { stages })
    }

    pub fn sample<R: Rng + ?Sized>(&self, mu: &AtomicMeasure, rng: &mut R) -> Result<Vec<AtomicMeasure>, SimError> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut current = mu.clone();
        for stage in &self.stages {
            current = stage.run(&current, &[], rng)?;
            out.push(current.clone());
        }
        Ok(out)
    }
}

/// `X_{D_1}, X_{D_2}, …`, each stage started from the previous exit measure.
pub fn sample_exit_chain<R: Rng + ?Sized>(
    sim: &Simulator,
    mu: &AtomicMeasure,
    law: &SimulationLaw,
    exhaustion: &[Domain1D],
    rng: &mut R,
) -> Result<Vec<AtomicMeasure>, SimError> {
    ChainSampler::new(sim, law, exhaustion)?.sample(mu, rng)
}

/// Chain sampler for the law conditioned on `X_D = 0`: branching dynamics
/// killed at `4u`. On the lattice, stages inside `D_K` use the lattice
/// solution on `D_K` with boundary data `u|∂D_K`, which is the exact
/// continuation weight for that grid. The final stage on `D` drops mass that
/// reaches the blow-up boundary, so the last measure is always zero.
#[derive(Debug, Clone)]
pub struct ExtinctionSampler {
    pub chain: Vec<Stage>,
    pub last: Stage,
    pub inner_law: SimulationLaw,
}

impl ExtinctionSampler {
    pub fn new(sim: &Simulator, u: &GridFunction, exhaustion: &[Domain1D]) -> Result<Self, SimError> {
        if u.boundary_kind != BoundaryKind::BlowUp {
            return Err(SimError::Input("extinction conditioning needs the large solution".into()));
        }
        let inner_law = match (sim.lattice_grid(), exhaustion.last()) {
            (Some(g), Some(dk)) => {
                let dk = sim.snap(dk)?;
                let cells = ((dk.right - dk.left) / g.h()).round() as usize;
                let v = solve_dirichlet_semilinear(dk, (u.eval(dk.left), u.eval(dk.right)), cells)?;
                SimulationLaw::extinction_conditioned(&v)
            }
            _ => SimulationLaw::extinction_conditioned(u),
        };
        let chain = exhaustion.iter().map(|d| sim.stage(&inner_law, d)).collect::<Result<Vec<_>, _>>()?;
        let last = sim.stage(&SimulationLaw::extinction_conditioned(u), &sim.domain)?;
        Ok(ExtinctionSampler { chain, last, inner_law })
    }

    /// `X_{D_1}, …, X_{D_K}, X_D` with `X_D = 0`.
    pub fn sample<R: Rng + ?Sized>(&self, mu: &AtomicMeasure, rng: &mut R) -> Result<Vec<AtomicMeasure>, SimError> {
        let mut out = Vec::with_capacity(self.chain.len() + 1);
        let mut current = mu.clone();
        for stage in &self.chain {
            current = stage.run(&current, &[], rng)?;
            out.push(current.clone());
        }
        out.push(self.last.run(&current, &[], rng)?);
        Ok(out)
    }
}

pub fn sample_extinction_conditioned<R: Rng + ?Sized>(
    sim: &Simulator,
    mu: &AtomicMeasure,
    u: &GridFunction,
    exhaustion: &[Domain1D],
    rng: &mut R,
) -> Result<Vec<AtomicMeasure>, SimError> {
    for a in &mu.atoms {
        if !sim.domain.contains(a.point) {
            return Err(SimError::AtomOutside { point: a.point, left: sim.domain.left, right: sim.domain.right });
        }
    }
    ExtinctionSampler::new(sim, u, exhaustion)?.sample(mu, rng)
}
