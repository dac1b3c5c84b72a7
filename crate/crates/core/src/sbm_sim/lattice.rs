//! Lattice superprocess: exact Feller branching per node, exact linear flow
//! between nodes, Strang-split in time.

use super::{AtomicMeasure, ImmigrationSegment, LatticeParams, SimError, SimulationLaw, IMMIGRATION_RATE};
use crate::domain_pde::{Domain1D, Grid};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

/// Simulated time after which a run is declared stuck.
const HORIZON: f64 = 1.0e4;

/// Flow entries below this are dropped from the banded propagator.
const FLOW_TRUNCATION: f64 = 1e-13;

#[derive(Debug, Clone)]
struct Column {
    start: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LatticeStage {
    grid: Grid,
    lo: usize,
    hi: usize,
    dt: f64,
    /// Feller scale `γτ/2` for `τ = Δt/2` and `τ = Δt`.
    theta_half: f64,
    theta_full: f64,
    flow: Vec<Column>,
    exit_left: Vec<f64>,
    exit_right: Vec<f64>,
    discard_exits: bool,
}

/// Exact transition of the Feller diffusion with `ψ(λ) = cλ²` over time `t`,
/// where `theta = c·t`: a Poisson(`m/θ`) number of exponential clusters of
/// mean `θ`.
pub(crate) fn feller_step<R: Rng + ?Sized>(m: f64, theta: f64, rng: &mut R) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    let lambda = m / theta;
    let k = Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(0.0);
    if k < 0.5 {
        return 0.0;
    }
    Gamma::new(k, theta).map(|g| g.sample(rng)).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy)]
struct Deposit {
    half: u64,
    node: usize,
    mass: f64,
}

impl LatticeStage {
    pub(super) fn new(
        domain: Domain1D,
        p: LatticeParams,
        law: &SimulationLaw,
        sub: &Domain1D,
        discard_exits: bool,
    ) -> Result<Self, SimError> {
        let grid = Grid::new(domain, p.cells);
        let lo = grid
            .node_of(sub.left)
            .ok_or_else(|| SimError::Input(format!("subdomain end {} is not a lattice node", sub.left)))?;
        let hi = grid
            .node_of(sub.right)
            .ok_or_else(|| SimError::Input(format!("subdomain end {} is not a lattice node", sub.right)))?;
        if hi < lo + 2 {
            return Err(SimError::Input("subdomain has no interior lattice node".into()));
        }
        let n = hi - lo - 1;
        let h = grid.h();
        let r = 0.5 / (h * h);
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let k = law.kill_rate(grid.x(lo + 1 + i));
            if !(k.is_finite() && k >= 0.0) {
                return Err(SimError::Input(format!("kill rate {k} at node {}", lo + 1 + i)));
            }
            a[(i, i)] = -2.0 * r - k;
            if i + 1 < n {
                a[(i, i + 1)] = r;
                a[(i + 1, i)] = r;
            }
        }
        let eig = SymmetricEigen::new(a);
        let q = &eig.eigenvectors;
        let dt = p.dt;
        let growth: Vec<f64> = eig.eigenvalues.iter().map(|l| (l * dt).exp()).collect();
        let integral: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|l| if (l * dt).abs() < 1e-12 { dt } else { (l * dt).exp_m1() / l })
            .collect();
        let mut flow = Vec::with_capacity(n);
        let mut exit_left = vec![0.0; n];
        let mut exit_right = vec![0.0; n];
        for j in 0..n {
            let col: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|k| q[(i, k)] * q[(j, k)] * growth[k]).sum::<f64>().max(0.0))
                .collect();
            let start = col.iter().position(|v| *v > FLOW_TRUNCATION).unwrap_or(j);
            let end = col.iter().rposition(|v| *v > FLOW_TRUNCATION).map_or(j + 1, |e| e + 1);
            flow.push(Column { start, values: col[start..end].to_vec() });
            exit_left[j] = (r * (0..n).map(|k| q[(0, k)] * q[(j, k)] * integral[k]).sum::<f64>()).max(0.0);
            exit_right[j] = (r * (0..n).map(|k| q[(n - 1, k)] * q[(j, k)] * integral[k]).sum::<f64>()).max(0.0);
        }
        let c = 0.5 * p.branching;
        Ok(LatticeStage {
            grid,
            lo,
            hi,
            dt,
            theta_half: c * 0.5 * dt,
            theta_full: c * dt,
            flow,
            exit_left,
            exit_right,
            discard_exits,
        })
    }

    pub fn subdomain(&self) -> Domain1D {
        Domain1D { left: self.grid.x(self.lo), right: self.grid.x(self.hi) }
    }

    pub fn interior_nodes(&self) -> usize {
        self.hi - self.lo - 1
    }

    /// Fraction of unit mass at local node `j` that survives inside, exits
    /// left and exits right over one flow step.
    pub fn flow_budget(&self, j: usize) -> (f64, f64, f64) {
        (self.flow[j].values.iter().sum(), self.exit_left[j], self.exit_right[j])
    }

    /// Splits mass at `x` between the two neighbouring nodes. Returns global
    /// node indices.
    fn spread(&self, x: f64, mass: f64, out: &mut impl FnMut(usize, f64)) {
        let t = ((x - self.grid.domain.left) / self.grid.h()).clamp(self.lo as f64, self.hi as f64);
        let j = t.floor() as usize;
        let th = t - j as f64;
        if th < 1e-9 || j == self.hi {
            out(j, mass);
        } else if th > 1.0 - 1e-9 {
            out(j + 1, mass);
        } else {
            out(j, (1.0 - th) * mass);
            out(j + 1, th * mass);
        }
    }

    fn deposits(&self, segments: &[ImmigrationSegment]) -> Vec<Deposit> {
        let half = 0.5 * self.dt;
        let mut out = Vec::new();
        for seg in segments {
            let mut t = seg.t0.max(0.0);
            while t < seg.t1 {
                let b = (t / half).floor() as u64;
                let mut end = ((b + 1) as f64 * half).min(seg.t1);
                if end <= t {
                    end = ((b + 2) as f64 * half).min(seg.t1);
                }
                let x = seg.at(0.5 * (t + end));
                let mass = IMMIGRATION_RATE * (end - t);
                self.spread(x, mass, &mut |node, m| out.push(Deposit { half: b, node, mass: m }));
                t = end;
            }
        }
        out.sort_by_key(|d| d.half);
        out
    }

    pub(super) fn run<R: Rng + ?Sized>(
        &self,
        initial: &AtomicMeasure,
        immigration: &[ImmigrationSegment],
        rng: &mut R,
    ) -> Result<AtomicMeasure, SimError> {
        let n = self.interior_nodes();
        let mut m = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut exits = [0.0_f64; 2];
        let (lo, hi) = (self.lo, self.hi);
        let place = |node: usize, mass: f64, m: &mut [f64], exits: &mut [f64; 2]| {
            if node <= lo {
                exits[0] += mass;
            } else if node >= hi {
                exits[1] += mass;
            } else {
                m[node - lo - 1] += mass;
            }
        };
        for a in &initial.atoms {
            self.spread(a.point, a.weight, &mut |node, w| place(node, w, &mut m, &mut exits));
        }
        let deposits = self.deposits(immigration);
        let mut di = 0;
        for v in m.iter_mut() {
            *v = feller_step(*v, self.theta_half, rng);
        }
        let max_steps = (HORIZON / self.dt).ceil() as u64;
        let mut step: u64 = 0;
        loop {
            let alive = m.iter().any(|v| *v > 0.0);
            if !alive {
                if di == deposits.len() {
                    break;
                }
                // Nothing to move; jump to the step holding the next deposit.
                step = step.max(deposits[di].half / 2);
            }
            if step >= max_steps {
                return Err(SimError::Horizon { steps: step });
            }
            while di < deposits.len() && deposits[di].half == 2 * step {
                let d = deposits[di];
                let w = feller_step(d.mass, self.theta_half, rng);
                place(d.node, w, &mut m, &mut exits);
                di += 1;
            }
            next.iter_mut().for_each(|v| *v = 0.0);
            for (j, &mj) in m.iter().enumerate() {
                if mj <= 0.0 {
                    continue;
                }
                let col = &self.flow[j];
                for (i, e) in col.values.iter().enumerate() {
                    next[col.start + i] += e * mj;
                }
                exits[0] += self.exit_left[j] * mj;
                exits[1] += self.exit_right[j] * mj;
            }
            std::mem::swap(&mut m, &mut next);
            while di < deposits.len() && deposits[di].half == 2 * step + 1 {
                let d = deposits[di];
                place(d.node, d.mass, &mut m, &mut exits);
                di += 1;
            }
            for v in m.iter_mut() {
                *v = feller_step(*v, self.theta_full, rng);
            }
            step += 1;
        }
        if self.discard_exits {
            return Ok(AtomicMeasure::zero());
        }
        Ok(AtomicMeasure::from_sides(&self.subdomain(), exits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbm_sim::DEFAULT_BRANCHING;

    fn stage(cells: usize, dt: f64) -> LatticeStage {
        let p = LatticeParams { cells, dt, branching: DEFAULT_BRANCHING };
        let d = Domain1D::unit();
        LatticeStage::new(d, p, &SimulationLaw::plain(), &d, false).unwrap()
    }

    #[test]
    fn flow_conserves_mass_without_killing() {
        let s = stage(32, 1e-3);
        for j in 0..s.interior_nodes() {
            let (inside, l, r) = s.flow_budget(j);
            assert!((inside + l + r - 1.0).abs() < 1e-12, "node {j}: {}", inside + l + r);
        }
    }

    #[test]
    fn flow_is_banded() {
        let s = stage(64, 1e-4);
        assert!(s.flow.iter().all(|c| c.values.len() < 40));
    }

    #[test]
    fn feller_mean_is_preserved() {
        let mut rng = crate::seeding::rng_for(1, "test", 0);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| feller_step(0.3, 0.05, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.005, "{mean}");
        let p0 = (0..n).filter(|_| feller_step(0.3, 0.05, &mut rng) == 0.0).count() as f64 / n as f64;
        assert!((p0 - (-6.0f64).exp()).abs() < 0.002, "{p0}");
    }
}
