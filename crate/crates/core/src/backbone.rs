//! Branching backbone for SBM conditioned on a finite atomic boundary
//! configuration: recursive potentials `ρ_C`, the seed law, labelled tree
//! simulation, immigration along the tree, and `Z = W + Y`.

use crate::domain_pde::{
    green_apply, grad_log, poisson_kernel, solve_dirichlet_semilinear, Domain1D, Grid, GridFunction, PdeError, Side,
};
use crate::sbm_sim::{
    tilt_rate, AtomicMeasure, ChainSampler, Engine, ImmigrationSegment, SimError, SimulationLaw, Simulator, Stage,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Largest supported number of atoms in `ν_n`.
pub const MAX_ATOMS: usize = 12;

/// Charge constant in the recursion and in the split weights.
pub const SPLIT_CONSTANT: f64 = 4.0;

/// Jump budget for one backbone path before it is declared stuck.
const MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("{k} atoms requested; at most {MAX_ATOMS} are supported (the recursion memoizes 2^k label sets). Reduce the target counts or n")]
    TooManyAtoms { k: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("simulation integrity: {0}")]
    Integrity(String),
    #[error("rho for label set {label:?} is not positive at node {node} (value {value})")]
    NonPositiveRho { label: LabelSet, node: usize, value: f64 },
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Nonempty subset of `{0, …, k−1}` as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(pub u16);

impl LabelSet {
    pub fn singleton(i: usize) -> Self {
        LabelSet(1 << i)
    }

    pub fn full(k: usize) -> Self {
        LabelSet(((1u32 << k) - 1) as u16)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn is_singleton(self) -> bool {
        self.len() == 1
    }

    pub fn min_label(self) -> usize {
        self.0.trailing_zeros() as usize
    }

    pub fn minus(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & !other.0)
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    pub fn disjoint(self, other: LabelSet) -> bool {
        self.0 & other.0 == 0
    }

    pub fn labels(self) -> impl Iterator<Item = usize> {
        (0..16).filter(move |i| self.contains(*i))
    }

    /// Nonempty proper subsets.
    pub fn proper_subsets(self) -> impl Iterator<Item = LabelSet> {
        let c = self.0;
        let mut a = c;
        std::iter::from_fn(move || loop {
            a = a.wrapping_sub(1) & c;
            if a == 0 {
                return None;
            }
            if a != c {
                return Some(LabelSet(a));
            }
        })
    }

    /// One representative `A` per unordered pair `{A, C∖A}`: the subset that
    /// holds the smallest label.
    pub fn unordered_splits(self) -> impl Iterator<Item = LabelSet> {
        let m = self.min_label();
        self.proper_subsets().filter(move |a| a.contains(m))
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Labels `0..k` for target counts `[left, right]`: left atoms first.
pub fn atoms_from_counts(counts: [u64; 2]) -> Vec<Side> {
    let mut out = vec![Side::Left; counts[0] as usize];
    out.extend(std::iter::repeat_n(Side::Right, counts[1] as usize));
    out
}

/// Reads a unit-atomic boundary measure as target counts.
pub fn counts_of(nu: &AtomicMeasure, domain: &Domain1D) -> Result<[u64; 2], BackboneError> {
    let mut counts = [0u64; 2];
    for a in &nu.merged().atoms {
        let side = domain
            .side_of(a.point)
            .ok_or_else(|| BackboneError::Input(format!("atom at {} is not on the boundary", a.point)))?;
        let w = a.weight.round();
        if (a.weight - w).abs() > 1e-9 || w < 1.0 {
            return Err(BackboneError::Input(format!("atom weight {} is not a positive integer", a.weight)));
        }
        counts[side.index()] += w as u64;
    }
    Ok(counts)
}

/// `ρ_C` for every label set, memoized by the multiset of sides (`ρ_C`
/// depends on `C` only through how many of its atoms sit on each side).
#[derive(Debug, Clone)]
pub struct RhoFamily {
    pub domain: Domain1D,
    pub n: u32,
    pub atoms: Vec<Side>,
    pub u_n: GridFunction,
    /// Killing rate of the tilted motion.
    pub kill: GridFunction,
    by_counts: HashMap<(usize, usize), (GridFunction, GridFunction)>,
}

impl RhoFamily {
    /// Builds the family on a `cells` grid over `domain` with `u⁽ⁿ⁾` solved on
    /// the same grid.
    pub fn build(domain: Domain1D, atoms: &[Side], n: u32, cells: usize) -> Result<Self, BackboneError> {
        let k = atoms.len();
        if k > MAX_ATOMS {
            return Err(BackboneError::TooManyAtoms { k });
        }
        if k == 0 {
            return Err(BackboneError::Input("need at least one atom".into()));
        }
        if n == 0 {
            return Err(BackboneError::Input("n must be at least 1".into()));
        }
        let u_n = solve_dirichlet_semilinear(domain, (n as f64, n as f64), cells)?;
        let kill = tilt_rate(&u_n);
        let a_max = atoms.iter().filter(|s| **s == Side::Left).count();
        let b_max = k - a_max;
        let mut by_counts: HashMap<(usize, usize), (GridFunction, GridFunction)> = HashMap::new();
        let grid = kill.grid;
        for size in 1..=k {
            for a in 0..=a_max.min(size) {
                let b = size - a;
                if b > b_max {
                    continue;
                }
                let entry = if size == 1 {
                    let side = if a == 1 { Side::Left } else { Side::Right };
                    (poisson_kernel(domain, &kill, side)?, GridFunction::zeros(grid))
                } else {
                    let mut q = vec![0.0; grid.node_count()];
                    for i in 0..=a {
                        for j in 0..=b {
                            if (i, j) == (0, 0) || (i, j) == (a, b) {
                                continue;
                            }
                            let mult = binomial(a, i) * binomial(b, j);
                            let ra = &by_counts[&(i, j)].0;
                            let rb = &by_counts[&(a - i, b - j)].0;
                            for (node, qv) in q.iter_mut().enumerate() {
                                *qv += 0.5 * mult * SPLIT_CONSTANT * ra.values[node] * rb.values[node];
                            }
                        }
                    }
                    let charge = GridFunction { grid, values: q, boundary_kind: kill.boundary_kind };
                    (green_apply(domain, &kill, &charge)?, charge)
                };
                by_counts.insert((a, b), entry);
            }
        }
        let fam = RhoFamily { domain, n, atoms: atoms.to_vec(), u_n, kill, by_counts };
        fam.check_positive()?;
        Ok(fam)
    }

    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    pub fn grid(&self) -> Grid {
        self.kill.grid
    }

    fn key(&self, c: LabelSet) -> (usize, usize) {
        let a = c.labels().filter(|i| self.atoms[*i] == Side::Left).count();
        (a, c.len() - a)
    }

    pub fn rho(&self, c: LabelSet) -> &GridFunction {
        &self.by_counts[&self.key(c)].0
    }

    /// `q_C` with `ρ_C = G q_C`; zero for singletons.
    pub fn charge(&self, c: LabelSet) -> &GridFunction {
        &self.by_counts[&self.key(c)].1
    }

    /// Charge of `C` recomputed from the subset sum over all ordered proper
    /// subsets, halved.
    pub fn charge_ordered(&self, c: LabelSet) -> Vec<f64> {
        let mut q = vec![0.0; self.grid().node_count()];
        for a in c.proper_subsets() {
            let (ra, rb) = (self.rho(a), self.rho(c.minus(a)));
            for (node, v) in q.iter_mut().enumerate() {
                *v += 0.5 * SPLIT_CONSTANT * ra.values[node] * rb.values[node];
            }
        }
        q
    }

    /// Same charge summed once per unordered pair.
    pub fn charge_unordered(&self, c: LabelSet) -> Vec<f64> {
        let mut q = vec![0.0; self.grid().node_count()];
        for a in c.unordered_splits() {
            let (ra, rb) = (self.rho(a), self.rho(c.minus(a)));
            for (node, v) in q.iter_mut().enumerate() {
                *v += SPLIT_CONSTANT * ra.values[node] * rb.values[node];
            }
        }
        q
    }

    fn check_positive(&self) -> Result<(), BackboneError> {
        let k = self.k();
        for mask in 1..(1u32 << k) {
            let c = LabelSet(mask as u16);
            let r = self.rho(c);
            for node in 1..self.grid().cells {
                let v = r.values[node];
                if !(v > 0.0 && v.is_finite()) {
                    return Err(BackboneError::NonPositiveRho { label: c, node, value: v });
                }
            }
        }
        Ok(())
    }

    /// `⟨μ, ρ_C⟩`.
    pub fn pair(&self, mu: &AtomicMeasure, c: LabelSet) -> f64 {
        let r = self.rho(c);
        mu.integrate(|x| r.eval(x))
    }

    /// Split weights `ρ_A(y)ρ_{C∖A}(y)` over unordered pairs at node `y`,
    /// normalized. Asserts the normalization.
    pub fn split_probabilities(&self, c: LabelSet, node: usize) -> Result<Vec<(LabelSet, f64)>, BackboneError> {
        let raw: Vec<(LabelSet, f64)> = c
            .unordered_splits()
            .map(|a| (a, self.rho(a).values[node] * self.rho(c.minus(a)).values[node]))
            .collect();
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(BackboneError::Integrity(format!("split weights of {c:?} vanish at node {node}")));
        }
        let out: Vec<(LabelSet, f64)> = raw.into_iter().map(|(a, w)| (a, w / total)).collect();
        let s: f64 = out.iter().map(|(_, p)| p).sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(BackboneError::Integrity(format!("split weights sum to {s}")));
        }
        Ok(out)
    }
}

/// Partition of the labels with a starting point per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSeed {
    pub blocks: Vec<LabelSet>,
    pub starts: Vec<f64>,
}

impl BackboneSeed {
    pub fn is_partition_of(&self, k: usize) -> bool {
        let mut acc = LabelSet(0);
        for b in &self.blocks {
            if b.is_empty() || !acc.disjoint(*b) {
                return false;
            }
            acc = acc.union(*b);
        }
        acc == LabelSet::full(k)
    }
}

/// All set partitions of `{0..k−1}`, blocks listed by smallest label.
pub fn enumerate_partitions(k: usize) -> Vec<Vec<LabelSet>> {
    fn rec(rest: LabelSet, acc: &mut Vec<LabelSet>, out: &mut Vec<Vec<LabelSet>>) {
        if rest.is_empty() {
            out.push(acc.clone());
            return;
        }
        let m = LabelSet::singleton(rest.min_label());
        let others = rest.minus(m);
        let mut sub = others.0;
        loop {
            let block = m.union(LabelSet(sub));
            acc.push(block);
            rec(rest.minus(block), acc, out);
            acc.pop();
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & others.0;
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(LabelSet::full(k), &mut Vec::new(), &mut out);
    }
    out
}

/// Draws partitions with weight `Π ⟨μ, ρ_A⟩` using the subset recursion
/// `W(S) = Σ_{B ∋ min S} ⟨μ,ρ_B⟩ W(S∖B)`, then block starts with law
/// `ρ_A(x)μ(dx)/⟨μ,ρ_A⟩`.
#[derive(Debug, Clone)]
pub struct SeedSampler {
    k: usize,
    mass: Vec<f64>,
    w: Vec<f64>,
    /// Per block: the atoms of `μ` with cumulative weights `ρ_A(x)μ({x})`.
    starts: Vec<Vec<(f64, f64)>>,
}

impl SeedSampler {
    pub fn new(family: &RhoFamily, mu: &AtomicMeasure) -> Result<Self, BackboneError> {
        if mu.is_zero() {
            return Err(BackboneError::Input("initial measure is zero".into()));
        }
        for a in &mu.atoms {
            if !family.domain.contains(a.point) {
                return Err(BackboneError::Input(format!("initial atom {} is not inside the domain", a.point)));
            }
        }
        let k = family.k();
        let size = 1usize << k;
        let mut mass = vec![0.0; size];
        let mut starts = vec![Vec::new(); size];
        for (mask, (m, s)) in mass.iter_mut().zip(starts.iter_mut()).enumerate().skip(1) {
            let r = family.rho(LabelSet(mask as u16));
            let mut acc = 0.0;
            for a in &mu.atoms {
                acc += a.weight * r.eval(a.point);
                s.push((a.point, acc));
            }
            *m = acc;
        }
        let mut w = vec![0.0; size];
        w[0] = 1.0;
        for mask in 1..size {
            let s = LabelSet(mask as u16);
            let low = LabelSet::singleton(s.min_label());
            let others = s.minus(low);
            let mut sub = others.0;
            let mut total = 0.0;
            loop {
                let b = low.union(LabelSet(sub));
                total += mass[b.0 as usize] * w[s.minus(b).0 as usize];
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & others.0;
            }
            w[mask] = total;
        }
        if !(w[size - 1] > 0.0 && w[size - 1].is_finite()) {
            return Err(BackboneError::Integrity("all partition weights vanish".into()));
        }
        Ok(SeedSampler { k, mass, w, starts })
    }

    /// Unnormalized weight of a partition.
    pub fn weight(&self, blocks: &[LabelSet]) -> f64 {
        blocks.iter().map(|b| self.mass[b.0 as usize]).product()
    }

    /// Sum of [`Self::weight`] over all partitions.
    pub fn normalizer(&self) -> f64 {
        self.w[(1usize << self.k) - 1]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BackboneSeed {
        let mut rest = LabelSet::full(self.k);
        let mut blocks = Vec::new();
        while !rest.is_empty() {
            let low = LabelSet::singleton(rest.min_label());
            let others = rest.minus(low);
            let target = rng.random::<f64>() * self.w[rest.0 as usize];
            let mut acc = 0.0;
            let mut sub = others.0;
            let mut chosen = low.union(others);
            loop {
                let b = low.union(LabelSet(sub));
                acc += self.mass[b.0 as usize] * self.w[rest.minus(b).0 as usize];
                if acc > target {
                    chosen = b;
                    break;
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & others.0;
            }
            blocks.push(chosen);
            rest = rest.minus(chosen);
        }
        let starts = blocks
            .iter()
            .map(|b| {
                let cum = &self.starts[b.0 as usize];
                let total = cum.last().map_or(0.0, |c| c.1);
                let t = rng.random::<f64>() * total;
                cum.iter().find(|c| c.1 > t).unwrap_or(cum.last().expect("nonempty")).0
            })
            .collect();
        BackboneSeed { blocks, starts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeEnd {
    Death { time: f64, position: f64 },
    Exit { time: f64, side: Side },
}

impl NodeEnd {
    pub fn time(&self) -> f64 {
        match *self {
            NodeEnd::Death { time, .. } | NodeEnd::Exit { time, .. } => time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub label: LabelSet,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub birth_time: f64,
    pub birth_position: f64,
    pub end: NodeEnd,
    /// `(time, position)` samples starting at birth and ending at the end
    /// event.
    pub path: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathShape {
    /// Position holds until the next sample (jump process).
    Piecewise,
    /// Position interpolates linearly between samples.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneTree {
    pub domain: Domain1D,
    pub atoms: Vec<Side>,
    pub nodes: Vec<TreeNode>,
    pub roots: Vec<usize>,
    pub shape: PathShape,
    /// Diffusion steps whose drift hit the cap or that were reflected.
    pub capped_steps: u64,
}

impl BackboneTree {
    pub fn empty(domain: Domain1D) -> Self {
        BackboneTree { domain, atoms: Vec::new(), nodes: Vec::new(), roots: Vec::new(), shape: PathShape::Piecewise, capped_steps: 0 }
    }

    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.children.is_empty())
    }

    /// Labels of nodes alive at `t` (born at or before `t`, ended after).
    pub fn alive_labels_at(&self, t: f64) -> Vec<LabelSet> {
        self.nodes
            .iter()
            .filter(|n| n.birth_time <= t && t < n.end.time())
            .map(|n| n.label)
            .collect()
    }

    pub fn total_path_time(&self) -> f64 {
        self.nodes.iter().map(|n| n.end.time() - n.birth_time).sum()
    }

    /// Checks the tree structure: binary splits into complementary labels,
    /// singleton leaves exiting at their atoms, and label conservation at
    /// every birth time (alive labels plus those already exited).
    pub fn verify(&self) -> Result<(), BackboneError> {
        let k = self.k();
        let fail = |m: String| Err(BackboneError::Integrity(m));
        let mut acc = LabelSet(0);
        for &r in &self.roots {
            if !acc.disjoint(self.nodes[r].label) {
                return fail("root labels overlap".into());
            }
            acc = acc.union(self.nodes[r].label);
        }
        if k > 0 && acc != LabelSet::full(k) {
            return fail("root labels do not cover all atoms".into());
        }
        let mut leaves = 0;
        for (id, n) in self.nodes.iter().enumerate() {
            match (n.label.len(), n.children.len(), n.end) {
                (1, 0, NodeEnd::Exit { side, .. }) => {
                    let i = n.label.min_label();
                    if side != self.atoms[i] {
                        return fail(format!("leaf {i} exits at {side:?}, expected {:?}", self.atoms[i]));
                    }
                    leaves += 1;
                }
                (c, 2, NodeEnd::Death { .. }) if c > 1 => {
                    let (a, b) = (self.nodes[n.children[0]].label, self.nodes[n.children[1]].label);
                    if !a.disjoint(b) || a.union(b) != n.label || a.is_empty() || b.is_empty() {
                        return fail(format!("node {id} splits {:?} into {a:?} and {b:?}", n.label));
                    }
                    for &ch in &n.children {
                        if self.nodes[ch].birth_time != n.end.time() || self.nodes[ch].parent != Some(id) {
                            return fail(format!("child {ch} of node {id} is not born at its death"));
                        }
                    }
                }
                _ => return fail(format!("node {id} with label {:?} has a malformed end", n.label)),
            }
        }
        if leaves != k {
            return fail(format!("{leaves} leaves for {k} atoms"));
        }
        for n in &self.nodes {
            let t = n.birth_time;
            let exited = self
                .leaves()
                .filter(|l| l.end.time() <= t)
                .map(|l| l.label);
            let mut acc = LabelSet(0);
            for l in self.alive_labels_at(t).into_iter().chain(exited) {
                if !acc.disjoint(l) {
                    return fail(format!("labels overlap at time {}", n.birth_time));
                }
                acc = acc.union(l);
            }
            if acc != LabelSet::full(k) {
                return fail(format!("labels not conserved at time {}", n.birth_time));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("tree serializes")
    }
}

/// How backbone particles move.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// `ρ`-transform of the lattice walk on the family's grid: jump rate
    /// `r·ρ(y)/ρ(x)` to each neighbour, death rate `q/ρ`.
    Lattice,
    /// Euler steps of the `ρ`-transformed diffusion with drift `(log ρ)'`
    /// capped at `2/Δx`.
    Diffusion { dt: f64 },
}

struct Pending {
    label: LabelSet,
    parent: Option<usize>,
    time: f64,
    position: f64,
}

fn pick_split<R: Rng + ?Sized>(family: &RhoFamily, c: LabelSet, node: usize, rng: &mut R) -> Result<LabelSet, BackboneError> {
    let probs = family.split_probabilities(c, node)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in &probs {
        acc += p;
        if u < acc {
            return Ok(*a);
        }
    }
    Ok(probs.last().expect("at least one split").0)
}

fn run_lattice_node<R: Rng + ?Sized>(
    family: &RhoFamily,
    label: LabelSet,
    start: usize,
    t0: f64,
    rng: &mut R,
) -> Result<(Vec<(f64, f64)>, NodeEnd, usize), BackboneError> {
    let grid = family.grid();
    let h = grid.h();
    let r = 0.5 / (h * h);
    let rho = &family.rho(label).values;
    let charge = &family.charge(label).values;
    let m = grid.cells;
    let mut j = start;
    let mut t = t0;
    let mut path = vec![(t, grid.x(j))];
    for _ in 0..MAX_EVENTS {
        if j == 0 || j == m {
            let side = if j == 0 { Side::Left } else { Side::Right };
            return Ok((path, NodeEnd::Exit { time: t, side }, j));
        }
        let left = r * rho[j - 1] / rho[j];
        let right = r * rho[j + 1] / rho[j];
        let death = charge[j] / rho[j];
        let total = left + right + death;
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        let u = rng.random::<f64>() * total;
        if u < death {
            path.push((t, grid.x(j)));
            return Ok((path, NodeEnd::Death { time: t, position: grid.x(j) }, j));
        }
        j = if u < death + left { j - 1 } else { j + 1 };
        path.push((t, grid.x(j)));
    }
    Err(BackboneError::Integrity(format!("backbone path exceeded {MAX_EVENTS} jumps")))
}

/// Drift `(log ρ)'` at `x`, linear between nodes, ignoring undefined nodes.
fn drift_at(g: &GridFunction, x: f64) -> f64 {
    let grid = g.grid;
    let t = ((x - grid.domain.left) / grid.h()).clamp(0.0, grid.cells as f64);
    let j = (t.floor() as usize).min(grid.cells - 1);
    let th = t - j as f64;
    let (a, b) = (g.values[j], g.values[j + 1]);
    match (a.is_finite(), b.is_finite()) {
        (true, true) => (1.0 - th) * a + th * b,
        (true, false) => a,
        (false, true) => b,
        (false, false) => 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_diffusion_node<R: Rng + ?Sized>(
    family: &RhoFamily,
    drift: &GridFunction,
    label: LabelSet,
    x0: f64,
    t0: f64,
    dt: f64,
    capped: &mut u64,
    rng: &mut R,
) -> Result<(Vec<(f64, f64)>, NodeEnd), BackboneError> {
    let d = family.domain;
    let cap = 2.0 / family.grid().h();
    let rho = family.rho(label);
    let charge = family.charge(label);
    let single = label.is_singleton();
    let target = if single { Some(family.atoms[label.min_label()]) } else { None };
    let sd = dt.sqrt();
    let mut x = x0;
    let mut t = t0;
    let mut path = vec![(t, x)];
    for _ in 0..MAX_EVENTS {
        if !single {
            let rate = charge.eval(x) / rho.eval(x).max(f64::MIN_POSITIVE);
            if rng.random::<f64>() >= (-rate * dt).exp() {
                t += dt;
                path.push((t, x));
                return Ok((path, NodeEnd::Death { time: t, position: x }));
            }
        }
        let mut b = drift_at(drift, x);
        if b.abs() > cap {
            b = b.signum() * cap;
            *capped += 1;
        }
        let z: f64 = StandardNormal.sample(rng);
        let mut y = x + b * dt + sd * z;
        t += dt;
        for side in [Side::Left, Side::Right] {
            let e = d.endpoint(side);
            let crossed = match side {
                Side::Left => y <= e,
                Side::Right => y >= e,
            };
            if crossed {
                if target == Some(side) {
                    path.push((t, e));
                    return Ok((path, NodeEnd::Exit { time: t, side }));
                }
                *capped += 1;
                y = 2.0 * e - y;
            }
        }
        let h = family.grid().h();
        x = y.clamp(d.left + 0.5 * h.min(d.length() * 1e-3), d.right - 0.5 * h.min(d.length() * 1e-3));
        path.push((t, x));
    }
    Err(BackboneError::Integrity(format!("backbone path exceeded {MAX_EVENTS} steps")))
}

/// Simulates the labelled tree from a seed.
pub fn simulate_backbone<R: Rng + ?Sized>(
    seed: &BackboneSeed,
    family: &RhoFamily,
    motion: Motion,
    rng: &mut R,
) -> Result<BackboneTree, BackboneError> {
    if !seed.is_partition_of(family.k()) || seed.blocks.len() != seed.starts.len() {
        return Err(BackboneError::Input("seed is not a partition of the labels".into()));
    }
    let grid = family.grid();
    let drifts: HashMap<LabelSet, GridFunction> = match motion {
        Motion::Diffusion { dt } if dt > 0.0 => {
            let mut m = HashMap::new();
            let mut stack: Vec<LabelSet> = seed.blocks.clone();
            while let Some(c) = stack.pop() {
                if m.contains_key(&c) {
                    continue;
                }
                m.insert(c, grad_log(family.rho(c))?);
                for a in c.proper_subsets() {
                    stack.push(a);
                }
            }
            m
        }
        Motion::Diffusion { .. } => return Err(BackboneError::Input("diffusion step must be positive".into())),
        Motion::Lattice => HashMap::new(),
    };
    let mut tree = BackboneTree {
        domain: family.domain,
        atoms: family.atoms.clone(),
        nodes: Vec::new(),
        roots: Vec::new(),
        shape: match motion {
            Motion::Lattice => PathShape::Piecewise,
            Motion::Diffusion { .. } => PathShape::Linear,
        },
        capped_steps: 0,
    };
    let mut pending: Vec<Pending> = seed
        .blocks
        .iter()
        .zip(&seed.starts)
        .map(|(b, x)| Pending { label: *b, parent: None, time: 0.0, position: *x })
        .collect();
    pending.reverse();
    while let Some(p) = pending.pop() {
        let (path, end, node) = match motion {
            Motion::Lattice => {
                let j = grid
                    .node_of(p.position)
                    .ok_or_else(|| BackboneError::Input(format!("start {} is not a lattice node", p.position)))?;
                run_lattice_node(family, p.label, j, p.time, rng)?
            }
            Motion::Diffusion { dt } => {
                let (path, end) =
                    run_diffusion_node(family, &drifts[&p.label], p.label, p.position, p.time, dt, &mut tree.capped_steps, rng)?;
                let node = match end {
                    NodeEnd::Death { position, .. } => grid.nearest_node(position),
                    NodeEnd::Exit { .. } => 0,
                };
                (path, end, node)
            }
        };
        if let NodeEnd::Exit { side, .. } = end {
            if !p.label.is_singleton() || family.atoms[p.label.min_label()] != side {
                return Err(BackboneError::Integrity(format!("label {:?} exited at {side:?}", p.label)));
            }
        }
        let id = tree.nodes.len();
        tree.nodes.push(TreeNode {
            label: p.label,
            parent: p.parent,
            children: Vec::new(),
            birth_time: p.time,
            birth_position: p.position,
            end,
            path,
        });
        match p.parent {
            Some(par) => tree.nodes[par].children.push(id),
            None => tree.roots.push(id),
        }
        if let NodeEnd::Death { time, position } = end {
            let node = node.clamp(1, grid.cells - 1);
            let a = pick_split(family, p.label, node, rng)?;
            let b = p.label.minus(a);
            pending.push(Pending { label: b, parent: Some(id), time, position });
            pending.push(Pending { label: a, parent: Some(id), time, position });
        }
    }
    Ok(tree)
}

/// First time each node's ancestral line leaves `sub` (closed boundary
/// counts as leaving), or `+∞`.
fn exit_times(tree: &BackboneTree, sub: &Domain1D) -> Vec<f64> {
    let tol = 1e-9 * sub.length();
    let mut out = vec![f64::INFINITY; tree.nodes.len()];
    // Parents precede children in `nodes`.
    for (id, n) in tree.nodes.iter().enumerate() {
        let inherited = n.parent.map_or(f64::INFINITY, |p| out[p]);
        if inherited.is_finite() {
            out[id] = inherited;
            continue;
        }
        let outside = |x: f64| x <= sub.left + tol || x >= sub.right - tol;
        let mut hit = f64::INFINITY;
        for (i, &(t, x)) in n.path.iter().enumerate() {
            if outside(x) {
                hit = match (tree.shape, i) {
                    (PathShape::Linear, i) if i > 0 => {
                        let (t0, x0) = n.path[i - 1];
                        let e = if x <= sub.left + tol { sub.left } else { sub.right };
                        let th = if (x - x0).abs() > 0.0 { ((e - x0) / (x - x0)).clamp(0.0, 1.0) } else { 1.0 };
                        t0 + th * (t - t0)
                    }
                    _ => t,
                };
                break;
            }
        }
        out[id] = hit;
    }
    out
}

/// Path pieces of the whole tree restricted to times in `[from_i, to_i)`,
/// per node.
fn segments_between(tree: &BackboneTree, from: &[f64], to: &[f64]) -> Vec<ImmigrationSegment> {
    let mut out = Vec::new();
    for (id, n) in tree.nodes.iter().enumerate() {
        let (a, b) = (from[id], to[id].min(n.end.time()));
        for w in n.path.windows(2) {
            let ((t0, x0), (t1, x1)) = (w[0], w[1]);
            let s0 = t0.max(a);
            let s1 = t1.min(b);
            if s1 <= s0 {
                continue;
            }
            let seg = match tree.shape {
                PathShape::Piecewise => ImmigrationSegment { t0: s0, t1: s1, x0, x1: x0 },
                PathShape::Linear => {
                    let full = ImmigrationSegment { t0, t1, x0, x1 };
                    ImmigrationSegment { t0: s0, t1: s1, x0: full.at(s0), x1: full.at(s1) }
                }
            };
            out.push(seg);
        }
    }
    out
}

/// Stages of the killed law on each domain of a chain, prepared once.
#[derive(Debug, Clone)]
pub struct ImmigrationChain {
    pub domains: Vec<Domain1D>,
    stages: Vec<Stage>,
}

impl ImmigrationChain {
    pub fn new(sim: &Simulator, law: &SimulationLaw, domains: &[Domain1D]) -> Result<Self, BackboneError> {
        let stages = domains.iter().map(|d| sim.stage(law, d)).collect::<Result<Vec<_>, _>>()?;
        let domains = stages.iter().map(|s| s.subdomain()).collect();
        Ok(ImmigrationChain { domains, stages })
    }

    /// `Y_{D_1}, …, Y_{D_r}`. Stage `r` starts from `Y_{D_{r−1}}` and adds
    /// mass immigrated while the ancestral line is inside `D_r` but has
    /// already left `D_{r−1}`.
    pub fn immigrate<R: Rng + ?Sized>(&self, tree: &BackboneTree, rng: &mut R) -> Result<Vec<AtomicMeasure>, BackboneError> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut from = vec![f64::NEG_INFINITY; tree.nodes.len()];
        let mut current = AtomicMeasure::zero();
        for (stage, d) in self.stages.iter().zip(&self.domains) {
            let to = exit_times(tree, d);
            let segs = segments_between(tree, &from, &to);
            current = if segs.is_empty() && current.is_zero() { AtomicMeasure::zero() } else { stage.run(&current, &segs, rng)? };
            out.push(current.clone());
            from = to;
        }
        Ok(out)
    }
}

pub fn immigrate_mass<R: Rng + ?Sized>(
    sim: &Simulator,
    tree: &BackboneTree,
    law: &SimulationLaw,
    domains: &[Domain1D],
    rng: &mut R,
) -> Result<Vec<AtomicMeasure>, BackboneError> {
    ImmigrationChain::new(sim, law, domains)?.immigrate(tree, rng)
}

/// One draw of the backbone construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedDraw {
    pub z: Vec<AtomicMeasure>,
    pub w: Vec<AtomicMeasure>,
    pub y: Vec<AtomicMeasure>,
    pub tree: BackboneTree,
}

impl ConditionedDraw {
    pub fn exit(&self) -> &AtomicMeasure {
        self.z.last().expect("chain ends at the domain")
    }
}

/// Samples `Z = W + Y` on `D_1, …, D_K, D` for target counts `ν_n` and
/// level `n`. With `immigration` off, `Y ≡ 0`.
#[derive(Debug, Clone)]
pub struct ConditionedSampler {
    pub family: RhoFamily,
    pub motion: Motion,
    pub immigration: bool,
    mu: AtomicMeasure,
    seeds: SeedSampler,
    w_chain: ChainSampler,
    y_chain: ImmigrationChain,
}

impl ConditionedSampler {
    pub fn new(
        sim: &Simulator,
        mu: &AtomicMeasure,
        target: [u64; 2],
        n: u32,
        exhaustion: &[Domain1D],
        family_cells: usize,
    ) -> Result<Self, BackboneError> {
        let atoms = atoms_from_counts(target);
        let (cells, motion) = match sim.engine {
            Engine::Lattice(p) => (p.cells, Motion::Lattice),
            Engine::Particles(p) => (family_cells, Motion::Diffusion { dt: p.dt }),
        };
        let family = RhoFamily::build(sim.domain, &atoms, n, cells)?;
        let seeds = SeedSampler::new(&family, mu)?;
        let kill_u = match sim.lattice_grid() {
            Some(_) => family.u_n.clone(),
            None => solve_dirichlet_semilinear(sim.domain, (n as f64, n as f64), family_cells)?,
        };
        let law = SimulationLaw::killed(n, &kill_u);
        let mut domains = exhaustion.to_vec();
        domains.push(sim.domain);
        let w_chain = ChainSampler::new(sim, &law, &domains)?;
        let y_chain = ImmigrationChain::new(sim, &law, &domains)?;
        Ok(ConditionedSampler { family, motion, immigration: true, mu: mu.clone(), seeds, w_chain, y_chain })
    }

    pub fn without_immigration(mut self) -> Self {
        self.immigration = false;
        self
    }

    pub fn with_motion(mut self, motion: Motion) -> Self {
        self.motion = motion;
        self
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ConditionedDraw, BackboneError> {
        let seed = self.seeds.sample(rng);
        let tree = simulate_backbone(&seed, &self.family, self.motion, rng)?;
        let y = if self.immigration {
            self.y_chain.immigrate(&tree, rng)?
        } else {
            vec![AtomicMeasure::zero(); self.y_chain.domains.len()]
        };
        let w = self.w_chain.sample(&self.mu, rng)?;
        let z = w.iter().zip(&y).map(|(a, b)| a.sum(b)).collect();
        Ok(ConditionedDraw { z, w, y, tree })
    }
}

/// One draw of `Z_D` and its tree.
pub fn sample_conditioned_exit<R: Rng + ?Sized>(
    sim: &Simulator,
    mu: &AtomicMeasure,
    nu_n: &AtomicMeasure,
    n: u32,
    family_cells: usize,
    rng: &mut R,
) -> Result<(AtomicMeasure, BackboneTree), BackboneError> {
    let target = counts_of(nu_n, &sim.domain)?;
    let draw = ConditionedSampler::new(sim, mu, target, n, &[], family_cells)?.sample(rng)?;
    Ok((draw.exit().clone(), draw.tree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    fn family(counts: [u64; 2], n: u32) -> RhoFamily {
        RhoFamily::build(Domain1D::unit(), &atoms_from_counts(counts), n, 64).unwrap()
    }

    #[test]
    fn singleton_is_poisson_kernel() {
        let f = family([1, 1], 1);
        let k = poisson_kernel(f.domain, &f.kill, Side::Left).unwrap();
        assert_eq!(f.rho(LabelSet::singleton(0)).values, k.values);
    }

    #[test]
    fn pair_matches_closed_form() {
        let f = family([1, 1], 2);
        let (r1, r2) = (f.rho(LabelSet::singleton(0)), f.rho(LabelSet::singleton(1)));
        let prod = GridFunction {
            grid: f.grid(),
            values: r1.values.iter().zip(&r2.values).map(|(a, b)| 4.0 * a * b).collect(),
            boundary_kind: r1.boundary_kind,
        };
        let g = green_apply(f.domain, &f.kill, &prod).unwrap();
        assert_eq!(f.rho(LabelSet(0b11)).values, g.values);
    }

    #[test]
    fn too_many_atoms_is_a_resource_error() {
        let e = RhoFamily::build(Domain1D::unit(), &atoms_from_counts([13, 0]), 1, 32).unwrap_err();
        assert!(matches!(e, BackboneError::TooManyAtoms { k: 13 }));
    }

    #[test]
    fn partitions_are_counted_by_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52];
        for (k, b) in bell.iter().enumerate().skip(1) {
            assert_eq!(enumerate_partitions(k).len(), *b);
        }
    }

    #[test]
    fn recursion_normalizer_matches_enumeration() {
        let f = family([2, 2], 1);
        let mu = AtomicMeasure::from_pairs(&[(0.25, 0.5), (0.5, 1.0)]);
        let s = SeedSampler::new(&f, &mu).unwrap();
        let total: f64 = enumerate_partitions(4).iter().map(|p| s.weight(p)).sum();
        assert!((total - s.normalizer()).abs() < 1e-12 * total);
    }

    #[test]
    fn single_atom_tree_exits_at_its_atom() {
        let f = family([0, 1], 1);
        let mut rng = rng_for(5, "test", 0);
        let seed = BackboneSeed { blocks: vec![LabelSet::singleton(0)], starts: vec![0.5] };
        for _ in 0..50 {
            let t = simulate_backbone(&seed, &f, Motion::Lattice, &mut rng).unwrap();
            t.verify().unwrap();
            assert_eq!(t.nodes.len(), 1);
            assert!(matches!(t.nodes[0].end, NodeEnd::Exit { side: Side::Right, .. }));
        }
    }

    #[test]
    fn empty_tree_immigrates_nothing() {
        let sim = Simulator::new(Domain1D::unit(), Engine::lattice(32, 1e-3)).unwrap();
        let tree = BackboneTree::empty(Domain1D::unit());
        let mut rng = rng_for(6, "test", 0);
        let y = immigrate_mass(&sim, &tree, &SimulationLaw::plain(), &[Domain1D::unit()], &mut rng).unwrap();
        assert!(y.iter().all(|m| m.is_zero()));
    }
}
