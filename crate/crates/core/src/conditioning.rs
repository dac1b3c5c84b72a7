//! Poisson boundary statistics `U_n` given an exit measure, exact rejection
//! oracles for the conditioned laws, and the conditional-dispersion study.

use crate::domain_pde::{Domain1D, GridFunction};
use crate::sbm_sim::{
    replicate, AtomicMeasure, ChainSampler, MeanEstimate, SimError, SimulationLaw, Simulator,
};
use crate::seeding;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

pub const PILOT_DRAWS: usize = 1000;
const BATCH: usize = 2048;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("budget of {budget} attempts exhausted with {accepted} acceptances (observed rate {rate:e})")]
    BudgetExhausted { budget: usize, accepted: usize, rate: f64 },
    #[error("target looks infeasible: pilot of {pilot} draws accepted {accepted}, projected {projected:.3} acceptances within budget")]
    Infeasible { pilot: usize, accepted: usize, projected: f64 },
    #[error("invalid input: {0}")]
    Input(String),
}

pub(crate) fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// `U_n` on the two-point boundary: independent Poisson counts with means
/// `n·X_D(left)` and `n·X_D(right)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonBoundarySample {
    pub n: u32,
    pub counts: [u64; 2],
    pub source: AtomicMeasure,
}

impl PoissonBoundarySample {
    pub fn total(&self) -> u64 {
        self.counts[0] + self.counts[1]
    }

    /// The statistic as a measure: one unit atom per count.
    pub fn as_measure(&self, domain: &Domain1D) -> AtomicMeasure {
        let mut m = AtomicMeasure::zero();
        for _ in 0..self.counts[0] {
            m.push(domain.left, 1.0);
        }
        for _ in 0..self.counts[1] {
            m.push(domain.right, 1.0);
        }
        m
    }

    pub fn is_unit_atomic(&self, domain: &Domain1D) -> bool {
        let m = self.as_measure(domain);
        m.atoms.iter().all(|a| a.weight == 1.0 && domain.side_of(a.point).is_some())
            && m.atoms.len() as u64 == self.total()
    }
}

pub fn sample_poisson_statistic<R: Rng + ?Sized>(
    xd: &AtomicMeasure,
    n: u32,
    domain: &Domain1D,
    rng: &mut R,
) -> PoissonBoundarySample {
    let [l, r] = xd.side_masses(domain);
    let nf = n as f64;
    PoissonBoundarySample { n, counts: [poisson_draw(nf * l, rng), poisson_draw(nf * r, rng)], source: xd.clone() }
}

fn ln_factorial(k: u64) -> f64 {
    statrs::function::factorial::ln_factorial(k)
}

/// `P(U_n = counts | X_D)` for side masses `x`.
pub fn target_likelihood(x: [f64; 2], n: u32, counts: [u64; 2]) -> f64 {
    let nf = n as f64;
    let mut log = 0.0;
    for i in 0..2 {
        let lambda = nf * x[i];
        let c = counts[i];
        if c == 0 {
            log -= lambda;
        } else if lambda <= 0.0 {
            return 0.0;
        } else {
            log += c as f64 * lambda.ln() - lambda - ln_factorial(c);
        }
    }
    log.exp()
}

/// Supremum of [`target_likelihood`] over exit measures: each side peaks at
/// `λ = c`.
pub fn max_likelihood(counts: [u64; 2]) -> f64 {
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { (c as f64 * (c as f64).ln() - c as f64 - ln_factorial(c)).exp() })
        .product()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Accept with probability `P(U_n = target | X_D) / sup`.
    #[default]
    LikelihoodRatio,
    /// Draw `U_n` and accept on an exact match.
    DrawAndMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledSample {
    pub sbm_path: Vec<AtomicMeasure>,
    pub poisson: Vec<PoissonBoundarySample>,
}

impl CoupledSample {
    pub fn exit(&self) -> &AtomicMeasure {
        self.sbm_path.last().expect("nonempty path")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub attempts: usize,
    /// Acceptances over all attempts; can exceed the samples returned.
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub acceptance_stderr: f64,
    pub pilot_rate: f64,
    /// Average acceptance probability over all attempts, with its stderr.
    /// For the Poisson oracle scaled back by the supremum this estimates
    /// `P(U_n = target)`; for extinction it estimates `P(X_D = 0)`.
    pub event_probability: MeanEstimate,
}

#[derive(Debug, Clone)]
pub struct RejectionOutcome<T> {
    pub samples: Vec<T>,
    pub report: RejectionReport,
}

/// Shared driver: attempt `i` uses its own generator, so the outcome depends
/// only on the seed. Each attempt returns its acceptance probability `p`
/// and the sample; acceptance is decided here with one more uniform.
fn rejection_loop<T: Send>(
    wanted: usize,
    budget: usize,
    seed: u64,
    module: &str,
    attempt: impl Fn(&mut seeding::SimRng) -> Result<(f64, Option<T>), SimError> + Sync,
) -> Result<RejectionOutcome<T>, ConditioningError> {
    if budget == 0 {
        return Err(ConditioningError::Input("budget must be positive".into()));
    }
    let mut samples: Vec<T> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    let mut attempts = 0usize;
    let mut hits = 0usize;
    let mut pilot_rate = f64::NAN;
    while samples.len() < wanted && attempts < budget {
        let size = if attempts == 0 { PILOT_DRAWS.min(budget) } else { BATCH.min(budget - attempts) };
        let batch: Vec<(f64, Option<T>)> = (attempts..attempts + size)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeding::rng_for(seed, module, i as u64);
                attempt(&mut rng)
            })
            .collect::<Result<_, _>>()?;
        for (p, s) in batch {
            attempts += 1;
            probs.push(p);
            if let Some(s) = s {
                hits += 1;
                if samples.len() < wanted {
                    samples.push(s);
                }
            }
        }
        if pilot_rate.is_nan() {
            let acc = hits;
            pilot_rate = acc as f64 / attempts as f64;
            let projected = pilot_rate * budget as f64;
            if acc == 0 && budget > attempts && projected < 1.0 {
                return Err(ConditioningError::Infeasible { pilot: attempts, accepted: acc, projected });
            }
        }
    }
    let accepted = samples.len();
    if accepted == 0 {
        return Err(ConditioningError::BudgetExhausted { budget, accepted, rate: MeanEstimate::from_samples(&probs).estimate });
    }
    // Every processed attempt counts, including acceptances past `wanted`.
    let rate = hits as f64 / attempts as f64;
    Ok(RejectionOutcome {
        samples,
        report: RejectionReport {
            attempts,
            accepted: hits,
            acceptance_rate: rate,
            acceptance_stderr: (rate * (1.0 - rate) / attempts as f64).sqrt(),
            pilot_rate,
            event_probability: MeanEstimate::from_samples(&probs),
        },
    })
}

/// Exact samples of the exit chain conditioned on `U_n = target`. The chain
/// runs through `exhaustion` and then to `D`.
#[allow(clippy::too_many_arguments)]
pub fn rejection_condition_poisson(
    sim: &Simulator,
    mu: &AtomicMeasure,
    exhaustion: &[Domain1D],
    target: [u64; 2],
    n: u32,
    rule: AcceptanceRule,
    wanted: usize,
    budget: usize,
    seed: u64,
) -> Result<RejectionOutcome<CoupledSample>, ConditioningError> {
    if n == 0 {
        return Err(ConditioningError::Input("n must be at least 1".into()));
    }
    let mut domains = exhaustion.to_vec();
    domains.push(sim.domain);
    let chain = ChainSampler::new(sim, &SimulationLaw::plain(), &domains)?;
    let lmax = max_likelihood(target);
    let d = sim.domain;
    rejection_loop(wanted, budget, seed, "conditioning.poisson", |rng| {
        let path = chain.sample(mu, rng)?;
        let xd = path.last().expect("chain has stages").clone();
        let like = target_likelihood(xd.side_masses(&d), n, target);
        let accept = match rule {
            AcceptanceRule::LikelihoodRatio => rng.random::<f64>() * lmax < like,
            AcceptanceRule::DrawAndMatch => sample_poisson_statistic(&xd, n, &d, rng).counts == target,
        };
        let prob = like / lmax;
        let sample = accept.then(|| CoupledSample {
            sbm_path: path,
            poisson: vec![PoissonBoundarySample { n, counts: target, source: xd }],
        });
        Ok((prob, sample))
    })
}

/// Exact samples of the chain `X_{D_1}, …, X_{D_K}` conditioned on
/// `X_D = 0`. The last leg is not simulated: given `X_{D_K}`, the event
/// `X_D = 0` has probability `e^{−⟨X_{D_K}, u⟩}`, and that is the acceptance
/// probability. Accepted paths end with the zero measure on `∂D`.
pub fn rejection_condition_extinction(
    sim: &Simulator,
    mu: &AtomicMeasure,
    exhaustion: &[Domain1D],
    u: &GridFunction,
    wanted: usize,
    budget: usize,
    seed: u64,
) -> Result<RejectionOutcome<Vec<AtomicMeasure>>, ConditioningError> {
    if exhaustion.is_empty() {
        return Err(ConditioningError::Input("extinction oracle needs at least one subdomain".into()));
    }
    let chain = ChainSampler::new(sim, &SimulationLaw::plain(), exhaustion)?;
    rejection_loop(wanted, budget, seed, "conditioning.extinction", |rng| {
        let mut path = chain.sample(mu, rng)?;
        let last = path.last().expect("chain has stages");
        let prob = (-last.integrate(|x| u.eval(x))).exp();
        let accept = rng.random::<f64>() < prob;
        Ok((
            prob,
            accept.then(|| {
                path.push(AtomicMeasure::zero());
                path
            }),
        ))
    })
}

/// Bounded functional of the chain `(X_{D_1}, X_D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunctional {
    Constant { value: f64 },
    /// `e^{−f⟨X_{D_1}, 1⟩}`.
    ExpFirstExit { f: f64 },
    /// `e^{−f⟨X_D, 1⟩}`.
    ExpExit { f: f64 },
}

impl TestFunctional {
    pub fn eval(&self, first: &AtomicMeasure, exit: &AtomicMeasure) -> f64 {
        match *self {
            TestFunctional::Constant { value } => value,
            TestFunctional::ExpFirstExit { f } => (-f * first.total_mass()).exp(),
            TestFunctional::ExpExit { f } => (-f * exit.total_mass()).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispersionRow {
    pub n: u32,
    /// Average of the estimated conditional means `E[T | U_n]` over draws.
    pub mean_of_conditional_means: f64,
    pub unconditional: MeanEstimate,
    /// Estimate of `Var(E[T | U_n])`.
    pub dispersion: f64,
    pub dispersion_stderr: f64,
    pub total_variance: f64,
}

/// Estimates `Var(E[T | U_n])` for each `n`. Every exit-measure sample gets
/// `inner` independent draws of `U_n`. The conditional mean at a value of
/// `U_n` is the average of `T` over the *other* samples that produced that
/// value (weighted by multiplicity), and the dispersion is the covariance of
/// `T` with that leave-one-out mean. Values no other sample produced
/// contribute zero.
pub fn martingale_convergence_experiment(
    sim: &Simulator,
    mu: &AtomicMeasure,
    functional: TestFunctional,
    n_schedule: &[u32],
    samples: usize,
    inner: usize,
    seed: u64,
) -> Result<Vec<DispersionRow>, ConditioningError> {
    if n_schedule.is_empty() || samples < 2 || inner == 0 {
        return Err(ConditioningError::Input("need a schedule, at least 2 samples and 1 inner draw".into()));
    }
    let d1 = sim.exhaustion(1)?;
    let domains = vec![d1[0], sim.domain];
    let chain = ChainSampler::new(sim, &SimulationLaw::plain(), &domains)?;
    let d = sim.domain;
    // Per sample: T and, for each n, the inner draws of U_n.
    let draws: Vec<(f64, Vec<Vec<[u64; 2]>>)> = replicate(samples, seed, "conditioning.martingale", |rng| {
        let path = chain.sample(mu, rng)?;
        let t = functional.eval(&path[0], &path[1]);
        let xd = &path[1];
        let us = n_schedule
            .iter()
            .map(|&n| (0..inner).map(|_| sample_poisson_statistic(xd, n, &d, rng).counts).collect())
            .collect();
        Ok((t, us))
    })?;
    let ts: Vec<f64> = draws.iter().map(|(t, _)| *t).collect();
    let unconditional = MeanEstimate::from_samples(&ts);
    // Shifted by the first value so a constant functional centres to exactly 0.
    let tbar = ts[0] + ts.iter().map(|t| t - ts[0]).sum::<f64>() / samples as f64;
    let total_variance = unconditional.stderr.powi(2) * samples as f64;
    let mut rows = Vec::with_capacity(n_schedule.len());
    for (k, &n) in n_schedule.iter().enumerate() {
        let mut groups: HashMap<[u64; 2], (f64, f64)> = HashMap::new();
        for (t, us) in &draws {
            for u in &us[k] {
                let g = groups.entry(*u).or_insert((0.0, 0.0));
                g.0 += 1.0;
                g.1 += t;
            }
        }
        let mut contributions = Vec::with_capacity(samples);
        let mut full_means = 0.0;
        for (t, us) in &draws {
            let mut own: HashMap<[u64; 2], f64> = HashMap::new();
            for u in &us[k] {
                *own.entry(*u).or_insert(0.0) += 1.0;
            }
            let mut z = 0.0;
            for u in &us[k] {
                let (cnt, sum) = groups[u];
                let c = own[u];
                full_means += sum / cnt;
                if cnt - c > 0.0 {
                    let loo = (sum - c * t) / (cnt - c);
                    z += (t - tbar) * (loo - tbar);
                }
            }
            contributions.push(z / inner as f64);
        }
        let disp = MeanEstimate::from_samples(&contributions);
        rows.push(DispersionRow {
            n,
            mean_of_conditional_means: full_means / (samples * inner) as f64,
            unconditional,
            dispersion: disp.estimate,
            dispersion_stderr: disp.stderr,
            total_variance,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Row {
    pub n: u32,
    pub distance: MeanEstimate,
}

/// `E|U_n(left)/n − X_D(left)| + |U_n(right)/n − X_D(right)|` over the given
/// exit-measure side masses, `draws` Poisson draws per sample.
pub fn weak_convergence_experiment(
    exits: &[[f64; 2]],
    n_schedule: &[u32],
    draws: usize,
    seed: u64,
) -> Vec<L1Row> {
    n_schedule
        .iter()
        .map(|&n| {
            let per_sample: Vec<f64> = exits
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = seeding::rng_for(seed ^ n as u64, "conditioning.weak", i as u64);
                    let nf = n as f64;
                    let mut acc = 0.0;
                    for _ in 0..draws {
                        let l = poisson_draw(nf * x[0], &mut rng) as f64;
                        let r = poisson_draw(nf * x[1], &mut rng) as f64;
                        acc += (l / nf - x[0]).abs() + (r / nf - x[1]).abs();
                    }
                    acc / draws as f64
                })
                .collect();
            L1Row { n, distance: MeanEstimate::from_samples(&per_sample) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_measure_gives_zero_counts() {
        let d = Domain1D::unit();
        let mut rng = seeding::rng_for(1, "t", 0);
        for _ in 0..100 {
            let s = sample_poisson_statistic(&AtomicMeasure::zero(), 7, &d, &mut rng);
            assert_eq!(s.counts, [0, 0]);
        }
    }

    #[test]
    fn likelihood_peaks_at_counts() {
        let c = [2, 1];
        let best = target_likelihood([1.0, 0.5], 2, c);
        assert!((best - max_likelihood(c)).abs() < 1e-14);
        assert!(target_likelihood([0.9, 0.5], 2, c) < best);
        assert_eq!(target_likelihood([0.0, 0.5], 2, c), 0.0);
        assert!((max_likelihood([0, 0]) - 1.0).abs() < 1e-15);
        assert!((max_likelihood([1, 0]) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn unit_atomic_representation() {
        let d = Domain1D::unit();
        let s = PoissonBoundarySample { n: 3, counts: [2, 1], source: AtomicMeasure::zero() };
        assert!(s.is_unit_atomic(&d));
        assert_eq!(s.as_measure(&d).total_mass(), 3.0);
    }
}
