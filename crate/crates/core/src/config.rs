//! Experiment configuration: one JSON document, validated with field paths.

use crate::domain_pde::{Domain1D, MIN_DIRICHLET_CELLS};
use crate::sbm_sim::{AtomicMeasure, Engine, SimError, Simulator};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is empty")]
    Empty,
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    #[default]
    Lattice,
    Particles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub x: f64,
    pub weight: f64,
}

/// Settings used only by the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub alpha: f64,
    pub k_sigma: f64,
    /// Samples per side for the two-sample tests.
    pub samples: usize,
    /// Initial measure for the exhaustion-chain and extinction checks.
    pub small_mu: Vec<AtomSpec>,
    /// Exit-measure samples and Poisson draws per sample for the `U_n` checks.
    pub weak_samples: usize,
    pub weak_draws: usize,
    /// Trees per configuration in the structural suite.
    pub trees: usize,
    /// Rejection budget as a multiple of the wanted sample count.
    pub budget_factor: usize,
    /// Grid for the blow-up asymptote check.
    pub large_cells: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            alpha: 0.01,
            k_sigma: 3.0,
            samples: 10_000,
            small_mu: vec![AtomSpec { x: 0.5, weight: 0.25 }],
            weak_samples: 2_000,
            weak_draws: 50,
            trees: 200,
            budget_factor: 100,
            large_cells: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: [f64; 2],
    /// PDE grid size `M`.
    pub grid_size: usize,
    pub engine: EngineKind,
    /// Lattice engine cells.
    pub lattice_cells: usize,
    /// Particle resolution `N` (mass `1/N` per particle).
    pub particles: usize,
    pub dt: f64,
    pub exhaustion_depth: usize,
    /// Explicit exhaustion offsets `δ_k`, strictly decreasing. Overrides the
    /// default schedule when present.
    pub exhaustion: Option<Vec<f64>>,
    pub n_schedule: Vec<u32>,
    /// Target counts `[left, right]` of `ν_n`.
    pub nu_counts: [u64; 2],
    /// Level `n` the target refers to.
    pub nu_level: u32,
    pub mu: Vec<AtomSpec>,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: String,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: [0.0, 1.0],
            grid_size: 2048,
            engine: EngineKind::Lattice,
            lattice_cells: 48,
            particles: 10_000,
            dt: 1e-3,
            exhaustion_depth: 5,
            exhaustion: None,
            n_schedule: vec![1, 4, 16, 64, 256],
            nu_counts: [1, 0],
            nu_level: 1,
            mu: vec![AtomSpec { x: 0.5, weight: 1.0 }],
            replicates: 10_000,
            seed: 20_240_601,
            out_dir: "out".into(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Err(ConfigError::Empty);
        }
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.domain_1d()?;
        if self.grid_size < MIN_DIRICHLET_CELLS {
            return Err(invalid("grid_size", format!("{} is below the minimum {MIN_DIRICHLET_CELLS}", self.grid_size)));
        }
        if self.lattice_cells < 8 {
            return Err(invalid("lattice_cells", "must be at least 8"));
        }
        if self.particles == 0 {
            return Err(invalid("particles", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", "must be positive"));
        }
        if self.exhaustion_depth == 0 {
            return Err(invalid("exhaustion_depth", "must be positive"));
        }
        if let Some(deltas) = &self.exhaustion {
            if deltas.is_empty() {
                return Err(invalid("exhaustion", "schedule is empty"));
            }
            for (i, w) in deltas.windows(2).enumerate() {
                if !(w[1] < w[0]) {
                    return Err(invalid(&format!("exhaustion[{}]", i + 1), "offsets must strictly decrease"));
                }
            }
            for (i, x) in deltas.iter().enumerate() {
                if !(*x > 0.0 && 2.0 * x < d.length()) {
                    return Err(invalid(&format!("exhaustion[{i}]"), "offset must be positive and leave a nonempty interval"));
                }
            }
        }
        if self.n_schedule.is_empty() {
            return Err(invalid("n_schedule", "schedule is empty"));
        }
        if let Some(i) = self.n_schedule.iter().position(|n| *n == 0) {
            return Err(invalid(&format!("n_schedule[{i}]"), "n must be at least 1"));
        }
        if self.nu_level == 0 {
            return Err(invalid("nu_level", "must be at least 1"));
        }
        if self.nu_counts[0] + self.nu_counts[1] == 0 {
            return Err(invalid("nu_counts", "need at least one atom"));
        }
        if self.mu.is_empty() {
            return Err(invalid("mu", "initial measure has no atoms"));
        }
        check_atoms("mu", &self.mu, &d)?;
        let v = &self.verify;
        if !(v.alpha > 0.0 && v.alpha < 1.0) {
            return Err(invalid("verify.alpha", "must lie in (0, 1)"));
        }
        if !(v.k_sigma > 0.0) {
            return Err(invalid("verify.k_sigma", "must be positive"));
        }
        if v.samples < 100 {
            return Err(invalid("verify.samples", "two-sample tests need at least 100 samples"));
        }
        check_atoms("verify.small_mu", &v.small_mu, &d)?;
        if v.weak_samples == 0 || v.weak_draws == 0 || v.trees == 0 || v.budget_factor == 0 {
            return Err(invalid("verify", "sample counts must be positive"));
        }
        if v.large_cells < crate::domain_pde::MIN_LARGE_CELLS {
            return Err(invalid("verify.large_cells", "below the large-solution minimum"));
        }
        Ok(())
    }

    pub fn domain_1d(&self) -> Result<Domain1D, ConfigError> {
        Domain1D::new(self.domain[0], self.domain[1]).map_err(|e| invalid("domain", e.to_string()))
    }

    pub fn mu_measure(&self) -> AtomicMeasure {
        to_measure(&self.mu)
    }

    pub fn small_mu_measure(&self) -> AtomicMeasure {
        to_measure(&self.verify.small_mu)
    }

    pub fn engine(&self) -> Engine {
        match self.engine {
            EngineKind::Lattice => Engine::lattice(self.lattice_cells, self.dt),
            EngineKind::Particles => Engine::particles(self.particles, self.dt),
        }
    }

    pub fn simulator(&self) -> Result<Simulator, SimError> {
        let d = self.domain_1d().map_err(|e| SimError::Input(e.to_string()))?;
        Simulator::new(d, self.engine())
    }

    /// Exhaustion members, snapped to the lattice when that engine is used.
    pub fn exhaustion(&self, sim: &Simulator) -> Result<Vec<Domain1D>, SimError> {
        match &self.exhaustion {
            None => sim.exhaustion(self.exhaustion_depth),
            Some(deltas) => {
                let raw = deltas
                    .iter()
                    .map(|dl| sim.domain.shrink(*dl))
                    .collect::<Result<Vec<_>, _>>()?;
                sim.snap_exhaustion(&raw)
            }
        }
    }

    /// Cells of the grid that backbone potentials live on.
    pub fn family_cells(&self) -> usize {
        match self.engine {
            EngineKind::Lattice => self.lattice_cells,
            EngineKind::Particles => self.grid_size,
        }
    }
}

fn check_atoms(path: &str, atoms: &[AtomSpec], d: &Domain1D) -> Result<(), ConfigError> {
    for (i, a) in atoms.iter().enumerate() {
        if !d.contains(a.x) {
            return Err(invalid(&format!("{path}[{i}].x"), format!("{} is not strictly inside the domain", a.x)));
        }
        if !(a.weight > 0.0 && a.weight.is_finite()) {
            return Err(invalid(&format!("{path}[{i}].weight"), "must be positive"));
        }
    }
    Ok(())
}

fn to_measure(atoms: &[AtomSpec]) -> AtomicMeasure {
    AtomicMeasure::from_pairs(&atoms.iter().map(|a| (a.x, a.weight)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let text = c.to_json_string();
        let back = ExperimentConfig::from_json_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json_string(), text);
    }

    #[test]
    fn small_grid_reports_field() {
        let e = ExperimentConfig::from_json_str(r#"{"grid_size": 8}"#).unwrap_err();
        assert!(e.to_string().starts_with("grid_size:"), "{e}");
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(ExperimentConfig::from_json_str("  "), Err(ConfigError::Empty)));
    }

    #[test]
    fn atom_on_boundary_is_rejected() {
        let e = ExperimentConfig::from_json_str(r#"{"mu": [{"x": 1.0, "weight": 1.0}]}"#).unwrap_err();
        assert!(e.to_string().starts_with("mu[0].x"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
