//! Simulation and numerical verification of super-Brownian exit measures on
//! an interval: the semilinear PDE layer, superprocess samplers, Poisson
//! boundary conditioning, the branching backbone, and a statistical harness.

pub mod backbone;
pub mod conditioning;
pub mod config;
pub mod domain_pde;
pub mod harness;
pub mod sbm_sim;
pub mod seeding;

pub use backbone::{BackboneSeed, BackboneTree, LabelSet, RhoFamily};
pub use conditioning::{CoupledSample, PoissonBoundarySample};
pub use config::{ConfigError, ExperimentConfig};
pub use domain_pde::{BoundaryKind, Domain1D, Grid, GridFunction, PdeError, Side};
pub use harness::{Suite, SuiteOutcome, TestReport};
pub use sbm_sim::{AtomicMeasure, Engine, MeanEstimate, SimError, SimulationLaw, Simulator};
