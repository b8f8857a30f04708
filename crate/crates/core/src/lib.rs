//! Hybrid path integral control.
//!
//! Stochastic optimal control for hybrid systems (flows, guards, resets):
//! Euler–Maruyama rollouts with event location, path-measure diagnostics, a
//! hybrid iLQR proposal controller and the sampling-based path integral
//! controller built on top of it, plus the bouncing-ball and SLIP benchmarks
//! and a batch experiment harness.

pub mod cost;
pub mod error;
pub mod harness;
pub mod hilqr;
pub mod hpi;
pub mod measure;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod systems;

pub use cost::{CostSpec, QuadraticRunning, QuadraticTerminal, RunningCost, TerminalCost, ZeroRunning};
pub use error::{HpiError, Result};
pub use model::{HybridModel, HybridState, ModeId, ModeSpec, TransitionSpec};
pub use rng::{GaussianNoise, NoiseDraw, NoiseSource, ZeroNoise};
pub use rollout::{
    hybrid_step, rollout, rollout_from, ControlSource, EventConfig, JumpRecord, Policy, RolloutResult,
    RolloutSummary, StepRecord, TimeGrid, ZeroPolicy,
};
pub use harness::{run_batch, BatchResult, BatchTables, ExperimentConfig, ExperimentRecord, ProposalKind, ScalePreset};
pub use hilqr::{HilqrOptions, HilqrSolution, ProposalPolicy};
pub use hpi::{path_weights, run_hpi, run_hpi_zero_proposal, sample_futures, HpiOptions, HpiRun, StepDiagnostics, WeightSet};
pub use measure::{discrete_density_ratio, kl_estimate, log_ratio_controlled, PathLogRatio};
pub use systems::{Benchmark, SystemOverrides};
