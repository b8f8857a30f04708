//! Batch experiments: paired proposal vs H-PI runs, ablations and tables.

pub mod diag;
pub mod emit;
pub mod stats;

use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HpiError, Result};
use crate::hilqr::{self, HilqrOptions, ProposalPolicy};
use crate::hpi::{path_weights, run_hpi, sample_futures, HpiOptions, StepDiagnostics};
use crate::rng::{experiment_seed, tags, NoiseDraw};
use crate::rollout::{rollout, EventConfig, Policy, RolloutResult, ZeroPolicy};
use crate::systems::{self, Benchmark, SystemOverrides};

pub use stats::{PairedCost, SegmentStats, SignTest, TailStats};

/// Version of every emitted file layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Tail fractions and CVaR levels reported in the tables.
pub const TAIL_FRACTIONS: [f64; 2] = [0.10, 0.25];
pub const CVAR_LEVELS: [f64; 3] = [0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    #[default]
    Hilqr,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    pub scale_preset: ScalePreset,
    pub overrides: SystemOverrides,
    /// `N_s`.
    pub samples: usize,
    pub experiments: usize,
    pub seed: u64,
    pub proposal: ProposalKind,
    pub extensions: bool,
    pub out: Option<PathBuf>,
    pub hilqr: HilqrOptions,
    pub events: EventConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("bouncing-ball", ScalePreset::Desk)
    }
}

impl ExperimentConfig {
    /// Sizes for a system at a given scale. `Paper` uses the fine default grid,
    /// 5000 samples and 100 experiments; `Desk` shrinks them to run in minutes.
    pub fn preset(system: &str, scale: ScalePreset) -> Self {
        let (dt, samples, experiments) = match (system, scale) {
            ("bouncing-ball", ScalePreset::Desk) => (Some(0.01), 1000, 20),
            ("slip-jump", ScalePreset::Desk) => (None, 500, 5),
            (_, ScalePreset::Desk) => (None, 1000, 10),
            (_, ScalePreset::Paper) => (None, 5000, 100),
        };
        Self {
            system: system.to_string(),
            scale_preset: scale,
            overrides: SystemOverrides {
                dt,
                ..Default::default()
            },
            samples,
            experiments,
            seed: 0,
            proposal: ProposalKind::Hilqr,
            extensions: true,
            out: None,
            hilqr: HilqrOptions::default(),
            events: EventConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(HpiError::Config("samples must be at least 1".into()));
        }
        if self.experiments == 0 {
            return Err(HpiError::Config("experiments must be at least 1".into()));
        }
        Ok(())
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        systems::build(&self.system, &self.overrides)
    }

    pub fn experiment_seed(&self, index: usize) -> u64 {
        experiment_seed(self.seed, index as u64)
    }
}

/// Recursively overlays `overlay` onto `base`; objects merge key by key,
/// anything else replaces.
pub fn merge_json(base: &mut serde_json::Value, overlay: &serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSummary {
    pub kind: ProposalKind,
    pub extensions: bool,
    pub iterations: usize,
    pub converged: bool,
    /// Noise-free cost of the proposal's nominal.
    pub nominal_cost: f64,
}

/// One row of the per-experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment_id: usize,
    pub seed: u64,
    pub proposal_cost: f64,
    pub hpi_cost: f64,
    pub improvement: f64,
    /// Resets on the H-PI trajectory.
    pub jump_count: usize,
    /// Grid step of the first segment-defining jump on the H-PI trajectory.
    pub segment_step: Option<usize>,
    pub segment_time: Option<f64>,
    /// More than one segment-defining jump occurred.
    pub multi_jump: bool,
    pub fallbacks: usize,
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }

    pub fn paired(&self) -> PairedCost {
        PairedCost {
            proposal: self.proposal_cost,
            hpi: self.hpi_cost,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentTrajectories {
    pub proposal: RolloutResult,
    pub hpi: RolloutResult,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub config: ExperimentConfig,
    pub system_params: serde_json::Value,
    pub proposal: ProposalSummary,
    pub records: Vec<ExperimentRecord>,
    /// Per-experiment controller diagnostics, empty for failed experiments.
    pub diagnostics: Vec<Vec<StepDiagnostics>>,
    pub trajectories: Vec<Option<ExperimentTrajectories>>,
}

impl BatchResult {
    pub fn tables(&self) -> Result<BatchTables> {
        BatchTables::compute(&self.records, &self.diagnostics)
    }
}

enum Proposal {
    Zero,
    Hilqr(Box<ProposalPolicy>),
}

fn build_proposal(config: &ExperimentConfig, bench: &Benchmark) -> Result<(Proposal, ProposalSummary)> {
    match config.proposal {
        ProposalKind::Zero => {
            let nominal = rollout(
                &bench.model,
                &bench.grid,
                &bench.initial,
                &ZeroPolicy,
                &mut crate::rng::ZeroNoise,
                &bench.costs,
                &config.events,
            )?;
            Ok((
                Proposal::Zero,
                ProposalSummary {
                    kind: ProposalKind::Zero,
                    extensions: false,
                    iterations: 0,
                    converged: true,
                    nominal_cost: nominal.realized_cost(),
                },
            ))
        }
        ProposalKind::Hilqr => {
            let sol = hilqr::solve(&bench.model, &bench.grid, &bench.initial, &bench.costs, &config.events, &config.hilqr)?;
            if !sol.converged {
                warn!(
                    "H-iLQR stopped after {} iterations without converging (cost {:.6})",
                    sol.iterations,
                    sol.cost()
                );
            }
            let summary = ProposalSummary {
                kind: ProposalKind::Hilqr,
                extensions: config.extensions,
                iterations: sol.iterations,
                converged: sol.converged,
                nominal_cost: sol.cost(),
            };
            Ok((Proposal::Hilqr(Box::new(sol.policy.with_extensions(config.extensions))), summary))
        }
    }
}

type ExperimentOutcome = (ExperimentRecord, Vec<StepDiagnostics>, Option<ExperimentTrajectories>);

fn run_experiment(config: &ExperimentConfig, bench: &Benchmark, policy: &dyn Policy, index: usize) -> ExperimentOutcome {
    let seed = config.experiment_seed(index);
    let mut record = ExperimentRecord {
        experiment_id: index,
        seed,
        proposal_cost: f64::NAN,
        hpi_cost: f64::NAN,
        improvement: f64::NAN,
        jump_count: 0,
        segment_step: None,
        segment_time: None,
        multi_jump: false,
        fallbacks: 0,
        error: None,
    };
    let actuator = NoiseDraw::generate(
        seed,
        tags::ACTUATOR,
        0,
        bench.grid.steps,
        bench.model.max_control_dim(),
        bench.grid.dt,
    );
    let outcome = (|| -> Result<(RolloutResult, crate::hpi::HpiRun)> {
        let prop = rollout(
            &bench.model,
            &bench.grid,
            &bench.initial,
            policy,
            &mut actuator.source(),
            &bench.costs,
            &config.events,
        )?;
        let opts = HpiOptions {
            samples: config.samples,
            seed,
        };
        let run = run_hpi(
            &bench.model,
            &bench.grid,
            &bench.initial,
            policy,
            &bench.costs,
            &config.events,
            &opts,
            &actuator,
        )?;
        Ok((prop, run))
    })();
    match outcome {
        Ok((prop, run)) => {
            record.proposal_cost = prop.realized_cost();
            record.hpi_cost = run.realized_cost();
            record.improvement = record.paired().improvement();
            record.jump_count = run.trajectory.jumps.len();
            record.fallbacks = run.fallbacks;
            let mut segment_jumps = run
                .trajectory
                .jumps
                .iter()
                .filter(|j| bench.segment_transition.is_none_or(|(from, to)| j.from == from && j.to == to));
            if let Some(first) = segment_jumps.next() {
                record.segment_step = Some(first.step);
                record.segment_time = Some(first.pre_time);
                record.multi_jump = segment_jumps.next().is_some();
            }
            info!(
                "experiment {index}: proposal {:.6}, H-PI {:.6}",
                record.proposal_cost, record.hpi_cost
            );
            let traj = ExperimentTrajectories {
                proposal: prop,
                hpi: run.trajectory,
            };
            (record, run.diagnostics, Some(traj))
        }
        Err(e) => {
            warn!("experiment {index} failed: {e}");
            record.error = Some(e.to_string());
            (record, Vec::new(), None)
        }
    }
}

/// Runs `config.experiments` paired experiments. Experiment `i` draws one
/// actuator noise table that drives both the proposal-controlled and the
/// H-PI-controlled system. Failed experiments are recorded and skipped.
pub fn run_batch(config: &ExperimentConfig) -> Result<BatchResult> {
    config.validate()?;
    let bench = config.benchmark()?;
    let (proposal, summary) = build_proposal(config, &bench)?;
    let view;
    let policy: &dyn Policy = match &proposal {
        Proposal::Zero => &ZeroPolicy,
        Proposal::Hilqr(p) => {
            view = p.bind(&bench.model);
            &view
        }
    };
    let outcomes: Vec<ExperimentOutcome> = (0..config.experiments)
        .into_par_iter()
        .map(|i| run_experiment(config, &bench, policy, i))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut diagnostics = Vec::with_capacity(outcomes.len());
    let mut trajectories = Vec::with_capacity(outcomes.len());
    for (r, d, t) in outcomes {
        records.push(r);
        diagnostics.push(d);
        trajectories.push(t);
    }
    Ok(BatchResult {
        config: config.clone(),
        system_params: bench.params.clone(),
        proposal: summary,
        records,
        diagnostics,
        trajectories,
    })
}

/// Sampling quality at `t = 0` for one proposal setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub extensions: bool,
    pub var_alpha: f64,
    pub lambda: f64,
    pub failures: usize,
    pub mismatches: usize,
}

/// Samples futures from the initial state with the H-iLQR proposal, once
/// without and once with reference extensions, under the same noise.
pub fn ablation_extensions(config: &ExperimentConfig) -> Result<[AblationRow; 2]> {
    config.validate()?;
    let bench = config.benchmark()?;
    let sol = hilqr::solve(&bench.model, &bench.grid, &bench.initial, &bench.costs, &config.events, &config.hilqr)?;
    let eps = bench.model.noise_intensity();
    let row = |extensions: bool| -> Result<AblationRow> {
        let policy = sol.policy.clone().with_extensions(extensions);
        let view = policy.bind(&bench.model);
        let ens = sample_futures(
            &bench.model,
            &bench.grid,
            0,
            &bench.initial,
            &view,
            &bench.costs,
            &config.events,
            config.samples,
            config.seed,
        )?;
        let w = path_weights(&ens.s_values, eps)?;
        Ok(AblationRow {
            extensions,
            var_alpha: w.var_alpha,
            lambda: w.lambda,
            failures: ens.failures,
            mismatches: ens.sources.mismatches(),
        })
    };
    Ok([row(false)?, row(true)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarRow {
    pub level: f64,
    pub improvement_pct: f64,
}

/// Summary tables of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTables {
    pub schema_version: u32,
    pub experiments: usize,
    pub completed: usize,
    pub overall: TailStats,
    pub tails: Vec<TailStats>,
    pub cvar: Vec<CvarRow>,
    pub sign_test: SignTest,
    pub tail_sign_tests: Vec<SignTest>,
    /// Per-run segment averages, averaged over runs.
    pub segments: SegmentStats,
    pub multi_jump_runs: usize,
}

impl BatchTables {
    pub fn compute(records: &[ExperimentRecord], diagnostics: &[Vec<StepDiagnostics>]) -> Result<Self> {
        if records.len() != diagnostics.len() {
            return Err(HpiError::Statistics(format!(
                "{} records but {} diagnostics series",
                records.len(),
                diagnostics.len()
            )));
        }
        let done: Vec<usize> = (0..records.len()).filter(|&i| records[i].completed()).collect();
        let pairs: Vec<PairedCost> = done.iter().map(|&i| records[i].paired()).collect();
        let tails = TAIL_FRACTIONS
            .iter()
            .map(|&p| stats::tail_stats(&pairs, p))
            .collect::<Result<Vec<_>>>()?;
        let tail_sign_tests = TAIL_FRACTIONS
            .iter()
            .map(|&p| stats::tail_sign_test(&pairs, p))
            .collect::<Result<Vec<_>>>()?;
        let cvar = CVAR_LEVELS
            .iter()
            .map(|&level| {
                Ok(CvarRow {
                    level,
                    improvement_pct: 100.0 * stats::cvar(&pairs, level)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let runs: Vec<SegmentStats> = done
            .iter()
            .map(|&i| stats::segment_stats(&diagnostics[i], records[i].segment_step))
            .collect();
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            experiments: records.len(),
            completed: done.len(),
            overall: stats::tail_stats(&pairs, 1.0)?,
            tails,
            cvar,
            sign_test: stats::sign_test(&pairs),
            tail_sign_tests,
            segments: stats::mean_segment_stats(&runs),
            multi_jump_runs: done.iter().filter(|&&i| records[i].multi_jump).count(),
        })
    }
}
