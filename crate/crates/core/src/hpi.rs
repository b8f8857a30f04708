//! The hybrid path integral controller.
//!
//! At every grid step the controller samples `N_s` proposal-controlled hybrid
//! futures from the current state to the horizon, weights them by
//! `exp(−S/ε)` and shifts the proposal control by the weighted mean of the
//! first noise increments. Futures run in parallel; every reduction is in
//! sample order, so results do not depend on the worker count.

use std::sync::Mutex;

use log::debug;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId};
use crate::rng::{tags, GaussianNoise, NoiseDraw};
use crate::rollout::{
    rollout, simulate, ControlSource, EventConfig, FirstNoise, Policy, RolloutResult, SourceCounts, StepWorkspace,
    TimeGrid, ZeroPolicy,
};

/// Normalized importance weights of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    /// `−(S_k − min S)/ε`; `−∞` for failed samples.
    pub log_weights: Vec<f64>,
    /// `α_k`, normalized so that `Σ α_k = N`.
    pub alpha: Vec<f64>,
    /// Effective sample portion `1 / mean(α²)`.
    pub lambda: f64,
    /// `mean((α − 1)²)`.
    pub var_alpha: f64,
    /// Samples with non-finite `S`.
    pub failures: usize,
}

pub fn path_weights(s_values: &[f64], eps: f64) -> Result<WeightSet> {
    let n = s_values.len();
    let s_min = s_values
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !s_min.is_finite() {
        return Err(HpiError::DegenerateEnsemble { samples: n });
    }
    let log_weights: Vec<f64> = s_values
        .iter()
        .map(|&s| if s.is_finite() { -(s - s_min) / eps } else { f64::NEG_INFINITY })
        .collect();
    let w: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
    let total = pairwise_sum(&w);
    let scale = n as f64 / total;
    let alpha: Vec<f64> = w.iter().map(|v| v * scale).collect();
    let sq: Vec<f64> = alpha.iter().map(|a| a * a).collect();
    let mean_sq = pairwise_sum(&sq) / n as f64;
    let dev: Vec<f64> = alpha.iter().map(|a| (a - 1.0) * (a - 1.0)).collect();
    Ok(WeightSet {
        failures: s_values.iter().filter(|s| !s.is_finite()).count(),
        log_weights,
        alpha,
        lambda: 1.0 / mean_sq,
        var_alpha: pairwise_sum(&dev) / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlUpdate {
    pub proposal: DVector<f64>,
    pub correction: DVector<f64>,
    pub applied: DVector<f64>,
}

/// `u* = u + (√ε/Δt) Σ_k α_k ΔW_k / N`.
pub fn control_update(weights: &WeightSet, first_noises: &[Vec<f64>], eps: f64, dt: f64, u: &[f64]) -> Result<ControlUpdate> {
    let n = weights.alpha.len();
    if first_noises.len() != n {
        return Err(HpiError::Dimension {
            what: "first-noise samples",
            expected: n,
            got: first_noises.len(),
        });
    }
    if let Some(short) = first_noises.iter().find(|dw| dw.len() < u.len()) {
        return Err(HpiError::Dimension {
            what: "first-noise width",
            expected: u.len(),
            got: short.len(),
        });
    }
    let gain = eps.sqrt() / dt / n as f64;
    let mut terms = vec![0.0; n];
    let correction = DVector::from_fn(u.len(), |c, _| {
        for (t, (a, dw)) in terms.iter_mut().zip(weights.alpha.iter().zip(first_noises)) {
            *t = if *a == 0.0 { 0.0 } else { a * dw[c] };
        }
        gain * pairwise_sum(&terms)
    });
    let proposal = DVector::from_column_slice(u);
    let applied = &proposal + &correction;
    if applied.iter().any(|v| !v.is_finite()) {
        return Err(HpiError::Numerical("control update is not finite".into()));
    }
    Ok(ControlUpdate {
        proposal,
        correction,
        applied,
    })
}

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 16;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Costs and first increments of an ensemble of sampled futures.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureEnsemble {
    /// `S^u` per sample; `+∞` when the rollout failed.
    pub s_values: Vec<f64>,
    /// First drawn increment of each sample, full control width.
    pub first_noises: Vec<Vec<f64>>,
    pub failures: usize,
    pub sources: SourceCounts,
}

/// Sample `k` uses stream `k` of the `(seed, FUTURES, step)` key.
#[allow(clippy::too_many_arguments)]
pub fn sample_futures(
    model: &HybridModel,
    grid: &TimeGrid,
    step: usize,
    state: &HybridState,
    policy: &dyn Policy,
    costs: &CostSpec,
    cfg: &EventConfig,
    samples: usize,
    seed: u64,
) -> Result<FutureEnsemble> {
    if step >= grid.steps {
        return Err(HpiError::Config(format!("no horizon left after step {step}")));
    }
    if samples == 0 {
        return Err(HpiError::Config("at least one sample is required".into()));
    }
    model.check_state(state)?;
    let width = model.max_control_dim();
    let results: Vec<(f64, Vec<f64>, SourceCounts)> = (0..samples)
        .into_par_iter()
        .map_init(
            || StepWorkspace::new(model),
            |ws, k| {
                let mut noise = GaussianNoise::new(seed, tags::FUTURES, step as u64, k as u64);
                let mut first = FirstNoise::default();
                let out = simulate(model, grid, step, state, policy, &mut noise, costs, cfg, ws, &mut first);
                let dw = first.noise.unwrap_or_else(|| vec![0.0; width]);
                match out {
                    Ok(s) if s.s_u.is_finite() => (s.s_u, dw, s.sources),
                    Ok(s) => (f64::INFINITY, dw, s.sources),
                    Err(_) => (f64::INFINITY, dw, SourceCounts::default()),
                }
            },
        )
        .collect();
    let mut ens = FutureEnsemble {
        s_values: Vec::with_capacity(samples),
        first_noises: Vec::with_capacity(samples),
        failures: 0,
        sources: SourceCounts::default(),
    };
    for (s, dw, src) in results {
        ens.failures += usize::from(!s.is_finite());
        ens.s_values.push(s);
        ens.first_noises.push(dw);
        ens.sources.merge(&src);
    }
    Ok(ens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpiOptions {
    /// `N_s`.
    pub samples: usize,
    /// Seed of the futures streams.
    pub seed: u64,
}

/// Per-step record of the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    pub mode: ModeId,
    /// `NaN` on fallback steps.
    pub lambda: f64,
    pub var_alpha: f64,
    pub du_norm: f64,
    pub failures: usize,
    /// Sampled steps whose proposal reference came from an extension or fallback.
    pub mismatches: usize,
    pub fallback: bool,
    /// Resets on the controlled trajectory during this step.
    pub jumps: usize,
}

#[derive(Debug, Clone)]
pub struct HpiRun {
    pub trajectory: RolloutResult,
    pub diagnostics: Vec<StepDiagnostics>,
    pub fallbacks: usize,
}

impl HpiRun {
    pub fn realized_cost(&self) -> f64 {
        self.trajectory.realized_cost()
    }
}

/// The controller seen by the rollout engine: every control query samples
/// futures from the queried state.
struct Controller<'a> {
    model: &'a HybridModel,
    grid: &'a TimeGrid,
    proposal: &'a dyn Policy,
    costs: &'a CostSpec,
    cfg: &'a EventConfig,
    opts: HpiOptions,
    log: Mutex<Vec<StepDiagnostics>>,
    error: Mutex<Option<HpiError>>,
}

impl Controller<'_> {
    fn update(&self, step: usize, t: f64, mode: ModeId, x: &[f64], u: &mut [f64]) -> Result<StepDiagnostics> {
        let eps = self.model.noise_intensity();
        let state = HybridState::from_slice(mode, x);
        let ens = sample_futures(
            self.model,
            self.grid,
            step,
            &state,
            self.proposal,
            self.costs,
            self.cfg,
            self.opts.samples,
            self.opts.seed,
        )?;
        let mut diag = StepDiagnostics {
            step,
            t,
            mode,
            lambda: f64::NAN,
            var_alpha: f64::NAN,
            du_norm: 0.0,
            failures: ens.failures,
            mismatches: ens.sources.mismatches(),
            fallback: false,
            jumps: 0,
        };
        match path_weights(&ens.s_values, eps) {
            Ok(w) => {
                let upd = control_update(&w, &ens.first_noises, eps, self.grid.dt, u)?;
                u.copy_from_slice(upd.applied.as_slice());
                diag.lambda = w.lambda;
                diag.var_alpha = w.var_alpha;
                diag.du_norm = upd.correction.norm();
            }
            Err(HpiError::DegenerateEnsemble { .. }) => {
                debug!("degenerate ensemble at step {step}; applying the proposal control");
                diag.fallback = true;
            }
            Err(e) => return Err(e),
        }
        Ok(diag)
    }
}

impl Policy for Controller<'_> {
    fn control(&self, step: usize, t: f64, mode: ModeId, x: &[f64], u: &mut [f64]) -> ControlSource {
        let source = self.proposal.control(step, t, mode, x, u);
        match self.update(step, t, mode, x, u) {
            Ok(d) => self.log.lock().expect("diagnostics lock").push(d),
            Err(e) => {
                // Surfaced by run_hpi once the rollout returns.
                u.fill(f64::NAN);
                *self.error.lock().expect("error lock") = Some(e);
            }
        }
        source
    }
}

/// Runs the controller on the true system driven by `actuator` noise.
#[allow(clippy::too_many_arguments)]
pub fn run_hpi(
    model: &HybridModel,
    grid: &TimeGrid,
    initial: &HybridState,
    proposal: &dyn Policy,
    costs: &CostSpec,
    cfg: &EventConfig,
    opts: &HpiOptions,
    actuator: &NoiseDraw,
) -> Result<HpiRun> {
    if actuator.steps() < grid.steps || actuator.width < model.max_control_dim() {
        return Err(HpiError::Config(format!(
            "actuator noise covers {} steps of width {}, need {} of width {}",
            actuator.steps(),
            actuator.width,
            grid.steps,
            model.max_control_dim()
        )));
    }
    let ctrl = Controller {
        model,
        grid,
        proposal,
        costs,
        cfg,
        opts: *opts,
        log: Mutex::new(Vec::with_capacity(grid.steps)),
        error: Mutex::new(None),
    };
    let result = rollout(model, grid, initial, &ctrl, &mut actuator.source(), costs, cfg);
    if let Some(e) = ctrl.error.lock().expect("error lock").take() {
        return Err(e);
    }
    let trajectory = result?;
    let mut diagnostics = ctrl.log.into_inner().expect("diagnostics lock");
    for (d, s) in diagnostics.iter_mut().zip(&trajectory.steps) {
        d.jumps = s.jumps;
    }
    Ok(HpiRun {
        fallbacks: diagnostics.iter().filter(|d| d.fallback).count(),
        trajectory,
        diagnostics,
    })
}

/// [`run_hpi`] with the uncontrolled proposal, for which `S = L_H`.
#[allow(clippy::too_many_arguments)]
pub fn run_hpi_zero_proposal(
    model: &HybridModel,
    grid: &TimeGrid,
    initial: &HybridState,
    costs: &CostSpec,
    cfg: &EventConfig,
    opts: &HpiOptions,
    actuator: &NoiseDraw,
) -> Result<HpiRun> {
    run_hpi(model, grid, initial, &ZeroPolicy, costs, cfg, opts, actuator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_costs_give_uniform_weights() {
        let w = path_weights(&[3.0; 7], 0.5).unwrap();
        assert!(w.alpha.iter().all(|a| *a == 1.0));
        assert_eq!(w.lambda, 1.0);
        assert_eq!(w.var_alpha, 0.0);
    }

    #[test]
    fn single_finite_sample_takes_all_weight() {
        let w = path_weights(&[f64::INFINITY, 2.0, f64::INFINITY, f64::NAN], 1.0).unwrap();
        assert_eq!(w.alpha, vec![0.0, 4.0, 0.0, 0.0]);
        assert_relative_eq!(w.lambda, 0.25);
        assert_eq!(w.failures, 3);
        assert!(matches!(
            path_weights(&[f64::INFINITY; 3], 1.0),
            Err(HpiError::DegenerateEnsemble { samples: 3 })
        ));
    }

    #[test]
    fn two_sample_hand_example() {
        let w = path_weights(&[0.0, 2f64.ln()], 1.0).unwrap();
        assert_relative_eq!(w.alpha[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w.alpha[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w.lambda, 0.9, epsilon = 1e-15);

        let (eps, dt, a) = (2.0, 0.01, 0.03);
        let upd = control_update(&w, &[vec![a], vec![-a]], eps, dt, &[0.5]).unwrap();
        assert_relative_eq!(upd.correction[0], eps.sqrt() * a / (3.0 * dt), epsilon = 1e-12);
        assert_relative_eq!(upd.applied[0], 0.5 + upd.correction[0], epsilon = 1e-15);
    }

    #[test]
    fn uniform_weights_average_the_noise() {
        let w = path_weights(&[1.0; 3], 1.0).unwrap();
        let noises = vec![vec![0.1, 1.0], vec![0.2, 2.0], vec![0.6, 0.0]];
        let upd = control_update(&w, &noises, 4.0, 0.5, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(upd.correction[0], 2.0 * 0.3 / 0.5, epsilon = 1e-12);
        assert_relative_eq!(upd.correction[1], 2.0 * 1.0 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn huge_cost_spread_stays_finite() {
        let w = path_weights(&[0.0, 1e5, 2e5], 0.005).unwrap();
        assert_eq!(w.alpha, vec![3.0, 0.0, 0.0]);
        assert_relative_eq!(w.lambda, 1.0 / 3.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_sum_on_integers() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
