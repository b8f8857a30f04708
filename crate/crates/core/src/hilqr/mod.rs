//! Hybrid iterative LQR.
//!
//! Deterministic trajectory optimization through hybrid events: the backward
//! pass composes saltation matrices into the step Jacobians wherever the
//! nominal jumps, and the forward pass re-detects events on every rollout.
//! The result is a [`ProposalPolicy`] with reference extensions around each
//! nominal jump, used by the path integral controller as its proposal.

mod backward;
mod extensions;
mod policy;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId};
use crate::rng::ZeroNoise;
use crate::rollout::{rollout, EventConfig, JumpRecord, OpenLoopPolicy, RolloutResult, TimeGrid, ZeroPolicy};

pub use backward::{
    backward_pass, expand_along, linearize_smooth, linearize_step, BackwardPass, QuadraticExpansion, Regularization,
    StepExpansion,
};
pub use extensions::{build_extensions, select_extension, ExtensionBranch, Reference, ReferenceExtension};
pub use policy::{PolicyDocument, PolicyView, ProposalPolicy, POLICY_FORMAT};

/// Zero-noise trajectory with its jump schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    pub grid: TimeGrid,
    /// Mode at the start of each step, plus the final mode (`N + 1` entries).
    pub modes: Vec<ModeId>,
    /// `x̄_0..=x̄_N`; `x̄_{i+1}` is post-reset when step `i` jumped.
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub jumps: Vec<JumpRecord>,
    /// Realized cost `Σ (V + ½‖u‖²)Δt + Ψ_T`.
    pub cost: f64,
}

impl NominalTrajectory {
    pub fn from_rollout(r: &RolloutResult) -> Self {
        let mut modes: Vec<ModeId> = r.steps.iter().map(|s| s.mode).collect();
        let mut states: Vec<DVector<f64>> = r.steps.iter().map(|s| s.x.clone()).collect();
        modes.push(r.final_state.mode);
        states.push(r.final_state.x.clone());
        Self {
            grid: r.grid,
            modes,
            states,
            controls: r.steps.iter().map(|s| s.u.clone()).collect(),
            jumps: r.jumps.clone(),
            cost: r.realized_cost(),
        }
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn initial_state(&self) -> HybridState {
        HybridState::new(self.modes[0], self.states[0].clone())
    }

    /// `ū_step` when the nominal is in `mode` at that step, zeros otherwise.
    pub(crate) fn control_in_mode(&self, model: &HybridModel, step: usize, mode: ModeId) -> Result<DVector<f64>> {
        if step < self.controls.len() && self.modes[step] == mode {
            Ok(self.controls[step].clone())
        } else {
            Ok(DVector::zeros(model.mode(mode)?.control_dim))
        }
    }

    pub(crate) fn validate(&self, model: &HybridModel) -> Result<()> {
        let n = self.grid.steps;
        if self.controls.len() != n || self.states.len() != n + 1 || self.modes.len() != n + 1 {
            return Err(HpiError::Config(format!(
                "nominal has {} controls, {} states, {} modes for a grid of {n} steps",
                self.controls.len(),
                self.states.len(),
                self.modes.len()
            )));
        }
        for (i, (mode, x)) in self.modes.iter().zip(&self.states).enumerate() {
            let spec = model.mode(*mode)?;
            if x.len() != spec.state_dim || (i < n && self.controls[i].len() != spec.control_dim) {
                return Err(HpiError::Dimension {
                    what: "nominal knot",
                    expected: spec.state_dim,
                    got: x.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-step feedback `K_i` (`m × n`) and feedforward `k_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub feedback: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HilqrOptions {
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub tol_cost: f64,
    pub max_iters: usize,
    pub backtrack: f64,
    pub min_step: f64,
    pub regularization: Regularization,
    /// `N_f = N_b`; defaults to `ceil(0.1·N_T)`.
    pub extension_steps: Option<usize>,
    /// Open-loop initial guess, one vector per step. Zero controls when absent.
    pub initial_controls: Option<Vec<Vec<f64>>>,
}

impl Default for HilqrOptions {
    fn default() -> Self {
        Self {
            tol_cost: 1e-6,
            max_iters: 200,
            backtrack: 0.5,
            min_step: 1e-4,
            regularization: Regularization::default(),
            extension_steps: None,
            initial_controls: None,
        }
    }
}

pub fn default_extension_steps(grid_steps: usize) -> usize {
    grid_steps.div_ceil(10)
}

#[derive(Debug, Clone)]
pub struct HilqrSolution {
    pub policy: ProposalPolicy,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the initial guess followed by every accepted iterate.
    pub cost_history: Vec<f64>,
    pub backtracks: usize,
}

impl HilqrSolution {
    pub fn cost(&self) -> f64 {
        self.policy.nominal.cost
    }
}

/// Zero-noise rollout of `u = ū + K δx + α k` around `nominal`.
#[allow(clippy::too_many_arguments)]
pub fn forward_pass(
    model: &HybridModel,
    nominal: &NominalTrajectory,
    gains: &Gains,
    extensions: &[ReferenceExtension],
    alpha: f64,
    costs: &CostSpec,
    cfg: &EventConfig,
) -> Result<NominalTrajectory> {
    let view = PolicyView {
        model,
        nominal,
        gains,
        extensions,
        use_extensions: true,
        feedforward_scale: alpha,
    };
    let r = rollout(model, &nominal.grid, &nominal.initial_state(), &view, &mut ZeroNoise, costs, cfg)?;
    Ok(NominalTrajectory::from_rollout(&r))
}

fn terminal_expansion(nominal: &NominalTrajectory, costs: &CostSpec) -> (DVector<f64>, DMatrix<f64>) {
    let mode = *nominal.modes.last().expect("nominal has a final knot");
    let x = nominal.states.last().expect("nominal has a final knot").as_slice();
    (costs.terminal.gradient(mode, x), costs.terminal.hessian(mode, x))
}

fn backward_at(model: &HybridModel, nominal: &NominalTrajectory, costs: &CostSpec, opts: &HilqrOptions) -> Result<BackwardPass> {
    let steps = expand_along(model, nominal, costs)?;
    let (v_x, v_xx) = terminal_expansion(nominal, costs);
    backward_pass(&steps, v_x, v_xx, &opts.regularization)
}

/// Alternates backward and forward passes until the relative cost change
/// falls below `tol_cost` or `max_iters` is reached.
///
/// A line search that finds no decrease ends the loop with
/// `converged = false`; the best nominal so far is returned. An unconverged
/// policy carries no feedforward term, so its noise-free rollout is that
/// nominal.
pub fn solve(
    model: &HybridModel,
    grid: &TimeGrid,
    initial: &HybridState,
    costs: &CostSpec,
    cfg: &EventConfig,
    opts: &HilqrOptions,
) -> Result<HilqrSolution> {
    if !(opts.backtrack > 0.0 && opts.backtrack < 1.0) || opts.min_step <= 0.0 || opts.tol_cost < 0.0 {
        return Err(HpiError::Config("invalid H-iLQR line search settings".into()));
    }
    let first = match &opts.initial_controls {
        Some(rows) => {
            if rows.len() != grid.steps {
                return Err(HpiError::Config(format!(
                    "initial guess has {} controls for {} steps",
                    rows.len(),
                    grid.steps
                )));
            }
            let guess = OpenLoopPolicy {
                controls: rows.iter().map(|r| DVector::from_column_slice(r)).collect(),
            };
            rollout(model, grid, initial, &guess, &mut ZeroNoise, costs, cfg)?
        }
        None => rollout(model, grid, initial, &ZeroPolicy, &mut ZeroNoise, costs, cfg)?,
    };
    let mut nominal = NominalTrajectory::from_rollout(&first);
    let ext_steps = opts.extension_steps.unwrap_or_else(|| default_extension_steps(grid.steps));
    let mut history = vec![nominal.cost];
    let mut bp = backward_at(model, &nominal, costs, opts)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut backtracks = 0;

    while iterations < opts.max_iters {
        iterations += 1;
        let predicted = -bp.expected_change(1.0);
        if predicted <= opts.tol_cost * nominal.cost.abs() {
            converged = true;
            break;
        }
        let exts = build_extensions(model, &nominal, &bp.gains, ext_steps, ext_steps)?;
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= opts.min_step {
            match forward_pass(model, &nominal, &bp.gains, &exts, alpha, costs, cfg) {
                Ok(cand) if cand.cost < nominal.cost => {
                    accepted = Some(cand);
                    break;
                }
                Ok(_) => {}
                Err(e) => debug!("forward pass at alpha {alpha} failed: {e}"),
            }
            alpha *= opts.backtrack;
            backtracks += 1;
        }
        let Some(cand) = accepted else {
            debug!("line search found no decrease at iteration {iterations}");
            break;
        };
        let rel = (nominal.cost - cand.cost) / nominal.cost.abs().max(f64::MIN_POSITIVE);
        debug!("iteration {iterations}: cost {} (alpha {alpha})", cand.cost);
        nominal = cand;
        history.push(nominal.cost);
        bp = backward_at(model, &nominal, costs, opts)?;
        if rel < opts.tol_cost {
            converged = true;
            break;
        }
    }

    let extensions = build_extensions(model, &nominal, &bp.gains, ext_steps, ext_steps)?;
    Ok(HilqrSolution {
        policy: ProposalPolicy {
            nominal,
            gains: bp.gains,
            extensions,
            use_extensions: true,
            feedforward_scale: if converged { 1.0 } else { 0.0 },
        },
        iterations,
        converged,
        cost_history: history,
        backtracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{self, SystemOverrides};

    #[test]
    fn start_at_goal_without_drift_is_already_optimal() {
        let mut bench = systems::build("double-integrator", &SystemOverrides::default()).unwrap();
        bench.initial.x.fill(0.0);
        let sol = solve(&bench.model, &bench.grid, &bench.initial, &bench.costs, &EventConfig::default(), &HilqrOptions::default())
            .unwrap();
        assert!(sol.converged);
        assert_eq!(sol.cost(), 0.0);
        assert!(sol.policy.nominal.controls.iter().all(|u| u.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn zero_step_forward_pass_reproduces_nominal() {
        let bench = systems::build("bouncing-ball", &SystemOverrides { dt: Some(0.01), ..Default::default() }).unwrap();
        let sol = solve(
            &bench.model,
            &bench.grid,
            &bench.initial,
            &bench.costs,
            &EventConfig::default(),
            &HilqrOptions { max_iters: 3, ..Default::default() },
        )
        .unwrap();
        let p = &sol.policy;
        let again = forward_pass(&bench.model, &p.nominal, &p.gains, &p.extensions, 0.0, &bench.costs, &EventConfig::default())
            .unwrap();
        assert_eq!(again.states, p.nominal.states);
        assert_eq!(again.cost, p.nominal.cost);
    }

    #[test]
    fn ball_costs_decrease_monotonically() {
        let bench = systems::build("bouncing-ball", &SystemOverrides { dt: Some(0.01), ..Default::default() }).unwrap();
        let sol = solve(&bench.model, &bench.grid, &bench.initial, &bench.costs, &EventConfig::default(), &HilqrOptions::default())
            .unwrap();
        assert!(sol.cost_history.windows(2).all(|w| w[1] < w[0]), "{:?}", sol.cost_history);
        assert!(sol.cost().is_finite());
        assert!(!sol.policy.nominal.jumps.is_empty());
        assert!(sol.cost() < 0.15 * sol.cost_history[0], "{:?}", sol.cost_history);
    }
}
