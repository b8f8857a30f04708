//! Euler–Maruyama simulation of controlled hybrid SDEs on a fixed grid.
//!
//! Each grid step takes a tentative step with the full increment. If a guard of
//! the current mode is triggered at the tentative end point, the crossing time
//! is located by bisection on the step interpolant
//!
//! ```text
//! x(s) = x_i + (F + σu) s + √ε σ ΔW √(s / Δt),   s ∈ [0, Δt]
//! ```
//!
//! and the reset is applied at `x(s*)`. The noise consumed by the shortened
//! step is `ΔW̃ = ΔW √(s*/Δt)`, which has variance `s*` and reproduces the
//! pre-event state exactly from the Euler formula with step `s*`. The rest of
//! the grid interval is not integrated; the next step starts from the
//! post-reset state at the next grid time.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId, TransitionSpec};
use crate::rng::NoiseSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(HpiError::Config(format!(
                "time grid needs a positive horizon and at least one step (T = {horizon}, N = {steps})"
            )));
        }
        Ok(Self {
            horizon,
            dt: horizon / steps as f64,
            steps,
        })
    }

    /// Grid with step `dt`; the horizon must be an integer multiple of it.
    pub fn from_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(HpiError::Config(format!("time step must be positive, got {dt}")));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(HpiError::Config(format!(
                "horizon {horizon} is not an integer multiple of the step {dt}"
            )));
        }
        Self::new(horizon, steps as usize)
    }

    /// Grid time of step `i`; `time(steps)` is exactly the horizon.
    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventConfig {
    /// Bisection stops once `|g| <= guard_tol`.
    pub guard_tol: f64,
    /// Bisection also stops once the bracket is narrower than `time_tol_rel · Δt`
    /// (never below machine epsilon).
    pub time_tol_rel: f64,
    pub max_events_per_step: usize,
    pub max_events_per_rollout: usize,
    pub max_bisection_iters: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            guard_tol: 1e-9,
            time_tol_rel: 1e-12,
            max_events_per_step: 4,
            max_events_per_rollout: 64,
            max_bisection_iters: 200,
        }
    }
}

impl EventConfig {
    fn time_tol(&self, dt: f64) -> f64 {
        (self.time_tol_rel * dt).max(f64::EPSILON)
    }
}

/// Where a policy's control came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    Nominal,
    Extension,
    /// Extension queried past its end; the endpoint was used.
    Clamped,
    /// No reference in the state's mode was available.
    Fallback,
    Open,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub nominal: usize,
    pub extension: usize,
    pub clamped: usize,
    pub fallback: usize,
    pub open: usize,
}

impl SourceCounts {
    pub fn add(&mut self, src: ControlSource) {
        match src {
            ControlSource::Nominal => self.nominal += 1,
            ControlSource::Extension => self.extension += 1,
            ControlSource::Clamped => self.clamped += 1,
            ControlSource::Fallback => self.fallback += 1,
            ControlSource::Open => self.open += 1,
        }
    }

    pub fn merge(&mut self, other: &SourceCounts) {
        self.nominal += other.nominal;
        self.extension += other.extension;
        self.clamped += other.clamped;
        self.fallback += other.fallback;
        self.open += other.open;
    }

    /// Steps whose reference came from outside the nominal trajectory.
    pub fn mismatches(&self) -> usize {
        self.extension + self.clamped + self.fallback
    }
}

/// State feedback `u = π(i, t, mode, x)`; `u` has the mode's control dimension.
pub trait Policy: Send + Sync {
    fn control(&self, step: usize, t: f64, mode: ModeId, x: &[f64], u: &mut [f64]) -> ControlSource;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn control(&self, _: usize, _: f64, _: ModeId, _: &[f64], u: &mut [f64]) -> ControlSource {
        u.fill(0.0);
        ControlSource::Open
    }
}

/// Per-step open-loop controls; entries of the wrong length are padded or cut.
#[derive(Debug, Clone)]
pub struct OpenLoopPolicy {
    pub controls: Vec<DVector<f64>>,
}

impl Policy for OpenLoopPolicy {
    fn control(&self, step: usize, _: f64, _: ModeId, _: &[f64], u: &mut [f64]) -> ControlSource {
        u.fill(0.0);
        if let Some(c) = self.controls.get(step) {
            let n = c.len().min(u.len());
            u[..n].copy_from_slice(&c.as_slice()[..n]);
        }
        ControlSource::Open
    }
}

/// Adapts a closure into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<F> Policy for FnPolicy<F>
where
    F: Fn(usize, f64, ModeId, &[f64], &mut [f64]) + Send + Sync,
{
    fn control(&self, step: usize, t: f64, mode: ModeId, x: &[f64], u: &mut [f64]) -> ControlSource {
        (self.0)(step, t, mode, x, u);
        ControlSource::Open
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub step: usize,
    pub pre_time: f64,
    pub post_time: f64,
    pub from: ModeId,
    pub to: ModeId,
    pub pre_state: DVector<f64>,
    pub post_state: DVector<f64>,
    /// `Δt̃ = t⁻ − t_i`.
    pub shortened_step: f64,
}

/// One grid step of a recorded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub mode: ModeId,
    /// State at the start of the step.
    pub x: DVector<f64>,
    /// End of the flow part of the step, before any reset.
    pub x_flow_end: DVector<f64>,
    pub u: DVector<f64>,
    /// Increment actually consumed, `ΔW` or the shortened `ΔW̃`.
    pub noise_used: DVector<f64>,
    pub dt_eff: f64,
    /// `V(t, x)` at the start of the step.
    pub running_cost: f64,
    pub source: ControlSource,
    pub jumps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub grid: TimeGrid,
    pub start_step: usize,
    pub steps: Vec<StepRecord>,
    pub jumps: Vec<JumpRecord>,
    pub final_state: HybridState,
    /// `Σ V Δt`.
    pub running_cost_integral: f64,
    /// `Σ ½‖u‖² Δt`.
    pub control_energy_integral: f64,
    /// `Σ uᵀ ΔW̃`, without the `√ε` factor.
    pub stochastic_integral: f64,
    pub terminal_cost: f64,
    pub s_u: f64,
    pub l_h: f64,
    pub sources: SourceCounts,
}

impl RolloutResult {
    /// `Σ (V + ½‖u‖²) Δt + Ψ_T`, the cost the trajectory actually incurred.
    pub fn realized_cost(&self) -> f64 {
        self.running_cost_integral + self.control_energy_integral + self.terminal_cost
    }

    /// Start-of-step states followed by the final state.
    pub fn states(&self) -> impl Iterator<Item = HybridState> + '_ {
        self.steps
            .iter()
            .map(|s| HybridState::new(s.mode, s.x.clone()))
            .chain(std::iter::once(self.final_state.clone()))
    }
}

/// Cost totals of a rollout without per-step history.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSummary {
    pub final_state: HybridState,
    pub running_cost_integral: f64,
    pub control_energy_integral: f64,
    pub stochastic_integral: f64,
    pub terminal_cost: f64,
    pub s_u: f64,
    pub l_h: f64,
    pub jumps: usize,
    pub sources: SourceCounts,
}

impl RolloutSummary {
    pub fn realized_cost(&self) -> f64 {
        self.running_cost_integral + self.control_energy_integral + self.terminal_cost
    }
}

/// Read-only view of a finished step handed to a [`Recorder`].
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub t: f64,
    pub mode: ModeId,
    pub x: &'a [f64],
    pub x_flow_end: &'a [f64],
    pub u: &'a [f64],
    /// Full drawn increment (model-wide width).
    pub drawn: &'a [f64],
    pub used: &'a [f64],
    pub dt_eff: f64,
    pub running_cost: f64,
    pub source: ControlSource,
    pub jumps: &'a [JumpRecord],
}

pub trait Recorder {
    fn record(&mut self, _view: &StepView<'_>) {}
}

/// Records nothing.
impl Recorder for () {}

#[derive(Debug, Default)]
struct HistoryRecorder {
    steps: Vec<StepRecord>,
    jumps: Vec<JumpRecord>,
}

impl Recorder for HistoryRecorder {
    fn record(&mut self, v: &StepView<'_>) {
        self.steps.push(StepRecord {
            step: v.step,
            t: v.t,
            mode: v.mode,
            x: DVector::from_column_slice(v.x),
            x_flow_end: DVector::from_column_slice(v.x_flow_end),
            u: DVector::from_column_slice(v.u),
            noise_used: DVector::from_column_slice(v.used),
            dt_eff: v.dt_eff,
            running_cost: v.running_cost,
            source: v.source,
            jumps: v.jumps.len(),
        });
        self.jumps.extend_from_slice(v.jumps);
    }
}

/// Keeps the first drawn increment of a rollout.
#[derive(Debug, Default)]
pub struct FirstNoise {
    pub noise: Option<Vec<f64>>,
}

impl Recorder for FirstNoise {
    fn record(&mut self, v: &StepView<'_>) {
        if self.noise.is_none() {
            self.noise = Some(v.drawn.to_vec());
        }
    }
}

/// Scratch buffers sized for the widest mode; reused across steps and rollouts.
#[derive(Debug, Clone)]
pub struct StepWorkspace {
    flow: Vec<f64>,
    sigma: Vec<f64>,
    scaled_noise: Vec<f64>,
    probe: Vec<f64>,
    flow_end: Vec<f64>,
    reset_out: Vec<f64>,
    jumps: Vec<JumpRecord>,
    pre: Vec<f64>,
    u: Vec<f64>,
    drawn: Vec<f64>,
    used: Vec<f64>,
}

impl StepWorkspace {
    pub fn new(model: &HybridModel) -> Self {
        let n = model.max_state_dim();
        let m = model.max_control_dim();
        Self {
            flow: vec![0.0; n],
            sigma: vec![0.0; n * m],
            scaled_noise: vec![0.0; n],
            probe: vec![0.0; n],
            flow_end: vec![0.0; n],
            reset_out: vec![0.0; n],
            jumps: Vec::new(),
            pre: Vec::with_capacity(n),
            u: vec![0.0; m],
            drawn: vec![0.0; m],
            used: vec![0.0; m],
        }
    }
}

/// `x + (F + σu)Δt + √ε σ ΔW` in the state's mode.
pub fn euler_step(
    model: &HybridModel,
    step: usize,
    t: f64,
    state: &HybridState,
    u: &[f64],
    dw: &[f64],
    dt: f64,
) -> Result<DVector<f64>> {
    let spec = model.mode(state.mode)?;
    check_inputs(spec.state_dim, spec.control_dim, state, u, dw)?;
    let mut ws = StepWorkspace::new(model);
    let n = spec.state_dim;
    prepare_step(model, state.mode, t, state.x.as_slice(), u, dw, dt, &mut ws);
    let out = DVector::from_column_slice(&ws.flow_end[..n]);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(HpiError::Divergence {
            step,
            mode: state.mode,
            jumps: 0,
        });
    }
    Ok(out)
}

/// Locates the crossing of guard `from -> to` inside a step that triggers it.
///
/// Returns `(t⁻, x⁻)` on the step interpolant.
#[allow(clippy::too_many_arguments)]
pub fn refine_event_time(
    model: &HybridModel,
    from: ModeId,
    to: ModeId,
    t_i: f64,
    x_i: &[f64],
    u: &[f64],
    dw: &[f64],
    dt: f64,
    cfg: &EventConfig,
) -> Result<(f64, DVector<f64>)> {
    let tr = model.transition(from, to)?;
    let spec = model.mode(from)?;
    let state = HybridState::from_slice(from, x_i);
    check_inputs(spec.state_dim, spec.control_dim, &state, u, dw)?;
    let mut ws = StepWorkspace::new(model);
    prepare_step(model, from, t_i, x_i, u, dw, dt, &mut ws);
    let n = spec.state_dim;
    let s = bisect_event(tr, t_i, x_i, dt, cfg, &ws.flow[..n], &ws.scaled_noise[..n], &mut ws.probe[..n], 0)?;
    interpolate(x_i, &ws.flow[..n], &ws.scaled_noise[..n], s, dt, &mut ws.probe[..n]);
    Ok((t_i + s, DVector::from_column_slice(&ws.probe[..n])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: HybridState,
    pub jumps: Vec<JumpRecord>,
    pub dt_eff: f64,
    pub noise_used: DVector<f64>,
}

/// One grid step with event detection, refinement and reset.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_step(
    model: &HybridModel,
    step: usize,
    t: f64,
    state: &HybridState,
    u: &[f64],
    dw: &[f64],
    dt: f64,
    cfg: &EventConfig,
) -> Result<StepOutcome> {
    let spec = model.mode(state.mode)?;
    check_inputs(spec.state_dim, spec.control_dim, state, u, dw)?;
    let m = spec.control_dim;
    let mut ws = StepWorkspace::new(model);
    let mut mode = state.mode;
    let mut x = state.x.as_slice().to_vec();
    let dt_eff = advance(model, cfg, step, t, &mut mode, &mut x, u, dw, dt, 0, &mut ws)?;
    let scale = noise_scale(dt_eff, dt);
    Ok(StepOutcome {
        state: HybridState::from_slice(mode, &x),
        jumps: std::mem::take(&mut ws.jumps),
        dt_eff,
        noise_used: DVector::from_fn(m, |r, _| dw[r] * scale),
    })
}

/// Full rollout from grid step 0.
pub fn rollout(
    model: &HybridModel,
    grid: &TimeGrid,
    initial: &HybridState,
    policy: &dyn Policy,
    noise: &mut dyn NoiseSource,
    costs: &CostSpec,
    cfg: &EventConfig,
) -> Result<RolloutResult> {
    rollout_from(model, grid, 0, initial, policy, noise, costs, cfg)
}

/// Full rollout over grid steps `start_step..N_T`, keeping every step.
#[allow(clippy::too_many_arguments)]
pub fn rollout_from(
    model: &HybridModel,
    grid: &TimeGrid,
    start_step: usize,
    initial: &HybridState,
    policy: &dyn Policy,
    noise: &mut dyn NoiseSource,
    costs: &CostSpec,
    cfg: &EventConfig,
) -> Result<RolloutResult> {
    let mut ws = StepWorkspace::new(model);
    let mut rec = HistoryRecorder::default();
    let s = simulate(model, grid, start_step, initial, policy, noise, costs, cfg, &mut ws, &mut rec)?;
    Ok(RolloutResult {
        grid: *grid,
        start_step,
        steps: rec.steps,
        jumps: rec.jumps,
        final_state: s.final_state,
        running_cost_integral: s.running_cost_integral,
        control_energy_integral: s.control_energy_integral,
        stochastic_integral: s.stochastic_integral,
        terminal_cost: s.terminal_cost,
        s_u: s.s_u,
        l_h: s.l_h,
        sources: s.sources,
    })
}

/// Rollout core: no allocation per step beyond what the recorder keeps.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &HybridModel,
    grid: &TimeGrid,
    start_step: usize,
    initial: &HybridState,
    policy: &dyn Policy,
    noise: &mut dyn NoiseSource,
    costs: &CostSpec,
    cfg: &EventConfig,
    ws: &mut StepWorkspace,
    rec: &mut dyn Recorder,
) -> Result<RolloutSummary> {
    model.check_state(initial)?;
    if start_step > grid.steps {
        return Err(HpiError::Config(format!(
            "start step {start_step} beyond grid of {} steps",
            grid.steps
        )));
    }
    let sqrt_eps = model.noise_intensity().sqrt();
    let width = model.max_control_dim();
    let mut mode = initial.mode;
    let mut x = initial.x.as_slice().to_vec();
    let mut running = 0.0;
    let mut energy = 0.0;
    let mut stochastic = 0.0;
    let mut total_jumps = 0usize;
    let mut sources = SourceCounts::default();

    for i in start_step..grid.steps {
        let t = grid.time(i);
        let m = model.mode_unchecked(mode).control_dim;
        let mut u = std::mem::take(&mut ws.u);
        let source = policy.control(i, t, mode, &x, &mut u[..m]);
        sources.add(source);
        if u[..m].iter().any(|v| !v.is_finite()) {
            return Err(HpiError::Numerical(format!("policy returned a non-finite control at step {i}")));
        }
        let mut drawn = std::mem::take(&mut ws.drawn);
        noise.fill(i, grid.dt, &mut drawn[..width]);
        let v = costs.running_value(t, mode, &x);

        ws.pre.clear();
        ws.pre.extend_from_slice(&x);
        let step_mode = mode;
        let dt_eff = advance(model, cfg, i, t, &mut mode, &mut x, &u[..m], &drawn[..m], grid.dt, total_jumps, ws);
        let dt_eff = match dt_eff {
            Ok(d) => d,
            Err(e) => {
                ws.u = u;
                ws.drawn = drawn;
                return Err(e);
            }
        };
        let scale = noise_scale(dt_eff, grid.dt);
        let mut used = std::mem::take(&mut ws.used);
        let mut u_norm2 = 0.0;
        let mut u_dw = 0.0;
        for c in 0..m {
            used[c] = drawn[c] * scale;
            u_norm2 += u[c] * u[c];
            u_dw += u[c] * used[c];
        }
        running += v * dt_eff;
        energy += 0.5 * u_norm2 * dt_eff;
        stochastic += u_dw;
        total_jumps += ws.jumps.len();

        let n_step = model.mode_unchecked(step_mode).state_dim;
        rec.record(&StepView {
            step: i,
            t,
            mode: step_mode,
            x: &ws.pre,
            x_flow_end: &ws.flow_end[..n_step],
            u: &u[..m],
            drawn: &drawn[..width],
            used: &used[..m],
            dt_eff,
            running_cost: v,
            source,
            jumps: &ws.jumps,
        });
        ws.u = u;
        ws.drawn = drawn;
        ws.used = used;

        if total_jumps > cfg.max_events_per_rollout {
            return Err(HpiError::Zeno {
                step: i,
                events: total_jumps,
                limit: cfg.max_events_per_rollout,
            });
        }
    }

    let terminal = costs.terminal_value(mode, &x);
    if !terminal.is_finite() {
        return Err(HpiError::Divergence {
            step: grid.steps,
            mode,
            jumps: total_jumps,
        });
    }
    Ok(RolloutSummary {
        final_state: HybridState::from_slice(mode, &x),
        running_cost_integral: running,
        control_energy_integral: energy,
        stochastic_integral: stochastic,
        terminal_cost: terminal,
        s_u: running + energy + sqrt_eps * stochastic + terminal,
        l_h: running + terminal,
        jumps: total_jumps,
        sources,
    })
}

#[inline]
fn noise_scale(dt_eff: f64, dt: f64) -> f64 {
    if dt > 0.0 {
        (dt_eff / dt).sqrt()
    } else {
        0.0
    }
}

fn check_inputs(n: usize, m: usize, state: &HybridState, u: &[f64], dw: &[f64]) -> Result<()> {
    crate::model::check_dim("state", n, state.x.len())?;
    crate::model::check_dim("control", m, u.len())?;
    if dw.len() < m {
        return Err(HpiError::Dimension {
            what: "noise increment",
            expected: m,
            got: dw.len(),
        });
    }
    Ok(())
}

/// Fills `flow = F + σu`, `scaled_noise = √ε σ ΔW` and the tentative end point.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
#[inline]
fn prepare_step(
    model: &HybridModel,
    mode: ModeId,
    t: f64,
    x: &[f64],
    u: &[f64],
    dw: &[f64],
    dt: f64,
    ws: &mut StepWorkspace,
) {
    let spec = model.mode_unchecked(mode);
    let n = spec.state_dim;
    let m = spec.control_dim;
    // A zero-length step carries no Brownian increment.
    let sqrt_eps = if dt > 0.0 { model.noise_intensity().sqrt() } else { 0.0 };
    spec.drift_into(t, x, &mut ws.flow[..n]);
    spec.diffusion_into(t, x, &mut ws.sigma[..n * m]);
    for r in 0..n {
        let mut su = 0.0;
        let mut sw = 0.0;
        for c in 0..m {
            let s = ws.sigma[c * n + r];
            su += s * u[c];
            sw += s * dw[c];
        }
        ws.flow[r] += su;
        ws.scaled_noise[r] = sqrt_eps * sw;
        ws.flow_end[r] = x[r] + ws.flow[r] * dt + ws.scaled_noise[r];
    }
}

#[inline]
fn interpolate(x: &[f64], flow: &[f64], scaled_noise: &[f64], s: f64, dt: f64, out: &mut [f64]) {
    let w = noise_scale(s, dt);
    for r in 0..x.len() {
        out[r] = x[r] + flow[r] * s + scaled_noise[r] * w;
    }
}

/// Bisection for the first root of `g(t + s, x(s))` on `(0, Δt]`.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
fn bisect_event(
    tr: &TransitionSpec,
    t: f64,
    x: &[f64],
    dt: f64,
    cfg: &EventConfig,
    flow: &[f64],
    scaled_noise: &[f64],
    probe: &mut [f64],
    step: usize,
) -> Result<f64> {
    if tr.guard(t, x) <= 0.0 {
        return Ok(0.0);
    }
    interpolate(x, flow, scaled_noise, dt, dt, probe);
    let g_end = tr.guard(t + dt, probe);
    if g_end > 0.0 || g_end.is_nan() {
        return Err(HpiError::EventInconsistency {
            step,
            from: tr.from,
            to: tr.to,
        });
    }
    if g_end >= -cfg.guard_tol {
        return Ok(dt);
    }
    let tol = cfg.time_tol(dt);
    let (mut lo, mut hi) = (0.0, dt);
    for _ in 0..cfg.max_bisection_iters {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        interpolate(x, flow, scaled_noise, mid, dt, probe);
        let g = tr.guard(t + mid, probe);
        if g.abs() <= cfg.guard_tol {
            return Ok(mid);
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Most negative triggered guard out of `mode` at `(t, x)`, if any is `<= threshold`.
fn most_triggered<'m>(model: &'m HybridModel, mode: ModeId, t: f64, x: &[f64], threshold: f64) -> Option<&'m TransitionSpec> {
    let mut best: Option<(f64, &TransitionSpec)> = None;
    for tr in model.outgoing(mode) {
        let g = tr.guard(t, x);
        if g <= threshold && best.is_none_or(|(bg, _)| g < bg) {
            best = Some((g, tr));
        }
    }
    best.map(|(_, tr)| tr)
}

/// Advances `(mode, x)` by one grid step in place; returns the effective step length.
///
/// Jump records of this step are left in `ws.jumps`; `ws.flow_end` holds the
/// end of the flow part (the pre-reset state when a jump occurred).
#[allow(clippy::too_many_arguments)]
fn advance(
    model: &HybridModel,
    cfg: &EventConfig,
    step: usize,
    t: f64,
    mode: &mut ModeId,
    x: &mut Vec<f64>,
    u: &[f64],
    dw: &[f64],
    dt: f64,
    prior_jumps: usize,
    ws: &mut StepWorkspace,
) -> Result<f64> {
    ws.jumps.clear();
    let spec = model.mode_unchecked(*mode);
    let n = spec.state_dim;
    prepare_step(model, *mode, t, x, u, dw, dt, ws);
    if dt <= 0.0 {
        return Ok(0.0);
    }
    let divergence = |mode: ModeId, jumps: usize| HpiError::Divergence {
        step,
        mode,
        jumps: prior_jumps + jumps,
    };
    if ws.flow_end[..n].iter().any(|v| !v.is_finite()) {
        return Err(divergence(*mode, 0));
    }

    let Some(tr) = most_triggered(model, *mode, t + dt, &ws.flow_end[..n], 0.0) else {
        if !spec.in_domain(&ws.flow_end[..n]) {
            return Err(divergence(*mode, 0));
        }
        x.copy_from_slice(&ws.flow_end[..n]);
        return Ok(dt);
    };

    let s = bisect_event(tr, t, x, dt, cfg, &ws.flow[..n], &ws.scaled_noise[..n], &mut ws.probe[..n], step)?;
    interpolate(x, &ws.flow[..n], &ws.scaled_noise[..n], s, dt, &mut ws.flow_end[..n]);
    let t_event = t + s;

    let mut tr = tr;
    let mut from_n = n;
    x.clear();
    x.extend_from_slice(&ws.flow_end[..n]);
    loop {
        let to_n = model.mode_unchecked(tr.to).state_dim;
        tr.reset_into(t_event, x, &mut ws.reset_out[..to_n]);
        if ws.reset_out[..to_n].iter().any(|v| !v.is_finite()) {
            return Err(HpiError::Numerical(format!(
                "reset {}->{} produced a non-finite state at step {step}",
                tr.from, tr.to
            )));
        }
        ws.jumps.push(JumpRecord {
            step,
            pre_time: t_event,
            post_time: t_event,
            from: tr.from,
            to: tr.to,
            pre_state: DVector::from_column_slice(&x[..from_n]),
            post_state: DVector::from_column_slice(&ws.reset_out[..to_n]),
            shortened_step: s,
        });
        *mode = tr.to;
        x.clear();
        x.extend_from_slice(&ws.reset_out[..to_n]);
        from_n = to_n;

        match most_triggered(model, *mode, t_event, x, -cfg.guard_tol) {
            Some(next) if ws.jumps.len() < cfg.max_events_per_step => tr = next,
            Some(_) => {
                return Err(HpiError::Zeno {
                    step,
                    events: ws.jumps.len() + 1,
                    limit: cfg.max_events_per_step,
                })
            }
            None => break,
        }
    }
    if !model.mode_unchecked(*mode).in_domain(x) {
        return Err(divergence(*mode, ws.jumps.len()));
    }
    Ok(s)
}
