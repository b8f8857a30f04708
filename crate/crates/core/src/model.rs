//! Hybrid dynamical systems: modes with controlled stochastic flows, guarded
//! transitions with deterministic resets, and saltation matrices.
//!
//! A mode `j` carries the controlled flow
//!
//! ```text
//! dX = F_j(t, X) dt + σ_j(t, X) (u dt + √ε dW)
//! ```
//!
//! on a state of dimension `n_j` driven by a control (and noise) channel of
//! dimension `m_j`. A transition `j -> k` fires when its guard `g_jk(t, x) <= 0`
//! and maps the pre-event state through `R_jk` into mode `k`.
//!
//! Callbacks write into caller-provided buffers so the rollout hot loop never
//! allocates. Diffusion matrices are written column-major (`n_j × m_j`).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HpiError, Result};

/// Guard rates `|∂_t g + ∂_x g · F_j|` below this raise a grazing-contact error.
pub const TRANSVERSALITY_TOL: f64 = 1e-10;

/// Relative central-difference step used whenever an analytic derivative is missing.
pub const FD_RELATIVE_STEP: f64 = 1e-6;

/// Central-difference step for a point of the given magnitude: `1e-6 · max(1, |x|)`.
pub fn fd_step(magnitude: f64) -> f64 {
    FD_RELATIVE_STEP * magnitude.max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModeId(pub usize);

impl ModeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ModeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type FlowFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, u) -> ∂_x (F + σ u)`.
pub type FlowJacobianFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;
/// Returns `false` when a state has left the region where the flow is defined.
pub type DomainFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;
pub type GuardFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x) -> (∂_t g, ∂_x g)`.
pub type GuardGradFn = Arc<dyn Fn(f64, &[f64]) -> (f64, DVector<f64>) + Send + Sync>;
pub type ResetFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x) -> (∂_t R, ∂_x R)`.
pub type ResetJacFn = Arc<dyn Fn(f64, &[f64]) -> (DVector<f64>, DMatrix<f64>) + Send + Sync>;

/// One discrete mode: its dimensions, drift `F_j` and diffusion `σ_j`.
#[derive(Clone)]
pub struct ModeSpec {
    pub id: ModeId,
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    drift: FlowFn,
    diffusion: DiffusionFn,
    flow_jacobian: Option<FlowJacobianFn>,
    domain: Option<DomainFn>,
}

impl fmt::Debug for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModeSpec")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("analytic_jacobian", &self.flow_jacobian.is_some())
            .finish()
    }
}

impl ModeSpec {
    pub fn new<D, S>(id: ModeId, state_dim: usize, control_dim: usize, drift: D, diffusion: S) -> Self
    where
        D: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        S: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            id,
            name: format!("mode{}", id.0),
            state_dim,
            control_dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            flow_jacobian: None,
            domain: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Supplies `∂_x (F + σ u)` analytically instead of by central differences.
    pub fn with_flow_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(f64, &[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.flow_jacobian = Some(Arc::new(jac));
        self
    }

    /// Marks states outside `valid` as divergent (e.g. a collapsed leg).
    pub fn with_domain_check<V>(mut self, valid: V) -> Self
    where
        V: Fn(&[f64]) -> bool + Send + Sync + 'static,
    {
        self.domain = Some(Arc::new(valid));
        self
    }

    #[inline]
    pub fn in_domain(&self, x: &[f64]) -> bool {
        self.domain.as_ref().is_none_or(|valid| valid(x))
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    /// Writes `σ_j(t, x)` column-major into `out` (length `n_j · m_j`).
    #[inline]
    pub fn diffusion_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    pub fn drift(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim);
        self.drift_into(t, x, out.as_mut_slice());
        out
    }

    pub fn diffusion(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.state_dim, self.control_dim);
        self.diffusion_into(t, x, out.as_mut_slice());
        out
    }

    /// `F_j(t, x) + σ_j(t, x) u`.
    pub fn controlled_drift(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let sigma = self.diffusion(t, x);
        self.drift(t, x) + sigma * DVector::from_column_slice(u)
    }

    /// `∂_x (F_j + σ_j u)` at `(t, x)`, analytic when available.
    pub fn flow_jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> DMatrix<f64> {
        if let Some(jac) = &self.flow_jacobian {
            return jac(t, x, u);
        }
        let n = self.state_dim;
        let h = fd_step(DVector::from_column_slice(x).norm());
        let mut jac = DMatrix::zeros(n, n);
        let mut probe = x.to_vec();
        for c in 0..n {
            probe[c] = x[c] + h;
            let plus = self.controlled_drift(t, &probe, u);
            probe[c] = x[c] - h;
            let minus = self.controlled_drift(t, &probe, u);
            probe[c] = x[c];
            jac.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        jac
    }
}

/// A guarded transition `from -> to` with its reset map.
#[derive(Clone)]
pub struct TransitionSpec {
    pub from: ModeId,
    pub to: ModeId,
    guard: GuardFn,
    reset: ResetFn,
    guard_grad: Option<GuardGradFn>,
    reset_jac: Option<ResetJacFn>,
    identity_reset: bool,
}

impl fmt::Debug for TransitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransitionSpec")
            .field("from", &self.from)
            .field("to", &self.to)
            .field("analytic_guard_gradient", &self.guard_grad.is_some())
            .field("analytic_reset_jacobian", &self.reset_jac.is_some())
            .finish()
    }
}

impl TransitionSpec {
    pub fn new<G, R>(from: ModeId, to: ModeId, guard: G, reset: R) -> Self
    where
        G: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        R: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            from,
            to,
            guard: Arc::new(guard),
            reset: Arc::new(reset),
            guard_grad: None,
            reset_jac: None,
            identity_reset: false,
        }
    }

    /// Transition whose reset is the identity map (same state space on both sides).
    pub fn identity<G>(from: ModeId, to: ModeId, guard: G) -> Self
    where
        G: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        let mut spec = Self::new(from, to, guard, |_, x, out| out.copy_from_slice(x));
        spec.identity_reset = true;
        spec.reset_jac = None;
        spec
    }

    pub fn with_guard_gradient<F>(mut self, grad: F) -> Self
    where
        F: Fn(f64, &[f64]) -> (f64, DVector<f64>) + Send + Sync + 'static,
    {
        self.guard_grad = Some(Arc::new(grad));
        self
    }

    pub fn with_reset_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(f64, &[f64]) -> (DVector<f64>, DMatrix<f64>) + Send + Sync + 'static,
    {
        self.reset_jac = Some(Arc::new(jac));
        self
    }

    pub fn is_identity(&self) -> bool {
        self.identity_reset
    }

    #[inline]
    pub fn guard(&self, t: f64, x: &[f64]) -> f64 {
        (self.guard)(t, x)
    }

    #[inline]
    pub fn reset_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.reset)(t, x, out)
    }

    /// `(∂_t g, ∂_x g)`; central differences with step `1e-6·max(1, ‖·‖)` when not analytic.
    pub fn guard_gradient(&self, t: f64, x: &[f64]) -> (f64, DVector<f64>) {
        if let Some(grad) = &self.guard_grad {
            return grad(t, x);
        }
        let ht = fd_step(t.abs());
        let dg_dt = (self.guard(t + ht, x) - self.guard(t - ht, x)) / (2.0 * ht);
        let h = fd_step(DVector::from_column_slice(x).norm());
        let mut probe = x.to_vec();
        let grad = DVector::from_fn(x.len(), |c, _| {
            probe[c] = x[c] + h;
            let plus = self.guard(t, &probe);
            probe[c] = x[c] - h;
            let minus = self.guard(t, &probe);
            probe[c] = x[c];
            (plus - minus) / (2.0 * h)
        });
        (dg_dt, grad)
    }

    /// `(∂_t R, ∂_x R)` with output dimension `n_to`.
    pub fn reset_jacobian(&self, t: f64, x: &[f64], n_to: usize) -> (DVector<f64>, DMatrix<f64>) {
        if self.identity_reset {
            return (DVector::zeros(n_to), DMatrix::identity(n_to, x.len()));
        }
        if let Some(jac) = &self.reset_jac {
            return jac(t, x);
        }
        let mut plus = vec![0.0; n_to];
        let mut minus = vec![0.0; n_to];
        let ht = fd_step(t.abs());
        self.reset_into(t + ht, x, &mut plus);
        self.reset_into(t - ht, x, &mut minus);
        let dr_dt = DVector::from_fn(n_to, |r, _| (plus[r] - minus[r]) / (2.0 * ht));

        let h = fd_step(DVector::from_column_slice(x).norm());
        let mut jac = DMatrix::zeros(n_to, x.len());
        let mut probe = x.to_vec();
        for c in 0..x.len() {
            probe[c] = x[c] + h;
            self.reset_into(t, &probe, &mut plus);
            probe[c] = x[c] - h;
            self.reset_into(t, &probe, &mut minus);
            probe[c] = x[c];
            for r in 0..n_to {
                jac[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
            }
        }
        (dr_dt, jac)
    }
}

/// Mode plus a state vector of that mode's dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub mode: ModeId,
    pub x: DVector<f64>,
}

impl HybridState {
    pub fn new(mode: ModeId, x: DVector<f64>) -> Self {
        Self { mode, x }
    }

    pub fn from_slice(mode: ModeId, x: &[f64]) -> Self {
        Self::new(mode, DVector::from_column_slice(x))
    }
}

/// The hybrid system `{I, D, F, G, R}` together with the noise intensity `ε`.
#[derive(Clone)]
pub struct HybridModel {
    name: String,
    modes: Vec<ModeSpec>,
    transitions: Vec<TransitionSpec>,
    outgoing: Vec<Vec<usize>>,
    noise_intensity: f64,
    max_state_dim: usize,
    max_control_dim: usize,
}

impl fmt::Debug for HybridModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridModel")
            .field("name", &self.name)
            .field("modes", &self.modes)
            .field("transitions", &self.transitions)
            .field("noise_intensity", &self.noise_intensity)
            .finish()
    }
}

impl HybridModel {
    /// Validates and assembles a model. Mode ids must be `0..modes.len()` in order.
    pub fn new(
        name: impl Into<String>,
        modes: Vec<ModeSpec>,
        transitions: Vec<TransitionSpec>,
        noise_intensity: f64,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(HpiError::Config("a hybrid model needs at least one mode".into()));
        }
        for (i, mode) in modes.iter().enumerate() {
            if mode.id.0 != i {
                return Err(HpiError::Config(format!(
                    "mode ids must be contiguous from 0: position {i} holds id {}",
                    mode.id
                )));
            }
            if mode.state_dim == 0 || mode.control_dim == 0 {
                return Err(HpiError::Config(format!(
                    "mode {} has zero state or control dimension",
                    mode.id
                )));
            }
        }
        if !(noise_intensity > 0.0 && noise_intensity.is_finite()) {
            return Err(HpiError::Config(format!(
                "noise intensity must be positive and finite, got {noise_intensity}"
            )));
        }
        let mut outgoing = vec![Vec::new(); modes.len()];
        for (idx, tr) in transitions.iter().enumerate() {
            if tr.from.0 >= modes.len() || tr.to.0 >= modes.len() {
                return Err(HpiError::Config(format!(
                    "transition {}->{} references a missing mode",
                    tr.from, tr.to
                )));
            }
            if transitions[..idx]
                .iter()
                .any(|other| other.from == tr.from && other.to == tr.to)
            {
                return Err(HpiError::Config(format!(
                    "duplicate transition {}->{}",
                    tr.from, tr.to
                )));
            }
            if tr.identity_reset && modes[tr.from.0].state_dim != modes[tr.to.0].state_dim {
                return Err(HpiError::Config(format!(
                    "identity reset {}->{} between modes of different dimension",
                    tr.from, tr.to
                )));
            }
            outgoing[tr.from.0].push(idx);
        }
        let max_state_dim = modes.iter().map(|m| m.state_dim).max().unwrap_or(1);
        let max_control_dim = modes.iter().map(|m| m.control_dim).max().unwrap_or(1);
        Ok(Self {
            name: name.into(),
            modes,
            transitions,
            outgoing,
            noise_intensity,
            max_state_dim,
            max_control_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `ε`.
    pub fn noise_intensity(&self) -> f64 {
        self.noise_intensity
    }

    pub fn with_noise_intensity(&self, eps: f64) -> Result<Self> {
        Self::new(self.name.clone(), self.modes.clone(), self.transitions.clone(), eps)
    }

    pub fn modes(&self) -> &[ModeSpec] {
        &self.modes
    }

    pub fn transitions(&self) -> &[TransitionSpec] {
        &self.transitions
    }

    pub fn max_state_dim(&self) -> usize {
        self.max_state_dim
    }

    pub fn max_control_dim(&self) -> usize {
        self.max_control_dim
    }

    pub fn mode(&self, id: ModeId) -> Result<&ModeSpec> {
        self.modes
            .get(id.0)
            .ok_or_else(|| HpiError::Config(format!("unknown mode {id}")))
    }

    /// Unchecked access for the hot loop; ids come from a validated model.
    #[inline]
    pub(crate) fn mode_unchecked(&self, id: ModeId) -> &ModeSpec {
        &self.modes[id.0]
    }

    pub fn transition(&self, from: ModeId, to: ModeId) -> Result<&TransitionSpec> {
        self.outgoing
            .get(from.0)
            .and_then(|list| {
                list.iter()
                    .map(|&i| &self.transitions[i])
                    .find(|tr| tr.to == to)
            })
            .ok_or(HpiError::UnknownTransition { from, to })
    }

    /// Transitions leaving `mode`, in declaration order.
    pub fn outgoing(&self, mode: ModeId) -> impl Iterator<Item = &TransitionSpec> {
        self.outgoing
            .get(mode.0)
            .into_iter()
            .flatten()
            .map(move |&i| &self.transitions[i])
    }

    pub fn check_state(&self, state: &HybridState) -> Result<()> {
        let spec = self.mode(state.mode)?;
        check_dim("state", spec.state_dim, state.x.len())
    }

    /// `g_jk(t, x)`; the transition is triggered iff the value is `<= 0`.
    pub fn evaluate_guard(&self, from: ModeId, to: ModeId, t: f64, x: &[f64]) -> Result<f64> {
        let tr = self.transition(from, to)?;
        check_dim("guard input", self.mode(from)?.state_dim, x.len())?;
        Ok(tr.guard(t, x))
    }

    /// `(k, R_jk(t, x⁻))`.
    pub fn apply_reset(&self, from: ModeId, to: ModeId, t: f64, x_minus: &[f64]) -> Result<HybridState> {
        let tr = self.transition(from, to)?;
        check_dim("reset input", self.mode(from)?.state_dim, x_minus.len())?;
        let mut out = DVector::zeros(self.mode(to)?.state_dim);
        tr.reset_into(t, x_minus, out.as_mut_slice());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(HpiError::Numerical(format!(
                "reset {from}->{to} produced a non-finite state"
            )));
        }
        Ok(HybridState::new(to, out))
    }

    /// Transitions out of `mode` whose guard is `<= 0` at `(t, x)`, most negative first.
    pub fn active_transitions(&self, mode: ModeId, t: f64, x: &[f64]) -> Vec<(ModeId, ModeId)> {
        let mut hits: Vec<(f64, ModeId, ModeId)> = self
            .outgoing(mode)
            .filter_map(|tr| {
                let g = tr.guard(t, x);
                (g <= 0.0).then_some((g, tr.from, tr.to))
            })
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0));
        hits.into_iter().map(|(_, j, k)| (j, k)).collect()
    }

    /// Saltation matrix `Ξ_jk` (`n_k × n_j`) at the pre-event point `(t, x⁻)`.
    ///
    /// The flows on both sides include the supplied controls, `F + σu`.
    pub fn saltation_matrix(
        &self,
        from: ModeId,
        to: ModeId,
        t: f64,
        x_minus: &[f64],
        u_from: &[f64],
        u_to: &[f64],
    ) -> Result<DMatrix<f64>> {
        let tr = self.transition(from, to)?;
        let mode_j = self.mode(from)?;
        let mode_k = self.mode(to)?;
        check_dim("pre-event state", mode_j.state_dim, x_minus.len())?;
        check_dim("pre-event control", mode_j.control_dim, u_from.len())?;
        check_dim("post-event control", mode_k.control_dim, u_to.len())?;

        let flow_j = mode_j.controlled_drift(t, x_minus, u_from);
        let x_plus = self.apply_reset(from, to, t, x_minus)?.x;
        let flow_k = mode_k.controlled_drift(t, x_plus.as_slice(), u_to);

        let (dg_dt, dg_dx) = tr.guard_gradient(t, x_minus);
        let (dr_dt, dr_dx) = tr.reset_jacobian(t, x_minus, mode_k.state_dim);

        let denominator = dg_dt + dg_dx.dot(&flow_j);
        if denominator.abs() < TRANSVERSALITY_TOL {
            return Err(HpiError::GrazingContact {
                from,
                to,
                denominator,
            });
        }
        let numerator = flow_k - &dr_dx * flow_j - dr_dt;
        Ok(dr_dx + numerator * dg_dx.transpose() / denominator)
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HpiError::Dimension { what, expected, got })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_mode_identity() -> HybridModel {
        let drift = |_: f64, x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -1.0;
        };
        let diff = |_: f64, _: &[f64], out: &mut [f64]| {
            out[0] = 0.0;
            out[1] = 1.0;
        };
        HybridModel::new(
            "toy",
            vec![
                ModeSpec::new(ModeId(0), 2, 1, drift, diff),
                ModeSpec::new(ModeId(1), 2, 1, drift, diff),
            ],
            vec![TransitionSpec::identity(ModeId(0), ModeId(1), |_, x| x[0])],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn identity_reset_with_shared_flow_gives_identity_saltation() {
        let model = two_mode_identity();
        let xi = model
            .saltation_matrix(ModeId(0), ModeId(1), 0.3, &[0.0, -2.0], &[0.5], &[0.5])
            .unwrap();
        assert_relative_eq!(xi, DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn grazing_contact_is_rejected() {
        let model = two_mode_identity();
        // ż = 0 makes the guard rate ∂_x g · F = ż vanish.
        let err = model
            .saltation_matrix(ModeId(0), ModeId(1), 0.0, &[0.0, 0.0], &[0.0], &[0.0])
            .unwrap_err();
        assert!(matches!(err, HpiError::GrazingContact { .. }));
    }

    #[test]
    fn rejects_malformed_models() {
        let drift = |_: f64, _: &[f64], _: &mut [f64]| {};
        let diff = |_: f64, _: &[f64], _: &mut [f64]| {};
        let gap = HybridModel::new(
            "gap",
            vec![ModeSpec::new(ModeId(1), 1, 1, drift, diff)],
            vec![],
            1.0,
        );
        assert!(matches!(gap, Err(HpiError::Config(_))));

        let dangling = HybridModel::new(
            "dangling",
            vec![ModeSpec::new(ModeId(0), 1, 1, drift, diff)],
            vec![TransitionSpec::identity(ModeId(0), ModeId(3), |_, x| x[0])],
            1.0,
        );
        assert!(matches!(dangling, Err(HpiError::Config(_))));

        let dup = HybridModel::new(
            "dup",
            vec![
                ModeSpec::new(ModeId(0), 1, 1, drift, diff),
                ModeSpec::new(ModeId(1), 1, 1, drift, diff),
            ],
            vec![
                TransitionSpec::identity(ModeId(0), ModeId(1), |_, x| x[0]),
                TransitionSpec::identity(ModeId(0), ModeId(1), |_, x| -x[0]),
            ],
            1.0,
        );
        assert!(matches!(dup, Err(HpiError::Config(_))));

        let no_noise = HybridModel::new(
            "eps",
            vec![ModeSpec::new(ModeId(0), 1, 1, drift, diff)],
            vec![],
            0.0,
        );
        assert!(matches!(no_noise, Err(HpiError::Config(_))));
    }

    #[test]
    fn unknown_transition_is_a_configuration_error() {
        let model = two_mode_identity();
        let err = model.evaluate_guard(ModeId(1), ModeId(0), 0.0, &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, HpiError::UnknownTransition { .. }));
    }

    #[test]
    fn finite_difference_guard_gradient_matches_analytic() {
        let tr = TransitionSpec::new(
            ModeId(0),
            ModeId(1),
            |t, x: &[f64]| x[0] * x[0] - 2.0 * x[1] + 0.5 * t,
            |_, x, out| out.copy_from_slice(x),
        );
        let (dt, dx) = tr.guard_gradient(1.5, &[0.7, -0.2]);
        assert_relative_eq!(dt, 0.5, epsilon = 1e-8);
        assert_relative_eq!(dx[0], 1.4, epsilon = 1e-8);
        assert_relative_eq!(dx[1], -2.0, epsilon = 1e-8);
    }
}
