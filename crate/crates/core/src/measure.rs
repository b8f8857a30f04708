//! Path-measure quantities along recorded rollouts: Girsanov log-ratios,
//! discrete transition-density ratios, path costs and KL estimates.
//!
//! All densities are handled in log space as differences, so Gaussian
//! normalizers never appear.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HpiError, Result};
use crate::model::HybridModel;
use crate::rollout::{RolloutResult, RolloutSummary, StepRecord};

/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-12;

/// Minimum ensemble size accepted by [`kl_estimate`].
pub const MIN_KL_SAMPLES: usize = 100;

/// `log dP^u/dP^0` along one controlled path and its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLogRatio {
    pub log_ratio_u_over_0: f64,
    /// `Σ ½‖u‖² Δt`.
    pub control_energy: f64,
    /// `√ε Σ uᵀ ΔW̃`.
    pub stochastic_term: f64,
}

impl PathLogRatio {
    fn from_parts(energy: f64, stochastic_integral: f64, eps: f64) -> Self {
        let stochastic_term = eps.sqrt() * stochastic_integral;
        Self {
            log_ratio_u_over_0: (energy + stochastic_term) / eps,
            control_energy: energy,
            stochastic_term,
        }
    }

    pub fn from_summary(s: &RolloutSummary, eps: f64) -> Self {
        Self::from_parts(s.control_energy_integral, s.stochastic_integral, eps)
    }
}

/// Log-ratio of the controlled path measure to the passive one, evaluated on a
/// path generated under control `u` with increments `ΔW̃`.
///
/// Writing the passive increments as `ΔW⁰ = ΔW̃ + u Δt / √ε`, the sum
/// `Σ −‖u‖²Δt/(2ε) + uᵀΔW⁰/√ε` equals `Σ ‖u‖²Δt/(2ε) + uᵀΔW̃/√ε`, which is
/// what is accumulated here. Jump steps use the shortened `Δt̃` and `ΔW̃`.
pub fn log_ratio_controlled(rollout: &RolloutResult, eps: f64) -> PathLogRatio {
    let mut energy = 0.0;
    let mut stochastic = 0.0;
    for s in &rollout.steps {
        energy += 0.5 * s.u.norm_squared() * s.dt_eff;
        stochastic += s.u.dot(&s.noise_used);
    }
    PathLogRatio::from_parts(energy, stochastic, eps)
}

/// `log dP^v/dP^0` of a passive path (recorded with `u ≡ 0`) for the
/// adapted control `v`: `Σ −‖v‖²Δt/(2ε) + vᵀΔW/√ε`.
pub fn log_ratio_reweight(rollout: &RolloutResult, control: &dyn Fn(&StepRecord) -> DVector<f64>, eps: f64) -> f64 {
    let sqrt_eps = eps.sqrt();
    rollout
        .steps
        .iter()
        .filter(|s| s.dt_eff > 0.0)
        .map(|s| {
            let v = control(s);
            -v.norm_squared() * s.dt_eff / (2.0 * eps) + v.dot(&s.noise_used) / sqrt_eps
        })
        .sum()
}

/// Per-step terms of the discrete density ratio.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDensityLedger {
    /// `log p_k` without normalizer: `−‖r_a‖²/(2εΔt)`.
    pub log_p: Vec<f64>,
    /// `log q_k` without normalizer: `−‖r_b‖²/(2εΔt)`.
    pub log_q: Vec<f64>,
    /// `‖r_a‖²` in the `(σσᵀ)⁺` metric.
    pub mahalanobis_a: Vec<f64>,
    pub mahalanobis_b: Vec<f64>,
    /// Effective step of each transition (`Δt̃` on jump steps).
    pub dt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRatio {
    /// `Σ_k log q(X_{k+1}|X_k) − log p(X_{k+1}|X_k)`.
    pub log_ratio: f64,
    pub ledger: DiscreteDensityLedger,
    /// Set when some visited `σ_j` had rank below `m_j`.
    pub degenerate: bool,
}

/// Ratio of the Gaussian Euler transition densities with drifts `drift_b`
/// (numerator) and `drift_a` (denominator) along a recorded path.
///
/// Each transition runs from the start-of-step state to the end of the flow
/// part of the step, which on jump steps is the pre-reset state reached after
/// `Δt̃`; the next transition starts from the post-reset state. Norms use the
/// pseudo-inverse of `σ_j`, i.e. they live on the noise-reachable subspace.
/// Zero-length steps carry no density and are skipped.
pub fn discrete_density_ratio(
    model: &HybridModel,
    rollout: &RolloutResult,
    drift_a: &dyn Fn(&StepRecord) -> DVector<f64>,
    drift_b: &dyn Fn(&StepRecord) -> DVector<f64>,
    eps: f64,
) -> Result<DensityRatio> {
    let mut ledger = DiscreteDensityLedger::default();
    let mut degenerate = false;
    let mut total = 0.0;
    for s in &rollout.steps {
        if s.dt_eff <= 0.0 {
            continue;
        }
        let mode = model.mode(s.mode)?;
        let sigma = mode.diffusion(s.t, s.x.as_slice());
        let (pinv, rank) = pseudo_inverse(&sigma)?;
        degenerate |= rank < mode.control_dim;

        let increment = &s.x_flow_end - &s.x;
        let r_a = &increment - drift_a(s) * s.dt_eff;
        let r_b = &increment - drift_b(s) * s.dt_eff;
        let m_a = (&pinv * r_a).norm_squared();
        let m_b = (&pinv * r_b).norm_squared();
        let denom = 2.0 * eps * s.dt_eff;
        let (lp, lq) = (-m_a / denom, -m_b / denom);
        total += (m_a - m_b) / denom;
        ledger.log_p.push(lp);
        ledger.log_q.push(lq);
        ledger.mahalanobis_a.push(m_a);
        ledger.mahalanobis_b.push(m_b);
        ledger.dt.push(s.dt_eff);
    }
    if !total.is_finite() {
        return Err(HpiError::Numerical("discrete density ratio is not finite".into()));
    }
    Ok(DensityRatio {
        log_ratio: total,
        ledger,
        degenerate,
    })
}

/// Passive drift `F_j(t, x)` of a step.
pub fn passive_drift(model: &HybridModel) -> impl Fn(&StepRecord) -> DVector<f64> + '_ {
    move |s| model.modes()[s.mode.index()].drift(s.t, s.x.as_slice())
}

/// Applied drift `F_j(t, x) + σ_j(t, x) u` of a step.
pub fn applied_drift(model: &HybridModel) -> impl Fn(&StepRecord) -> DVector<f64> + '_ {
    move |s| model.modes()[s.mode.index()].controlled_drift(s.t, s.x.as_slice(), s.u.as_slice())
}

/// `L_H = Σ V Δt + Ψ_T`, recomputed from the step records.
#[allow(non_snake_case)]
pub fn state_cost_L(rollout: &RolloutResult) -> f64 {
    rollout.steps.iter().map(|s| s.running_cost * s.dt_eff).sum::<f64>() + rollout.terminal_cost
}

/// `S_H = Σ (V + ½‖u‖²) Δt + √ε uᵀ ΔW̃ + Ψ_T`, recomputed from the step records.
#[allow(non_snake_case)]
pub fn path_cost_S(rollout: &RolloutResult, eps: f64) -> f64 {
    let sqrt_eps = eps.sqrt();
    rollout
        .steps
        .iter()
        .map(|s| (s.running_cost + 0.5 * s.u.norm_squared()) * s.dt_eff + sqrt_eps * s.u.dot(&s.noise_used))
        .sum::<f64>()
        + rollout.terminal_cost
}

/// Sample mean and standard error of `KL(P^u ‖ P^0)` from per-path log-ratios.
pub fn kl_estimate(paths: &[PathLogRatio]) -> Result<(f64, f64)> {
    if paths.len() < MIN_KL_SAMPLES {
        return Err(HpiError::Statistics(format!(
            "KL estimate needs at least {MIN_KL_SAMPLES} paths, got {}",
            paths.len()
        )));
    }
    let values: Vec<f64> = paths.iter().map(|p| p.log_ratio_u_over_0).collect();
    Ok(mean_stderr(&values))
}

/// Sample mean and standard error (`s / √n`, unbiased `s`).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Moore–Penrose pseudo-inverse and numerical rank.
fn pseudo_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = RANK_TOL * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| HpiError::Numerical(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv, rank))
}
