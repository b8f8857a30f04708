//! Reference extensions around nominal jumps and their selection on mode
//! mismatch.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{HybridModel, ModeId};
use crate::rollout::ControlSource;

use super::{Gains, NominalTrajectory};

/// One side of an extension: a held-control integration of a single mode.
///
/// Entry `l` of `states` sits at `anchor_time + l·dt` for a forward branch and
/// at `anchor_time − l·dt` for a backward branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionBranch {
    pub mode: ModeId,
    pub anchor_time: f64,
    pub states: Vec<DVector<f64>>,
    pub control: DVector<f64>,
    pub feedback: DMatrix<f64>,
    pub feedforward: DVector<f64>,
    /// Integration stopped early because the state left the mode's domain.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceExtension {
    /// Index into the nominal's jump list.
    pub jump_index: usize,
    /// Grid step in which the nominal jump happens.
    pub step: usize,
    pub from: ModeId,
    pub to: ModeId,
    /// Pre-jump mode continued forward from `x⁻`.
    pub forward: ExtensionBranch,
    /// Post-jump mode continued backward from `x⁺`.
    pub backward: ExtensionBranch,
}

/// Builds one extension per nominal jump.
///
/// The forward branch holds `ū` and the gains of the jump step; the backward
/// branch holds those of the first step after the jump.
pub fn build_extensions(
    model: &HybridModel,
    nominal: &NominalTrajectory,
    gains: &Gains,
    forward_steps: usize,
    backward_steps: usize,
) -> Result<Vec<ReferenceExtension>> {
    let dt = nominal.grid.dt;
    nominal
        .jumps
        .iter()
        .enumerate()
        .map(|(idx, jump)| {
            let (fk, fkk) = gains_in_mode(model, nominal, gains, jump.step, jump.from)?;
            let (bk, bkk) = gains_in_mode(model, nominal, gains, jump.step + 1, jump.to)?;
            let u_fwd = nominal.control_in_mode(model, jump.step, jump.from)?;
            let u_bwd = nominal.control_in_mode(model, jump.step + 1, jump.to)?;
            let forward = integrate_branch(model, jump.from, jump.pre_time, &jump.pre_state, u_fwd, fk, fkk, forward_steps, dt)?;
            let backward = integrate_branch(model, jump.to, jump.post_time, &jump.post_state, u_bwd, bk, bkk, backward_steps, -dt)?;
            Ok(ReferenceExtension {
                jump_index: idx,
                step: jump.step,
                from: jump.from,
                to: jump.to,
                forward,
                backward,
            })
        })
        .collect()
}

fn gains_in_mode(
    model: &HybridModel,
    nominal: &NominalTrajectory,
    gains: &Gains,
    step: usize,
    mode: ModeId,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if step < nominal.steps() && nominal.modes[step] == mode {
        Ok((gains.feedback[step].clone(), gains.feedforward[step].clone()))
    } else {
        let spec = model.mode(mode)?;
        Ok((
            DMatrix::zeros(spec.control_dim, spec.state_dim),
            DVector::zeros(spec.control_dim),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn integrate_branch(
    model: &HybridModel,
    mode: ModeId,
    anchor_time: f64,
    anchor: &DVector<f64>,
    control: DVector<f64>,
    feedback: DMatrix<f64>,
    feedforward: DVector<f64>,
    steps: usize,
    signed_dt: f64,
) -> Result<ExtensionBranch> {
    let spec = model.mode(mode)?;
    let mut states = Vec::with_capacity(steps);
    let mut truncated = false;
    if steps > 0 {
        states.push(anchor.clone());
    }
    let mut t = anchor_time;
    while states.len() < steps {
        let x = states.last().expect("branch is non-empty");
        let next = x + spec.controlled_drift(t, x.as_slice(), control.as_slice()) * signed_dt;
        if !spec.in_domain(next.as_slice()) || next.iter().any(|v| !v.is_finite()) {
            warn!(
                "extension in mode {mode} left the domain after {} of {steps} steps",
                states.len()
            );
            truncated = true;
            break;
        }
        states.push(next);
        t += signed_dt;
    }
    Ok(ExtensionBranch {
        mode,
        anchor_time,
        states,
        control,
        feedback,
        feedforward,
        truncated,
    })
}

/// Reference point `(x̄, ū, K, k)` handed to the feedback law.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub feedback: &'a DMatrix<f64>,
    pub feedforward: &'a DVector<f64>,
    pub source: ControlSource,
}

/// Picks the reference for a state in `actual` mode at grid step `step`.
///
/// Matching modes use the nominal. On a mismatch, an upcoming jump into
/// `actual` (early arrival) supplies its backward branch and a passed jump out
/// of `actual` (late arrival) its forward branch; the candidate closest in time
/// wins. The entry is indexed by the time offset from the jump and clamped to
/// the branch length. Without a usable branch, the nearest nominal knot in
/// `actual` mode is used and flagged as a fallback.
///
/// With `use_extensions = false`, a mismatched state whose dimensions agree
/// with the nominal mode tracks the nominal knot anyway.
pub fn select_extension<'a>(
    model: &HybridModel,
    nominal: &'a NominalTrajectory,
    gains: &'a Gains,
    extensions: &'a [ReferenceExtension],
    use_extensions: bool,
    step: usize,
    actual: ModeId,
) -> Option<Reference<'a>> {
    let step = step.min(nominal.steps().saturating_sub(1));
    let nominal_mode = nominal.modes[step];
    let at_knot = |s: usize, source| Reference {
        x: nominal.states[s].as_slice(),
        u: nominal.controls[s].as_slice(),
        feedback: &gains.feedback[s],
        feedforward: &gains.feedforward[s],
        source,
    };
    if actual == nominal_mode {
        return Some(at_knot(step, ControlSource::Nominal));
    }

    if use_extensions {
        let t = nominal.grid.time(step);
        let dt = nominal.grid.dt;
        let mut best: Option<(f64, &ExtensionBranch)> = None;
        for ext in extensions {
            let candidate = if ext.step >= step && ext.to == actual {
                Some((ext.backward.anchor_time - t, &ext.backward))
            } else if ext.step < step && ext.from == actual {
                Some((t - ext.forward.anchor_time, &ext.forward))
            } else {
                None
            };
            if let Some((offset, branch)) = candidate {
                if branch.states.is_empty() {
                    continue;
                }
                let offset = offset.max(0.0);
                if best.is_none_or(|(b, _)| offset < b) {
                    best = Some((offset, branch));
                }
            }
        }
        if let Some((offset, branch)) = best {
            let l = (offset / dt).round() as usize;
            let (idx, source) = if l < branch.states.len() {
                (l, ControlSource::Extension)
            } else {
                (branch.states.len() - 1, ControlSource::Clamped)
            };
            return Some(Reference {
                x: branch.states[idx].as_slice(),
                u: branch.control.as_slice(),
                feedback: &branch.feedback,
                feedforward: &branch.feedforward,
                source,
            });
        }
    } else {
        let (a, b) = (&model.modes()[actual.index()], &model.modes()[nominal_mode.index()]);
        if a.state_dim == b.state_dim && a.control_dim == b.control_dim {
            return Some(at_knot(step, ControlSource::Fallback));
        }
    }

    (0..nominal.steps())
        .filter(|&s| nominal.modes[s] == actual)
        .min_by_key(|&s| s.abs_diff(step))
        .map(|s| at_knot(s, ControlSource::Fallback))
}
