//! One-dimensional bouncing ball with an inelastic impact.
//!
//! State `[z, ż]`, one control channel acting as a force. Mode `FALLING`
//! (`ż < 0`) hits the ground when `z <= 0` and restitutes `ż⁺ = −e₂ ż⁻`;
//! mode `RISING` (`ż >= 0`) turns into `FALLING` at the apex through the
//! identity map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::cost::{CostSpec, QuadraticTerminal, ZeroRunning};
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId, ModeSpec, TransitionSpec};
use crate::rollout::TimeGrid;

pub const FALLING: ModeId = ModeId(0);
pub const RISING: ModeId = ModeId(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BouncingBallParams {
    pub mass: f64,
    pub gravity: f64,
    pub restitution: f64,
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub initial: [f64; 2],
    pub goal: [f64; 2],
    pub terminal_weight: [f64; 2],
}

impl Default for BouncingBallParams {
    fn default() -> Self {
        Self {
            mass: 2.0,
            gravity: 9.81,
            restitution: 0.9,
            eps: 10.0,
            dt: 0.0025,
            horizon: 4.0,
            initial: [5.0, 1.5],
            goal: [2.5, 0.0],
            terminal_weight: [200.0, 20.0],
        }
    }
}

pub fn model(p: &BouncingBallParams) -> Result<HybridModel> {
    if p.mass.is_nan() || p.mass <= 0.0 {
        return Err(HpiError::Config(format!("ball mass must be positive, got {}", p.mass)));
    }
    if !(p.restitution > 0.0 && p.restitution <= 1.0) {
        return Err(HpiError::Config(format!(
            "restitution must lie in (0, 1], got {}",
            p.restitution
        )));
    }
    let (g, inv_m, e2) = (p.gravity, 1.0 / p.mass, p.restitution);
    let mode = |id: ModeId, name: &str| {
        ModeSpec::new(
            id,
            2,
            1,
            move |_, x, out| {
                out[0] = x[1];
                out[1] = -g;
            },
            move |_, _, out| {
                out[0] = 0.0;
                out[1] = inv_m;
            },
        )
        .with_name(name)
        .with_flow_jacobian(|_, _, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]))
    };
    let impact = TransitionSpec::new(
        FALLING,
        RISING,
        |_, x: &[f64]| x[0],
        move |_, x, out| {
            out[0] = x[0];
            out[1] = -e2 * x[1];
        },
    )
    .with_guard_gradient(|_, _| (0.0, DVector::from_vec(vec![1.0, 0.0])))
    .with_reset_jacobian(move |_, _| {
        (DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -e2]))
    });
    let apex = TransitionSpec::identity(RISING, FALLING, |_, x: &[f64]| x[1])
        .with_guard_gradient(|_, _| (0.0, DVector::from_vec(vec![0.0, 1.0])));
    HybridModel::new(
        "bouncing-ball",
        vec![mode(FALLING, "falling"), mode(RISING, "rising")],
        vec![impact, apex],
        p.eps,
    )
}

pub fn make_bouncing_ball(p: &BouncingBallParams) -> Result<Benchmark> {
    let model = model(p)?;
    let terminal = QuadraticTerminal::new(
        DVector::from_column_slice(&p.goal),
        DMatrix::from_diagonal(&DVector::from_column_slice(&p.terminal_weight)),
    );
    let mode = if p.initial[1] >= 0.0 { RISING } else { FALLING };
    Ok(Benchmark {
        name: "bouncing-ball".into(),
        model,
        costs: CostSpec::terminal_only(terminal).with_running(ZeroRunning),
        initial: HybridState::from_slice(mode, &p.initial),
        grid: TimeGrid::from_step(p.horizon, p.dt)?,
        segment_transition: Some((FALLING, RISING)),
        params: serde_json::to_value(p)?,
    })
}
