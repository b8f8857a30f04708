//! Smooth double integrator with quadratic costs, used as an LQR reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::cost::{CostSpec, QuadraticRunning, QuadraticTerminal};
use crate::error::Result;
use crate::model::{HybridModel, HybridState, ModeId, ModeSpec};
use crate::rollout::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleIntegratorParams {
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    pub initial: [f64; 2],
    pub state_weight: f64,
    pub terminal_weight: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        Self {
            eps: 1.0,
            dt: 0.01,
            horizon: 1.0,
            initial: [1.0, 0.0],
            state_weight: 1.0,
            terminal_weight: 10.0,
        }
    }
}

pub fn model(eps: f64) -> Result<HybridModel> {
    let mode = ModeSpec::new(
        ModeId(0),
        2,
        1,
        |_, x, out| {
            out[0] = x[1];
            out[1] = 0.0;
        },
        |_, _, out| {
            out[0] = 0.0;
            out[1] = 1.0;
        },
    )
    .with_name("smooth")
    .with_flow_jacobian(|_, _, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    HybridModel::new("double-integrator", vec![mode], vec![], eps)
}

pub fn make_double_integrator(p: &DoubleIntegratorParams) -> Result<Benchmark> {
    let costs = CostSpec::terminal_only(QuadraticTerminal::new(
        DVector::zeros(2),
        DMatrix::identity(2, 2) * p.terminal_weight,
    ))
    .with_running(QuadraticRunning {
        weight: DMatrix::identity(2, 2) * p.state_weight,
    });
    Ok(Benchmark {
        name: "double-integrator".into(),
        model: model(p.eps)?,
        costs,
        initial: HybridState::from_slice(ModeId(0), &p.initial),
        grid: TimeGrid::from_step(p.horizon, p.dt)?,
        segment_transition: None,
        params: serde_json::to_value(p)?,
    })
}
