//! Spring-loaded inverted pendulum (SLIP) jumping task.
//!
//! Flight state `[p_x, v_x, p_z, v_z, θ]` with three control channels acting on
//! `v_x`, `v_z` and `θ`. Stance state `[θ, θ̇, r, ṙ]` in polar coordinates about
//! the toe with two channels acting on `r` and `ṙ`. The leg angle `θ` is
//! measured from the ground, and the body sits at `toe + r (cos θ, sin θ)`.
//!
//! The toe stays at `toe_x` throughout stance. Touchdown velocities are mapped
//! with the polar kinematics `ṙ = v_x cos θ + v_z sin θ` and
//! `r θ̇ = v_z cos θ − v_x sin θ`, so liftoff followed by touchdown on the
//! contact surface is the identity on velocities.

use std::f64::consts::FRAC_PI_3;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::cost::{CostSpec, QuadraticTerminal, ZeroRunning};
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId, ModeSpec, TransitionSpec};
use crate::rollout::TimeGrid;

pub const FLIGHT: ModeId = ModeId(0);
pub const STANCE: ModeId = ModeId(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlipParams {
    pub mass: f64,
    pub stiffness: f64,
    pub rest_length: f64,
    pub gravity: f64,
    pub toe_x: f64,
    pub eps: f64,
    pub dt: f64,
    pub horizon: f64,
    /// Initial stance state `[θ, θ̇, r / r₀, ṙ]`; the leg length is relative.
    pub initial: [f64; 4],
    pub goal: [f64; 5],
    pub terminal_weight: f64,
}

impl Default for SlipParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            stiffness: 100.0,
            rest_length: 1.0,
            gravity: 9.81,
            toe_x: 0.0,
            eps: 0.005,
            dt: 0.0008,
            horizon: 0.8,
            initial: [1.74533, -4.0, 0.5, 0.0],
            goal: [1.1, 2.5, 1.5, 0.0, FRAC_PI_3],
            terminal_weight: 60.0,
        }
    }
}

impl SlipParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("rest_length", self.rest_length),
            ("gravity", self.gravity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HpiError::Config(format!("SLIP {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Touchdown map `R_12`.
pub fn touchdown(r0: f64, x: &[f64], out: &mut [f64]) {
    let (p_z, v_x, v_z, th) = (x[2], x[1], x[3], x[4]);
    let (s, c) = th.sin_cos();
    let dx = r0 * c;
    out[0] = th;
    out[1] = (dx * v_z - p_z * v_x) / (r0 * r0);
    out[2] = r0;
    out[3] = v_x * c + v_z * s;
}

/// Liftoff map `R_21`.
pub fn liftoff(r0: f64, toe_x: f64, x: &[f64], out: &mut [f64]) {
    let (th, th_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
    let (s, c) = th.sin_cos();
    out[0] = toe_x + r0 * c;
    out[1] = r_dot * c - r * th_dot * s;
    out[2] = r0 * s;
    out[3] = r0 * th_dot * c + r_dot * s;
    out[4] = th;
}

/// Cartesian flight coordinates of a stance state.
pub fn stance_to_cartesian(toe_x: f64, x: &[f64]) -> DVector<f64> {
    let (th, th_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
    let (s, c) = th.sin_cos();
    DVector::from_vec(vec![
        toe_x + r * c,
        r_dot * c - r * th_dot * s,
        r * s,
        r_dot * s + r * th_dot * c,
        th,
    ])
}

pub fn model(p: &SlipParams) -> Result<HybridModel> {
    p.validate()?;
    let (m, k, r0, g, toe_x) = (p.mass, p.stiffness, p.rest_length, p.gravity, p.toe_x);

    let flight = ModeSpec::new(
        FLIGHT,
        5,
        3,
        move |_, x, out| {
            out[0] = x[1];
            out[1] = 0.0;
            out[2] = x[3];
            out[3] = -g;
            out[4] = 0.0;
        },
        |_, _, out| {
            out.fill(0.0);
            // Column-major 5×3: channels drive v_x, v_z and θ.
            out[1] = 1.0;
            out[5 + 3] = 1.0;
            out[10 + 4] = 1.0;
        },
    )
    .with_name("flight")
    .with_flow_jacobian(|_, _, _| {
        let mut a = DMatrix::zeros(5, 5);
        a[(0, 1)] = 1.0;
        a[(2, 3)] = 1.0;
        a
    });

    let stance = ModeSpec::new(
        STANCE,
        4,
        2,
        move |_, x, out| {
            let (th, th_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
            out[0] = th_dot;
            out[1] = (-2.0 * th_dot * r_dot - g * th.cos()) / r;
            out[2] = r_dot;
            out[3] = k * (r0 - r) / m - g * th.sin() + th_dot * th_dot * r;
        },
        move |_, x, out| {
            out.fill(0.0);
            out[2] = m / (x[2] * x[2]);
            out[4 + 3] = k / m;
        },
    )
    .with_name("stance")
    .with_flow_jacobian(move |_, x, u| {
        let (th, th_dot, r, r_dot) = (x[0], x[1], x[2], x[3]);
        let (s, c) = th.sin_cos();
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(1, 0)] = g * s / r;
        a[(1, 1)] = -2.0 * r_dot / r;
        a[(1, 2)] = (2.0 * th_dot * r_dot + g * c) / (r * r);
        a[(1, 3)] = -2.0 * th_dot / r;
        a[(2, 2)] = -2.0 * m * u[0] / (r * r * r);
        a[(2, 3)] = 1.0;
        a[(3, 0)] = -g * c;
        a[(3, 1)] = 2.0 * th_dot * r;
        a[(3, 2)] = -k / m + th_dot * th_dot;
        a
    })
    .with_domain_check(|x| x[2] > 0.0);

    let td = TransitionSpec::new(
        FLIGHT,
        STANCE,
        move |_, x: &[f64]| x[2] - r0 * x[4].sin(),
        move |_, x, out| touchdown(r0, x, out),
    )
    .with_guard_gradient(move |_, x| {
        (0.0, DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, -r0 * x[4].cos()]))
    });
    let lo = TransitionSpec::new(
        STANCE,
        FLIGHT,
        move |_, x: &[f64]| r0 - x[2],
        move |_, x, out| liftoff(r0, toe_x, x, out),
    )
    .with_guard_gradient(|_, _| (0.0, DVector::from_vec(vec![0.0, 0.0, -1.0, 0.0])));

    HybridModel::new("slip-jump", vec![flight, stance], vec![td, lo], p.eps)
}

pub fn make_slip(p: &SlipParams) -> Result<Benchmark> {
    let model = model(p)?;
    let toe_x = p.toe_x;
    let terminal = QuadraticTerminal::new(
        DVector::from_column_slice(&p.goal),
        DMatrix::identity(5, 5) * p.terminal_weight,
    )
    .with_embedding(STANCE, move |x: &[f64]| stance_to_cartesian(toe_x, x));
    let init = [p.initial[0], p.initial[1], p.initial[2] * p.rest_length, p.initial[3]];
    Ok(Benchmark {
        name: "slip-jump".into(),
        model,
        costs: CostSpec::terminal_only(terminal).with_running(ZeroRunning),
        initial: HybridState::from_slice(STANCE, &init),
        grid: TimeGrid::from_step(p.horizon, p.dt)?,
        segment_transition: Some((STANCE, FLIGHT)),
        params: serde_json::to_value(p)?,
    })
}
