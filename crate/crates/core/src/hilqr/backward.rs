//! Linearization along a nominal and the saltation-corrected Riccati sweep.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, ModeId};

use super::{Gains, NominalTrajectory};

/// `(A, B)` of the smooth Euler map `x + (F + σu)Δt` at `(t, x, u)`.
pub fn linearize_smooth(
    model: &HybridModel,
    mode: ModeId,
    t: f64,
    x: &[f64],
    u: &[f64],
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let spec = model.mode(mode)?;
    let n = spec.state_dim;
    let a = DMatrix::identity(n, n) + spec.flow_jacobian(t, x, u) * dt;
    let b = spec.diffusion(t, x) * dt;
    Ok((a, b))
}

/// `(A_i, B_i)` of the discrete hybrid map at nominal step `i`.
///
/// On a step where the nominal jumps, the smooth Jacobians are left-multiplied
/// by the product of the saltation matrices of every reset in that step.
pub fn linearize_step(model: &HybridModel, nominal: &NominalTrajectory, i: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let grid = &nominal.grid;
    let mode = nominal.modes[i];
    let (mut a, mut b) = linearize_smooth(
        model,
        mode,
        grid.time(i),
        nominal.states[i].as_slice(),
        nominal.controls[i].as_slice(),
        grid.dt,
    )?;
    for jump in nominal.jumps.iter().filter(|j| j.step == i) {
        let u_from = nominal.control_in_mode(model, i, jump.from)?;
        let u_to = nominal.control_in_mode(model, i + 1, jump.to)?;
        let xi = model.saltation_matrix(
            jump.from,
            jump.to,
            jump.pre_time,
            jump.pre_state.as_slice(),
            u_from.as_slice(),
            u_to.as_slice(),
        )?;
        a = &xi * a;
        b = &xi * b;
    }
    Ok((a, b))
}

/// Dynamics and stage-cost derivatives of one step. The stage cost is
/// `(V(t, x) + ½‖u‖²)Δt`, so `l_ux = 0` and `l_uu = Δt·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepExpansion {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub l_x: DVector<f64>,
    pub l_u: DVector<f64>,
    pub l_xx: DMatrix<f64>,
    pub l_uu: DMatrix<f64>,
}

pub fn expand_along(model: &HybridModel, nominal: &NominalTrajectory, costs: &CostSpec) -> Result<Vec<StepExpansion>> {
    let dt = nominal.grid.dt;
    (0..nominal.controls.len())
        .map(|i| {
            let (a, b) = linearize_step(model, nominal, i)?;
            let t = nominal.grid.time(i);
            let x = nominal.states[i].as_slice();
            let u = &nominal.controls[i];
            let mode = nominal.modes[i];
            Ok(StepExpansion {
                a,
                b,
                l_x: costs.running_gradient(t, mode, x) * dt,
                l_u: u * dt,
                l_xx: costs.running_hessian(t, mode, x) * dt,
                l_uu: DMatrix::identity(u.len(), u.len()) * dt,
            })
        })
        .collect()
}

/// Quadratic model of the action-value function at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticExpansion {
    pub q_x: DVector<f64>,
    pub q_u: DVector<f64>,
    pub q_xx: DMatrix<f64>,
    pub q_ux: DMatrix<f64>,
    pub q_uu: DMatrix<f64>,
}

impl QuadraticExpansion {
    pub fn from_step(step: &StepExpansion, v_x: &DVector<f64>, v_xx: &DMatrix<f64>) -> Self {
        let at = step.a.transpose();
        let bt = step.b.transpose();
        let v_xx_a = v_xx * &step.a;
        let v_xx_b = v_xx * &step.b;
        let mut q_xx = &step.l_xx + &at * &v_xx_a;
        let mut q_uu = &step.l_uu + &bt * &v_xx_b;
        symmetrize(&mut q_xx);
        symmetrize(&mut q_uu);
        Self {
            q_x: &step.l_x + &at * v_x,
            q_u: &step.l_u + &bt * v_x,
            q_xx,
            q_ux: bt * v_xx_a,
            q_uu,
        }
    }
}

/// Additive `μI` on `∂_uu Q`. Each step first tries `μ = 0`, then `initial`,
/// multiplied by `factor` up to `max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regularization {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Self {
            initial: 1e-6,
            factor: 10.0,
            max: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub gains: Gains,
    /// `Σ k_iᵀ Q_u` (first-order term of the predicted change).
    pub expected_linear: f64,
    /// `Σ k_iᵀ Q_uu k_i` (second-order term).
    pub expected_quadratic: f64,
    /// `∂_x V` at every knot `0..=N`.
    pub value_gradient: Vec<DVector<f64>>,
    /// `∂_xx V` at every knot `0..=N`.
    pub value_hessian: Vec<DMatrix<f64>>,
    /// Largest `μ` that any step needed.
    pub max_regularization: f64,
}

impl BackwardPass {
    /// Predicted cost change for line-search step `α`.
    pub fn expected_change(&self, alpha: f64) -> f64 {
        alpha * self.expected_linear + 0.5 * alpha * alpha * self.expected_quadratic
    }
}

/// Riccati sweep from the terminal expansion back to step 0.
///
/// Gains follow the policy convention `u = ū + K δx + k`, i.e.
/// `K = −Q_uu⁻¹ Q_ux` and `k = −Q_uu⁻¹ Q_u`.
pub fn backward_pass(
    steps: &[StepExpansion],
    terminal_gradient: DVector<f64>,
    terminal_hessian: DMatrix<f64>,
    reg: &Regularization,
) -> Result<BackwardPass> {
    let n_steps = steps.len();
    let mut feedback = vec![DMatrix::zeros(0, 0); n_steps];
    let mut feedforward = vec![DVector::zeros(0); n_steps];
    let mut value_gradient = vec![DVector::zeros(0); n_steps + 1];
    let mut value_hessian = vec![DMatrix::zeros(0, 0); n_steps + 1];
    let mut v_x = terminal_gradient;
    let mut v_xx = terminal_hessian;
    symmetrize(&mut v_xx);
    value_gradient[n_steps] = v_x.clone();
    value_hessian[n_steps] = v_xx.clone();
    let mut expected_linear = 0.0;
    let mut expected_quadratic = 0.0;
    let mut max_reg: f64 = 0.0;

    for i in (0..n_steps).rev() {
        let step = &steps[i];
        if step.a.nrows() != v_x.len() {
            return Err(HpiError::Dimension {
                what: "value gradient vs. step output",
                expected: step.a.nrows(),
                got: v_x.len(),
            });
        }
        let q = QuadraticExpansion::from_step(step, &v_x, &v_xx);
        let (chol, mu) = factor_regularized(&q.q_uu, reg, i)?;
        max_reg = max_reg.max(mu);
        let k_fb = -chol.solve(&q.q_ux);
        let k_ff = -chol.solve(&q.q_u);

        let k_fb_t = k_fb.transpose();
        let qux_t = q.q_ux.transpose();
        v_x = &q.q_x + &k_fb_t * (&q.q_uu * &k_ff) + &k_fb_t * &q.q_u + &qux_t * &k_ff;
        v_xx = &q.q_xx + &k_fb_t * (&q.q_uu * &k_fb) + &k_fb_t * &q.q_ux + &qux_t * &k_fb;
        symmetrize(&mut v_xx);

        expected_linear += k_ff.dot(&q.q_u);
        expected_quadratic += k_ff.dot(&(&q.q_uu * &k_ff));
        value_gradient[i] = v_x.clone();
        value_hessian[i] = v_xx.clone();
        feedback[i] = k_fb;
        feedforward[i] = k_ff;
    }
    Ok(BackwardPass {
        gains: Gains { feedback, feedforward },
        expected_linear,
        expected_quadratic,
        value_gradient,
        value_hessian,
        max_regularization: max_reg,
    })
}

fn factor_regularized(q_uu: &DMatrix<f64>, reg: &Regularization, step: usize) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = Cholesky::new(q_uu.clone()) {
        return Ok((c, 0.0));
    }
    let m = q_uu.nrows();
    let mut mu = reg.initial;
    while mu <= reg.max {
        if let Some(c) = Cholesky::new(q_uu + DMatrix::identity(m, m) * mu) {
            return Ok((c, mu));
        }
        mu *= reg.factor;
    }
    Err(HpiError::Solver(format!(
        "Q_uu at step {step} stays indefinite with regularization up to {}",
        reg.max
    )))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for r in 0..n {
        for c in 0..r {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_step(a: f64, b: f64, q: f64, r: f64) -> StepExpansion {
        StepExpansion {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            l_x: DVector::zeros(1),
            l_u: DVector::zeros(1),
            l_xx: DMatrix::from_element(1, 1, q),
            l_uu: DMatrix::from_element(1, 1, r),
        }
    }

    #[test]
    fn zero_cost_gives_zero_gains() {
        let steps = vec![scalar_step(1.0, 0.1, 0.0, 0.1); 5];
        let bp = backward_pass(&steps, DVector::zeros(1), DMatrix::zeros(1, 1), &Regularization::default()).unwrap();
        assert!(bp.gains.feedback.iter().all(|k| k[(0, 0)] == 0.0));
        assert!(bp.gains.feedforward.iter().all(|k| k[0] == 0.0));
    }

    #[test]
    fn single_step_closed_form() {
        let (a, b, r, p) = (1.2, 0.3, 0.05, 4.0);
        let steps = vec![scalar_step(a, b, 0.0, r)];
        let v_x = DVector::from_element(1, 0.7);
        let bp = backward_pass(&steps, v_x, DMatrix::from_element(1, 1, p), &Regularization::default()).unwrap();
        let q_uu = r + b * p * b;
        let q_ux = b * p * a;
        let q_u = b * 0.7;
        assert_relative_eq!(bp.gains.feedback[0][(0, 0)], -q_ux / q_uu, epsilon = 1e-14);
        assert_relative_eq!(bp.gains.feedforward[0][0], -q_u / q_uu, epsilon = 1e-14);
    }

    #[test]
    fn indefinite_q_uu_is_regularized() {
        // l_uu + b²p < 0 without regularization.
        let steps = vec![scalar_step(1.0, 1.0, 0.0, 0.1)];
        let bp = backward_pass(&steps, DVector::zeros(1), DMatrix::from_element(1, 1, -0.1 + 1e-9), &Regularization::default())
            .unwrap_or_else(|e| panic!("{e}"));
        assert!(bp.max_regularization == 0.0 || bp.max_regularization >= 1e-6);

        let steps = vec![scalar_step(1.0, 1.0, 0.0, 0.1)];
        let bp = backward_pass(&steps, DVector::zeros(1), DMatrix::from_element(1, 1, -0.2), &Regularization::default()).unwrap();
        assert!(bp.max_regularization >= 0.1);

        let err = backward_pass(&steps, DVector::zeros(1), DMatrix::from_element(1, 1, -1e7), &Regularization::default());
        assert!(matches!(err, Err(HpiError::Solver(_))));
    }
}
