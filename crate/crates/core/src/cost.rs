//! Running state cost `V(t, x)` and terminal cost `Ψ_T(x)`.
//!
//! The control penalty `½‖u‖²` is fixed by the problem class and never appears
//! here; both traits only describe the state-dependent parts.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::model::{fd_step, ModeId};

/// Step used for second-order central differences, relative to `max(1, ‖x‖)`.
const FD_HESSIAN_STEP: f64 = 1e-4;

pub trait RunningCost: Send + Sync {
    fn value(&self, t: f64, mode: ModeId, x: &[f64]) -> f64;

    fn gradient(&self, t: f64, mode: ModeId, x: &[f64]) -> DVector<f64> {
        let h = fd_step(norm(x));
        central_gradient(x, h, |p| self.value(t, mode, p))
    }

    fn hessian(&self, t: f64, mode: ModeId, x: &[f64]) -> DMatrix<f64> {
        let h = FD_HESSIAN_STEP * norm(x).max(1.0);
        central_hessian(x, h, |p| self.value(t, mode, p))
    }
}

pub trait TerminalCost: Send + Sync {
    fn value(&self, mode: ModeId, x: &[f64]) -> f64;

    fn gradient(&self, mode: ModeId, x: &[f64]) -> DVector<f64> {
        let h = fd_step(norm(x));
        central_gradient(x, h, |p| self.value(mode, p))
    }

    fn hessian(&self, mode: ModeId, x: &[f64]) -> DMatrix<f64> {
        let h = FD_HESSIAN_STEP * norm(x).max(1.0);
        central_hessian(x, h, |p| self.value(mode, p))
    }
}

/// `V ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroRunning;

impl RunningCost for ZeroRunning {
    fn value(&self, _t: f64, _mode: ModeId, _x: &[f64]) -> f64 {
        0.0
    }
    fn gradient(&self, _t: f64, _mode: ModeId, x: &[f64]) -> DVector<f64> {
        DVector::zeros(x.len())
    }
    fn hessian(&self, _t: f64, _mode: ModeId, x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

/// `V(x) = ½ xᵀ Q x`, identical in every mode.
#[derive(Debug, Clone)]
pub struct QuadraticRunning {
    pub weight: DMatrix<f64>,
}

impl RunningCost for QuadraticRunning {
    fn value(&self, _t: f64, _mode: ModeId, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.weight * &x))
    }
    fn gradient(&self, _t: f64, _mode: ModeId, x: &[f64]) -> DVector<f64> {
        &self.weight * DVector::from_column_slice(x)
    }
    fn hessian(&self, _t: f64, _mode: ModeId, _x: &[f64]) -> DMatrix<f64> {
        self.weight.clone()
    }
}

/// Maps a mode's state into the space where the goal is expressed.
pub type Embedding = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;

/// `Ψ_T(x) = ½ (φ_j(x) − x_G)ᵀ Q_T (φ_j(x) − x_G)`.
///
/// `φ_j` is the identity unless an embedding is registered for mode `j`. With
/// an embedding, the Hessian is the Gauss-Newton form `Jᵀ Q_T J`.
#[derive(Clone)]
pub struct QuadraticTerminal {
    pub goal: DVector<f64>,
    pub weight: DMatrix<f64>,
    embeddings: Vec<Option<Embedding>>,
}

impl fmt::Debug for QuadraticTerminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadraticTerminal")
            .field("goal", &self.goal)
            .field("weight", &self.weight)
            .finish()
    }
}

impl QuadraticTerminal {
    pub fn new(goal: DVector<f64>, weight: DMatrix<f64>) -> Self {
        Self {
            goal,
            weight,
            embeddings: Vec::new(),
        }
    }

    pub fn with_embedding<E>(mut self, mode: ModeId, embed: E) -> Self
    where
        E: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    {
        if self.embeddings.len() <= mode.0 {
            self.embeddings.resize(mode.0 + 1, None);
        }
        self.embeddings[mode.0] = Some(Arc::new(embed));
        self
    }

    fn embedding(&self, mode: ModeId) -> Option<&Embedding> {
        self.embeddings.get(mode.0).and_then(Option::as_ref)
    }

    fn embed(&self, mode: ModeId, x: &[f64]) -> DVector<f64> {
        match self.embedding(mode) {
            Some(e) => e(x),
            None => DVector::from_column_slice(x),
        }
    }

    fn embedding_jacobian(&self, embed: &Embedding, x: &[f64]) -> DMatrix<f64> {
        let h = fd_step(norm(x));
        let rows = self.goal.len();
        let mut jac = DMatrix::zeros(rows, x.len());
        let mut probe = x.to_vec();
        for c in 0..x.len() {
            probe[c] = x[c] + h;
            let plus = embed(&probe);
            probe[c] = x[c] - h;
            let minus = embed(&probe);
            probe[c] = x[c];
            jac.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        jac
    }
}

impl TerminalCost for QuadraticTerminal {
    fn value(&self, mode: ModeId, x: &[f64]) -> f64 {
        let e = self.embed(mode, x) - &self.goal;
        0.5 * e.dot(&(&self.weight * &e))
    }

    fn gradient(&self, mode: ModeId, x: &[f64]) -> DVector<f64> {
        let e = self.embed(mode, x) - &self.goal;
        let g = &self.weight * e;
        match self.embedding(mode) {
            Some(embed) => self.embedding_jacobian(embed, x).transpose() * g,
            None => g,
        }
    }

    fn hessian(&self, mode: ModeId, x: &[f64]) -> DMatrix<f64> {
        match self.embedding(mode) {
            Some(embed) => {
                let j = self.embedding_jacobian(embed, x);
                j.transpose() * &self.weight * j
            }
            None => self.weight.clone(),
        }
    }
}

/// Running and terminal costs of one task.
#[derive(Clone)]
pub struct CostSpec {
    pub running: Option<Arc<dyn RunningCost>>,
    pub terminal: Arc<dyn TerminalCost>,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("has_running", &self.running.is_some())
            .finish()
    }
}

impl CostSpec {
    pub fn terminal_only(terminal: impl TerminalCost + 'static) -> Self {
        Self {
            running: None,
            terminal: Arc::new(terminal),
        }
    }

    pub fn with_running(mut self, running: impl RunningCost + 'static) -> Self {
        self.running = Some(Arc::new(running));
        self
    }

    #[inline]
    pub fn running_value(&self, t: f64, mode: ModeId, x: &[f64]) -> f64 {
        self.running.as_ref().map_or(0.0, |v| v.value(t, mode, x))
    }

    pub fn running_gradient(&self, t: f64, mode: ModeId, x: &[f64]) -> DVector<f64> {
        self.running
            .as_ref()
            .map_or_else(|| DVector::zeros(x.len()), |v| v.gradient(t, mode, x))
    }

    pub fn running_hessian(&self, t: f64, mode: ModeId, x: &[f64]) -> DMatrix<f64> {
        self.running
            .as_ref()
            .map_or_else(|| DMatrix::zeros(x.len(), x.len()), |v| v.hessian(t, mode, x))
    }

    #[inline]
    pub fn terminal_value(&self, mode: ModeId, x: &[f64]) -> f64 {
        self.terminal.value(mode, x)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn central_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> DVector<f64> {
    let mut probe = x.to_vec();
    DVector::from_fn(x.len(), |c, _| {
        probe[c] = x[c] + h;
        let plus = f(&probe);
        probe[c] = x[c] - h;
        let minus = f(&probe);
        probe[c] = x[c];
        (plus - minus) / (2.0 * h)
    })
}

fn central_hessian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> DMatrix<f64> {
    let n = x.len();
    let mut probe = x.to_vec();
    let mut hess = DMatrix::zeros(n, n);
    let f0 = f(x);
    for r in 0..n {
        probe[r] = x[r] + h;
        let plus = f(&probe);
        probe[r] = x[r] - h;
        let minus = f(&probe);
        probe[r] = x[r];
        hess[(r, r)] = (plus - 2.0 * f0 + minus) / (h * h);
        for c in 0..r {
            let mut eval = |dr: f64, dc: f64| {
                probe[r] = x[r] + dr;
                probe[c] = x[c] + dc;
                let v = f(&probe);
                probe[r] = x[r];
                probe[c] = x[c];
                v
            };
            let v = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
            hess[(r, c)] = v;
            hess[(c, r)] = v;
        }
    }
    hess
}
