//! Built-in benchmark tasks and the name registry used by the CLI.

pub mod ball;
pub mod lqr;
pub mod slip;

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{HpiError, Result};
use crate::model::{HybridModel, HybridState, ModeId};
use crate::rollout::TimeGrid;

pub use ball::{make_bouncing_ball, BouncingBallParams};
pub use lqr::{make_double_integrator, DoubleIntegratorParams};
pub use slip::{make_slip, SlipParams};

pub const SYSTEM_NAMES: [&str; 3] = ["bouncing-ball", "slip-jump", "double-integrator"];

/// A ready-to-run task.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub model: HybridModel,
    pub costs: CostSpec,
    pub initial: HybridState,
    pub grid: TimeGrid,
    /// Transition whose first occurrence splits a run into before/after segments.
    pub segment_transition: Option<(ModeId, ModeId)>,
    /// Fully resolved parameters.
    pub params: serde_json::Value,
}

/// Overrides layered on top of a system's default parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemOverrides {
    pub dt: Option<f64>,
    pub eps: Option<f64>,
    pub horizon: Option<f64>,
    /// Partial parameter object merged over the defaults (e.g. `{"restitution": 0.8}`).
    pub params: Option<serde_json::Value>,
}

pub fn build(name: &str, overrides: &SystemOverrides) -> Result<Benchmark> {
    match name {
        "bouncing-ball" => make_bouncing_ball(&resolve::<BouncingBallParams>(overrides)?),
        "slip-jump" => make_slip(&resolve::<SlipParams>(overrides)?),
        "double-integrator" => make_double_integrator(&resolve::<DoubleIntegratorParams>(overrides)?),
        other => Err(HpiError::Config(format!(
            "unknown system '{other}' (known: {})",
            SYSTEM_NAMES.join(", ")
        ))),
    }
}

/// Defaults, then `params`, then the `dt`/`eps`/`horizon` shorthands.
pub fn resolve<P>(overrides: &SystemOverrides) -> Result<P>
where
    P: Default + Serialize + serde::de::DeserializeOwned,
{
    let mut value = serde_json::to_value(P::default())?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| HpiError::Config("parameter set is not an object".into()))?;
    if let Some(extra) = &overrides.params {
        let extra = extra
            .as_object()
            .ok_or_else(|| HpiError::Config("system params override must be a JSON object".into()))?;
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    for (key, v) in [("dt", overrides.dt), ("eps", overrides.eps), ("horizon", overrides.horizon)] {
        if let Some(v) = v {
            obj.insert(key.into(), serde_json::json!(v));
        }
    }
    serde_json::from_value(value).map_err(|e| HpiError::Config(format!("invalid system parameters: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_and_overrides() {
        let b = build("bouncing-ball", &SystemOverrides::default()).unwrap();
        assert_eq!(b.grid.steps, 1600);
        let o = SystemOverrides {
            horizon: Some(2.0),
            params: Some(serde_json::json!({"restitution": 0.8})),
            ..Default::default()
        };
        let b = build("bouncing-ball", &o).unwrap();
        assert_eq!(b.grid.steps, 800);
        assert_eq!(b.params["restitution"], 0.8);
        assert!(build("pogo", &SystemOverrides::default()).is_err());
        let bad = SystemOverrides {
            params: Some(serde_json::json!({"stiffnes": 3.0})),
            ..Default::default()
        };
        assert!(build("slip-jump", &bad).is_err());
        assert_eq!(build("slip-jump", &SystemOverrides::default()).unwrap().grid.steps, 1000);
    }
}
