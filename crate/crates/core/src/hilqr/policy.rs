//! The time-varying affine proposal and its JSON form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HpiError, Result};
use crate::model::{HybridModel, ModeId};
use crate::rollout::{ControlSource, Policy};

use super::extensions::{select_extension, ReferenceExtension};
use super::{Gains, NominalTrajectory};

pub const POLICY_FORMAT: &str = "hpi-proposal-policy";
const POLICY_VERSION: u32 = 1;

/// `u(i, X) = ū_i + K_i (X − x̄_i) + s·k_i`, with extension substitution on
/// mode mismatch. `s` is `feedforward_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPolicy {
    pub nominal: NominalTrajectory,
    pub gains: Gains,
    pub extensions: Vec<ReferenceExtension>,
    pub use_extensions: bool,
    pub feedforward_scale: f64,
}

impl ProposalPolicy {
    /// Binds the policy to its model for rollouts.
    pub fn bind<'a>(&'a self, model: &'a HybridModel) -> PolicyView<'a> {
        PolicyView {
            model,
            nominal: &self.nominal,
            gains: &self.gains,
            extensions: &self.extensions,
            use_extensions: self.use_extensions,
            feedforward_scale: self.feedforward_scale,
        }
    }

    pub fn with_extensions(mut self, on: bool) -> Self {
        self.use_extensions = on;
        self
    }

    pub fn validate(&self, model: &HybridModel) -> Result<()> {
        self.nominal.validate(model)?;
        let n = self.nominal.steps();
        if self.gains.feedback.len() != n || self.gains.feedforward.len() != n {
            return Err(HpiError::Config(format!("gains do not cover {n} steps")));
        }
        for i in 0..n {
            let spec = model.mode(self.nominal.modes[i])?;
            let k = &self.gains.feedback[i];
            if k.nrows() != spec.control_dim || k.ncols() != spec.state_dim || self.gains.feedforward[i].len() != spec.control_dim {
                return Err(HpiError::Dimension {
                    what: "gain at nominal step",
                    expected: spec.control_dim,
                    got: k.nrows(),
                });
            }
        }
        Ok(())
    }

    pub fn to_document(&self, model: &HybridModel, seed: Option<u64>) -> PolicyDocument {
        PolicyDocument {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            model: model.name().to_string(),
            seed,
            noise_intensity: model.noise_intensity(),
            policy: self.clone(),
        }
    }

    pub fn save(&self, model: &HybridModel, seed: Option<u64>, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.to_document(model, seed))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Loads a policy and checks it against `model`.
    pub fn load(model: &HybridModel, path: &Path) -> Result<Self> {
        let doc: PolicyDocument = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        doc.into_policy(model)
    }
}

/// Self-describing export of a [`ProposalPolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub seed: Option<u64>,
    pub noise_intensity: f64,
    pub policy: ProposalPolicy,
}

impl PolicyDocument {
    pub fn into_policy(self, model: &HybridModel) -> Result<ProposalPolicy> {
        if self.format != POLICY_FORMAT || self.version != POLICY_VERSION {
            return Err(HpiError::Config(format!(
                "unsupported policy document {} v{}",
                self.format, self.version
            )));
        }
        if self.model != model.name() {
            return Err(HpiError::Config(format!(
                "policy was built for '{}', not '{}'",
                self.model,
                model.name()
            )));
        }
        self.policy.validate(model)?;
        Ok(self.policy)
    }
}

/// Borrowed form of [`ProposalPolicy`], also used for line-search rollouts.
#[derive(Debug, Clone, Copy)]
pub struct PolicyView<'a> {
    pub model: &'a HybridModel,
    pub nominal: &'a NominalTrajectory,
    pub gains: &'a Gains,
    pub extensions: &'a [ReferenceExtension],
    pub use_extensions: bool,
    pub feedforward_scale: f64,
}

impl Policy for PolicyView<'_> {
    fn control(&self, step: usize, _t: f64, mode: ModeId, x: &[f64], u: &mut [f64]) -> ControlSource {
        let reference = select_extension(
            self.model,
            self.nominal,
            self.gains,
            self.extensions,
            self.use_extensions,
            step,
            mode,
        );
        let Some(r) = reference else {
            u.fill(0.0);
            return ControlSource::Fallback;
        };
        for (c, uc) in u.iter_mut().enumerate() {
            let mut v = r.u[c] + self.feedforward_scale * r.feedforward[c];
            for (j, xj) in x.iter().enumerate() {
                v += r.feedback[(c, j)] * (xj - r.x[j]);
            }
            *uc = v;
        }
        r.source
    }
}
