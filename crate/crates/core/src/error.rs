use crate::model::ModeId;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum HpiError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no transition from mode {from} to mode {to}")]
    UnknownTransition { from: ModeId, to: ModeId },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("grazing contact on transition {from}->{to}: guard rate {denominator:e} below transversality tolerance")]
    GrazingContact {
        from: ModeId,
        to: ModeId,
        denominator: f64,
    },

    #[error("state diverged at step {step} (mode {mode}) after {jumps} jumps")]
    Divergence {
        step: usize,
        mode: ModeId,
        jumps: usize,
    },

    #[error("Zeno-like chatter at step {step}: {events} events (limit {limit})")]
    Zeno {
        step: usize,
        events: usize,
        limit: usize,
    },

    #[error("event location found no sign change of guard {from}->{to} at step {step}")]
    EventInconsistency {
        step: usize,
        from: ModeId,
        to: ModeId,
    },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("degenerate ensemble: all {samples} samples have non-finite cost")]
    DegenerateEnsemble { samples: usize },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = HpiError> = std::result::Result<T, E>;
