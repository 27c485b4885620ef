use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("array of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: (usize, usize), len: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("op `{0}` has no registered second-order rule")]
    NoSecondOrderRule(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("reference kind `{0}` has no closed-form density; use a trained teacher")]
    NotAnalytic(&'static str),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("degenerate kernel bandwidth: all points coincide")]
    DegenerateBandwidth,

    #[error("gradient leak: {0}")]
    GradientLeak(String),

    #[error("frozen parameters changed: {0}")]
    FrozenParamsChanged(String),

    #[error("teacher fidelity {score:.4} is below the gate {threshold}")]
    TeacherGate { score: f64, threshold: f64 },

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        /// `(t_lo, t_hi, mean |delta|, count)` per time bucket, for diagnosing the
        /// washed-out (large t) vs exploding (small t) regimes.
        t_histogram: Vec<(f64, f64, f64, usize)>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
