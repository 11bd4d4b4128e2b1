use crate::fpmodel::{OperationKind, OutcomeClass};

/// Errors produced anywhere in the measurement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("host is not supported: {0}")]
    UnsupportedHost(String),

    #[error("outcome {outcome} does not apply to {op}")]
    InapplicableOutcome { op: OperationKind, outcome: OutcomeClass },

    #[error("no operands provoke {outcome} for {op}")]
    ImpossibleOutcome { op: OperationKind, outcome: OutcomeClass },

    #[error("lanes disagree on outcome: lane 0 is {first}, lane {lane} is {other}")]
    MixedLanes {
        first: OutcomeClass,
        lane: usize,
        other: OutcomeClass,
    },

    #[error("lane {lane} does not fall in any outcome class")]
    UnclassifiableLane { lane: usize },

    #[error("operand vectors are malformed: {0}")]
    MalformedOperands(String),

    #[error("invalid floating-point environment: {0}")]
    InvalidEnv(String),

    #[error("MXCSR control bits {actual:#06x} do not match requested {expected:#06x}")]
    EnvMismatch { expected: u32, actual: u32 },

    #[error("CPU feature `{0}` is required but not available")]
    MissingFeature(&'static str),

    #[error("inconsistent feature set: {0}")]
    InconsistentFeatures(String),

    #[error("cannot pin to core {core}: {reason}")]
    AffinityUnsupported { core: usize, reason: String },

    #[error("timestamp counter calibration unstable: {0}")]
    UnstableClock(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("operand set is for {operands}, kernel runs {kernel}")]
    OperandMismatch {
        kernel: OperationKind,
        operands: OperationKind,
    },

    #[error("no analytic model for {0}")]
    UnmodeledOp(OperationKind),

    #[error("invalid measurement parameters: {0}")]
    InvalidMeasurement(String),

    #[error("unknown machine `{0}`")]
    UnknownMachine(String),

    #[error("nothing to render")]
    EmptyResults,

    #[error("reference data: {0}")]
    Reference(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
