//! Measures what single AVX double-precision operations cost when their
//! operands or results are normal, subnormal, overflowing or NaN, with
//! flush-to-zero and denormals-are-zero on and off.
//!
//! Modules, bottom up:
//! - [`fpmodel`]: binary64 classification and operand recipes per outcome.
//! - [`fpenv`]: MXCSR control with scoped restore.
//! - [`hwinfo`]: CPUID features, core pinning, TSC calibration.
//! - [`cycleclock`]: fenced timestamp reads and sample statistics.
//! - [`kernels`]: register-only and L1-streaming benchmark kernels.
//! - [`harness`]: the experiment matrix and reference comparison.
//! - [`report`]: Markdown, CSV and JSON rendering.

pub mod cycleclock;
pub mod error;
pub mod fpenv;
pub mod fpmodel;
pub mod harness;
pub mod hwinfo;
pub mod kernels;
pub mod reference;
pub mod report;

pub use cycleclock::{MeasureConfig, MeasurementStats, Sample};
pub use error::{Error, Result};
pub use fpenv::{EnvGuard, EnvMode, FpEnvConfig};
pub use fpmodel::{Bits64, OperandClass, OperandSet, OperationKind, OutcomeClass};
pub use harness::{
    Cell, CompareOptions, CycleUnit, Deviation, DeviationReport, ExperimentMatrix, MatrixOptions, ResultRecord,
    RunContext, RunParams, Verdict,
};
pub use hwinfo::{FeatureSet, TscCalibration};
pub use kernels::{KernelSpec, Variant};
pub use reference::ReferenceTable;
pub use report::{Format, RenderSpec};
