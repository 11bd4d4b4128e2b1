//! Experiment matrix, per-cell execution and comparison with the reference
//! tables.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycleclock::{self, MeasureConfig, MeasurementStats, Sample};
use crate::error::{Error, Result};
use crate::fpenv::{self, EnvGuard, EnvMode, FpEnvConfig};
use crate::fpmodel::{self, OperandSet, OperationKind, OutcomeClass};
use crate::hwinfo::{FeatureSet, TscCalibration};
use crate::kernels::{self, KernelSpec, Variant};
use crate::reference::{CellKey, ReferenceTable};

/// One measurement to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub op: OperationKind,
    pub outcome: OutcomeClass,
    pub env: FpEnvConfig,
    pub variant: Variant,
    /// Not part of the reference table; no reference value exists.
    #[serde(default)]
    pub extended: bool,
}

impl Cell {
    pub fn env_mode(&self) -> Option<EnvMode> {
        EnvMode::of(&self.env)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub measure: MeasureConfig,
    pub scalar_op_floor: u64,
    pub memc_vector_length: usize,
    pub regasm_unroll: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            measure: MeasureConfig::default(),
            scalar_op_floor: kernels::DEFAULT_SCALAR_OP_FLOOR,
            memc_vector_length: kernels::DEFAULT_MEMC_VECTOR_LENGTH,
            regasm_unroll: kernels::DEFAULT_REGASM_UNROLL,
        }
    }
}

impl RunParams {
    pub fn kernel_spec(&self, op: OperationKind, variant: Variant) -> KernelSpec {
        let spec = match variant {
            Variant::RegAsm => KernelSpec::reg_asm_unrolled(op, self.regasm_unroll),
            Variant::MemC => KernelSpec::mem_c(op, self.memc_vector_length),
        };
        spec.with_scalar_op_floor(self.scalar_op_floor)
    }
}

/// Which cells to include.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOptions {
    pub envs: Vec<FpEnvConfig>,
    /// Empty means all.
    pub ops: Vec<OperationKind>,
    /// Empty means all.
    pub classes: Vec<OutcomeClass>,
    pub variants: Vec<Variant>,
    pub extended: bool,
    pub shuffle: bool,
    pub seed: u64,
    pub params: RunParams,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            envs: EnvMode::BOTH.iter().map(|m| m.config()).collect(),
            ops: Vec::new(),
            classes: Vec::new(),
            variants: vec![Variant::MemC, Variant::RegAsm],
            extended: false,
            shuffle: false,
            seed: fpmodel::DEFAULT_SEED,
            params: RunParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub cells: Vec<Cell>,
    pub run_params: RunParams,
    pub seed: u64,
}

impl ExperimentMatrix {
    /// Builds the matrix in table order (op, row, environment), optionally
    /// shuffled with `options.seed`.
    pub fn build(features: &FeatureSet, options: &MatrixOptions) -> Self {
        let wanted_op = |op| options.ops.is_empty() || options.ops.contains(&op);
        let wanted_class = |c| options.classes.is_empty() || options.classes.contains(&c);
        let mut cells = Vec::new();
        for op in OperationKind::ALL {
            if !wanted_op(op) || !features.avx || (op == OperationKind::Fma && !features.fma3) {
                continue;
            }
            let mut rows: Vec<(OutcomeClass, Variant, bool)> = Vec::new();
            if op != OperationKind::Fma {
                rows.push((OutcomeClass::Normalized, Variant::MemC, false));
            }
            rows.extend(
                OutcomeClass::table_rows(op)
                    .iter()
                    .map(|&c| (c, Variant::RegAsm, false)),
            );
            if options.extended {
                rows.extend(
                    OutcomeClass::extended_rows(op)
                        .iter()
                        .map(|&c| (c, Variant::RegAsm, true)),
                );
            }
            for (outcome, variant, extended) in rows {
                if !wanted_class(outcome) || !options.variants.contains(&variant) {
                    continue;
                }
                for &env in &options.envs {
                    cells.push(Cell {
                        op,
                        outcome,
                        env,
                        variant,
                        extended,
                    });
                }
            }
        }
        if options.shuffle {
            cells.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
        }
        ExperimentMatrix {
            cells,
            run_params: options.params.clone(),
            seed: options.seed,
        }
    }
}

/// The full reference matrix for the detected features.
pub fn default_matrix(features: &FeatureSet) -> ExperimentMatrix {
    ExperimentMatrix::build(features, &MatrixOptions::default())
}

/// Host description attached to every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub features: FeatureSet,
    pub calibration: Option<TscCalibration>,
    pub pinned_core: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleUnit {
    /// Core clock cycles, converted from TSC ticks with the measured ratio.
    Core,
    /// Raw timestamp-counter ticks.
    Tsc,
}

/// One matrix cell's outcome with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub cell: Cell,
    pub kernel: KernelSpec,
    pub seed: u64,
    pub operands: Option<OperandSet>,
    pub verified_outcome: Option<OutcomeClass>,
    /// Raw MXCSR in force while the kernel ran.
    pub mxcsr: Option<u32>,
    pub stats: Option<MeasurementStats>,
    /// Headline cost: median per scalar op in `unit`.
    pub cycles: Option<f64>,
    pub unit: CycleUnit,
    /// Conversion applied to obtain `cycles` from TSC ticks.
    pub core_cycles_per_tick: Option<f64>,
    pub error: Option<String>,
    pub notes: Vec<String>,
    pub features: FeatureSet,
    pub calibration: Option<TscCalibration>,
    pub pinned_core: Option<usize>,
}

impl ResultRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.cycles.is_some()
    }

    /// Median in TSC ticks per scalar op.
    pub fn median_ticks(&self) -> Option<f64> {
        self.stats.as_ref().map(|s| s.median)
    }

    /// Headline value scaled to a full 4-wide instruction.
    pub fn cycles_per_instruction(&self) -> Option<f64> {
        self.cycles.map(|c| c * kernels::LANES as f64)
    }
}

fn cell_notes(cell: &Cell) -> Vec<String> {
    let mut notes = vec!["all exceptions masked in every environment".to_string()];
    if cell.extended {
        notes.push("extended cell: no reference value".into());
    }
    match (cell.op, cell.outcome) {
        (OperationKind::Add, OutcomeClass::DenormalLhs | OutcomeClass::DenormalRhs | OutcomeClass::DenormalBoth)
        | (OperationKind::Mul, OutcomeClass::DenormalLhs | OutcomeClass::DenormalRhs)
        | (
            OperationKind::Div,
            OutcomeClass::DenormalDividend | OutcomeClass::DenormalDivisor | OutcomeClass::DenormalBoth,
        ) => notes.push("subnormal operands chosen so the result is a normal number".into()),
        (OperationKind::Fma, OutcomeClass::FmaMulUnderflow) => {
            notes.push("product underflows, normal addend keeps the result normal".into())
        }
        _ => {}
    }
    notes
}

/// Measures one cell: build and verify operands, apply the environment,
/// time the kernel, restore the environment.
pub fn run_cell(cell: &Cell, params: &RunParams, seed: u64, ctx: &RunContext) -> Result<ResultRecord> {
    let spec = params.kernel_spec(cell.op, cell.variant);
    let scale = ctx.calibration.as_ref().and_then(|c| c.core_cycles_per_tick());
    let mut record = ResultRecord {
        cell: *cell,
        kernel: spec,
        seed,
        operands: None,
        verified_outcome: None,
        mxcsr: None,
        stats: None,
        cycles: None,
        unit: if scale.is_some() {
            CycleUnit::Core
        } else {
            CycleUnit::Tsc
        },
        core_cycles_per_tick: scale,
        error: None,
        notes: cell_notes(cell),
        features: ctx.features.clone(),
        calibration: ctx.calibration.clone(),
        pinned_core: ctx.pinned_core,
    };
    let outcome = (|| -> Result<MeasurementStats> {
        spec.check_scalar_op_floor(params.scalar_op_floor)?;
        let operands = fpmodel::make_operands_seeded(cell.op, cell.outcome, spec.vector_length, seed)?;
        record.operands = Some(operands.clone());
        let verified = fpmodel::verify_outcome(cell.op, &operands)?;
        record.verified_outcome = Some(verified);
        if verified != cell.outcome {
            return Err(Error::MalformedOperands(format!(
                "operands provoke {verified}, expected {}",
                cell.outcome
            )));
        }
        let guard = EnvGuard::apply(cell.env)?;
        record.mxcsr = Some(fpenv::read_raw()?);
        let stats = cycleclock::measure(
            || {
                let run = kernels::run_kernel(&spec, &operands, &cell.env)?;
                Ok(Sample {
                    raw_cycles: run.raw_cycles,
                    scalar_ops: run.scalar_ops,
                })
            },
            &params.measure,
        );
        drop(guard);
        stats
    })();
    match outcome {
        Ok(stats) => {
            record.cycles = Some(stats.median * scale.unwrap_or(1.0));
            record.stats = Some(stats);
        }
        Err(e @ Error::UnsupportedHost(_)) => return Err(e),
        Err(e) => record.error = Some(e.to_string()),
    }
    Ok(record)
}

/// Runs every cell in order on the calling thread. Per-cell failures become
/// error records; only an unsupported host aborts.
pub fn run_matrix(matrix: &ExperimentMatrix, ctx: &RunContext) -> Result<Vec<ResultRecord>> {
    run_matrix_with(matrix, ctx, |_, _| {})
}

/// As [`run_matrix`], calling `progress(index, record)` after each cell.
pub fn run_matrix_with(
    matrix: &ExperimentMatrix,
    ctx: &RunContext,
    mut progress: impl FnMut(usize, &ResultRecord),
) -> Result<Vec<ResultRecord>> {
    let before = fpenv::read_raw()?;
    let fma_copy = if ctx.features.fma3 && matrix.cells.iter().any(|c| c.op == OperationKind::Fma) {
        let reps = matrix.run_params.scalar_op_floor.div_ceil(16);
        kernels::fma_copy_overhead(reps).ok()
    } else {
        None
    };
    let mut records = Vec::with_capacity(matrix.cells.len());
    for (i, cell) in matrix.cells.iter().enumerate() {
        let mut record = run_cell(cell, &matrix.run_params, matrix.seed, ctx)?;
        if let (OperationKind::Fma, Some(copy)) = (cell.op, fma_copy) {
            record.notes.push(format!(
                "accumulator reset copies included in timing; alone they take {copy:.4} ticks per scalar op"
            ));
        }
        progress(i, &record);
        records.push(record);
    }
    fpenv::write_raw(before)?;
    Ok(records)
}

/// Reads JSON Lines result records.
pub fn read_records(text: &str) -> Result<Vec<ResultRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes records as JSON Lines.
pub fn write_records(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Match,
    Deviation,
    NotComparable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub op: OperationKind,
    pub outcome: OutcomeClass,
    pub env: Option<EnvMode>,
    pub variant: Variant,
    pub measured: Option<f64>,
    pub reference: Option<f64>,
    /// measured / reference, absolute cycles.
    pub absolute_ratio: Option<f64>,
    /// Measured cell over the measured normalized register-kernel cell.
    pub measured_penalty: Option<f64>,
    /// Same ratio within the reference machine's numbers.
    pub reference_penalty: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub machine: Option<String>,
    /// Ratios within this factor of each other count as a match.
    pub factor: f64,
    pub absolute: bool,
    pub cells: Vec<Deviation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub factor: f64,
    /// Also require absolute cycles to agree; only meaningful when the host
    /// is the reference microarchitecture.
    pub absolute: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            factor: 2.0,
            absolute: false,
        }
    }
}

fn within(a: f64, b: f64, factor: f64) -> bool {
    a > 0.0 && b > 0.0 && (a / b).max(b / a) <= factor
}

/// Measured penalty ratio of `record` against the normalized register
/// cell for the same op and environment, from TSC medians.
pub fn measured_penalty(record: &ResultRecord, results: &[ResultRecord]) -> Option<f64> {
    let base = results.iter().find(|r| {
        r.cell.op == record.cell.op
            && r.cell.env == record.cell.env
            && r.cell.outcome == OutcomeClass::Normalized
            && r.cell.variant == Variant::RegAsm
            && r.is_ok()
    })?;
    Some(record.median_ticks()? / base.median_ticks()?)
}

fn deviations(
    results: &[ResultRecord],
    reference: Option<(&ReferenceTable, &str)>,
    opts: CompareOptions,
) -> Vec<Deviation> {
    results
        .iter()
        .map(|r| {
            let env = r.cell.env_mode();
            let key = env.filter(|_| !r.cell.extended).and_then(|env| {
                reference.map(|(_, m)| CellKey {
                    machine: m,
                    op: r.cell.op,
                    outcome: r.cell.outcome,
                    env,
                    variant: r.cell.variant,
                })
            });
            let table = reference.map(|(t, _)| t);
            let ref_cycles = key.and_then(|k| table?.cycles(k));
            let ref_penalty = key.and_then(|k| table?.penalty_ratio(k));
            let measured = r.is_ok().then_some(r.cycles).flatten();
            let penalty = if r.is_ok() { measured_penalty(r, results) } else { None };
            let absolute_ratio = measured.zip(ref_cycles).map(|(m, c)| m / c);
            let verdict = match (penalty, ref_penalty) {
                (Some(p), Some(q)) => {
                    let ratio_ok = within(p, q, opts.factor);
                    let abs_ok = !opts.absolute || absolute_ratio.is_some_and(|a| within(a, 1.0, opts.factor));
                    if ratio_ok && abs_ok {
                        Verdict::Match
                    } else {
                        Verdict::Deviation
                    }
                }
                _ => Verdict::NotComparable,
            };
            Deviation {
                op: r.cell.op,
                outcome: r.cell.outcome,
                env,
                variant: r.cell.variant,
                measured,
                reference: ref_cycles,
                absolute_ratio,
                measured_penalty: penalty,
                reference_penalty: ref_penalty,
                verdict,
            }
        })
        .collect()
}

/// Compares results with one reference machine.
pub fn compare_reference(
    results: &[ResultRecord],
    reference: &ReferenceTable,
    machine: &str,
    opts: CompareOptions,
) -> Result<DeviationReport> {
    reference.machine(machine)?;
    Ok(DeviationReport {
        machine: Some(machine.to_string()),
        factor: opts.factor,
        absolute: opts.absolute,
        cells: deviations(results, Some((reference, machine)), opts),
    })
}

/// Measured penalty ratios only, without reference values.
pub fn compare_ratios_only(results: &[ResultRecord]) -> DeviationReport {
    let opts = CompareOptions::default();
    DeviationReport {
        machine: None,
        factor: opts.factor,
        absolute: false,
        cells: deviations(results, None, opts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_features() -> FeatureSet {
        FeatureSet {
            avx: true,
            avx2: true,
            fma3: true,
            ..FeatureSet::baseline("GenuineIntel", "test")
        }
    }

    #[test]
    fn matrix_shapes() {
        let m = default_matrix(&full_features());
        assert_eq!(m.cells.len(), (8 + 8 + 8 + 5) * 2);
        let add: Vec<_> = m.cells.iter().filter(|c| c.op == OperationKind::Add).collect();
        assert_eq!(add.iter().filter(|c| c.variant == Variant::RegAsm).count(), 7 * 2);
        assert_eq!(add.iter().filter(|c| c.variant == Variant::MemC).count(), 2);
        assert!(m.cells.iter().all(|c| c.outcome.is_applicable(c.op)));

        let no_fma = FeatureSet {
            fma3: false,
            ..full_features()
        };
        assert!(default_matrix(&no_fma).cells.iter().all(|c| c.op != OperationKind::Fma));

        let div_zero = m
            .cells
            .iter()
            .filter(|c| c.op == OperationKind::Div && c.outcome == OutcomeClass::DivByZero)
            .count();
        assert_eq!(div_zero, 2);
    }

    #[test]
    fn extended_and_filters() {
        let f = full_features();
        let opts = MatrixOptions {
            extended: true,
            ..MatrixOptions::default()
        };
        let m = ExperimentMatrix::build(&f, &opts);
        assert_eq!(m.cells.len(), (8 + 8 + 9 + 6) * 2);
        assert_eq!(m.cells.iter().filter(|c| c.extended).count(), 4);

        let opts = MatrixOptions {
            ops: vec![OperationKind::Mul],
            classes: vec![OutcomeClass::Underflow],
            envs: vec![FpEnvConfig::GRADUAL],
            ..MatrixOptions::default()
        };
        let m = ExperimentMatrix::build(&f, &opts);
        assert_eq!(m.cells.len(), 1);
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let f = full_features();
        let plain = default_matrix(&f);
        let opts = MatrixOptions {
            shuffle: true,
            ..MatrixOptions::default()
        };
        let a = ExperimentMatrix::build(&f, &opts);
        let b = ExperimentMatrix::build(&f, &opts);
        assert_eq!(a, b);
        assert_ne!(a.cells, plain.cells);
        let mut sorted_a = a.cells.clone();
        let mut sorted_p = plain.cells.clone();
        let key = |c: &Cell| (c.op, c.outcome, c.variant, c.env.ftz);
        sorted_a.sort_by_key(key);
        sorted_p.sort_by_key(key);
        assert_eq!(sorted_a, sorted_p);
    }

    #[test]
    fn within_factor() {
        assert!(within(1.0, 2.0, 2.0));
        assert!(!within(1.0, 2.1, 2.0));
        assert!(!within(0.0, 1.0, 2.0));
    }
}
