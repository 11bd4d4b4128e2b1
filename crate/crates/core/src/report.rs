//! Tables of results and deviations as Markdown, CSV or JSON, plus a plain
//! text summary of the underflow penalties.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpenv::{EnvMode, FpEnvConfig};
use crate::fpmodel::{OperationKind, OutcomeClass};
use crate::harness::{CycleUnit, Deviation, DeviationReport, ResultRecord, Verdict};
use crate::kernels::{Variant, LANES};

/// Marker for a cell whose measurement failed.
pub const ERROR_MARKER: &str = "ERR";
/// Marker for a cell that was not measured.
pub const MISSING_MARKER: &str = "n/a";

/// Penalty ratio at which a slowdown counts as "two orders of magnitude".
pub const FULLY_REPRODUCED_RATIO: f64 = 100.0;
pub const CONSISTENT_RATIO: f64 = 20.0;
/// Largest ratio still read as "no penalty".
pub const NO_PENALTY_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "md" | "markdown" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidMeasurement(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub format: Format,
    /// Environments to show, in column order.
    pub columns: Vec<FpEnvConfig>,
    /// Decimal places.
    pub precision: usize,
    pub include_provenance: bool,
    /// Scale to one full 4-wide instruction instead of one scalar op.
    pub per_instruction: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            format: Format::Markdown,
            columns: EnvMode::BOTH.iter().map(|m| m.config()).collect(),
            precision: 2,
            include_provenance: false,
            per_instruction: false,
        }
    }
}

impl RenderSpec {
    pub fn new(format: Format) -> Self {
        RenderSpec {
            format,
            ..RenderSpec::default()
        }
    }

    /// Every environment present in `results`: the two standard modes
    /// first, then mixed settings in order of appearance.
    pub fn columns_of(results: &[ResultRecord]) -> Vec<FpEnvConfig> {
        let mut cols: Vec<FpEnvConfig> = EnvMode::BOTH
            .iter()
            .map(|m| m.config())
            .filter(|c| results.iter().any(|r| r.cell.env == *c))
            .collect();
        for r in results {
            if !cols.contains(&r.cell.env) {
                cols.push(r.cell.env);
            }
        }
        cols
    }

    fn value(&self, record: &ResultRecord) -> Option<f64> {
        let v = record.cycles?;
        Some(if self.per_instruction { v * LANES as f64 } else { v })
    }

    fn fmt(&self, v: f64) -> String {
        format!("{v:.*}", self.precision)
    }

    fn cell_text(&self, record: Option<&ResultRecord>) -> String {
        match record {
            None => MISSING_MARKER.to_string(),
            Some(r) if !r.is_ok() => ERROR_MARKER.to_string(),
            Some(r) => self.value(r).map_or_else(|| ERROR_MARKER.to_string(), |v| self.fmt(v)),
        }
    }
}

/// Position of a row in table order.
fn row_key(op: OperationKind, outcome: OutcomeClass, variant: Variant) -> (usize, Variant, usize) {
    let op_idx = OperationKind::ALL.iter().position(|&o| o == op).unwrap_or(usize::MAX);
    let rows = OutcomeClass::table_rows(op);
    let out_idx = rows
        .iter()
        .chain(OutcomeClass::extended_rows(op))
        .position(|&o| o == outcome)
        .unwrap_or(rows.len() + 16 + outcome as usize);
    (op_idx, variant, out_idx)
}

fn unit_caption(results: &[ResultRecord], spec: &RenderSpec) -> String {
    let unit = match results.first().map(|r| r.unit) {
        Some(u) if results.iter().all(|r| r.unit == u) => match u {
            CycleUnit::Core => "core cycles",
            CycleUnit::Tsc => "TSC ticks",
        },
        _ => "mixed units",
    };
    let per = if spec.per_instruction {
        "per 4-wide AVX instruction"
    } else {
        "per scalar operation"
    };
    format!("Duration {per} in {unit}.")
}

fn provenance(results: &[ResultRecord]) -> Vec<(String, String)> {
    let r = &results[0];
    let f = &r.features;
    let mut out = vec![
        ("cpu".into(), f.model_name.clone()),
        ("vendor".into(), f.vendor.clone()),
        ("family/model".into(), format!("{:#x}/{:#x}", f.family, f.model)),
        (
            "features".into(),
            format!(
                "avx={} avx2={} fma3={} fma4={} invariant_tsc={}",
                f.avx, f.avx2, f.fma3, f.fma4, f.invariant_tsc
            ),
        ),
        ("seed".into(), format!("{:#x}", r.seed)),
        (
            "pinned core".into(),
            r.pinned_core.map_or_else(|| "none".into(), |c| c.to_string()),
        ),
    ];
    match &r.calibration {
        Some(c) => {
            out.push(("tsc hz".into(), format!("{:.0}", c.tsc_hz)));
            if let Some(s) = c.core_cycles_per_tick() {
                out.push(("core cycles per tick".into(), format!("{s:.4}")));
            }
        }
        None => out.push(("tsc hz".into(), "uncalibrated".into())),
    }
    out
}

type Row<'a> = (
    (OperationKind, OutcomeClass, Variant, bool),
    Vec<Option<&'a ResultRecord>>,
);

fn rows<'a>(results: &'a [ResultRecord], spec: &RenderSpec) -> Vec<Row<'a>> {
    let mut keys: Vec<(OperationKind, OutcomeClass, Variant, bool)> = Vec::new();
    for r in results {
        if !spec.columns.contains(&r.cell.env) {
            continue;
        }
        let k = (r.cell.op, r.cell.outcome, r.cell.variant, r.cell.extended);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_by_key(|&(op, outcome, variant, _)| row_key(op, outcome, variant));
    keys.into_iter()
        .map(|k| {
            let cells = spec
                .columns
                .iter()
                .map(|env| {
                    results.iter().find(|r| {
                        r.cell.env == *env && (r.cell.op, r.cell.outcome, r.cell.variant, r.cell.extended) == k
                    })
                })
                .collect();
            (k, cells)
        })
        .collect()
}

fn render_markdown(results: &[ResultRecord], spec: &RenderSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", unit_caption(results, spec));
    out.push('\n');
    out.push_str("| Operation | Outcome |");
    for env in &spec.columns {
        let _ = write!(out, " {} |", env.label());
    }
    out.push_str(" Kernel |\n|---|---|");
    for _ in &spec.columns {
        out.push_str("---:|");
    }
    out.push_str("---|\n");
    for ((op, outcome, variant, extended), cells) in rows(results, spec) {
        let label = if extended {
            format!("{} (extended)", outcome.row_label())
        } else {
            outcome.row_label().to_string()
        };
        let _ = write!(out, "| {} | {} |", op.title(), label);
        for c in cells {
            let _ = write!(out, " {} |", spec.cell_text(c));
        }
        let _ = writeln!(out, " {} |", variant.label());
    }
    let errors: Vec<&ResultRecord> = results.iter().filter(|r| !r.is_ok()).collect();
    if !errors.is_empty() {
        out.push_str("\nErrors:\n\n");
        for r in errors {
            let _ = writeln!(
                out,
                "- {} {} {} {}: {}",
                r.cell.op,
                r.cell.outcome,
                r.cell.env.label(),
                r.cell.variant.label(),
                r.error.as_deref().unwrap_or("no measurement")
            );
        }
    }
    if spec.include_provenance {
        out.push_str("\nHost:\n\n");
        for (k, v) in provenance(results) {
            let _ = writeln!(out, "- {k}: {v}");
        }
    }
    out
}

fn render_csv(results: &[ResultRecord], spec: &RenderSpec) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["op", "outcome", "env", "kernel", "extended", "cycles", "unit", "status"];
    if spec.include_provenance {
        header.extend([
            "mxcsr",
            "median_ticks",
            "stddev_ticks",
            "samples",
            "core_cycles_per_tick",
            "cpu",
        ]);
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut ordered: Vec<&ResultRecord> = results.iter().filter(|r| spec.columns.contains(&r.cell.env)).collect();
    ordered.sort_by_key(|r| {
        let col = spec.columns.iter().position(|c| *c == r.cell.env);
        (row_key(r.cell.op, r.cell.outcome, r.cell.variant), r.cell.extended, col)
    });
    for r in ordered {
        let unit = match r.unit {
            CycleUnit::Core => "core",
            CycleUnit::Tsc => "tsc",
        };
        let mut row = vec![
            r.cell.op.name().to_string(),
            r.cell.outcome.name().to_string(),
            r.cell.env.label(),
            r.cell.variant.label().to_string(),
            r.cell.extended.to_string(),
            spec.cell_text(Some(r)),
            unit.to_string(),
            match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("{ERROR_MARKER}: {e}"),
            },
        ];
        if spec.include_provenance {
            let stats = r.stats.as_ref();
            row.extend([
                r.mxcsr.map_or_else(|| MISSING_MARKER.into(), |m| format!("{m:#06x}")),
                stats.map_or_else(|| MISSING_MARKER.into(), |s| s.median.to_string()),
                stats.map_or_else(|| MISSING_MARKER.into(), |s| s.stddev.to_string()),
                stats.map_or_else(|| MISSING_MARKER.into(), |s| s.samples.len().to_string()),
                r.core_cycles_per_tick
                    .map_or_else(|| MISSING_MARKER.into(), |s| s.to_string()),
                r.features.model_name.clone(),
            ]);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Renders result records. JSON output is the full records, filtered to
/// the selected environments, and parses back to identical values.
pub fn render(results: &[ResultRecord], spec: &RenderSpec) -> Result<String> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    match spec.format {
        Format::Markdown => Ok(render_markdown(results, spec)),
        Format::Csv => render_csv(results, spec),
        Format::Json => {
            let selected: Vec<&ResultRecord> = results.iter().filter(|r| spec.columns.contains(&r.cell.env)).collect();
            Ok(serde_json::to_string_pretty(&selected)? + "\n")
        }
    }
}

/// Parses the JSON form produced by [`render`].
pub fn parse_json(text: &str) -> Result<Vec<ResultRecord>> {
    Ok(serde_json::from_str(text)?)
}

fn opt(spec: &RenderSpec, v: Option<f64>) -> String {
    v.map_or_else(|| MISSING_MARKER.to_string(), |v| spec.fmt(v))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Match => "match",
        Verdict::Deviation => "deviation",
        Verdict::NotComparable => "not-comparable",
    }
}

fn env_name(d: &Deviation) -> &'static str {
    d.env.map_or("mixed", |e| e.label())
}

/// Renders a deviation report. `columns` and `per_instruction` are ignored;
/// ratios are unitless and cycles are per scalar op.
pub fn render_deviation(report: &DeviationReport, spec: &RenderSpec) -> Result<String> {
    if report.cells.is_empty() {
        return Err(Error::EmptyResults);
    }
    let header = [
        "Operation",
        "Outcome",
        "Env",
        "Kernel",
        "Measured",
        "Reference",
        "Measured/Reference",
        "Penalty",
        "Reference penalty",
        "Verdict",
    ];
    let row = |d: &Deviation| {
        vec![
            d.op.title().to_string(),
            d.outcome.row_label().to_string(),
            env_name(d).to_string(),
            d.variant.label().to_string(),
            opt(spec, d.measured),
            opt(spec, d.reference),
            opt(spec, d.absolute_ratio),
            opt(spec, d.measured_penalty),
            opt(spec, d.reference_penalty),
            verdict_name(d.verdict).to_string(),
        ]
    };
    match spec.format {
        Format::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(header).map_err(csv_err)?;
            for d in &report.cells {
                w.write_record(row(d)).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Markdown => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "Reference machine: {}; verdict factor {}x{}.\n",
                report.machine.as_deref().unwrap_or("none (ratios only)"),
                report.factor,
                if report.absolute {
                    ", absolute cycles compared"
                } else {
                    ""
                }
            );
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|---|---|---|---|---:|---:|---:|---:|---:|---|");
            for d in &report.cells {
                let _ = writeln!(out, "| {} |", row(d).join(" | "));
            }
            Ok(out)
        }
    }
}

/// Reading of a gradual-underflow penalty ratio.
pub fn penalty_verdict(ratio: f64) -> &'static str {
    if ratio >= FULLY_REPRODUCED_RATIO {
        "fully reproduced"
    } else if ratio >= CONSISTENT_RATIO {
        "consistent"
    } else {
        "not reproduced"
    }
}

fn find(report: &DeviationReport, op: OperationKind, outcome: OutcomeClass) -> Option<&Deviation> {
    report.cells.iter().find(|d| {
        d.op == op && d.outcome == outcome && d.env == Some(EnvMode::NoFtzDaz) && d.variant == Variant::RegAsm
    })
}

/// States, per op, the measured penalty of the underflowing case without
/// FTZ/DAZ and whether it reaches two orders of magnitude.
pub fn summarize(report: &DeviationReport) -> String {
    if !report.cells.iter().any(|d| d.measured_penalty.is_some()) {
        return "No comparable cells.\n".to_string();
    }
    let mut out = String::from("Underflow penalty without FTZ/DAZ, relative to normalized operands:\n");
    let mut line = |label: String, d: Option<&Deviation>, judge: fn(f64) -> &'static str| {
        let _ = match d.and_then(|d| d.measured_penalty.map(|p| (p, d.reference_penalty))) {
            None => writeln!(out, "  {label}: not measured"),
            Some((p, reference)) => {
                let r = reference.map_or_else(String::new, |r| format!(" (reference {r:.2}x)"));
                writeln!(out, "  {label}: {p:.2}x{r}, {}", judge(p))
            }
        };
    };
    for op in OperationKind::ALL {
        let outcome = match op {
            OperationKind::Fma => OutcomeClass::FmaAddUnderflow,
            _ => OutcomeClass::Underflow,
        };
        line(
            format!("{} {}", op.name(), outcome.name()),
            find(report, op, outcome),
            penalty_verdict,
        );
    }
    line(
        format!("{} {}", OperationKind::Fma.name(), OutcomeClass::FmaMulUnderflow.name()),
        find(report, OperationKind::Fma, OutcomeClass::FmaMulUnderflow),
        |p| {
            if p <= NO_PENALTY_RATIO {
                "no penalty, consistent with the reference"
            } else {
                "penalty observed, deviates from the reference"
            }
        },
    );
    if let Some(machine) = &report.machine {
        let comparable = report
            .cells
            .iter()
            .filter(|d| d.verdict != Verdict::NotComparable)
            .count();
        let matched = report.cells.iter().filter(|d| d.verdict == Verdict::Match).count();
        let _ = writeln!(
            out,
            "{matched} of {comparable} comparable cells match {machine} within {}x.",
            report.factor
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Cell;
    use crate::hwinfo::FeatureSet;
    use crate::kernels::KernelSpec;

    fn record(op: OperationKind, outcome: OutcomeClass, env: EnvMode, variant: Variant, cycles: f64) -> ResultRecord {
        ResultRecord {
            cell: Cell {
                op,
                outcome,
                env: env.config(),
                variant,
                extended: false,
            },
            kernel: KernelSpec::reg_asm(op),
            seed: 1,
            operands: None,
            verified_outcome: Some(outcome),
            mxcsr: Some(0x1f80),
            stats: None,
            cycles: Some(cycles),
            unit: CycleUnit::Core,
            core_cycles_per_tick: Some(1.0),
            error: None,
            notes: vec![],
            features: FeatureSet::baseline("GenuineIntel", "test cpu"),
            calibration: None,
            pinned_core: Some(0),
        }
    }

    #[test]
    fn markdown_row_shape() {
        let r = record(
            OperationKind::Add,
            OutcomeClass::Normalized,
            EnvMode::FtzDaz,
            Variant::RegAsm,
            0.25,
        );
        let md = render(&[r], &RenderSpec::default()).unwrap();
        assert!(md.contains("| Addition | normalized | 0.25 | n/a | ASM |"), "{md}");
    }

    #[test]
    fn error_cells_are_marked() {
        let mut r = record(
            OperationKind::Mul,
            OutcomeClass::Overflow,
            EnvMode::NoFtzDaz,
            Variant::RegAsm,
            1.0,
        );
        r.error = Some("boom, twice".into());
        r.cycles = None;
        let md = render(&[r.clone()], &RenderSpec::default()).unwrap();
        assert!(md.contains("| n/a | ERR |"));
        let csv = render(&[r], &RenderSpec::new(Format::Csv)).unwrap();
        assert!(csv.contains("ERR,core,\"ERR: boom, twice\""), "{csv}");
    }

    #[test]
    fn csv_precision() {
        let r = record(
            OperationKind::Add,
            OutcomeClass::Normalized,
            EnvMode::FtzDaz,
            Variant::RegAsm,
            0.25,
        );
        let csv = render(&[r], &RenderSpec::new(Format::Csv)).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "add,normalized,F+D,ASM,false,0.25,core,ok");
    }

    #[test]
    fn per_instruction_scales_by_four() {
        let r = record(
            OperationKind::Add,
            OutcomeClass::Normalized,
            EnvMode::FtzDaz,
            Variant::RegAsm,
            0.25,
        );
        let spec = RenderSpec {
            per_instruction: true,
            ..RenderSpec::new(Format::Csv)
        };
        assert!(render(&[r], &spec).unwrap().contains(",1.00,"));
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(render(&[], &RenderSpec::default()), Err(Error::EmptyResults)));
    }

    #[test]
    fn json_round_trip() {
        let rs = vec![
            record(
                OperationKind::Add,
                OutcomeClass::Normalized,
                EnvMode::FtzDaz,
                Variant::RegAsm,
                0.1 + 0.2,
            ),
            record(
                OperationKind::Div,
                OutcomeClass::DivByZero,
                EnvMode::NoFtzDaz,
                Variant::RegAsm,
                1.0 / 3.0,
            ),
        ];
        let text = render(&rs, &RenderSpec::new(Format::Json)).unwrap();
        assert_eq!(parse_json(&text).unwrap(), rs);
    }

    fn dev(op: OperationKind, outcome: OutcomeClass, penalty: f64) -> Deviation {
        Deviation {
            op,
            outcome,
            env: Some(EnvMode::NoFtzDaz),
            variant: Variant::RegAsm,
            measured: Some(penalty * 0.25),
            reference: None,
            absolute_ratio: None,
            measured_penalty: Some(penalty),
            reference_penalty: None,
            verdict: Verdict::NotComparable,
        }
    }

    #[test]
    fn summary_readings() {
        let report = DeviationReport {
            machine: None,
            factor: 2.0,
            absolute: false,
            cells: vec![
                dev(OperationKind::Add, OutcomeClass::Underflow, 152.8),
                dev(OperationKind::Mul, OutcomeClass::Underflow, 30.0),
                dev(OperationKind::Div, OutcomeClass::Underflow, 5.0),
                dev(OperationKind::Fma, OutcomeClass::FmaMulUnderflow, 1.02),
            ],
        };
        let s = summarize(&report);
        assert!(s.contains("add underflow: 152.80x, fully reproduced"), "{s}");
        assert!(s.contains("mul underflow: 30.00x, consistent"));
        assert!(s.contains("div underflow: 5.00x, not reproduced"));
        assert!(s.contains("fma fma-add-underflow: not measured"));
        assert!(s.contains("no penalty, consistent with the reference"));
    }

    #[test]
    fn empty_summary() {
        let report = DeviationReport {
            machine: None,
            factor: 2.0,
            absolute: false,
            cells: vec![],
        };
        assert_eq!(summarize(&report), "No comparable cells.\n");
    }
}
