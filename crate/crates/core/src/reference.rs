//! Published per-operation cycle costs of four reference machines, plus
//! their instruction throughput and latency figures.
//!
//! The data ships as `data/reference.json`, versioned and keyed by
//! (machine, op, outcome, env, variant).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpenv::EnvMode;
use crate::fpmodel::{OperationKind, OutcomeClass};
use crate::kernels::{MemoryModel, Variant};

/// The bundled reference file, byte for byte.
pub const BUNDLED_JSON: &str = include_str!("../data/reference.json");
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub key: String,
    pub name: String,
    pub vendor: String,
    pub cpu: String,
    pub frequency_ghz: f64,
    pub cores: u32,
    pub isa: Vec<String>,
    /// Concurrent AVX add/multiply issue combinations per cycle.
    pub avx_add_mul_per_cy: String,
    pub avx_load_cy: Option<f64>,
    pub avx_store_cy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionEntry {
    pub machine: String,
    pub instruction: OperationKind,
    /// AVX instructions issued per cycle.
    pub throughput_per_cy: Range,
    pub latency_cy: Range,
    pub throughput_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleEntry {
    pub machine: String,
    pub op: OperationKind,
    pub outcome: OutcomeClass,
    pub env: EnvMode,
    pub variant: Variant,
    /// `None` where the machine lacks the instruction.
    pub cycles: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey<'a> {
    pub machine: &'a str,
    pub op: OperationKind,
    pub outcome: OutcomeClass,
    pub env: EnvMode,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub version: u32,
    pub source: String,
    pub machines: Vec<MachineInfo>,
    pub instructions: Vec<InstructionEntry>,
    pub cycles: Vec<CycleEntry>,
}

/// Rows of the reference cycle table, in order: memory-kernel rows first
/// within each operation, then the register-kernel rows.
pub fn table_rows() -> Vec<(OperationKind, OutcomeClass, Variant)> {
    let mut rows = Vec::new();
    for op in OperationKind::ALL {
        if op != OperationKind::Fma {
            rows.push((op, OutcomeClass::Normalized, Variant::MemC));
        }
        for &outcome in OutcomeClass::table_rows(op) {
            rows.push((op, outcome, Variant::RegAsm));
        }
    }
    rows
}

impl ReferenceTable {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_JSON).expect("bundled reference data is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ReferenceTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON with a trailing newline, the layout of the bundled file.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn machine(&self, key: &str) -> Result<&MachineInfo> {
        self.machines
            .iter()
            .find(|m| m.key == key)
            .ok_or_else(|| Error::UnknownMachine(key.to_string()))
    }

    pub fn machine_keys(&self) -> Vec<&str> {
        self.machines.iter().map(|m| m.key.as_str()).collect()
    }

    pub fn entry(&self, key: CellKey<'_>) -> Option<&CycleEntry> {
        self.cycles.iter().find(|e| {
            e.machine == key.machine
                && e.op == key.op
                && e.outcome == key.outcome
                && e.env == key.env
                && e.variant == key.variant
        })
    }

    /// Reference cycles for a cell; `None` when absent or not applicable.
    pub fn cycles(&self, key: CellKey<'_>) -> Option<f64> {
        self.entry(key).and_then(|e| e.cycles)
    }

    /// Cycles of a cell divided by the same machine's register-kernel
    /// normalized cost for that op and environment.
    pub fn penalty_ratio(&self, key: CellKey<'_>) -> Option<f64> {
        let base = self.cycles(CellKey {
            outcome: OutcomeClass::Normalized,
            variant: Variant::RegAsm,
            ..key
        })?;
        Some(self.cycles(key)? / base)
    }

    pub fn instruction(&self, machine: &str, op: OperationKind) -> Option<&InstructionEntry> {
        self.instructions
            .iter()
            .find(|e| e.machine == machine && e.instruction == op)
    }

    /// Load/store model of a machine, where its costs are tabulated.
    pub fn memory_model(&self, machine: &str) -> Result<MemoryModel> {
        let info = self.machine(machine)?;
        let (Some(load), Some(store)) = (info.avx_load_cy, info.avx_store_cy) else {
            return Err(Error::Reference(format!("no load/store costs for `{machine}`")));
        };
        let arith = [OperationKind::Add, OperationKind::Mul]
            .iter()
            .filter_map(|&op| self.instruction(machine, op))
            .map(|e| 1.0 / e.throughput_per_cy.min)
            .fold(0.0, f64::max);
        Ok(MemoryModel {
            avx_load_cy: load,
            avx_store_cy: store,
            avx_arith_cy: arith,
        })
    }

    /// Structural checks: version, every machine has every row in both
    /// environments exactly once, present values are positive.
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Reference(format!("unsupported version {}", self.version)));
        }
        let mut seen: BTreeMap<(String, OperationKind, OutcomeClass, EnvMode, Variant), usize> = BTreeMap::new();
        for e in &self.cycles {
            self.machine(&e.machine)?;
            if let Some(c) = e.cycles {
                if !(c.is_finite() && c > 0.0) {
                    return Err(Error::Reference(format!("non-positive cycles {c} in {e:?}")));
                }
            }
            *seen
                .entry((e.machine.clone(), e.op, e.outcome, e.env, e.variant))
                .or_default() += 1;
        }
        for m in &self.machines {
            for (op, outcome, variant) in table_rows() {
                for env in EnvMode::BOTH {
                    match seen.get(&(m.key.clone(), op, outcome, env, variant)) {
                        Some(1) => {}
                        Some(n) => {
                            return Err(Error::Reference(format!(
                                "{} {op} {outcome} {} {variant} listed {n} times",
                                m.key,
                                env.key()
                            )))
                        }
                        None => {
                            return Err(Error::Reference(format!(
                                "{} is missing {op} {outcome} {} {variant}",
                                m.key,
                                env.key()
                            )))
                        }
                    }
                }
            }
        }
        if seen.len() != self.cycles.len() {
            return Err(Error::Reference("duplicate cycle entries".into()));
        }
        Ok(())
    }
}
