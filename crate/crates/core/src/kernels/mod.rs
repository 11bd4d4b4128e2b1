//! Benchmark kernel bank.
//!
//! Two variants per operation: `MemC` streams L1-resident arrays and is
//! bound by loads and stores, `RegAsm` keeps every operand in registers and
//! issues only independent arithmetic.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpenv::{self, FpEnvConfig, CONTROL_BITS};
use crate::fpmodel::{Bits64, OperandSet, OperationKind};

#[cfg(target_arch = "x86_64")]
pub mod memc;
#[cfg(target_arch = "x86_64")]
pub mod regasm;
pub mod template;

/// Scalar operations a measurement should cover at least.
pub const DEFAULT_SCALAR_OP_FLOOR: u64 = 10_000_000;
pub const DEFAULT_REGASM_UNROLL: usize = 4;
pub const DEFAULT_MEMC_VECTOR_LENGTH: usize = 256;
/// L1 budget for all arrays of one memory kernel.
pub const MEMC_L1_BYTES: usize = 16 * 1024;
/// Doubles per 256-bit register.
pub const LANES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    MemC,
    RegAsm,
}

impl Variant {
    /// Label of the kernel column: `C` or `ASM`.
    pub const fn label(self) -> &'static str {
        match self {
            Variant::MemC => "C",
            Variant::RegAsm => "ASM",
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Variant::MemC => "memc",
            Variant::RegAsm => "regasm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "memc" | "c" => Ok(Variant::MemC),
            "regasm" | "asm" => Ok(Variant::RegAsm),
            _ => Err(format!("unknown kernel variant `{s}` (expected memc or regasm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub op: OperationKind,
    pub variant: Variant,
    pub vector_length: usize,
    /// Independent chains per loop body; 1 for the memory kernels.
    pub unroll: usize,
    /// Outer loop count.
    pub repetitions: u64,
}

impl KernelSpec {
    /// Register kernel with the default unroll of 4 (vector length 16).
    pub fn reg_asm(op: OperationKind) -> Self {
        Self::reg_asm_unrolled(op, DEFAULT_REGASM_UNROLL)
    }

    pub fn reg_asm_unrolled(op: OperationKind, unroll: usize) -> Self {
        KernelSpec {
            op,
            variant: Variant::RegAsm,
            vector_length: LANES * unroll,
            unroll,
            repetitions: 1,
        }
    }

    pub fn mem_c(op: OperationKind, vector_length: usize) -> Self {
        KernelSpec {
            op,
            variant: Variant::MemC,
            vector_length,
            unroll: 1,
            repetitions: 1,
        }
    }

    pub fn with_repetitions(mut self, repetitions: u64) -> Self {
        self.repetitions = repetitions;
        self
    }

    /// Smallest repetition count reaching `floor` scalar operations.
    pub fn with_scalar_op_floor(self, floor: u64) -> Self {
        let per_rep = self.vector_length.max(1) as u64;
        self.with_repetitions(floor.div_ceil(per_rep).max(1))
    }

    pub fn scalar_ops(&self) -> u64 {
        self.repetitions * self.vector_length as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidKernel(msg));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        match self.variant {
            Variant::RegAsm => {
                let min_unroll = if self.op == OperationKind::Div { 2 } else { 4 };
                if self.unroll < min_unroll {
                    return bad(format!(
                        "{} needs at least {min_unroll} independent chains to hide its latency, got {}",
                        self.op, self.unroll
                    ));
                }
                if self.vector_length != LANES * self.unroll {
                    return bad(format!(
                        "register kernels need vector_length = 4 * unroll ({}), got {}",
                        LANES * self.unroll,
                        self.vector_length
                    ));
                }
                #[cfg(target_arch = "x86_64")]
                if !regasm::supported_unrolls(self.op).contains(&self.unroll) {
                    return bad(format!(
                        "no {} register kernel with unroll {} (available: {:?})",
                        self.op,
                        self.unroll,
                        regasm::supported_unrolls(self.op)
                    ));
                }
            }
            Variant::MemC => {
                if self.vector_length == 0 || !self.vector_length.is_multiple_of(LANES) {
                    return bad(format!(
                        "memory kernels need a positive multiple of 4 elements, got {}",
                        self.vector_length
                    ));
                }
                let bytes = (self.op.arity() + 1) * self.vector_length * 8;
                if bytes > MEMC_L1_BYTES {
                    return bad(format!(
                        "arrays need {bytes} B, more than the {MEMC_L1_BYTES} B L1 budget"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Fails when the kernel covers fewer than `floor` scalar operations.
    pub fn check_scalar_op_floor(&self, floor: u64) -> Result<()> {
        if self.scalar_ops() < floor {
            return Err(Error::InvalidKernel(format!(
                "{} scalar operations is below the floor of {floor}",
                self.scalar_ops()
            )));
        }
        Ok(())
    }
}

/// Result of one timed kernel execution.
#[derive(Debug, Clone)]
pub struct KernelRun<'a> {
    pub spec: KernelSpec,
    pub operands: &'a OperandSet,
    pub env: FpEnvConfig,
    pub raw_cycles: u64,
    pub scalar_ops: u64,
    pub mxcsr_before: u32,
    pub mxcsr_after: u32,
    /// First result vector, read back after the timed region.
    pub output: Vec<Bits64>,
}

impl KernelRun<'_> {
    pub fn cycles_per_op(&self) -> f64 {
        self.raw_cycles as f64 / self.scalar_ops as f64
    }
}

fn require_features(op: OperationKind) -> Result<()> {
    #[cfg(target_arch = "x86_64")]
    {
        if !std::arch::is_x86_feature_detected!("avx") {
            return Err(Error::MissingFeature("avx"));
        }
        if op == OperationKind::Fma && !std::arch::is_x86_feature_detected!("fma") {
            return Err(Error::MissingFeature("fma3"));
        }
        Ok(())
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = op;
        Err(Error::UnsupportedHost("kernels need an x86-64 host".into()))
    }
}

fn check_env(env: &FpEnvConfig, raw: u32) -> Result<()> {
    let expected = env.apply_to(raw);
    if (raw ^ expected) & CONTROL_BITS != 0 {
        return Err(Error::EnvMismatch {
            expected: expected & CONTROL_BITS,
            actual: raw & CONTROL_BITS,
        });
    }
    Ok(())
}

/// Executes the kernel once and returns the cycles spent in its loop nest.
///
/// The caller is expected to have verified the operands, pinned the thread
/// and applied `env`; a register state different from `env` is an error.
pub fn run_kernel<'a>(spec: &KernelSpec, operands: &'a OperandSet, env: &FpEnvConfig) -> Result<KernelRun<'a>> {
    spec.validate()?;
    operands.validate()?;
    if operands.op != spec.op {
        return Err(Error::OperandMismatch {
            kernel: spec.op,
            operands: operands.op,
        });
    }
    if operands.len() != spec.vector_length {
        return Err(Error::MalformedOperands(format!(
            "kernel expects {} lanes, operands have {}",
            spec.vector_length,
            operands.len()
        )));
    }
    require_features(spec.op)?;

    #[cfg(target_arch = "x86_64")]
    {
        let lhs = operands.lhs_f64();
        let rhs = operands.rhs_f64();
        let addend = operands.addend_f64().unwrap_or_else(|| vec![0.0; lhs.len()]);
        let mxcsr_before = fpenv::read_raw()?;
        check_env(env, mxcsr_before)?;
        let (raw_cycles, out) = match spec.variant {
            Variant::RegAsm => {
                let kernel = regasm::kernel_for(spec.op, spec.unroll)
                    .ok_or_else(|| Error::InvalidKernel(format!("no register kernel for {spec:?}")))?;
                let mut out = vec![0.0; spec.vector_length];
                // SAFETY: all buffers hold vector_length = 4 * unroll doubles,
                // repetitions >= 1 and the features were checked above.
                let ticks = unsafe {
                    kernel(
                        lhs.as_ptr(),
                        rhs.as_ptr(),
                        addend.as_ptr(),
                        out.as_mut_ptr(),
                        spec.repetitions,
                    )
                };
                (ticks, out)
            }
            Variant::MemC => {
                let kernel: memc::MemKernelFn = match spec.op {
                    OperationKind::Add => memc::add,
                    OperationKind::Mul => memc::mul,
                    OperationKind::Div => memc::div,
                    OperationKind::Fma => memc::fma,
                };
                let b = memc::AlignedArray::from_slice(&lhs);
                let c = memc::AlignedArray::from_slice(&rhs);
                let d = memc::AlignedArray::from_slice(&addend);
                let mut a = memc::AlignedArray::zeroed(spec.vector_length);
                let n = spec.vector_length;
                // SAFETY: aligned arrays of n doubles, n % 4 == 0 (validated),
                // features checked above.
                let ticks = unsafe {
                    // warm the cache; untimed
                    kernel(a.as_mut_ptr(), b.as_ptr(), c.as_ptr(), d.as_ptr(), n, 1);
                    kernel(a.as_mut_ptr(), b.as_ptr(), c.as_ptr(), d.as_ptr(), n, spec.repetitions)
                };
                (ticks, a.to_vec())
            }
        };
        let mxcsr_after = fpenv::read_raw()?;
        check_env(env, mxcsr_after)?;
        Ok(KernelRun {
            spec: *spec,
            operands,
            env: *env,
            raw_cycles,
            scalar_ops: spec.scalar_ops(),
            mxcsr_before,
            mxcsr_after,
            output: std::hint::black_box(out).into_iter().map(Bits64::from_f64).collect(),
        })
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = env;
        Err(Error::UnsupportedHost("kernels need an x86-64 host".into()))
    }
}

/// Cycles per scalar operation spent on the fma accumulator-reset copies
/// alone, `repetitions` passes over 16 lanes.
pub fn fma_copy_overhead(repetitions: u64) -> Result<f64> {
    require_features(OperationKind::Fma)?;
    #[cfg(target_arch = "x86_64")]
    {
        let zeros = [0.0f64; 16];
        let mut out = [0.0f64; 16];
        let reps = repetitions.max(1);
        let kernel = regasm::fma_copy_kernel();
        // SAFETY: 16-lane buffers, reps >= 1, fma checked.
        let ticks = unsafe { kernel(zeros.as_ptr(), zeros.as_ptr(), zeros.as_ptr(), out.as_mut_ptr(), reps) };
        Ok(ticks as f64 / (reps * 16) as f64)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        let _ = repetitions;
        Err(Error::UnsupportedHost("kernels need an x86-64 host".into()))
    }
}

/// Cost parameters of the load/store-bound throughput model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Cycles per full 256-bit load.
    pub avx_load_cy: f64,
    /// Cycles per full 256-bit store.
    pub avx_store_cy: f64,
    /// Cycles per 256-bit add or multiply.
    pub avx_arith_cy: f64,
}

impl MemoryModel {
    /// Single load port, half-rate 256-bit stores, one add and one multiply unit.
    pub const SANDY_BRIDGE_CLASS: MemoryModel = MemoryModel {
        avx_load_cy: 1.0,
        avx_store_cy: 2.0,
        avx_arith_cy: 1.0,
    };
}

/// Predicted cycles per scalar operation of the memory kernel for add or
/// multiply: loads, the store and the arithmetic overlap, so the slowest
/// of them bounds one 4-wide iteration.
pub fn predict_memc_cycles(op: OperationKind, model: &MemoryModel) -> Result<f64> {
    if !matches!(op, OperationKind::Add | OperationKind::Mul) {
        return Err(Error::UnmodeledOp(op));
    }
    let body = template::memc_body(op);
    let loads = body.iter().filter(|i| i.is_load()).count() as f64;
    let stores = body.iter().filter(|i| i.is_store()).count() as f64;
    let iteration = (loads * model.avx_load_cy)
        .max(stores * model.avx_store_cy)
        .max(model.avx_arith_cy);
    Ok(iteration / LANES as f64)
}

/// Human-readable listing of the instructions a kernel executes.
pub fn dump_kernel(spec: &KernelSpec) -> Result<String> {
    spec.validate()?;
    let mut out = String::new();
    let mut line = |s: &str| {
        out.push_str(s);
        out.push('\n');
    };
    line(&format!(
        "; {} {} vector_length={} unroll={} repetitions={}",
        spec.op, spec.variant, spec.vector_length, spec.unroll, spec.repetitions
    ));
    let body = template::body(spec.op, spec.variant, spec.unroll);
    match spec.variant {
        Variant::RegAsm => {
            let plan = template::RegisterPlan::new(spec.op, spec.unroll);
            line("; set-up, untimed");
            for (name, regs) in [("lhs", &plan.lhs), ("rhs", &plan.rhs), ("addend", &plan.addend)] {
                for (k, r) in regs.iter().enumerate() {
                    line(&format!("vmovupd ymm{r}, [{name} + {}]", 32 * k));
                }
            }
            line("; timed");
            crate::cycleclock::START_SEQUENCE.iter().for_each(|s| line(s));
            line(".loop:");
            body.iter().for_each(|i| line(&format!("    {i}")));
            line("    dec n");
            line("    jnz .loop");
            crate::cycleclock::END_SEQUENCE.iter().for_each(|s| line(s));
            line("; results, untimed");
            for (k, r) in plan.dst.iter().enumerate() {
                line(&format!("vmovupd [out + {}], ymm{r}", 32 * k));
            }
            line("vzeroupper");
        }
        Variant::MemC => {
            line("; timed");
            crate::cycleclock::START_SEQUENCE.iter().for_each(|s| line(s));
            line(".rep:");
            line(&format!("    .elem: ; i = 0, 4, .., {}", spec.vector_length - LANES));
            body.iter().for_each(|i| line(&format!("        {i}")));
            line("    next .rep");
            crate::cycleclock::END_SEQUENCE.iter().for_each(|s| line(s));
        }
    }
    if let Err(e) = template::check_independence(&body) {
        line(&format!("; dependency: {e}"));
    }
    Ok(out)
}
