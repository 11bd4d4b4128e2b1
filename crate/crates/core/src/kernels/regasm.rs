//! Register-resident kernels.
//!
//! Source registers are loaded once, then the timed loop issues only the
//! arithmetic body (and, for fma, the accumulator reset copies). Destinations
//! are stored after the loop so the work stays observable. Timestamps are
//! taken inside the asm block so register set-up is outside the timed region.

use std::arch::asm;

use crate::fpmodel::OperationKind;

/// Signature shared by every register kernel: returns elapsed TSC ticks.
///
/// # Safety
/// `lhs`, `rhs`, `addend` (fma only) must be readable and `out` writable for
/// `4 * unroll` doubles, `reps >= 1`, and the CPU must support the kernel's
/// instructions.
pub type RegKernelFn = unsafe fn(*const f64, *const f64, *const f64, *mut f64, u64) -> u64;

macro_rules! binary_body_u4 {
    ($m:literal) => {
        concat!(
            $m,
            " ymm9, ymm1, ymm5\n",
            $m,
            " ymm10, ymm2, ymm6\n",
            $m,
            " ymm11, ymm3, ymm7\n",
            $m,
            " ymm12, ymm4, ymm8\n",
        )
    };
}

macro_rules! binary_body_u2 {
    ($m:literal) => {
        concat!($m, " ymm5, ymm1, ymm3\n", $m, " ymm6, ymm2, ymm4\n",)
    };
}

macro_rules! fma_copies_u4 {
    () => {
        concat!(
            "vmovapd ymm12, ymm8\n",
            "vmovapd ymm13, ymm9\n",
            "vmovapd ymm14, ymm10\n",
            "vmovapd ymm15, ymm11\n",
        )
    };
}

macro_rules! fma_body_u4 {
    () => {
        concat!(
            "vmovapd ymm12, ymm8\n",
            "vfmadd231pd ymm12, ymm0, ymm4\n",
            "vmovapd ymm13, ymm9\n",
            "vfmadd231pd ymm13, ymm1, ymm5\n",
            "vmovapd ymm14, ymm10\n",
            "vfmadd231pd ymm14, ymm2, ymm6\n",
            "vmovapd ymm15, ymm11\n",
            "vfmadd231pd ymm15, ymm3, ymm7\n",
        )
    };
}

// Timestamp helpers: leave the start count in {t0}, the delta in rax.
macro_rules! timed_start {
    () => {
        "lfence\nrdtsc\nlfence\nshl rdx, 32\nor rax, rdx\nmov {t0}, rax\n"
    };
}

macro_rules! timed_end {
    () => {
        "rdtscp\nlfence\nshl rdx, 32\nor rax, rdx\nsub rax, {t0}\n"
    };
}

macro_rules! binary_kernel_u4 {
    ($name:ident, $m:literal) => {
        #[target_feature(enable = "avx")]
        unsafe fn $name(lhs: *const f64, rhs: *const f64, _addend: *const f64, out: *mut f64, reps: u64) -> u64 {
            let ticks: u64;
            asm!(
                "vmovupd ymm1, [{l}]",
                "vmovupd ymm2, [{l} + 32]",
                "vmovupd ymm3, [{l} + 64]",
                "vmovupd ymm4, [{l} + 96]",
                "vmovupd ymm5, [{r}]",
                "vmovupd ymm6, [{r} + 32]",
                "vmovupd ymm7, [{r} + 64]",
                "vmovupd ymm8, [{r} + 96]",
                timed_start!(),
                "2:",
                binary_body_u4!($m),
                "dec {n}",
                "jnz 2b",
                timed_end!(),
                "vmovupd [{o}], ymm9",
                "vmovupd [{o} + 32], ymm10",
                "vmovupd [{o} + 64], ymm11",
                "vmovupd [{o} + 96], ymm12",
                "vzeroupper",
                l = in(reg) lhs,
                r = in(reg) rhs,
                o = in(reg) out,
                n = inout(reg) reps => _,
                t0 = out(reg) _,
                out("rax") ticks,
                out("rdx") _,
                out("rcx") _,
                out("ymm1") _, out("ymm2") _, out("ymm3") _, out("ymm4") _,
                out("ymm5") _, out("ymm6") _, out("ymm7") _, out("ymm8") _,
                out("ymm9") _, out("ymm10") _, out("ymm11") _, out("ymm12") _,
                options(nostack),
            );
            ticks
        }
    };
}

macro_rules! binary_kernel_u2 {
    ($name:ident, $m:literal) => {
        #[target_feature(enable = "avx")]
        unsafe fn $name(lhs: *const f64, rhs: *const f64, _addend: *const f64, out: *mut f64, reps: u64) -> u64 {
            let ticks: u64;
            asm!(
                "vmovupd ymm1, [{l}]",
                "vmovupd ymm2, [{l} + 32]",
                "vmovupd ymm3, [{r}]",
                "vmovupd ymm4, [{r} + 32]",
                timed_start!(),
                "2:",
                binary_body_u2!($m),
                "dec {n}",
                "jnz 2b",
                timed_end!(),
                "vmovupd [{o}], ymm5",
                "vmovupd [{o} + 32], ymm6",
                "vzeroupper",
                l = in(reg) lhs,
                r = in(reg) rhs,
                o = in(reg) out,
                n = inout(reg) reps => _,
                t0 = out(reg) _,
                out("rax") ticks,
                out("rdx") _,
                out("rcx") _,
                out("ymm1") _, out("ymm2") _, out("ymm3") _,
                out("ymm4") _, out("ymm5") _, out("ymm6") _,
                options(nostack),
            );
            ticks
        }
    };
}

macro_rules! fma_kernel_u4 {
    ($name:ident, $body:ident) => {
        #[target_feature(enable = "avx,fma")]
        unsafe fn $name(lhs: *const f64, rhs: *const f64, addend: *const f64, out: *mut f64, reps: u64) -> u64 {
            let ticks: u64;
            asm!(
                "vmovupd ymm0, [{l}]",
                "vmovupd ymm1, [{l} + 32]",
                "vmovupd ymm2, [{l} + 64]",
                "vmovupd ymm3, [{l} + 96]",
                "vmovupd ymm4, [{r}]",
                "vmovupd ymm5, [{r} + 32]",
                "vmovupd ymm6, [{r} + 64]",
                "vmovupd ymm7, [{r} + 96]",
                "vmovupd ymm8, [{a}]",
                "vmovupd ymm9, [{a} + 32]",
                "vmovupd ymm10, [{a} + 64]",
                "vmovupd ymm11, [{a} + 96]",
                timed_start!(),
                "2:",
                $body!(),
                "dec {n}",
                "jnz 2b",
                timed_end!(),
                "vmovupd [{o}], ymm12",
                "vmovupd [{o} + 32], ymm13",
                "vmovupd [{o} + 64], ymm14",
                "vmovupd [{o} + 96], ymm15",
                "vzeroupper",
                l = in(reg) lhs,
                r = in(reg) rhs,
                a = in(reg) addend,
                o = in(reg) out,
                n = inout(reg) reps => _,
                t0 = out(reg) _,
                out("rax") ticks,
                out("rdx") _,
                out("rcx") _,
                out("ymm0") _, out("ymm1") _, out("ymm2") _, out("ymm3") _,
                out("ymm4") _, out("ymm5") _, out("ymm6") _, out("ymm7") _,
                out("ymm8") _, out("ymm9") _, out("ymm10") _, out("ymm11") _,
                out("ymm12") _, out("ymm13") _, out("ymm14") _, out("ymm15") _,
                options(nostack),
            );
            ticks
        }
    };
}

binary_kernel_u4!(add_u4, "vaddpd");
binary_kernel_u4!(mul_u4, "vmulpd");
binary_kernel_u4!(div_u4, "vdivpd");
binary_kernel_u2!(div_u2, "vdivpd");
fma_kernel_u4!(fma_u4, fma_body_u4);
fma_kernel_u4!(fma_copy_u4, fma_copies_u4);

/// Literal loop bodies as assembled, for comparison with the template.
pub const BODIES: [(OperationKind, usize, &str); 5] = [
    (OperationKind::Add, 4, binary_body_u4!("vaddpd")),
    (OperationKind::Mul, 4, binary_body_u4!("vmulpd")),
    (OperationKind::Div, 4, binary_body_u4!("vdivpd")),
    (OperationKind::Div, 2, binary_body_u2!("vdivpd")),
    (OperationKind::Fma, 4, fma_body_u4!()),
];

pub const FMA_COPY_BODY: &str = fma_copies_u4!();

pub const TIMED_START: &str = timed_start!();
pub const TIMED_END: &str = timed_end!();

/// Unroll factors with an assembled kernel.
pub fn supported_unrolls(op: OperationKind) -> &'static [usize] {
    match op {
        OperationKind::Div => &[2, 4],
        _ => &[4],
    }
}

pub fn kernel_for(op: OperationKind, unroll: usize) -> Option<RegKernelFn> {
    match (op, unroll) {
        (OperationKind::Add, 4) => Some(add_u4),
        (OperationKind::Mul, 4) => Some(mul_u4),
        (OperationKind::Div, 4) => Some(div_u4),
        (OperationKind::Div, 2) => Some(div_u2),
        (OperationKind::Fma, 4) => Some(fma_u4),
        _ => None,
    }
}

pub fn fma_copy_kernel() -> RegKernelFn {
    fma_copy_u4
}
