//! Structured description of the kernel loop bodies.
//!
//! The register-resident kernels in `regasm` are written with `asm!`, whose
//! template has to be a literal. Their bodies are produced by macros; the
//! functions here describe the same bodies as data so they can be dumped,
//! checked for dependencies, and compared against the literal text.

use std::collections::HashMap;
use std::fmt;

use crate::fpmodel::OperationKind;

use super::Variant;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Ymm(u8),
    /// Memory operand, e.g. `[b + i*8]`.
    Mem(String),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Ymm(r) => write!(f, "ymm{r}"),
            Operand::Mem(m) => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instr {
    pub mnemonic: &'static str,
    pub dst: Operand,
    pub srcs: Vec<Operand>,
    /// The destination is also an input (destructive three-operand FMA).
    pub reads_dst: bool,
    /// Independent chain (unroll slot) this instruction belongs to.
    pub chain: usize,
}

impl Instr {
    pub fn reads(&self) -> impl Iterator<Item = &Operand> {
        self.srcs.iter().chain(self.reads_dst.then_some(&self.dst))
    }

    pub fn is_load(&self) -> bool {
        self.srcs.iter().any(|s| matches!(s, Operand::Mem(_)))
    }

    pub fn is_store(&self) -> bool {
        matches!(self.dst, Operand::Mem(_))
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.mnemonic, self.dst)?;
        for s in &self.srcs {
            write!(f, ", {s}")?;
        }
        Ok(())
    }
}

pub const fn arith_mnemonic(op: OperationKind) -> &'static str {
    match op {
        OperationKind::Add => "vaddpd",
        OperationKind::Mul => "vmulpd",
        OperationKind::Div => "vdivpd",
        OperationKind::Fma => "vfmadd231pd",
    }
}

/// Register assignment of a register-resident kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterPlan {
    pub lhs: Vec<u8>,
    pub rhs: Vec<u8>,
    pub addend: Vec<u8>,
    pub dst: Vec<u8>,
}

impl RegisterPlan {
    /// Binary ops use ymm1.. for lhs, then rhs, then destinations; fma needs
    /// all sixteen registers at unroll 4 and starts at ymm0.
    pub fn new(op: OperationKind, unroll: usize) -> Self {
        let range = |start: usize| (start..start + unroll).map(|r| r as u8).collect::<Vec<_>>();
        match op {
            OperationKind::Fma => RegisterPlan {
                lhs: range(0),
                rhs: range(unroll),
                addend: range(2 * unroll),
                dst: range(3 * unroll),
            },
            _ => RegisterPlan {
                lhs: range(1),
                rhs: range(1 + unroll),
                addend: Vec::new(),
                dst: range(1 + 2 * unroll),
            },
        }
    }

    pub fn registers_used(&self) -> usize {
        self.lhs.len() + self.rhs.len() + self.addend.len() + self.dst.len()
    }
}

/// Loop body of the register-resident kernel: one instruction per chain,
/// plus the accumulator reset for fma.
pub fn regasm_body(op: OperationKind, unroll: usize) -> Vec<Instr> {
    let plan = RegisterPlan::new(op, unroll);
    let mut body = Vec::new();
    for chain in 0..unroll {
        let dst = Operand::Ymm(plan.dst[chain]);
        let lhs = Operand::Ymm(plan.lhs[chain]);
        let rhs = Operand::Ymm(plan.rhs[chain]);
        if op == OperationKind::Fma {
            body.push(Instr {
                mnemonic: "vmovapd",
                dst: dst.clone(),
                srcs: vec![Operand::Ymm(plan.addend[chain])],
                reads_dst: false,
                chain,
            });
            body.push(Instr {
                mnemonic: arith_mnemonic(op),
                dst,
                srcs: vec![lhs, rhs],
                reads_dst: true,
                chain,
            });
        } else {
            body.push(Instr {
                mnemonic: arith_mnemonic(op),
                dst,
                srcs: vec![lhs, rhs],
                reads_dst: false,
                chain,
            });
        }
    }
    body
}

/// Loop body of the fma accumulator-reset probe: only the register copies.
pub fn fma_copy_body(unroll: usize) -> Vec<Instr> {
    regasm_body(OperationKind::Fma, unroll)
        .into_iter()
        .filter(|i| i.mnemonic == "vmovapd")
        .collect()
}

/// Per-AVX-iteration instruction mix of the memory kernel, as issued by the
/// intrinsics in `memc`.
pub fn memc_body(op: OperationKind) -> Vec<Instr> {
    let mem = |name: &str| Operand::Mem(format!("[{name} + i*8]"));
    let load = |reg: u8, name: &str| Instr {
        mnemonic: "vmovapd",
        dst: Operand::Ymm(reg),
        srcs: vec![mem(name)],
        reads_dst: false,
        chain: 0,
    };
    let mut body = vec![load(0, "b"), load(1, "c")];
    match op {
        OperationKind::Fma => {
            body.push(load(2, "d"));
            body.push(Instr {
                mnemonic: "vfmadd213pd",
                dst: Operand::Ymm(0),
                srcs: vec![Operand::Ymm(1), Operand::Ymm(2)],
                reads_dst: true,
                chain: 0,
            });
        }
        _ => body.push(Instr {
            mnemonic: arith_mnemonic(op),
            dst: Operand::Ymm(0),
            srcs: vec![Operand::Ymm(0), Operand::Ymm(1)],
            reads_dst: false,
            chain: 0,
        }),
    }
    body.push(Instr {
        mnemonic: "vmovapd",
        dst: mem("a"),
        srcs: vec![Operand::Ymm(0)],
        reads_dst: false,
        chain: 0,
    });
    body
}

pub fn body(op: OperationKind, variant: Variant, unroll: usize) -> Vec<Instr> {
    match variant {
        Variant::RegAsm => regasm_body(op, unroll),
        Variant::MemC => memc_body(op),
    }
}

/// Renders a body the way the asm templates spell it, one line each.
pub fn render(body: &[Instr]) -> String {
    body.iter().map(|i| format!("{i}\n")).collect()
}

/// Rejects bodies with a dependency between chains or carried across loop
/// iterations.
pub fn check_independence(body: &[Instr]) -> Result<(), String> {
    let mut writer: HashMap<&Operand, usize> = HashMap::new();
    let written_later: Vec<&Operand> = body.iter().map(|i| &i.dst).collect();
    for (pos, instr) in body.iter().enumerate() {
        for src in instr.reads() {
            match writer.get(src) {
                Some(&chain) if chain != instr.chain => {
                    return Err(format!("`{instr}` reads {src} written by chain {chain}"));
                }
                Some(_) => {}
                None if written_later[pos..].contains(&src) => {
                    return Err(format!("`{instr}` reads {src} before it is written: loop-carried"));
                }
                None => {}
            }
        }
        if let Some(&chain) = writer.get(&instr.dst) {
            if chain != instr.chain {
                return Err(format!("`{instr}` overwrites {} of chain {chain}", instr.dst));
            }
        }
        writer.insert(&instr.dst, instr.chain);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_body_matches_listing() {
        let text = render(&regasm_body(OperationKind::Mul, 4));
        assert_eq!(
            text,
            "vmulpd ymm9, ymm1, ymm5\nvmulpd ymm10, ymm2, ymm6\nvmulpd ymm11, ymm3, ymm7\nvmulpd ymm12, ymm4, ymm8\n"
        );
    }

    #[test]
    fn regasm_bodies_are_independent() {
        for op in OperationKind::ALL {
            check_independence(&regasm_body(op, 4)).unwrap();
        }
        check_independence(&regasm_body(OperationKind::Div, 2)).unwrap();
    }

    #[test]
    fn dependencies_are_detected() {
        let mut body = regasm_body(OperationKind::Add, 4);
        // chain 1 reads chain 0's destination
        body[1].srcs[0] = body[0].dst.clone();
        assert!(check_independence(&body).is_err());

        // accumulate into the destination without the reset copy
        let body: Vec<_> = regasm_body(OperationKind::Fma, 4)
            .into_iter()
            .filter(|i| i.mnemonic != "vmovapd")
            .collect();
        assert!(check_independence(&body).unwrap_err().contains("loop-carried"));
    }

    #[test]
    fn memc_instruction_mix() {
        for op in [OperationKind::Add, OperationKind::Mul, OperationKind::Div] {
            let body = memc_body(op);
            assert_eq!(body.iter().filter(|i| i.is_load()).count(), 2);
            assert_eq!(body.iter().filter(|i| i.is_store()).count(), 1);
        }
        let fma = memc_body(OperationKind::Fma);
        assert_eq!(fma.iter().filter(|i| i.is_load()).count(), 3);
        assert_eq!(fma.iter().filter(|i| i.is_store()).count(), 1);
    }

    #[test]
    fn register_budget() {
        assert_eq!(RegisterPlan::new(OperationKind::Fma, 4).registers_used(), 16);
        assert_eq!(RegisterPlan::new(OperationKind::Add, 4).registers_used(), 12);
        assert!(RegisterPlan::new(OperationKind::Add, 4).dst.iter().all(|&r| r < 16));
    }
}
