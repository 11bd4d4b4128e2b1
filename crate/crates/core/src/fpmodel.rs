//! Bit-level model of IEEE-754 binary64 values.
//!
//! Classification here is pure integer logic on the bit pattern and never
//! touches the FPU, so it can serve as an oracle for what the hardware did.
//! Operand synthesis builds per-lane vectors that land every lane of a
//! benchmark in one [`OutcomeClass`].

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fpenv::{self, FpEnvConfig};

pub const SIGN_MASK: u64 = 0x8000_0000_0000_0000;
pub const EXPONENT_MASK: u64 = 0x7FF0_0000_0000_0000;
pub const MANTISSA_MASK: u64 = 0x000F_FFFF_FFFF_FFFF;
pub const EXPONENT_BIAS: i32 = 1023;
const QUIET_BIT: u64 = 1 << 51;

/// Low mantissa bits that vary between lanes of one operand vector.
pub const LANE_PERTURBATION_MASK: u64 = 0xFF;

/// Seed used when the caller does not pick one.
pub const DEFAULT_SEED: u64 = 0x5EED_F00D;

/// Raw binary64 bit pattern.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Bits64(pub u64);

impl Bits64 {
    pub const fn from_f64(value: f64) -> Self {
        Bits64(value.to_bits())
    }

    pub const fn to_f64(self) -> f64 {
        f64::from_bits(self.0)
    }

    pub const fn sign(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    /// Biased exponent field, 0..=2047.
    pub const fn exponent_field(self) -> u16 {
        ((self.0 & EXPONENT_MASK) >> 52) as u16
    }

    pub const fn mantissa(self) -> u64 {
        self.0 & MANTISSA_MASK
    }

    /// Reassembles a pattern from its fields. Out-of-range fields are masked.
    pub const fn from_parts(sign: bool, exponent_field: u16, mantissa: u64) -> Self {
        let sign = if sign { SIGN_MASK } else { 0 };
        Bits64(sign | (((exponent_field as u64) << 52) & EXPONENT_MASK) | (mantissa & MANTISSA_MASK))
    }

    /// `(1 + mantissa / 2^52) * 2^exponent`, for exponents in the normal range.
    pub const fn normal(negative: bool, exponent: i32, mantissa: u64) -> Self {
        assert!(exponent >= -1022 && exponent <= 1023);
        Self::from_parts(negative, (exponent + EXPONENT_BIAS) as u16, mantissa)
    }

    pub const fn classify(self) -> OperandClass {
        classify(self)
    }
}

impl fmt::Debug for Bits64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl fmt::Display for Bits64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl FromStr for Bits64 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .ok_or_else(|| format!("`{s}` is missing the 0x prefix"))?;
        u64::from_str_radix(digits, 16)
            .map(Bits64)
            .map_err(|e| format!("`{s}`: {e}"))
    }
}

impl Serialize for Bits64 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bits64 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Category of a single binary64 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperandClass {
    PosZero,
    NegZero,
    Subnormal,
    Normal,
    PosInf,
    NegInf,
    QuietNaN,
    SignalingNaN,
}

impl OperandClass {
    pub const fn is_zero(self) -> bool {
        matches!(self, OperandClass::PosZero | OperandClass::NegZero)
    }

    pub const fn is_nan(self) -> bool {
        matches!(self, OperandClass::QuietNaN | OperandClass::SignalingNaN)
    }

    pub const fn is_infinite(self) -> bool {
        matches!(self, OperandClass::PosInf | OperandClass::NegInf)
    }
}

/// Classifies a bit pattern using integer operations only.
pub const fn classify(bits: Bits64) -> OperandClass {
    let exponent = bits.exponent_field();
    let mantissa = bits.mantissa();
    match (exponent, mantissa) {
        (0, 0) if bits.sign() => OperandClass::NegZero,
        (0, 0) => OperandClass::PosZero,
        (0, _) => OperandClass::Subnormal,
        (0x7FF, 0) if bits.sign() => OperandClass::NegInf,
        (0x7FF, 0) => OperandClass::PosInf,
        (0x7FF, m) if m & QUIET_BIT != 0 => OperandClass::QuietNaN,
        (0x7FF, _) => OperandClass::SignalingNaN,
        _ => OperandClass::Normal,
    }
}

/// Benchmarked operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperationKind {
    Add,
    Mul,
    Div,
    Fma,
}

impl OperationKind {
    pub const ALL: [OperationKind; 4] = [
        OperationKind::Add,
        OperationKind::Mul,
        OperationKind::Div,
        OperationKind::Fma,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            OperationKind::Add => "add",
            OperationKind::Mul => "mul",
            OperationKind::Div => "div",
            OperationKind::Fma => "fma",
        }
    }

    /// Heading used in rendered tables.
    pub const fn title(self) -> &'static str {
        match self {
            OperationKind::Add => "Addition",
            OperationKind::Mul => "Multiplication",
            OperationKind::Div => "Division",
            OperationKind::Fma => "Fused-Multiply-Add",
        }
    }

    pub const fn arity(self) -> usize {
        match self {
            OperationKind::Fma => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OperationKind::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operation `{s}` (expected add, mul, div or fma)"))
    }
}

/// What a benchmark's operands provoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeClass {
    Normalized,
    Overflow,
    Underflow,
    DenormalLhs,
    DenormalRhs,
    DenormalBoth,
    #[serde(rename = "nan-input")]
    NaNInput,
    DivByZero,
    FmaMulOverflow,
    FmaAddOverflow,
    FmaMulUnderflow,
    FmaAddUnderflow,
    DenormalDividend,
    DenormalDivisor,
}

const ADD_MUL_ROWS: &[OutcomeClass] = &[
    OutcomeClass::Normalized,
    OutcomeClass::Overflow,
    OutcomeClass::Underflow,
    OutcomeClass::DenormalLhs,
    OutcomeClass::DenormalRhs,
    OutcomeClass::DenormalBoth,
    OutcomeClass::NaNInput,
];

const DIV_ROWS: &[OutcomeClass] = &[
    OutcomeClass::Normalized,
    OutcomeClass::Overflow,
    OutcomeClass::Underflow,
    OutcomeClass::DivByZero,
    OutcomeClass::DenormalDividend,
    OutcomeClass::DenormalDivisor,
    OutcomeClass::DenormalBoth,
];

const FMA_ROWS: &[OutcomeClass] = &[
    OutcomeClass::Normalized,
    OutcomeClass::FmaMulOverflow,
    OutcomeClass::FmaAddOverflow,
    OutcomeClass::FmaMulUnderflow,
    OutcomeClass::FmaAddUnderflow,
];

const NAN_ONLY: &[OutcomeClass] = &[OutcomeClass::NaNInput];
const NONE: &[OutcomeClass] = &[];

impl OutcomeClass {
    pub const ALL: [OutcomeClass; 14] = [
        OutcomeClass::Normalized,
        OutcomeClass::Overflow,
        OutcomeClass::Underflow,
        OutcomeClass::DenormalLhs,
        OutcomeClass::DenormalRhs,
        OutcomeClass::DenormalBoth,
        OutcomeClass::NaNInput,
        OutcomeClass::DivByZero,
        OutcomeClass::FmaMulOverflow,
        OutcomeClass::FmaAddOverflow,
        OutcomeClass::FmaMulUnderflow,
        OutcomeClass::FmaAddUnderflow,
        OutcomeClass::DenormalDividend,
        OutcomeClass::DenormalDivisor,
    ];

    /// The measured rows for `op`, in table order.
    pub fn table_rows(op: OperationKind) -> &'static [OutcomeClass] {
        match op {
            OperationKind::Add | OperationKind::Mul => ADD_MUL_ROWS,
            OperationKind::Div => DIV_ROWS,
            OperationKind::Fma => FMA_ROWS,
        }
    }

    /// Extra rows with no reference measurement, available on request.
    pub fn extended_rows(op: OperationKind) -> &'static [OutcomeClass] {
        match op {
            OperationKind::Add | OperationKind::Mul => NONE,
            OperationKind::Div | OperationKind::Fma => NAN_ONLY,
        }
    }

    pub fn is_applicable(self, op: OperationKind) -> bool {
        Self::table_rows(op).contains(&self) || Self::extended_rows(op).contains(&self)
    }

    pub fn is_extended(self, op: OperationKind) -> bool {
        Self::extended_rows(op).contains(&self)
    }

    pub const fn name(self) -> &'static str {
        match self {
            OutcomeClass::Normalized => "normalized",
            OutcomeClass::Overflow => "overflow",
            OutcomeClass::Underflow => "underflow",
            OutcomeClass::DenormalLhs => "denormal-lhs",
            OutcomeClass::DenormalRhs => "denormal-rhs",
            OutcomeClass::DenormalBoth => "denormal-both",
            OutcomeClass::NaNInput => "nan-input",
            OutcomeClass::DivByZero => "div-by-zero",
            OutcomeClass::FmaMulOverflow => "fma-mul-overflow",
            OutcomeClass::FmaAddOverflow => "fma-add-overflow",
            OutcomeClass::FmaMulUnderflow => "fma-mul-underflow",
            OutcomeClass::FmaAddUnderflow => "fma-add-underflow",
            OutcomeClass::DenormalDividend => "denormal-dividend",
            OutcomeClass::DenormalDivisor => "denormal-divisor",
        }
    }

    /// Row label as printed in the result tables.
    pub const fn row_label(self) -> &'static str {
        match self {
            OutcomeClass::Normalized => "normalized",
            OutcomeClass::Overflow => "overflow",
            OutcomeClass::Underflow => "underflow",
            OutcomeClass::DenormalLhs => "denormal l",
            OutcomeClass::DenormalRhs => "denormal r",
            OutcomeClass::DenormalBoth => "both denormals",
            OutcomeClass::NaNInput => "NaN",
            OutcomeClass::DivByZero => "div-by-zero",
            OutcomeClass::FmaMulOverflow => "multiplication overflow",
            OutcomeClass::FmaAddOverflow => "addition overflow",
            OutcomeClass::FmaMulUnderflow => "multiplication underflow",
            OutcomeClass::FmaAddUnderflow => "addition underflow",
            OutcomeClass::DenormalDividend => "denormal dividend",
            OutcomeClass::DenormalDivisor => "denormal divisor",
        }
    }
}

impl fmt::Display for OutcomeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutcomeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OutcomeClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown outcome class `{s}`"))
    }
}

/// Operand vectors for one benchmark cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandSet {
    pub op: OperationKind,
    pub lhs: Vec<Bits64>,
    pub rhs: Vec<Bits64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addend: Option<Vec<Bits64>>,
    pub expected_outcome: OutcomeClass,
}

impl OperandSet {
    pub fn len(&self) -> usize {
        self.lhs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lhs.is_empty()
    }

    /// Checks vector shapes against the operation.
    pub fn validate(&self) -> Result<()> {
        let n = self.lhs.len();
        if n == 0 {
            return Err(Error::MalformedOperands("empty operand vectors".into()));
        }
        if self.rhs.len() != n {
            return Err(Error::MalformedOperands(format!(
                "lhs has {n} lanes, rhs has {}",
                self.rhs.len()
            )));
        }
        match (&self.addend, self.op) {
            (Some(addend), OperationKind::Fma) if addend.len() == n => Ok(()),
            (Some(addend), OperationKind::Fma) => Err(Error::MalformedOperands(format!(
                "lhs has {n} lanes, addend has {}",
                addend.len()
            ))),
            (None, OperationKind::Fma) => Err(Error::MalformedOperands("fma requires an addend vector".into())),
            (Some(_), op) => Err(Error::MalformedOperands(format!("{op} takes no addend"))),
            (None, _) => Ok(()),
        }
    }

    pub fn lhs_f64(&self) -> Vec<f64> {
        self.lhs.iter().map(|b| b.to_f64()).collect()
    }

    pub fn rhs_f64(&self) -> Vec<f64> {
        self.rhs.iter().map(|b| b.to_f64()).collect()
    }

    pub fn addend_f64(&self) -> Option<Vec<f64>> {
        self.addend.as_ref().map(|a| a.iter().map(|b| b.to_f64()).collect())
    }
}

// Base patterns. All have zero low bits so lane perturbation stays inside
// LANE_PERTURBATION_MASK.
const ONE: Bits64 = Bits64::normal(false, 0, 0);
const QNAN: Bits64 = Bits64(0x7FF8_0000_0000_0000);
const POS_ZERO: Bits64 = Bits64(0);
const HALF_MANTISSA: u64 = 1 << 51;
/// 2^-1023, the largest power of two below the normal range.
const SUBNORMAL: Bits64 = Bits64::from_parts(false, 0, HALF_MANTISSA);
/// 0.75 * 2^-1022; two of these sum to a normal value.
const SUBNORMAL_THREE_QUARTERS: Bits64 = Bits64::from_parts(false, 0, 3 << 50);

const fn pow2(exponent: i32) -> Bits64 {
    Bits64::normal(false, exponent, 0)
}

const fn one_and_half(exponent: i32) -> Bits64 {
    Bits64::normal(false, exponent, HALF_MANTISSA)
}

const fn neg(b: Bits64) -> Bits64 {
    Bits64(b.0 | SIGN_MASK)
}

/// Base operand patterns `(lhs, rhs, addend)` for each supported cell.
fn recipe(op: OperationKind, outcome: OutcomeClass) -> Option<(Bits64, Bits64, Option<Bits64>)> {
    use OperationKind::*;
    use OutcomeClass::*;
    let r = match (op, outcome) {
        (Add, Normalized) => (ONE, ONE, None),
        (Add, Overflow) => (one_and_half(1023), one_and_half(1023), None),
        // 1.5 * 2^-1022 - 2^-1022 = 2^-1023
        (Add, Underflow) => (one_and_half(-1022), neg(pow2(-1022)), None),
        (Add, DenormalLhs) => (SUBNORMAL, ONE, None),
        (Add, DenormalRhs) => (ONE, SUBNORMAL, None),
        (Add, DenormalBoth) => (SUBNORMAL_THREE_QUARTERS, SUBNORMAL_THREE_QUARTERS, None),
        (Add, NaNInput) => (QNAN, ONE, None),

        (Mul, Normalized) => (ONE, ONE, None),
        (Mul, Overflow) => (pow2(600), pow2(600), None),
        // 2^-512 * 2^-540 = 2^-1052
        (Mul, Underflow) => (pow2(-512), pow2(-540), None),
        (Mul, DenormalLhs) => (SUBNORMAL, pow2(100), None),
        (Mul, DenormalRhs) => (pow2(100), SUBNORMAL, None),
        (Mul, DenormalBoth) => (SUBNORMAL, SUBNORMAL, None),
        (Mul, NaNInput) => (QNAN, ONE, None),

        (Div, Normalized) => (ONE, ONE, None),
        (Div, Overflow) => (pow2(600), pow2(-600), None),
        // 2^-540 / 2^512 = 2^-1052
        (Div, Underflow) => (pow2(-540), pow2(512), None),
        (Div, DivByZero) => (ONE, POS_ZERO, None),
        (Div, DenormalDividend) => (SUBNORMAL, pow2(-100), None),
        (Div, DenormalDivisor) => (pow2(-100), SUBNORMAL, None),
        (Div, DenormalBoth) => (SUBNORMAL, SUBNORMAL, None),
        (Div, NaNInput) => (QNAN, ONE, None),

        (Fma, Normalized) => (ONE, ONE, Some(ONE)),
        (Fma, FmaMulOverflow) => (pow2(600), pow2(600), Some(ONE)),
        // product 1.5 * 2^1023 is finite, adding it to itself is not
        (Fma, FmaAddOverflow) => (one_and_half(1000), pow2(23), Some(one_and_half(1023))),
        // product 2^-1052 vanishes into the rounding of the normal addend
        (Fma, FmaMulUnderflow) => (pow2(-512), pow2(-540), Some(ONE)),
        // product 1.5 * 2^-1022 is normal, the sum 2^-1023 is not
        (Fma, FmaAddUnderflow) => (one_and_half(-511), pow2(-511), Some(neg(pow2(-1022)))),
        (Fma, NaNInput) => (QNAN, ONE, Some(ONE)),
        _ => return None,
    };
    Some(r)
}

/// Fills `n` lanes from `base`, varying the low mantissa bits. Zeros stay
/// exact zeros. Lanes are pairwise distinct for `n <= 256`.
fn perturbed_lanes(base: Bits64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Bits64> {
    if classify(base).is_zero() {
        return vec![base; n];
    }
    let mut low: Vec<u64> = (0..=LANE_PERTURBATION_MASK).collect();
    low.shuffle(rng);
    (0..n).map(|i| Bits64(base.0 | low[i % low.len()])).collect()
}

/// Builds operands provoking `outcome` with the default seed.
pub fn make_operands(op: OperationKind, outcome: OutcomeClass, vector_length: usize) -> Result<OperandSet> {
    make_operands_seeded(op, outcome, vector_length, DEFAULT_SEED)
}

/// Builds operands provoking `outcome`; `seed` drives the lane perturbation.
pub fn make_operands_seeded(
    op: OperationKind,
    outcome: OutcomeClass,
    vector_length: usize,
    seed: u64,
) -> Result<OperandSet> {
    if !outcome.is_applicable(op) {
        return Err(Error::InapplicableOutcome { op, outcome });
    }
    if vector_length == 0 {
        return Err(Error::MalformedOperands("vector length must be at least 1".into()));
    }
    let (lhs, rhs, addend) = recipe(op, outcome).ok_or(Error::ImpossibleOutcome { op, outcome })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(OperandSet {
        op,
        lhs: perturbed_lanes(lhs, vector_length, &mut rng),
        rhs: perturbed_lanes(rhs, vector_length, &mut rng),
        addend: addend.map(|a| perturbed_lanes(a, vector_length, &mut rng)),
        expected_outcome: outcome,
    })
}

/// One evaluated lane: the result and, for fma, the separately rounded product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneResult {
    pub result: Bits64,
    pub product: Option<Bits64>,
}

/// Evaluates every lane with scalar instructions under the current FP
/// environment of the calling thread.
pub fn evaluate(operands: &OperandSet) -> Result<Vec<LaneResult>> {
    operands.validate()?;
    let lanes = (0..operands.len()).map(|i| {
        let a = black_box(operands.lhs[i].to_f64());
        let b = black_box(operands.rhs[i].to_f64());
        match operands.op {
            OperationKind::Add => LaneResult {
                result: Bits64::from_f64(black_box(a + b)),
                product: None,
            },
            OperationKind::Mul => LaneResult {
                result: Bits64::from_f64(black_box(a * b)),
                product: None,
            },
            OperationKind::Div => LaneResult {
                result: Bits64::from_f64(black_box(a / b)),
                product: None,
            },
            OperationKind::Fma => {
                let c = black_box(operands.addend.as_ref().expect("validated")[i].to_f64());
                LaneResult {
                    result: Bits64::from_f64(black_box(a.mul_add(b, c))),
                    product: Some(Bits64::from_f64(black_box(a * b))),
                }
            }
        }
    });
    Ok(lanes.collect())
}

/// Maps one lane's inputs and results to an outcome class, if any fits.
pub fn classify_lane(
    op: OperationKind,
    lhs: Bits64,
    rhs: Bits64,
    addend: Option<Bits64>,
    lane: LaneResult,
) -> Option<OutcomeClass> {
    use OperandClass as C;
    let (l, r) = (classify(lhs), classify(rhs));
    let a = addend.map(classify);
    if l.is_nan() || r.is_nan() || a.is_some_and(|a| a.is_nan()) {
        return Some(OutcomeClass::NaNInput);
    }
    if op == OperationKind::Div && r.is_zero() && l == C::Normal {
        return Some(OutcomeClass::DivByZero);
    }
    let div = op == OperationKind::Div;
    match (l == C::Subnormal, r == C::Subnormal) {
        (true, true) => return Some(OutcomeClass::DenormalBoth),
        (true, false) if div => return Some(OutcomeClass::DenormalDividend),
        (true, false) => return Some(OutcomeClass::DenormalLhs),
        (false, true) if div => return Some(OutcomeClass::DenormalDivisor),
        (false, true) => return Some(OutcomeClass::DenormalRhs),
        (false, false) => {}
    }
    if l != C::Normal || r != C::Normal {
        return None;
    }
    let result = classify(lane.result);
    if op == OperationKind::Fma {
        if !matches!(a, Some(C::Normal | C::PosZero | C::NegZero)) {
            return None;
        }
        let product = classify(lane.product?);
        return match product {
            C::PosInf | C::NegInf => Some(OutcomeClass::FmaMulOverflow),
            C::Subnormal | C::PosZero | C::NegZero => Some(OutcomeClass::FmaMulUnderflow),
            C::Normal => match result {
                C::PosInf | C::NegInf => Some(OutcomeClass::FmaAddOverflow),
                C::Subnormal => Some(OutcomeClass::FmaAddUnderflow),
                C::Normal => Some(OutcomeClass::Normalized),
                _ => None,
            },
            _ => None,
        };
    }
    match result {
        C::PosInf | C::NegInf => Some(OutcomeClass::Overflow),
        C::Subnormal => Some(OutcomeClass::Underflow),
        // a zero from two nonzero normals is a total underflow, except for
        // exact cancellation in addition
        C::PosZero | C::NegZero if op != OperationKind::Add => Some(OutcomeClass::Underflow),
        C::Normal => Some(OutcomeClass::Normalized),
        _ => None,
    }
}

/// Evaluates the operands with gradual underflow and all exceptions masked
/// and reports the outcome class every lane agrees on.
pub fn verify_outcome(op: OperationKind, operands: &OperandSet) -> Result<OutcomeClass> {
    if operands.op != op {
        return Err(Error::OperandMismatch {
            kernel: op,
            operands: operands.op,
        });
    }
    let lanes = fpenv::with_env(FpEnvConfig::GRADUAL, || evaluate(operands))??;
    let mut first = None;
    for (i, lane) in lanes.into_iter().enumerate() {
        let addend = operands.addend.as_ref().map(|a| a[i]);
        let class = classify_lane(op, operands.lhs[i], operands.rhs[i], addend, lane)
            .ok_or(Error::UnclassifiableLane { lane: i })?;
        match first {
            None => first = Some(class),
            Some(f) if f != class => {
                return Err(Error::MixedLanes {
                    first: f,
                    lane: i,
                    other: class,
                });
            }
            Some(_) => {}
        }
    }
    first.ok_or_else(|| Error::MalformedOperands("empty operand vectors".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_patterns() {
        assert_eq!(classify(Bits64(0)), OperandClass::PosZero);
        assert_eq!(classify(Bits64(SIGN_MASK)), OperandClass::NegZero);
        assert_eq!(classify(Bits64(1)), OperandClass::Subnormal);
        assert_eq!(classify(Bits64(0x0010_0000_0000_0000)), OperandClass::Normal);
        assert_eq!(classify(Bits64(0x7FF0_0000_0000_0000)), OperandClass::PosInf);
        assert_eq!(classify(Bits64(0xFFF0_0000_0000_0000)), OperandClass::NegInf);
        assert_eq!(classify(Bits64(0x7FF8_0000_0000_0000)), OperandClass::QuietNaN);
        assert_eq!(classify(Bits64(0x7FF0_0000_0000_0001)), OperandClass::SignalingNaN);
        assert_eq!(classify(Bits64(0x000F_FFFF_FFFF_FFFF)), OperandClass::Subnormal);
        assert_eq!(classify(Bits64(0x7FEF_FFFF_FFFF_FFFF)), OperandClass::Normal);
    }

    #[test]
    fn named_constants() {
        assert_eq!(ONE.to_f64(), 1.0);
        assert_eq!(pow2(-1022).to_f64(), f64::MIN_POSITIVE);
        assert_eq!(SUBNORMAL.to_f64(), f64::MIN_POSITIVE / 2.0);
        assert_eq!(one_and_half(1023).to_f64(), 1.5 * 2f64.powi(1023));
        assert_eq!(classify(SUBNORMAL_THREE_QUARTERS), OperandClass::Subnormal);
    }

    #[test]
    fn hex_round_trip() {
        let b = Bits64(0x7FF8_0000_0000_00AB);
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "\"0x7ff80000000000ab\"");
        assert_eq!(serde_json::from_str::<Bits64>(&json).unwrap(), b);
        assert!("7ff8".parse::<Bits64>().is_err());
    }

    #[test]
    fn applicability() {
        assert!(OutcomeClass::DivByZero.is_applicable(OperationKind::Div));
        assert!(!OutcomeClass::DivByZero.is_applicable(OperationKind::Add));
        assert!(!OutcomeClass::FmaMulUnderflow.is_applicable(OperationKind::Mul));
        assert!(OutcomeClass::FmaAddUnderflow.is_applicable(OperationKind::Fma));
        assert!(!OutcomeClass::Underflow.is_applicable(OperationKind::Fma));
        assert!(OutcomeClass::NaNInput.is_extended(OperationKind::Div));
        assert!(!OutcomeClass::NaNInput.is_extended(OperationKind::Add));
    }

    #[test]
    fn inapplicable_outcome_is_rejected() {
        let err = make_operands(OperationKind::Add, OutcomeClass::DivByZero, 4).unwrap_err();
        assert!(matches!(err, Error::InapplicableOutcome { .. }));
        assert!(make_operands(OperationKind::Add, OutcomeClass::Normalized, 0).is_err());
    }

    #[test]
    fn lanes_are_distinct_and_only_low_bits_vary() {
        let set = make_operands(OperationKind::Mul, OutcomeClass::Underflow, 16).unwrap();
        let mut lhs = set.lhs.clone();
        lhs.sort();
        lhs.dedup();
        assert_eq!(lhs.len(), 16);
        for lane in &set.lhs {
            assert_eq!(lane.0 & !LANE_PERTURBATION_MASK, pow2(-512).0);
        }
    }

    #[test]
    fn div_by_zero_keeps_exact_zero() {
        let set = make_operands(OperationKind::Div, OutcomeClass::DivByZero, 8).unwrap();
        assert!(set.rhs.iter().all(|b| *b == POS_ZERO));
        assert_eq!(
            verify_outcome(OperationKind::Div, &set).unwrap(),
            OutcomeClass::DivByZero
        );
    }

    #[test]
    fn spec_examples_classify() {
        let lane = |op, a: f64, b: f64, c: Option<f64>| {
            let set = OperandSet {
                op,
                lhs: vec![Bits64::from_f64(a)],
                rhs: vec![Bits64::from_f64(b)],
                addend: c.map(|c| vec![Bits64::from_f64(c)]),
                expected_outcome: OutcomeClass::Normalized,
            };
            verify_outcome(op, &set)
        };
        assert_eq!(
            lane(OperationKind::Add, 1.0, 1.0, None).unwrap(),
            OutcomeClass::Normalized
        );
        assert_eq!(
            lane(OperationKind::Div, 1.0, 0.0, None).unwrap(),
            OutcomeClass::DivByZero
        );
        assert_eq!(
            lane(OperationKind::Mul, 2f64.powi(-512), 2f64.powi(-540), None).unwrap(),
            OutcomeClass::Underflow
        );
        assert_eq!(
            lane(OperationKind::Mul, 2f64.powi(600), 2f64.powi(600), None).unwrap(),
            OutcomeClass::Overflow
        );
        // subnormal product with a zero addend still counts as a product underflow
        assert_eq!(
            lane(OperationKind::Fma, 2f64.powi(-512), 2f64.powi(-540), Some(0.0)).unwrap(),
            OutcomeClass::FmaMulUnderflow
        );
        assert!(matches!(
            lane(OperationKind::Add, 1.0, -1.0, None),
            Err(Error::UnclassifiableLane { lane: 0 })
        ));
        assert!(matches!(
            lane(OperationKind::Add, f64::INFINITY, 1.0, None),
            Err(Error::UnclassifiableLane { .. })
        ));
    }

    #[test]
    fn mixed_lanes_are_reported() {
        let set = OperandSet {
            op: OperationKind::Mul,
            lhs: vec![Bits64::from_f64(1.0), Bits64::from_f64(2f64.powi(-512))],
            rhs: vec![Bits64::from_f64(1.0), Bits64::from_f64(2f64.powi(-540))],
            addend: None,
            expected_outcome: OutcomeClass::Normalized,
        };
        assert!(matches!(
            verify_outcome(OperationKind::Mul, &set),
            Err(Error::MixedLanes { lane: 1, .. })
        ));
    }

    #[test]
    fn operand_op_mismatch() {
        let set = make_operands(OperationKind::Add, OutcomeClass::Normalized, 4).unwrap();
        assert!(matches!(
            verify_outcome(OperationKind::Mul, &set),
            Err(Error::OperandMismatch { .. })
        ));
    }

    #[test]
    fn malformed_sets() {
        let mut set = make_operands(OperationKind::Fma, OutcomeClass::Normalized, 4).unwrap();
        set.addend = None;
        assert!(set.validate().is_err());
        let mut set = make_operands(OperationKind::Add, OutcomeClass::Normalized, 4).unwrap();
        set.rhs.pop();
        assert!(set.validate().is_err());
    }
}
