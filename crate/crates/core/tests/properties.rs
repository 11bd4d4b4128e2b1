use std::hint::black_box;
use std::num::FpCategory;

use proptest::prelude::*;

use fpcost::cycleclock::{MeasurementStats, Sample};
use fpcost::fpenv::{self, FpEnvConfig, ROUNDING_CONTROL};
use fpcost::fpmodel::{self, Bits64, OperandClass, OperationKind, OutcomeClass};
use fpcost::harness::{Cell, CycleUnit, ResultRecord};
use fpcost::hwinfo::FeatureSet;
use fpcost::kernels::{KernelSpec, Variant};
use fpcost::report::{self, Format, RenderSpec};
use fpcost::EnvMode;

/// Classification through the standard library's float category.
fn std_class(bits: u64) -> OperandClass {
    let x = f64::from_bits(bits);
    let neg = x.is_sign_negative();
    match x.classify() {
        FpCategory::Zero if neg => OperandClass::NegZero,
        FpCategory::Zero => OperandClass::PosZero,
        FpCategory::Subnormal => OperandClass::Subnormal,
        FpCategory::Normal => OperandClass::Normal,
        FpCategory::Infinite if neg => OperandClass::NegInf,
        FpCategory::Infinite => OperandClass::PosInf,
        FpCategory::Nan if bits & (1 << 51) != 0 => OperandClass::QuietNaN,
        FpCategory::Nan => OperandClass::SignalingNaN,
    }
}

fn avx() -> bool {
    is_x86_feature_detected!("avx")
}

fn applicable_pairs() -> Vec<(OperationKind, OutcomeClass)> {
    OperationKind::ALL
        .iter()
        .flat_map(|&op| {
            OutcomeClass::table_rows(op)
                .iter()
                .chain(OutcomeClass::extended_rows(op))
                .map(move |&o| (op, o))
        })
        .collect()
}

fn subnormal() -> impl Strategy<Value = f64> {
    (1u64..(1 << 52), any::<bool>()).prop_map(|(m, neg)| f64::from_bits(m | (neg as u64) << 63))
}

fn record(
    op: OperationKind,
    outcome: OutcomeClass,
    env: EnvMode,
    variant: Variant,
    cycles: Option<f64>,
) -> ResultRecord {
    ResultRecord {
        cell: Cell {
            op,
            outcome,
            env: env.config(),
            variant,
            extended: false,
        },
        kernel: KernelSpec::reg_asm(op),
        seed: 7,
        operands: None,
        verified_outcome: Some(outcome),
        mxcsr: Some(0x1f80),
        stats: None,
        cycles,
        unit: CycleUnit::Tsc,
        core_cycles_per_tick: None,
        error: cycles.is_none().then(|| "failed".to_string()),
        notes: vec![],
        features: FeatureSet::baseline("GenuineIntel", "synthetic"),
        calibration: None,
        pinned_core: None,
    }
}

fn records_strategy() -> impl Strategy<Value = Vec<ResultRecord>> {
    let pairs = applicable_pairs();
    prop::collection::vec(
        (
            prop::sample::select(pairs),
            prop::sample::select(EnvMode::BOTH.to_vec()),
            prop::option::weighted(0.9, 1e-3f64..1e3),
        ),
        1..20,
    )
    .prop_map(|cells| {
        let mut out: Vec<ResultRecord> = Vec::new();
        for ((op, outcome), env, cycles) in cells {
            let r = record(op, outcome, env, Variant::RegAsm, cycles);
            if !out.iter().any(|o| o.cell == r.cell) {
                out.push(r);
            }
        }
        out
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20_000))]

    #[test]
    fn classify_agrees_with_std(bits in any::<u64>()) {
        prop_assert_eq!(fpmodel::classify(Bits64(bits)), std_class(bits));
    }

    #[test]
    fn bits_hex_round_trip(bits in any::<u64>()) {
        let b = Bits64(bits);
        prop_assert_eq!(b.to_string().parse::<Bits64>().unwrap(), b);
        prop_assert_eq!(Bits64::from_parts(b.sign(), b.exponent_field(), b.mantissa()), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generated_operands_provoke_their_outcome(
        pair in prop::sample::select(applicable_pairs()),
        length in prop::sample::select(vec![4usize, 16]),
        seed in any::<u64>(),
    ) {
        prop_assume!(avx());
        let (op, outcome) = pair;
        let set = fpmodel::make_operands_seeded(op, outcome, length, seed).unwrap();
        prop_assert_eq!(set.len(), length);
        prop_assert_eq!(fpmodel::verify_outcome(op, &set).unwrap(), outcome);
    }

    #[test]
    fn daz_reads_subnormal_inputs_as_zero(x in subnormal()) {
        let daz = FpEnvConfig::with_flush_modes(false, true);
        let r = fpenv::with_env(daz, || black_box(black_box(x) * black_box(1.0))).unwrap();
        prop_assert_eq!(r, 0.0);
        let r = fpenv::with_env(FpEnvConfig::GRADUAL, || black_box(black_box(x) * black_box(1.0))).unwrap();
        prop_assert_eq!(r.to_bits(), x.to_bits());
    }

    #[test]
    fn ftz_flushes_subnormal_results(x in subnormal()) {
        // scale back up into the normal range, then produce x again
        let big = x * 2f64.powi(200);
        let ftz = FpEnvConfig::with_flush_modes(true, false);
        let r = fpenv::with_env(ftz, || black_box(black_box(big) * black_box(2f64.powi(-200)))).unwrap();
        prop_assert_eq!(r, 0.0);
        prop_assert_eq!(r.is_sign_negative(), x.is_sign_negative());
        let r = fpenv::with_env(FpEnvConfig::GRADUAL, || black_box(black_box(big) * black_box(2f64.powi(-200)))).unwrap();
        prop_assert_eq!(r.to_bits(), x.to_bits());
    }

    #[test]
    fn mxcsr_round_trip(ftz in any::<bool>(), daz in any::<bool>(), masked in any::<bool>(), rounding in 0u32..4) {
        let Ok(cfg) = FpEnvConfig::new(ftz, daz, masked || ftz, masked || ftz) else {
            return Err(TestCaseError::fail("valid combination rejected"));
        };
        let before = fpenv::read_raw().unwrap();
        let seeded = (before & !ROUNDING_CONTROL) | rounding << 13;
        fpenv::write_raw(seeded).unwrap();
        let seen = fpenv::with_env(cfg, || fpenv::read_raw().unwrap()).unwrap();
        let after = fpenv::read_raw().unwrap();
        fpenv::write_raw(before).unwrap();
        prop_assert_eq!(FpEnvConfig::decode(seen), cfg);
        prop_assert_eq!(seen & ROUNDING_CONTROL, rounding << 13);
        prop_assert_eq!(after, seeded);
    }

    #[test]
    fn apply_to_touches_only_controlled_bits(raw in 0u32..0x1_0000, ftz in any::<bool>(), daz in any::<bool>()) {
        let cfg = FpEnvConfig::with_flush_modes(ftz, daz);
        let out = cfg.apply_to(raw);
        prop_assert_eq!(FpEnvConfig::decode(out), cfg);
        prop_assert_eq!(out & ROUNDING_CONTROL, raw & ROUNDING_CONTROL);
        prop_assert_eq!(cfg.apply_to(out), out);
    }

    #[test]
    fn stats_invariants(
        raw in prop::collection::vec((1_000u64..10_000_000, 1u64..100_000), 3..30),
        overhead in 0u64..500,
    ) {
        let samples: Vec<Sample> = raw.iter().map(|&(c, n)| Sample { raw_cycles: c + overhead, scalar_ops: n }).collect();
        let stats = MeasurementStats::from_samples(samples, overhead, 2).unwrap();
        let max = stats.samples.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(stats.min <= stats.median && stats.median <= max);
        prop_assert!(stats.min <= stats.mean * (1.0 + 1e-12) && stats.mean <= max * (1.0 + 1e-12));
        prop_assert!(stats.stddev >= 0.0);
        prop_assert!(stats.median <= stats.mean + stats.stddev * (1.0 + 1e-12) + 1e-15);
        prop_assert!(stats.samples.iter().all(|&x| x > 0.0));
        let again = stats.recompute().unwrap();
        prop_assert_eq!(
            again.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            stats.samples.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn render_is_deterministic(records in records_strategy()) {
        for format in [Format::Markdown, Format::Csv, Format::Json] {
            let spec = RenderSpec::new(format);
            prop_assert_eq!(report::render(&records, &spec).unwrap(), report::render(&records, &spec).unwrap());
        }
        let json = report::render(&records, &RenderSpec::new(Format::Json)).unwrap();
        prop_assert_eq!(report::parse_json(&json).unwrap(), records);
    }

    #[test]
    fn csv_cells_match_stored_values(records in records_strategy(), precision in 0usize..6) {
        let spec = RenderSpec { precision, ..RenderSpec::new(Format::Csv) };
        let text = report::render(&records, &spec).unwrap();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let unit = 10f64.powi(-(precision as i32));
        let mut seen = 0;
        for row in reader.records() {
            let row = row.unwrap();
            let op: OperationKind = row[0].parse().unwrap();
            let outcome: OutcomeClass = row[1].parse().unwrap();
            let env = if &row[2] == "F+D" { EnvMode::FtzDaz } else { EnvMode::NoFtzDaz };
            let stored = records
                .iter()
                .find(|r| r.cell.op == op && r.cell.outcome == outcome && r.cell.env == env.config())
                .unwrap();
            match stored.cycles {
                None => prop_assert_eq!(&row[5], report::ERROR_MARKER),
                Some(c) => {
                    let parsed: f64 = row[5].parse().unwrap();
                    prop_assert!((parsed - c).abs() <= unit, "{} vs {}", parsed, c);
                }
            }
            seen += 1;
        }
        prop_assert_eq!(seen, records.len());
    }

    #[test]
    fn markdown_cells_match_stored_values(records in records_strategy()) {
        let text = report::render(&records, &RenderSpec::default()).unwrap();
        for line in text.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Operation")) {
            let cols: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).collect();
            let op = OperationKind::ALL.into_iter().find(|o| o.title() == cols[0]).unwrap();
            let outcome = OutcomeClass::ALL
                .into_iter()
                .find(|o| o.is_applicable(op) && o.row_label() == cols[1])
                .unwrap();
            for (i, env) in EnvMode::BOTH.iter().enumerate() {
                let cell = cols[2 + i];
                let stored = records
                    .iter()
                    .find(|r| r.cell.op == op && r.cell.outcome == outcome && r.cell.env == env.config());
                match stored.map(|r| r.cycles) {
                    None => prop_assert_eq!(cell, report::MISSING_MARKER),
                    Some(None) => prop_assert_eq!(cell, report::ERROR_MARKER),
                    Some(Some(c)) => prop_assert!((cell.parse::<f64>().unwrap() - c).abs() <= 0.01),
                }
            }
        }
    }
}
