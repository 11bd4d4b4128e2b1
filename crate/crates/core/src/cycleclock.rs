//! Serialized timestamp reads and per-operation cycle statistics.
//!
//! The start read is fenced on both sides (`lfence; rdtsc; lfence`) so no
//! earlier instruction finishes late and no later instruction starts early.
//! The end read uses `rdtscp; lfence`, which waits for all prior
//! instructions. The register-resident kernels inline the same sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fence sequence before the timed region, shared with the asm kernels.
pub const START_SEQUENCE: [&str; 3] = ["lfence", "rdtsc", "lfence"];
/// Fence sequence after the timed region.
pub const END_SEQUENCE: [&str; 2] = ["rdtscp", "lfence"];

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn read_start() -> u64 {
    let lo: u32;
    let hi: u32;
    // SAFETY: lfence/rdtsc have no memory effects. No `nomem`, so the
    // compiler keeps surrounding memory accesses on their side of the read.
    unsafe {
        std::arch::asm!(
            "lfence",
            "rdtsc",
            "lfence",
            out("eax") lo,
            out("edx") hi,
            options(nostack, preserves_flags),
        );
    }
    (u64::from(hi) << 32) | u64::from(lo)
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn read_end() -> u64 {
    let lo: u32;
    let hi: u32;
    // SAFETY: as above; rdtscp also writes ecx.
    unsafe {
        std::arch::asm!(
            "rdtscp",
            "lfence",
            out("eax") lo,
            out("edx") hi,
            out("ecx") _,
            options(nostack, preserves_flags),
        );
    }
    (u64::from(hi) << 32) | u64::from(lo)
}

#[cfg(not(target_arch = "x86_64"))]
pub fn read_start() -> u64 {
    0
}

#[cfg(not(target_arch = "x86_64"))]
pub fn read_end() -> u64 {
    0
}

/// Fixed cost of an empty timed region, minimum over many tries.
pub fn timer_overhead() -> u64 {
    (0..256)
        .map(|_| {
            let start = read_start();
            read_end().wrapping_sub(start)
        })
        .min()
        .unwrap_or(0)
}

const IMUL_LATENCY: u64 = 3;
const CHAIN_LENGTH: u64 = 100;

#[cfg(target_arch = "x86_64")]
fn imul_chain(iterations: u64) -> u64 {
    let start = read_start();
    // SAFETY: register-only arithmetic; the iteration count is nonzero.
    unsafe {
        std::arch::asm!(
            "mov {acc}, 3",
            "2:",
            ".rept 100",
            "imul {acc}, {acc}",
            ".endr",
            "dec {n}",
            "jnz 2b",
            acc = out(reg) _,
            n = inout(reg) iterations.max(1) => _,
            options(nostack, nomem),
        );
    }
    read_end().wrapping_sub(start)
}

/// Core cycles elapsed per TSC tick, from a chain of dependent 64-bit
/// multiplies (three cycles each on every x86-64 core in use).
///
/// Integer `add reg, imm` is not usable here: recent cores fold it at rename.
pub fn core_cycles_per_tick() -> Option<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        const ITERATIONS: u64 = 20_000;
        imul_chain(1_000);
        let mut ratios: Vec<f64> = (0..7)
            .map(|_| imul_chain(ITERATIONS))
            .filter(|&t| t > 0)
            .map(|t| (ITERATIONS * CHAIN_LENGTH * IMUL_LATENCY) as f64 / t as f64)
            .collect();
        if ratios.is_empty() {
            return None;
        }
        ratios.sort_by(f64::total_cmp);
        Some(ratios[ratios.len() / 2])
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        None
    }
}

/// One timed kernel execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub raw_cycles: u64,
    pub scalar_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub samples: usize,
    pub warmups: usize,
    /// Extra full sampling rounds allowed when the spread is too large.
    pub max_retries: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            samples: 9,
            warmups: 2,
            max_retries: 2,
        }
    }
}

impl MeasureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 3 {
            return Err(Error::InvalidMeasurement("at least 3 samples are required".into()));
        }
        if self.warmups < 1 {
            return Err(Error::InvalidMeasurement("at least 1 warmup run is required".into()));
        }
        Ok(())
    }
}

/// Above this stddev/median a measurement is flagged unstable.
pub const UNSTABLE_SPREAD: f64 = 0.10;
/// Below this overhead/shortest-sample fraction the timer cost is ignored.
pub const OVERHEAD_BOUND: f64 = 0.01;

/// Cycles-per-scalar-operation statistics in TSC ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementStats {
    pub samples: Vec<f64>,
    pub raw: Vec<Sample>,
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub stddev: f64,
    pub warmups_discarded: usize,
    pub timer_overhead: u64,
    /// Whether `timer_overhead` was subtracted from every raw sample.
    pub overhead_subtracted: bool,
    pub unstable: bool,
    pub retries: usize,
}

impl MeasurementStats {
    /// Builds statistics from retained samples.
    pub fn from_samples(raw: Vec<Sample>, timer_overhead: u64, warmups_discarded: usize) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidMeasurement("no samples".into()));
        }
        let shortest = raw.iter().map(|s| s.raw_cycles).min().unwrap_or(0);
        let overhead_subtracted = shortest == 0 || timer_overhead as f64 >= OVERHEAD_BOUND * shortest as f64;
        let samples = raw
            .iter()
            .map(|s| cycles_per_op(*s, timer_overhead, overhead_subtracted))
            .collect::<Result<Vec<_>>>()?;
        let (min, median, mean, stddev) = summary(&samples);
        Ok(MeasurementStats {
            samples,
            raw,
            min,
            median,
            mean,
            stddev,
            warmups_discarded,
            timer_overhead,
            overhead_subtracted,
            unstable: median > 0.0 && stddev / median > UNSTABLE_SPREAD,
            retries: 0,
        })
    }

    pub fn relative_spread(&self) -> f64 {
        if self.median > 0.0 {
            self.stddev / self.median
        } else {
            f64::INFINITY
        }
    }

    /// Recomputes the per-op samples from the stored raw fields.
    pub fn recompute(&self) -> Result<Vec<f64>> {
        self.raw
            .iter()
            .map(|s| cycles_per_op(*s, self.timer_overhead, self.overhead_subtracted))
            .collect()
    }
}

/// Converts one raw sample into cycles per scalar operation.
pub fn cycles_per_op(sample: Sample, overhead: u64, subtract: bool) -> Result<f64> {
    if sample.scalar_ops == 0 {
        return Err(Error::InvalidMeasurement("sample without scalar operations".into()));
    }
    let cycles = if subtract {
        sample.raw_cycles.saturating_sub(overhead)
    } else {
        sample.raw_cycles
    };
    if cycles == 0 {
        return Err(Error::InvalidMeasurement(
            "sample shorter than the timer overhead".into(),
        ));
    }
    Ok(cycles as f64 / sample.scalar_ops as f64)
}

/// `(min, median, mean, population stddev)`.
pub fn summary(samples: &[f64]) -> (f64, f64, f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (sorted[0], median, mean, var.sqrt())
}

/// Runs `invoke` `warmups + samples` times, keeping the last `samples`.
///
/// When the spread exceeds [`UNSTABLE_SPREAD`] the whole round is repeated up
/// to `max_retries` times; the tightest round is kept and flagged if it is
/// still too wide.
pub fn measure<F>(mut invoke: F, cfg: &MeasureConfig) -> Result<MeasurementStats>
where
    F: FnMut() -> Result<Sample>,
{
    cfg.validate()?;
    let overhead = timer_overhead();
    let mut best: Option<MeasurementStats> = None;
    for attempt in 0..=cfg.max_retries {
        for _ in 0..cfg.warmups {
            invoke()?;
        }
        let raw = (0..cfg.samples).map(|_| invoke()).collect::<Result<Vec<_>>>()?;
        let mut stats = MeasurementStats::from_samples(raw, overhead, cfg.warmups)?;
        stats.retries = attempt;
        let stable = !stats.unstable;
        if best
            .as_ref()
            .is_none_or(|b| stats.relative_spread() < b.relative_spread())
        {
            best = Some(stats);
        }
        if stable {
            break;
        }
    }
    Ok(best.expect("at least one round"))
}
