//! CPU identity, ISA features, thread pinning and timestamp-counter calibration.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cycleclock;
use crate::error::{Error, Result};

/// ISA features relevant to the kernels, plus CPU identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub vendor: String,
    pub model_name: String,
    pub family: u32,
    pub model: u32,
    pub avx: bool,
    pub avx2: bool,
    pub fma3: bool,
    /// Detected only; no four-operand kernels exist.
    pub fma4: bool,
    pub invariant_tsc: bool,
}

impl FeatureSet {
    /// Checks the implications real CPUID data always satisfies.
    pub fn validate(&self) -> Result<()> {
        if self.avx2 && !self.avx {
            return Err(Error::InconsistentFeatures("avx2 without avx".into()));
        }
        if self.fma3 && !self.avx {
            return Err(Error::InconsistentFeatures("fma3 without avx".into()));
        }
        if self.fma4 && !self.avx {
            return Err(Error::InconsistentFeatures("fma4 without avx".into()));
        }
        Ok(())
    }

    /// A feature set for a host without any of the vector extensions.
    pub fn baseline(vendor: &str, model_name: &str) -> Self {
        FeatureSet {
            vendor: vendor.into(),
            model_name: model_name.into(),
            family: 0,
            model: 0,
            avx: false,
            avx2: false,
            fma3: false,
            fma4: false,
            invariant_tsc: false,
        }
    }

    /// Reference machine key when the host is one of the tabulated
    /// microarchitectures.
    pub fn reference_machine(&self) -> Option<&'static str> {
        match (self.vendor.as_str(), self.family, self.model) {
            ("GenuineIntel", 6, 0x2A | 0x2D) => Some("sandybridge"),
            ("GenuineIntel", 6, 0x3A | 0x3E) => Some("ivybridge"),
            ("GenuineIntel", 6, 0x3C | 0x3F | 0x45 | 0x46) => Some("haswell"),
            ("AuthenticAMD", 0x15, 0x00..=0x0F) => Some("interlagos"),
            _ => None,
        }
    }

    /// Number of ports able to start a 256-bit double-precision add each
    /// cycle, when known for the microarchitecture.
    pub fn avx_add_ports(&self) -> Option<u32> {
        self.reference_machine().map(|_| 1)
    }
}

#[cfg(target_arch = "x86_64")]
fn cpuid(leaf: u32, subleaf: u32) -> std::arch::x86_64::CpuidResult {
    std::arch::x86_64::__cpuid_count(leaf, subleaf)
}

#[cfg(target_arch = "x86_64")]
fn vendor_string() -> String {
    let r = cpuid(0, 0);
    let bytes: Vec<u8> = [r.ebx, r.edx, r.ecx].iter().flat_map(|w| w.to_le_bytes()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(target_arch = "x86_64")]
fn brand_string() -> String {
    if cpuid(0x8000_0000, 0).eax < 0x8000_0004 {
        return String::new();
    }
    let bytes: Vec<u8> = (0x8000_0002..=0x8000_0004)
        .flat_map(|leaf| {
            let r = cpuid(leaf, 0);
            [r.eax, r.ebx, r.ecx, r.edx]
        })
        .flat_map(|w| w.to_le_bytes())
        .collect();
    String::from_utf8_lossy(&bytes)
        .trim_matches(char::from(0))
        .trim()
        .to_string()
}

/// Reads CPUID and OS support for the vector extensions.
pub fn detect_features() -> Result<FeatureSet> {
    #[cfg(target_arch = "x86_64")]
    {
        let leaf1 = cpuid(1, 0);
        let base_family = (leaf1.eax >> 8) & 0xF;
        let family = if base_family == 0xF {
            base_family + ((leaf1.eax >> 20) & 0xFF)
        } else {
            base_family
        };
        let mut model = (leaf1.eax >> 4) & 0xF;
        if base_family == 0x6 || base_family == 0xF {
            model |= ((leaf1.eax >> 16) & 0xF) << 4;
        }
        let max_ext = cpuid(0x8000_0000, 0).eax;
        let fma4 = max_ext >= 0x8000_0001 && cpuid(0x8000_0001, 0).ecx & (1 << 16) != 0;
        let invariant_tsc = max_ext >= 0x8000_0007 && cpuid(0x8000_0007, 0).edx & (1 << 8) != 0;
        // std's detection also checks that the OS saves the YMM state
        let avx = std::arch::is_x86_feature_detected!("avx");
        let features = FeatureSet {
            vendor: vendor_string(),
            model_name: brand_string(),
            family,
            model,
            avx,
            avx2: std::arch::is_x86_feature_detected!("avx2"),
            fma3: std::arch::is_x86_feature_detected!("fma"),
            fma4: fma4 && avx,
            invariant_tsc,
        };
        features.validate()?;
        Ok(features)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(Error::UnsupportedHost("CPUID exists only on x86-64".into()))
    }
}

/// Saved CPU affinity of the calling thread.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffinityHandle {
    cores: Vec<usize>,
}

impl AffinityHandle {
    pub fn cores(&self) -> &[usize] {
        &self.cores
    }

    /// Puts the calling thread back on the saved core set.
    pub fn restore(self) -> Result<()> {
        set_affinity(&self.cores)
    }
}

#[cfg(target_os = "linux")]
fn current_affinity_impl() -> std::io::Result<Vec<usize>> {
    // SAFETY: cpu_set_t is plain data; zeroed is a valid empty set and the
    // size passed matches the buffer.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok((0..libc::CPU_SETSIZE as usize)
            .filter(|&c| libc::CPU_ISSET(c, &set))
            .collect())
    }
}

#[cfg(target_os = "linux")]
fn set_affinity(cores: &[usize]) -> Result<()> {
    let first = cores.first().copied().unwrap_or(0);
    // SAFETY: as above; every index is range-checked before CPU_SET.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        for &c in cores {
            if c >= libc::CPU_SETSIZE as usize {
                return Err(Error::AffinityUnsupported {
                    core: c,
                    reason: "index beyond CPU_SETSIZE".into(),
                });
            }
            libc::CPU_SET(c, &mut set);
        }
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(Error::AffinityUnsupported {
                core: first,
                reason: std::io::Error::last_os_error().to_string(),
            });
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
fn set_affinity(cores: &[usize]) -> Result<()> {
    Err(Error::AffinityUnsupported {
        core: cores.first().copied().unwrap_or(0),
        reason: "thread affinity is only implemented for Linux".into(),
    })
}

/// Cores the calling thread may currently run on.
pub fn current_affinity() -> Result<Vec<usize>> {
    #[cfg(target_os = "linux")]
    {
        current_affinity_impl().map_err(|e| Error::AffinityUnsupported {
            core: 0,
            reason: e.to_string(),
        })
    }
    #[cfg(not(target_os = "linux"))]
    {
        Err(Error::AffinityUnsupported {
            core: 0,
            reason: "thread affinity is only implemented for Linux".into(),
        })
    }
}

/// Restricts the calling thread to `core_id` and returns the previous affinity.
pub fn pin_to_core(core_id: usize) -> Result<AffinityHandle> {
    let previous = current_affinity()?;
    if !previous.contains(&core_id) {
        return Err(Error::AffinityUnsupported {
            core: core_id,
            reason: format!("core is not in the allowed set {previous:?}"),
        });
    }
    set_affinity(&[core_id])?;
    Ok(AffinityHandle { cores: previous })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMethod {
    OsClockComparison,
    CpuidLeaf,
    Unknown,
}

/// Timestamp-counter rate and, where determinable, the core clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TscCalibration {
    pub tsc_hz: f64,
    /// Base frequency reported by the processor.
    pub nominal_core_hz: Option<f64>,
    /// Core clock measured with a dependent-multiply chain during calibration.
    pub measured_core_hz: Option<f64>,
    pub method: CalibrationMethod,
    /// Relative disagreement between the two calibration windows.
    pub spread: f64,
}

impl TscCalibration {
    /// Factor converting TSC ticks into core cycles, if the core clock is known.
    pub fn core_cycles_per_tick(&self) -> Option<f64> {
        self.measured_core_hz.map(|hz| hz / self.tsc_hz)
    }
}

/// Two windows must agree this closely.
pub const CALIBRATION_TOLERANCE: f64 = 0.005;
const CALIBRATION_ATTEMPTS: usize = 4;

fn tsc_window(duration: Duration) -> f64 {
    let start_time = Instant::now();
    let start_tsc = cycleclock::read_start();
    while start_time.elapsed() < duration {
        std::hint::spin_loop();
    }
    let end_tsc = cycleclock::read_end();
    let elapsed = start_time.elapsed();
    end_tsc.wrapping_sub(start_tsc) as f64 / elapsed.as_secs_f64()
}

fn nominal_core_hz() -> Option<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if cpuid(0, 0).eax >= 0x16 {
            let mhz = cpuid(0x16, 0).eax & 0xFFFF;
            if mhz > 0 {
                return Some(f64::from(mhz) * 1e6);
            }
        }
        // "... @ 2.30GHz"
        let brand = brand_string();
        let ghz = brand.rsplit('@').next()?.trim().strip_suffix("GHz")?;
        ghz.trim().parse::<f64>().ok().map(|g| g * 1e9)
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        None
    }
}

/// Estimates the TSC rate against the OS monotonic clock.
///
/// Two back-to-back windows of `duration` each must agree within
/// [`CALIBRATION_TOLERANCE`]; a few attempts are made before giving up.
pub fn calibrate_tsc(duration: Duration) -> Result<TscCalibration> {
    if duration.is_zero() {
        return Err(Error::UnstableClock("calibration duration must be positive".into()));
    }
    if !cfg!(target_arch = "x86_64") {
        return Err(Error::UnsupportedHost("no timestamp counter".into()));
    }
    let mut last = (0.0, 0.0);
    for _ in 0..CALIBRATION_ATTEMPTS {
        let a = tsc_window(duration);
        let b = tsc_window(duration);
        last = (a, b);
        let spread = (a - b).abs() / a;
        if a > 0.0 && spread < CALIBRATION_TOLERANCE {
            let tsc_hz = (a + b) / 2.0;
            let ratio = cycleclock::core_cycles_per_tick();
            return Ok(TscCalibration {
                tsc_hz,
                nominal_core_hz: nominal_core_hz(),
                measured_core_hz: ratio.map(|r| r * tsc_hz),
                method: CalibrationMethod::OsClockComparison,
                spread,
            });
        }
    }
    Err(Error::UnstableClock(format!(
        "windows disagree: {:.0} Hz vs {:.0} Hz",
        last.0, last.1
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validation() {
        let mut f = FeatureSet::baseline("GenuineIntel", "test");
        assert!(f.validate().is_ok());
        f.avx2 = true;
        assert!(f.validate().is_err());
        f.avx = true;
        f.fma3 = true;
        assert!(f.validate().is_ok());
    }

    #[test]
    fn reference_machine_lookup() {
        let mut f = FeatureSet::baseline("GenuineIntel", "Xeon E5-2695 v3");
        f.family = 6;
        f.model = 0x3F;
        assert_eq!(f.reference_machine(), Some("haswell"));
        f.model = 0x2D;
        assert_eq!(f.reference_machine(), Some("sandybridge"));
        f.model = 0xCF;
        assert_eq!(f.reference_machine(), None);
        let mut amd = FeatureSet::baseline("AuthenticAMD", "Opteron 6276");
        amd.family = 0x15;
        amd.model = 0x01;
        assert_eq!(amd.reference_machine(), Some("interlagos"));
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn detected_features_are_consistent() {
        let f = detect_features().unwrap();
        assert!(!f.vendor.is_empty());
        assert!(!f.avx2 || f.avx);
        assert!(!f.fma3 || f.avx);
    }

    #[test]
    fn zero_duration_is_rejected() {
        assert!(matches!(calibrate_tsc(Duration::ZERO), Err(Error::UnstableClock(_))));
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn pin_and_restore() {
        // run on a fresh thread so the test harness thread keeps its mask
        std::thread::spawn(|| {
            let before = current_affinity().unwrap();
            let core = before[0];
            let handle = pin_to_core(core).unwrap();
            assert_eq!(current_affinity().unwrap(), vec![core]);
            assert_eq!(handle.cores(), before.as_slice());
            handle.restore().unwrap();
            assert_eq!(current_affinity().unwrap(), before);
        })
        .join()
        .unwrap();
    }

    #[cfg(target_os = "linux")]
    #[test]
    fn invalid_core_is_rejected() {
        assert!(matches!(pin_to_core(1 << 20), Err(Error::AffinityUnsupported { .. })));
    }
}
