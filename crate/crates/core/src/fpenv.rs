//! Access to the SSE/AVX control and status register (MXCSR).
//!
//! MXCSR is per-thread state. Everything here affects only the calling thread,
//! and nothing else may run floating-point work on that thread while a
//! measurement is in flight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FLUSH_TO_ZERO: u32 = 1 << 15;
pub const DENORMALS_ARE_ZERO: u32 = 1 << 6;
pub const UNDERFLOW_MASK: u32 = 1 << 11;
/// Invalid, denormal, divide-by-zero, overflow, underflow and precision masks.
pub const EXCEPTION_MASKS: u32 = 0x3F << 7;
pub const ROUNDING_CONTROL: u32 = 0b11 << 13;
/// Sticky exception flags, bits 0..=5.
pub const STATUS_FLAGS: u32 = 0x3F;
/// Bits 6..=15; everything except the sticky status flags.
pub const CONTROL_BITS: u32 = 0xFFC0;

/// Requested state of the bits this crate controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FpEnvConfig {
    pub ftz: bool,
    pub daz: bool,
    pub underflow_masked: bool,
    pub mask_all_exceptions: bool,
}

impl FpEnvConfig {
    /// Flush-to-zero and denormals-are-zero, all exceptions masked.
    pub const FTZ_DAZ: FpEnvConfig = FpEnvConfig {
        ftz: true,
        daz: true,
        underflow_masked: true,
        mask_all_exceptions: true,
    };

    /// Gradual underflow (no FTZ, no DAZ), all exceptions masked.
    pub const GRADUAL: FpEnvConfig = FpEnvConfig {
        ftz: false,
        daz: false,
        underflow_masked: true,
        mask_all_exceptions: true,
    };

    pub fn new(ftz: bool, daz: bool, underflow_masked: bool, mask_all_exceptions: bool) -> Result<Self> {
        let cfg = FpEnvConfig {
            ftz,
            daz,
            underflow_masked,
            mask_all_exceptions,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The given flush modes with all exceptions masked.
    pub fn with_flush_modes(ftz: bool, daz: bool) -> Self {
        FpEnvConfig {
            ftz,
            daz,
            underflow_masked: true,
            mask_all_exceptions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ftz && !self.underflow_masked {
            return Err(Error::InvalidEnv(
                "flush-to-zero requires the underflow exception to be masked".into(),
            ));
        }
        if self.mask_all_exceptions && !self.underflow_masked {
            return Err(Error::InvalidEnv(
                "masking all exceptions includes the underflow mask".into(),
            ));
        }
        Ok(())
    }

    /// Reads the controlled bits out of a raw register value.
    pub fn decode(raw: u32) -> Self {
        FpEnvConfig {
            ftz: raw & FLUSH_TO_ZERO != 0,
            daz: raw & DENORMALS_ARE_ZERO != 0,
            underflow_masked: raw & UNDERFLOW_MASK != 0,
            mask_all_exceptions: raw & EXCEPTION_MASKS == EXCEPTION_MASKS,
        }
    }

    /// Writes the controlled bits into `raw`, leaving every other bit alone.
    /// Without `mask_all_exceptions` the other five masks keep their value.
    pub fn apply_to(&self, raw: u32) -> u32 {
        let mut out = raw;
        let mut set = |bit: u32, on: bool| {
            if on {
                out |= bit;
            } else {
                out &= !bit;
            }
        };
        set(FLUSH_TO_ZERO, self.ftz);
        set(DENORMALS_ARE_ZERO, self.daz);
        set(UNDERFLOW_MASK, self.underflow_masked);
        if self.mask_all_exceptions {
            out |= EXCEPTION_MASKS;
        }
        out
    }

    /// Short label, `F+D` / `No F+D` for the two standard modes.
    pub fn label(&self) -> String {
        match (self.ftz, self.daz) {
            (true, true) => "F+D".into(),
            (false, false) => "No F+D".into(),
            (true, false) => "FTZ only".into(),
            (false, true) => "DAZ only".into(),
        }
    }
}

impl Default for FpEnvConfig {
    fn default() -> Self {
        FpEnvConfig::GRADUAL
    }
}

/// The two environments every cell is measured under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvMode {
    /// FTZ and DAZ enabled.
    #[serde(rename = "fd")]
    FtzDaz,
    /// FTZ and DAZ disabled: gradual underflow.
    #[serde(rename = "no-fd")]
    NoFtzDaz,
}

impl EnvMode {
    pub const BOTH: [EnvMode; 2] = [EnvMode::FtzDaz, EnvMode::NoFtzDaz];

    pub const fn config(self) -> FpEnvConfig {
        match self {
            EnvMode::FtzDaz => FpEnvConfig::FTZ_DAZ,
            EnvMode::NoFtzDaz => FpEnvConfig::GRADUAL,
        }
    }

    /// `None` for the mixed FTZ-only and DAZ-only settings.
    pub fn of(cfg: &FpEnvConfig) -> Option<EnvMode> {
        match (cfg.ftz, cfg.daz) {
            (true, true) => Some(EnvMode::FtzDaz),
            (false, false) => Some(EnvMode::NoFtzDaz),
            _ => None,
        }
    }

    pub const fn label(self) -> &'static str {
        match self {
            EnvMode::FtzDaz => "F+D",
            EnvMode::NoFtzDaz => "No F+D",
        }
    }

    pub const fn key(self) -> &'static str {
        match self {
            EnvMode::FtzDaz => "fd",
            EnvMode::NoFtzDaz => "no-fd",
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod raw {
    use std::arch::asm;

    #[inline]
    pub fn read() -> u32 {
        let mut value: u32 = 0;
        // SAFETY: STMXCSR stores 4 bytes to a valid, writable location.
        unsafe {
            asm!("stmxcsr [{}]", in(reg) &mut value, options(nostack, preserves_flags));
        }
        value
    }

    #[inline]
    pub fn write(value: u32) {
        // SAFETY: LDMXCSR reads 4 bytes from a valid location. Callers only
        // pass values derived from a previous STMXCSR, so reserved bits stay
        // clear and no #GP can occur.
        unsafe {
            asm!("ldmxcsr [{}]", in(reg) &value, options(nostack, readonly, preserves_flags));
        }
    }
}

/// Current raw MXCSR of the calling thread.
pub fn read_raw() -> Result<u32> {
    #[cfg(target_arch = "x86_64")]
    {
        Ok(raw::read())
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(Error::UnsupportedHost("MXCSR exists only on x86-64".into()))
    }
}

/// Loads a full raw MXCSR value. Reserved bits (16..=31) must be zero.
pub fn write_raw(value: u32) -> Result<()> {
    if value & !0xFFFF != 0 {
        return Err(Error::InvalidEnv(format!("reserved MXCSR bits set in {value:#x}")));
    }
    #[cfg(target_arch = "x86_64")]
    {
        raw::write(value);
        Ok(())
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        Err(Error::UnsupportedHost("MXCSR exists only on x86-64".into()))
    }
}

pub fn read_env() -> Result<FpEnvConfig> {
    read_raw().map(FpEnvConfig::decode)
}

/// Applies `cfg` with a read-modify-write and returns the previous state.
pub fn apply_env(cfg: FpEnvConfig) -> Result<FpEnvConfig> {
    cfg.validate()?;
    let before = read_raw()?;
    write_raw(cfg.apply_to(before))?;
    Ok(FpEnvConfig::decode(before))
}

/// Restores a saved raw MXCSR when dropped, including during unwinding.
#[must_use]
pub struct EnvGuard {
    saved: u32,
}

impl EnvGuard {
    pub fn apply(cfg: FpEnvConfig) -> Result<Self> {
        cfg.validate()?;
        let saved = read_raw()?;
        write_raw(cfg.apply_to(saved))?;
        Ok(EnvGuard { saved })
    }

    pub fn saved(&self) -> u32 {
        self.saved
    }
}

impl Drop for EnvGuard {
    fn drop(&mut self) {
        let _ = write_raw(self.saved);
    }
}

/// Runs `action` under `cfg` and then restores the full previous register.
pub fn with_env<T>(cfg: FpEnvConfig, action: impl FnOnce() -> T) -> Result<T> {
    let _guard = EnvGuard::apply(cfg)?;
    Ok(action())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_bits() {
        assert!(FpEnvConfig::decode(1 << 15).ftz);
        assert!(!FpEnvConfig::decode(1 << 15).daz);
        assert!(FpEnvConfig::decode(1 << 6).daz);
        assert!(FpEnvConfig::decode(0x1F80).mask_all_exceptions);
        assert!(!FpEnvConfig::decode(0x1F00).mask_all_exceptions);
    }

    #[test]
    fn ftz_requires_underflow_mask() {
        assert!(FpEnvConfig::new(true, false, false, false).is_err());
        assert!(FpEnvConfig::new(false, false, false, true).is_err());
        assert!(FpEnvConfig::new(true, true, true, false).is_ok());
    }

    #[test]
    fn labels() {
        assert_eq!(FpEnvConfig::FTZ_DAZ.label(), "F+D");
        assert_eq!(FpEnvConfig::GRADUAL.label(), "No F+D");
    }

    #[test]
    fn apply_to_leaves_rounding_and_flags() {
        let raw = 0x1F80 | ROUNDING_CONTROL | 0x21;
        let out = FpEnvConfig::FTZ_DAZ.apply_to(raw);
        assert_eq!(out & ROUNDING_CONTROL, ROUNDING_CONTROL);
        assert_eq!(out & STATUS_FLAGS, 0x21);
        assert_eq!(
            out & (FLUSH_TO_ZERO | DENORMALS_ARE_ZERO),
            FLUSH_TO_ZERO | DENORMALS_ARE_ZERO
        );
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn write_then_read() {
        with_env(FpEnvConfig::FTZ_DAZ, || {
            let env = read_env().unwrap();
            assert!(env.ftz && env.daz);
        })
        .unwrap();
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn apply_is_idempotent_and_restorable() {
        let start = read_raw().unwrap();
        let prev = apply_env(FpEnvConfig::FTZ_DAZ).unwrap();
        assert_eq!(apply_env(FpEnvConfig::FTZ_DAZ).unwrap(), FpEnvConfig::FTZ_DAZ);
        apply_env(prev).unwrap();
        write_raw(start).unwrap();
        assert_eq!(read_raw().unwrap(), start);
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn toggling_daz_keeps_ftz() {
        let start = read_raw().unwrap();
        apply_env(FpEnvConfig::FTZ_DAZ).unwrap();
        apply_env(FpEnvConfig::with_flush_modes(true, false)).unwrap();
        let raw = read_raw().unwrap();
        assert_ne!(raw & FLUSH_TO_ZERO, 0);
        assert_eq!(raw & DENORMALS_ARE_ZERO, 0);
        write_raw(start).unwrap();
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn nested_and_failing_actions_restore() {
        let start = read_raw().unwrap();
        with_env(FpEnvConfig::FTZ_DAZ, || {
            let outer = read_raw().unwrap();
            with_env(FpEnvConfig::GRADUAL, || {}).unwrap();
            assert_eq!(read_raw().unwrap(), outer);
        })
        .unwrap();
        assert_eq!(read_raw().unwrap(), start);

        let res: Result<Result<(), &str>> = with_env(FpEnvConfig::FTZ_DAZ, || Err("boom"));
        assert_eq!(res.unwrap(), Err("boom"));
        assert_eq!(read_raw().unwrap(), start);

        let caught = std::panic::catch_unwind(|| {
            with_env(FpEnvConfig::FTZ_DAZ, || panic!("inside")).unwrap();
        });
        assert!(caught.is_err());
        assert_eq!(read_raw().unwrap(), start);
    }

    #[test]
    fn reserved_bits_rejected() {
        assert!(write_raw(1 << 16).is_err());
    }
}
