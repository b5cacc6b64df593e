//! Hardware profile and the elementary transfer/collective time primitives.
//!
//! PCIe is full duplex: host-to-device and device-to-host are separate
//! resources. Concurrent transfers in one direction share its bandwidth
//! equally.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HardwareError {
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
    #[error("invalid hardware profile: {0}")]
    InvalidProfile(String),
    #[error("malformed hardware profile: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    /// Host-to-device bandwidth, bytes/s.
    pub h2d_bw: f64,
    /// Device-to-host bandwidth, bytes/s.
    pub d2h_bw: f64,
    /// Collective latency constant, seconds.
    pub coll_alpha: f64,
    /// Collective effective bandwidth, bytes/s.
    pub coll_bw: f64,
    pub world_size: u32,
    /// Device memory capacity, bytes.
    pub gpu_mem: f64,
    /// Host memory capacity, bytes.
    pub cpu_mem: f64,
    /// CPU optimizer throughput, parameters/s.
    pub cpu_optim_rate: f64,
    /// GPU optimizer throughput, parameters/s.
    pub gpu_optim_rate: f64,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), HardwareError> {
        let positive = [
            ("h2d_bw", self.h2d_bw),
            ("d2h_bw", self.d2h_bw),
            ("coll_bw", self.coll_bw),
            ("gpu_mem", self.gpu_mem),
            ("cpu_mem", self.cpu_mem),
            ("cpu_optim_rate", self.cpu_optim_rate),
            ("gpu_optim_rate", self.gpu_optim_rate),
        ];
        for (name, v) in positive {
            // gpu_mem may be +inf for unconstrained planning.
            if v.is_nan() || v <= 0.0 {
                return Err(HardwareError::InvalidProfile(format!(
                    "{name} must be strictly positive"
                )));
            }
        }
        if !(self.coll_alpha >= 0.0 && self.coll_alpha.is_finite()) {
            return Err(HardwareError::InvalidProfile(
                "coll_alpha must be finite and >= 0".into(),
            ));
        }
        if self.world_size == 0 {
            return Err(HardwareError::InvalidProfile(
                "world_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Bytes of a chunk each rank holds when it is sharded across the world.
    pub fn shard_bytes(&self, chunk_bytes: u64) -> f64 {
        chunk_bytes as f64 / self.world_size as f64
    }
}

pub fn load_profile<R: Read>(source: R) -> Result<HardwareProfile, HardwareError> {
    let hw: HardwareProfile =
        serde_json::from_reader(source).map_err(|e| HardwareError::Malformed(e.to_string()))?;
    hw.validate()?;
    Ok(hw)
}

pub fn transfer_time(bytes: f64, bw: f64) -> Result<f64, HardwareError> {
    if bw.is_nan() || bw <= 0.0 {
        return Err(HardwareError::ZeroBandwidth);
    }
    Ok(bytes / bw)
}

/// Ring all-gather: `alpha + bytes·(w−1)/(w·bw)`, free on a single rank.
pub fn gather_time(chunk_bytes: f64, hw: &HardwareProfile) -> f64 {
    if hw.world_size <= 1 {
        return 0.0;
    }
    let w = hw.world_size as f64;
    hw.coll_alpha + chunk_bytes * (w - 1.0) / (w * hw.coll_bw)
}

/// Gradient reduction uses the same latency/bandwidth model as gathering.
pub fn reduce_time(chunk_bytes: f64, hw: &HardwareProfile) -> f64 {
    gather_time(chunk_bytes, hw)
}

/// Equal-share bandwidth of one of `n_streams` concurrent transfers.
pub fn contended_bandwidth(base_bw: f64, n_streams: usize) -> f64 {
    base_bw / n_streams.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hw(world_size: u32) -> HardwareProfile {
        HardwareProfile {
            h2d_bw: 16e9,
            d2h_bw: 16e9,
            coll_alpha: 0.0,
            coll_bw: 8e9,
            world_size,
            gpu_mem: 24e9,
            cpu_mem: 384e9,
            cpu_optim_rate: 1e9,
            gpu_optim_rate: 1e10,
        }
    }

    #[test]
    fn transfer_basics() {
        assert_eq!(transfer_time(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(transfer_time(15.8e9, 15.8e9).unwrap(), 1.0);
        assert_eq!(transfer_time(31.5e9, 31.5e9).unwrap(), 1.0);
        assert!(matches!(
            transfer_time(1.0, 0.0),
            Err(HardwareError::ZeroBandwidth)
        ));
    }

    #[test]
    fn gather_formula() {
        assert_eq!(gather_time(1e12, &hw(1)), 0.0);
        let x = 4e9;
        assert!((gather_time(x, &hw(4)) - 0.75 * x / 8e9).abs() < 1e-12);
        let mut h = hw(4);
        h.coll_alpha = 2e-5;
        assert_eq!(gather_time(0.0, &h), 2e-5);
    }

    #[test]
    fn contention_shares() {
        assert_eq!(contended_bandwidth(16e9, 1), 16e9);
        assert_eq!(contended_bandwidth(16e9, 2), 8e9);
    }

    #[test]
    fn profile_validation() {
        assert!(hw(4).validate().is_ok());
        assert!(hw(0).validate().is_err());
        let mut h = hw(2);
        h.d2h_bw = 0.0;
        assert!(h.validate().is_err());
        let text = serde_json::to_string(&hw(4)).unwrap();
        assert_eq!(load_profile(text.as_bytes()).unwrap(), hw(4));
    }

    proptest! {
        #[test]
        fn gather_monotone_in_bytes(a in 0.0f64..1e12, b in 0.0f64..1e12, w in 1u32..16) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let h = HardwareProfile { coll_alpha: 1e-5, ..hw(w) };
            prop_assert!(gather_time(lo, &h) <= gather_time(hi, &h));
        }
    }
}
