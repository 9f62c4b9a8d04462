//! Geometry and link-quality model.
//!
//! Log-distance pathloss, the three coverage knobs (transmit power class,
//! beamforming gain, repetition), a logistic packet-error curve per MCS and
//! rate to PRB mapping.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadioError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("MCS {0} not in the configured table")]
    UnknownMcs(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    /// Altitude above ground.
    pub z: f64,
}

impl Position {
    pub const ORIGIN: Position = Position {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Position { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Position::new(v.x, v.y, v.z)
    }

    pub fn lerp(&self, other: &Position, t: f64) -> Position {
        Position::from_vector(&(self.to_vector() + (other.to_vector() - self.to_vector()) * t))
    }
}

impl From<[f64; 3]> for Position {
    fn from(a: [f64; 3]) -> Self {
        Position::new(a[0], a[1], a[2])
    }
}

/// UE transmit power classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerClass {
    /// 23 dBm, the default handset class.
    #[default]
    Pc3,
    /// 26 dBm high-power class.
    Pc2,
    /// 29 dBm.
    Pc1_5,
}

impl PowerClass {
    pub fn max_tx_power_dbm(self) -> f64 {
        match self {
            PowerClass::Pc3 => 23.0,
            PowerClass::Pc2 => 26.0,
            PowerClass::Pc1_5 => 29.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub beam_gain_db: f64,
    pub repetition_factor: u32,
    pub pathloss_db: f64,
    pub noise_dbm: f64,
}

impl LinkBudget {
    pub fn repetition_gain_db(&self) -> f64 {
        10.0 * f64::from(self.repetition_factor.max(1)).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub per_prb_kbps: f64,
    /// SNR at which the packet error probability is one half.
    pub snr50_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub pl0_db: f64,
    pub d0_m: f64,
    pub pathloss_exponent: f64,
    pub shadowing_sigma_db: f64,
    pub logistic_k_per_db: f64,
    pub noise_dbm: f64,
    pub gnb_tx_power_dbm: f64,
    pub slot_us: u64,
    pub mcs_table: Vec<McsEntry>,
}

impl Default for RadioConfig {
    fn default() -> Self {
        let rates = [18.0, 36.0, 72.0, 144.0, 288.0, 432.0, 576.0, 720.0];
        RadioConfig {
            pl0_db: 32.4,
            d0_m: 1.0,
            pathloss_exponent: 3.0,
            shadowing_sigma_db: 0.0,
            logistic_k_per_db: 2.0,
            noise_dbm: -100.0,
            gnb_tx_power_dbm: 30.0,
            slot_us: 1_000,
            mcs_table: rates
                .iter()
                .enumerate()
                .map(|(i, &r)| McsEntry {
                    per_prb_kbps: r,
                    snr50_db: 3.0 * i as f64,
                })
                .collect(),
        }
    }
}

pub type Mcs = u8;

impl RadioConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        let dom = |m: &str| Err(RadioError::Domain(m.to_owned()));
        if !(self.d0_m > 0.0) {
            return dom("d0_m must be positive");
        }
        if !(self.pathloss_exponent > 0.0) {
            return dom("pathloss_exponent must be positive");
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return dom("shadowing_sigma_db must be non-negative");
        }
        if !(self.logistic_k_per_db > 0.0) {
            return dom("logistic_k_per_db must be positive");
        }
        if self.slot_us == 0 {
            return dom("slot_us must be positive");
        }
        if self.mcs_table.is_empty() {
            return dom("mcs_table must not be empty");
        }
        for w in self.mcs_table.windows(2) {
            if !(w[1].per_prb_kbps >= w[0].per_prb_kbps && w[1].snr50_db > w[0].snr50_db) {
                return dom("mcs_table must be monotone in rate and snr50");
            }
        }
        if self.mcs_table.iter().any(|m| !(m.per_prb_kbps > 0.0)) {
            return dom("per_prb_kbps must be positive");
        }
        Ok(())
    }

    pub fn mcs_count(&self) -> usize {
        self.mcs_table.len()
    }

    pub fn highest_mcs(&self) -> Mcs {
        (self.mcs_table.len() - 1) as Mcs
    }

    fn entry(&self, mcs: Mcs) -> Result<&McsEntry, RadioError> {
        self.mcs_table
            .get(usize::from(mcs))
            .ok_or(RadioError::UnknownMcs(mcs))
    }

    pub fn pathloss(&self, distance_m: f64) -> Result<f64, RadioError> {
        if !(distance_m > 0.0) || !distance_m.is_finite() {
            return Err(RadioError::Domain(format!(
                "pathloss distance must be positive, got {distance_m}"
            )));
        }
        Ok(self.pl0_db + 10.0 * self.pathloss_exponent * (distance_m / self.d0_m).log10())
    }

    /// Pathloss plus a lognormal shadowing draw (no draw when sigma is 0).
    pub fn shadowed_pathloss(
        &self,
        distance_m: f64,
        rng: &mut RngStream,
    ) -> Result<f64, RadioError> {
        let pl = self.pathloss(distance_m)?;
        if self.shadowing_sigma_db > 0.0 {
            Ok(pl + rng.normal(self.shadowing_sigma_db))
        } else {
            Ok(pl)
        }
    }

    pub fn snr(&self, budget: &LinkBudget) -> f64 {
        budget.tx_power_dbm + budget.beam_gain_db - budget.pathloss_db - budget.noise_dbm
            + budget.repetition_gain_db()
    }

    /// SNR of a plain downlink from a gNB at `tx` to a receiver at `rx`.
    pub fn downlink_snr(
        &self,
        tx: &Position,
        rx: &Position,
        beam_gain_db: f64,
    ) -> Result<f64, RadioError> {
        let d = tx.distance(rx).max(self.d0_m);
        Ok(self.snr(&LinkBudget {
            tx_power_dbm: self.gnb_tx_power_dbm,
            beam_gain_db,
            repetition_factor: 1,
            pathloss_db: self.pathloss(d)?,
            noise_dbm: self.noise_dbm,
        }))
    }

    pub fn snr50(&self, mcs: Mcs) -> Result<f64, RadioError> {
        Ok(self.entry(mcs)?.snr50_db)
    }

    pub fn per_prb_kbps(&self, mcs: Mcs) -> Result<f64, RadioError> {
        Ok(self.entry(mcs)?.per_prb_kbps)
    }

    /// Bits one PRB carries in one slot at the given MCS.
    pub fn bits_per_prb_slot(&self, mcs: Mcs) -> Result<f64, RadioError> {
        Ok(self.per_prb_kbps(mcs)? * self.slot_us as f64 / 1_000.0)
    }

    pub fn packet_error_prob(&self, snr_db: f64, mcs: Mcs) -> Result<f64, RadioError> {
        let snr50 = self.snr50(mcs)?;
        let x = self.logistic_k_per_db * (snr_db - snr50);
        Ok(1.0 / (1.0 + x.exp()))
    }

    pub fn required_prbs(&self, rate_kbps: f64, mcs: Mcs) -> Result<u32, RadioError> {
        if !(rate_kbps > 0.0) || !rate_kbps.is_finite() {
            return Err(RadioError::Domain(format!(
                "rate must be positive, got {rate_kbps}"
            )));
        }
        let per = self.per_prb_kbps(mcs)?;
        Ok((rate_kbps / per).ceil() as u32)
    }

    /// Highest MCS whose error probability at `snr_db` is within
    /// `target_per`; falls back to the most robust MCS when none qualifies.
    pub fn mcs_for_snr(&self, snr_db: f64, target_per: f64) -> Mcs {
        (0..self.mcs_table.len())
            .rev()
            .map(|m| m as Mcs)
            .find(|&m| {
                self.packet_error_prob(snr_db, m)
                    .is_ok_and(|p| p <= target_per)
            })
            .unwrap_or(0)
    }

    pub fn draw_packet_error(
        &self,
        snr_db: f64,
        mcs: Mcs,
        rng: &mut RngStream,
    ) -> Result<bool, RadioError> {
        let p = self.packet_error_prob(snr_db, mcs)?;
        Ok(rng.uniform() < p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg() -> RadioConfig {
        RadioConfig::default()
    }

    fn budget(rep: u32) -> LinkBudget {
        LinkBudget {
            tx_power_dbm: 23.0,
            beam_gain_db: 0.0,
            repetition_factor: rep,
            pathloss_db: 120.0,
            noise_dbm: -100.0,
        }
    }

    #[test]
    fn pathloss_values() {
        let c = cfg();
        assert_abs_diff_eq!(c.pathloss(1.0).unwrap(), 32.4, epsilon = 1e-12);
        // 32.4 + 30 * log10(10) and 32.4 + 30 * log10(100)
        assert_abs_diff_eq!(c.pathloss(10.0).unwrap(), 62.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.pathloss(100.0).unwrap(), 92.4, epsilon = 1e-12);
        assert!(matches!(c.pathloss(0.0), Err(RadioError::Domain(_))));
        assert!(matches!(c.pathloss(-3.0), Err(RadioError::Domain(_))));
    }

    #[test]
    fn snr_knobs() {
        let c = cfg();
        assert_abs_diff_eq!(c.snr(&budget(1)), 23.0 - 120.0 + 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            c.snr(&budget(2)) - c.snr(&budget(1)),
            3.0103,
            epsilon = 1e-4
        );
        let mut hp = budget(1);
        hp.tx_power_dbm = PowerClass::Pc2.max_tx_power_dbm();
        assert_abs_diff_eq!(c.snr(&hp) - c.snr(&budget(1)), 3.0, epsilon = 1e-12);
        let mut beam = budget(1);
        beam.beam_gain_db = 6.0;
        assert_abs_diff_eq!(c.snr(&beam) - c.snr(&budget(1)), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn per_curve() {
        let c = cfg();
        for m in 0..8u8 {
            let s50 = c.snr50(m).unwrap();
            assert_abs_diff_eq!(c.packet_error_prob(s50, m).unwrap(), 0.5, epsilon = 1e-15);
            assert!(c.packet_error_prob(1e6, m).unwrap() < 1e-300);
        }
        let p = c.packet_error_prob(c.snr50(3).unwrap() + 2.0, 3).unwrap();
        assert_abs_diff_eq!(p, 1.0 / (1.0 + 4f64.exp()), epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.0180, epsilon = 1e-4);
        assert_eq!(c.packet_error_prob(0.0, 8), Err(RadioError::UnknownMcs(8)));
    }

    #[test]
    fn prb_mapping() {
        let c = cfg();
        assert_eq!(c.required_prbs(36.0, 1).unwrap(), 1);
        assert_eq!(c.required_prbs(72.0, 1).unwrap(), 2);
        assert_eq!(c.required_prbs(70.0, 1).unwrap(), 2);
        assert_eq!(c.required_prbs(5_000.0, 7).unwrap(), 7);
        assert!(c.required_prbs(0.0, 1).is_err());
        assert_eq!(c.required_prbs(10.0, 9), Err(RadioError::UnknownMcs(9)));
    }

    #[test]
    fn mcs_selection_respects_target() {
        let c = cfg();
        let m = c.mcs_for_snr(10.0, 1e-2);
        assert!(c.packet_error_prob(10.0, m).unwrap() <= 1e-2);
        if usize::from(m) + 1 < c.mcs_count() {
            assert!(c.packet_error_prob(10.0, m + 1).unwrap() > 1e-2);
        }
        assert_eq!(c.mcs_for_snr(-50.0, 1e-2), 0);
        assert_eq!(c.mcs_for_snr(100.0, 1e-6), 7);
    }

    #[test]
    fn shadowing_off_by_default() {
        let c = cfg();
        let mut rng = RngStream::new(1, "radio");
        assert_eq!(
            c.shadowed_pathloss(50.0, &mut rng).unwrap(),
            c.pathloss(50.0).unwrap()
        );
        let mut s = cfg();
        s.shadowing_sigma_db = 4.0;
        assert_ne!(
            s.shadowed_pathloss(50.0, &mut rng).unwrap(),
            s.pathloss(50.0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn pathloss_strictly_increasing(a in 0.1f64..5_000.0, b in 0.1f64..5_000.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let c = cfg();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(c.pathloss(lo).unwrap() < c.pathloss(hi).unwrap());
        }

        #[test]
        fn per_monotone_in_snr(s1 in -30.0f64..60.0, s2 in -30.0f64..60.0, m in 0u8..8) {
            let c = cfg();
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(c.packet_error_prob(lo, m).unwrap() >= c.packet_error_prob(hi, m).unwrap());
        }

        #[test]
        fn repetition_shift_exact(k in 1u32..64) {
            let c = cfg();
            let shift = c.snr(&budget(k)) - c.snr(&budget(1));
            prop_assert!((shift - 10.0 * f64::from(k).log10()).abs() < 1e-9);
        }

        #[test]
        fn prbs_non_increasing_in_mcs(rate in 1.0f64..10_000.0, m in 0u8..7) {
            let c = cfg();
            prop_assert!(c.required_prbs(rate, m + 1).unwrap() <= c.required_prbs(rate, m).unwrap());
        }
    }
}
