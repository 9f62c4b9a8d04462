//! Standardized QoS characteristics for mission-critical services and the
//! allocation-and-retention priority (ARP) record.
//!
//! The four MC rows (5QI 65, 67, 69, 70) are fixed; a fifth invented
//! non-GBR row stands in for commercial best-effort traffic and always ranks
//! below every MC profile.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QosError {
    #[error("no QoS profile for 5QI {0}")]
    NotFound(u16),
    #[error("invalid QoS profile for 5QI {fiveqi}: {reason}")]
    InvalidProfile { fiveqi: u16, reason: String },
    #[error("ARP priority level {0} outside 1..=15")]
    ArpOutOfRange(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceType {
    Gbr,
    NonGbr,
}

/// One row of the standardized 5QI table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosProfile {
    pub fiveqi: u16,
    pub resource_type: ResourceType,
    /// Lower value means higher priority.
    pub priority_level: u16,
    /// UE to core network, including core delay.
    pub packet_delay_budget_ms: u32,
    pub ran_delay_budget_ms: u32,
    pub packet_error_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gbr_kbps: Option<f64>,
}

impl QosProfile {
    pub fn is_gbr(&self) -> bool {
        self.resource_type == ResourceType::Gbr
    }

    pub fn ran_delay_budget_us(&self) -> u64 {
        u64::from(self.ran_delay_budget_ms) * 1_000
    }

    pub fn validate(&self) -> Result<(), QosError> {
        let bad = |reason: &str| QosError::InvalidProfile {
            fiveqi: self.fiveqi,
            reason: reason.to_owned(),
        };
        if self.priority_level < 1 {
            return Err(bad("priority_level must be >= 1"));
        }
        if !(self.packet_error_rate > 0.0 && self.packet_error_rate < 1.0) {
            return Err(bad("packet_error_rate must lie in (0, 1)"));
        }
        if self.ran_delay_budget_ms > self.packet_delay_budget_ms {
            return Err(bad("ran_delay_budget_ms exceeds packet_delay_budget_ms"));
        }
        if let Some(rate) = self.gbr_kbps {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(bad("gbr_kbps must be positive"));
            }
        }
        Ok(())
    }
}

pub const FIVEQI_MCPTT_VOICE: u16 = 65;
pub const FIVEQI_MCPTT_SIGNALING: u16 = 69;
pub const FIVEQI_MCVIDEO: u16 = 67;
pub const FIVEQI_MCDATA: u16 = 70;
/// Operator-specific 5QI used for commercial traffic.
pub const FIVEQI_COMMERCIAL: u16 = 128;

/// Worst-case guaranteed rates (upper end of each service's rate range).
pub const DEFAULT_VOICE_GBR_KBPS: f64 = 70.0;
pub const DEFAULT_VIDEO_GBR_KBPS: f64 = 5_000.0;

/// The four MC rows, in table order.
pub fn standard_profiles() -> Vec<QosProfile> {
    vec![
        QosProfile {
            fiveqi: FIVEQI_MCPTT_VOICE,
            resource_type: ResourceType::Gbr,
            priority_level: 7,
            packet_delay_budget_ms: 75,
            ran_delay_budget_ms: 65,
            packet_error_rate: 1e-2,
            gbr_kbps: Some(DEFAULT_VOICE_GBR_KBPS),
        },
        QosProfile {
            fiveqi: FIVEQI_MCPTT_SIGNALING,
            resource_type: ResourceType::NonGbr,
            priority_level: 5,
            packet_delay_budget_ms: 60,
            ran_delay_budget_ms: 50,
            packet_error_rate: 1e-6,
            gbr_kbps: None,
        },
        QosProfile {
            fiveqi: FIVEQI_MCVIDEO,
            resource_type: ResourceType::Gbr,
            priority_level: 15,
            packet_delay_budget_ms: 100,
            ran_delay_budget_ms: 100,
            packet_error_rate: 1e-3,
            gbr_kbps: Some(DEFAULT_VIDEO_GBR_KBPS),
        },
        QosProfile {
            fiveqi: FIVEQI_MCDATA,
            resource_type: ResourceType::NonGbr,
            priority_level: 55,
            packet_delay_budget_ms: 200,
            ran_delay_budget_ms: 200,
            packet_error_rate: 1e-6,
            gbr_kbps: None,
        },
    ]
}

pub fn commercial_profile() -> QosProfile {
    QosProfile {
        fiveqi: FIVEQI_COMMERCIAL,
        resource_type: ResourceType::NonGbr,
        priority_level: 80,
        packet_delay_budget_ms: 300,
        ran_delay_budget_ms: 300,
        packet_error_rate: 1e-6,
        gbr_kbps: None,
    }
}

/// Looks a 5QI up in the default table (MC rows plus the commercial row).
pub fn lookup(fiveqi: u16) -> Result<QosProfile, QosError> {
    QosTable::default().lookup(fiveqi).cloned()
}

/// A 5QI table that scenarios may extend or override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosTable {
    profiles: BTreeMap<u16, QosProfile>,
}

impl Default for QosTable {
    fn default() -> Self {
        let mut profiles: BTreeMap<u16, QosProfile> = standard_profiles()
            .into_iter()
            .map(|p| (p.fiveqi, p))
            .collect();
        let commercial = commercial_profile();
        profiles.insert(commercial.fiveqi, commercial);
        QosTable { profiles }
    }
}

impl QosTable {
    pub fn lookup(&self, fiveqi: u16) -> Result<&QosProfile, QosError> {
        self.profiles.get(&fiveqi).ok_or(QosError::NotFound(fiveqi))
    }

    /// Inserts or replaces a row after validating it.
    pub fn set(&mut self, profile: QosProfile) -> Result<(), QosError> {
        profile.validate()?;
        self.profiles.insert(profile.fiveqi, profile);
        Ok(())
    }

    pub fn profiles(&self) -> impl Iterator<Item = &QosProfile> {
        self.profiles.values()
    }

    pub fn profile_for(&self, kind: ServiceKind) -> Result<&QosProfile, QosError> {
        self.lookup(kind.fiveqi())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionCapability {
    MayPreempt,
    ShallNotPreempt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionVulnerability {
    Preemptable,
    NotPreemptable,
}

/// Allocation and retention priority. Lower `priority_level` wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ArpRepr", into = "ArpRepr")]
pub struct Arp {
    priority_level: u8,
    pub preemption_capability: PreemptionCapability,
    pub preemption_vulnerability: PreemptionVulnerability,
}

impl Arp {
    pub fn new(
        priority_level: u8,
        preemption_capability: PreemptionCapability,
        preemption_vulnerability: PreemptionVulnerability,
    ) -> Result<Self, QosError> {
        if !(1..=15).contains(&priority_level) {
            return Err(QosError::ArpOutOfRange(priority_level));
        }
        Ok(Arp {
            priority_level,
            preemption_capability,
            preemption_vulnerability,
        })
    }

    pub fn priority_level(&self) -> u8 {
        self.priority_level
    }

    pub fn may_preempt(&self) -> bool {
        self.preemption_capability == PreemptionCapability::MayPreempt
    }

    pub fn is_preemptable(&self) -> bool {
        self.preemption_vulnerability == PreemptionVulnerability::Preemptable
    }
}

#[derive(Serialize, Deserialize)]
struct ArpRepr {
    priority_level: u8,
    preemption_capability: PreemptionCapability,
    preemption_vulnerability: PreemptionVulnerability,
}

impl TryFrom<ArpRepr> for Arp {
    type Error = QosError;
    fn try_from(r: ArpRepr) -> Result<Self, Self::Error> {
        Arp::new(
            r.priority_level,
            r.preemption_capability,
            r.preemption_vulnerability,
        )
    }
}

impl From<Arp> for ArpRepr {
    fn from(a: Arp) -> Self {
        ArpRepr {
            priority_level: a.priority_level,
            preemption_capability: a.preemption_capability,
            preemption_vulnerability: a.preemption_vulnerability,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceKind {
    McpttVoice,
    McpttSignaling,
    McVideo,
    McData,
    Commercial,
}

impl ServiceKind {
    pub const ALL: [ServiceKind; 5] = [
        ServiceKind::McpttVoice,
        ServiceKind::McpttSignaling,
        ServiceKind::McVideo,
        ServiceKind::McData,
        ServiceKind::Commercial,
    ];

    pub fn is_mission_critical(self) -> bool {
        self != ServiceKind::Commercial
    }

    pub fn fiveqi(self) -> u16 {
        match self {
            ServiceKind::McpttVoice => FIVEQI_MCPTT_VOICE,
            ServiceKind::McpttSignaling => FIVEQI_MCPTT_SIGNALING,
            ServiceKind::McVideo => FIVEQI_MCVIDEO,
            ServiceKind::McData => FIVEQI_MCDATA,
            ServiceKind::Commercial => FIVEQI_COMMERCIAL,
        }
    }

    /// Allowed data-rate range in kbps. Commercial traffic is unconstrained.
    pub fn rate_range_kbps(self) -> (f64, f64) {
        match self {
            ServiceKind::McpttVoice | ServiceKind::McpttSignaling => (20.0, 70.0),
            ServiceKind::McData => (10.0, 1_000.0),
            ServiceKind::McVideo => (150.0, 5_000.0),
            ServiceKind::Commercial => (1.0, f64::INFINITY),
        }
    }

    pub fn nominal_rate_kbps(self) -> f64 {
        match self {
            ServiceKind::McpttVoice => DEFAULT_VOICE_GBR_KBPS,
            ServiceKind::McpttSignaling => 20.0,
            ServiceKind::McVideo => DEFAULT_VIDEO_GBR_KBPS,
            ServiceKind::McData => 256.0,
            ServiceKind::Commercial => 1_000.0,
        }
    }

    /// Mean inter-packet interval of the service's periodic traffic source.
    pub fn packet_interval_ms(self) -> u32 {
        match self {
            ServiceKind::McpttVoice => 20,
            ServiceKind::McpttSignaling => 40,
            ServiceKind::McVideo => 20,
            ServiceKind::McData => 50,
            ServiceKind::Commercial => 20,
        }
    }

    /// Default ARP: MC voice/signaling 2, MC video/data 6, commercial 12.
    pub fn default_arp(self) -> Arp {
        use PreemptionCapability::*;
        use PreemptionVulnerability::*;
        let (level, cap, vul) = match self {
            ServiceKind::McpttVoice | ServiceKind::McpttSignaling => {
                (2, MayPreempt, NotPreemptable)
            }
            ServiceKind::McVideo | ServiceKind::McData => (6, MayPreempt, NotPreemptable),
            ServiceKind::Commercial => (12, ShallNotPreempt, Preemptable),
        };
        Arp::new(level, cap, vul).expect("default ARP levels are in range")
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ServiceKind::McpttVoice => "mcptt-voice",
            ServiceKind::McpttSignaling => "mcptt-signaling",
            ServiceKind::McVideo => "mc-video",
            ServiceKind::McData => "mc-data",
            ServiceKind::Commercial => "commercial",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fiveqi: u16) -> QosProfile {
        standard_profiles()
            .into_iter()
            .find(|p| p.fiveqi == fiveqi)
            .unwrap()
    }

    #[test]
    fn table_rows() {
        let p = row(65);
        assert_eq!(p.resource_type, ResourceType::Gbr);
        assert_eq!(
            (
                p.priority_level,
                p.packet_delay_budget_ms,
                p.ran_delay_budget_ms
            ),
            (7, 75, 65)
        );
        assert_eq!(p.packet_error_rate, 1e-2);

        let p = row(70);
        assert_eq!(p.resource_type, ResourceType::NonGbr);
        assert_eq!(
            (
                p.priority_level,
                p.packet_delay_budget_ms,
                p.ran_delay_budget_ms
            ),
            (55, 200, 200)
        );
        assert_eq!(p.packet_error_rate, 1e-6);

        let p = row(69);
        assert_eq!(p.resource_type, ResourceType::NonGbr);
        assert_eq!(
            (
                p.priority_level,
                p.packet_delay_budget_ms,
                p.ran_delay_budget_ms
            ),
            (5, 60, 50)
        );
        assert_eq!(p.packet_error_rate, 1e-6);
    }

    #[test]
    fn lookup_rows() {
        let p = lookup(67).unwrap();
        assert_eq!(p.resource_type, ResourceType::Gbr);
        assert_eq!(
            (
                p.priority_level,
                p.packet_delay_budget_ms,
                p.ran_delay_budget_ms
            ),
            (15, 100, 100)
        );
        assert_eq!(p.packet_error_rate, 1e-3);
        assert_eq!(lookup(65).unwrap().priority_level, 7);
        assert_eq!(lookup(999), Err(QosError::NotFound(999)));
    }

    #[test]
    fn lookup_roundtrips_every_standard_row() {
        for p in standard_profiles() {
            assert_eq!(lookup(p.fiveqi).unwrap(), p);
            p.validate().unwrap();
        }
    }

    #[test]
    fn priority_ordering() {
        let prio = |k: ServiceKind| lookup(k.fiveqi()).unwrap().priority_level;
        let mut kinds = ServiceKind::ALL.to_vec();
        kinds.sort_by_key(|k| prio(*k));
        assert_eq!(
            kinds,
            vec![
                ServiceKind::McpttSignaling,
                ServiceKind::McpttVoice,
                ServiceKind::McVideo,
                ServiceKind::McData,
                ServiceKind::Commercial,
            ]
        );
    }

    #[test]
    fn service_rates_in_range() {
        for k in ServiceKind::ALL {
            let (lo, hi) = k.rate_range_kbps();
            let r = k.nominal_rate_kbps();
            assert!(r >= lo && r <= hi, "{k}");
        }
        for p in standard_profiles() {
            if let Some(gbr) = p.gbr_kbps {
                assert!(p.is_gbr());
                assert!(gbr > 0.0);
            }
        }
    }

    #[test]
    fn arp_range() {
        use PreemptionCapability::*;
        use PreemptionVulnerability::*;
        assert!(Arp::new(0, MayPreempt, Preemptable).is_err());
        assert!(Arp::new(16, MayPreempt, Preemptable).is_err());
        assert_eq!(
            Arp::new(15, MayPreempt, Preemptable)
                .unwrap()
                .priority_level(),
            15
        );
        let bad: Result<Arp, _> = serde_json::from_str(
            r#"{"priority_level":20,"preemption_capability":"may-preempt","preemption_vulnerability":"preemptable"}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut t = QosTable::default();
        let mut p = row(65);
        p.ran_delay_budget_ms = 80;
        assert!(t.set(p).is_err());
        let mut p = row(65);
        p.packet_error_rate = 1.0;
        assert!(t.set(p).is_err());
    }
}
