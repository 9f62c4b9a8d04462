//! Scenario files: schema, parsing and semantic validation.
//!
//! A scenario is one TOML document. `run` executes it on a single engine and
//! returns a metrics report together with the event stream the report was
//! derived from; `trace` writes and reads that stream as CSV.

mod metrics;
mod run;
mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{Collector, MetricEvent, Report};
pub use run::{positioning_demo, run, FixRecord, RunError, RunOutput};
pub use trace::{read_trace, replay, write_trace, TraceError};

use crate::access::{CategoryBarring, CbraParams, UacConfig};
use crate::iab::ReplacementMode;
use crate::multicast::MbsConfig;
use crate::positioning::Method;
use crate::qos::{QosProfile, QosTable, ServiceKind};
use crate::radio::{PowerClass, RadioConfig};
use crate::sidelink::SidelinkConfig;
use crate::ue::UeClass;

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub rach: CbraParams,
    #[serde(default)]
    pub uac: UacSection,
    #[serde(default)]
    pub qos: QosSection,
    #[serde(default)]
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub ue_groups: Vec<UeGroupSpec>,
    #[serde(default)]
    pub iab: IabSection,
    #[serde(default)]
    pub mbs: MbsSection,
    #[serde(default)]
    pub sidelink: SidelinkSection,
    #[serde(default)]
    pub positioning: PositioningSection,
    #[serde(default)]
    pub ablation: Ablation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UacSection {
    #[serde(default)]
    pub categories: Vec<UacCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UacCategory {
    pub category: u8,
    pub barring_factor: f64,
    pub barring_time_ms: f64,
    #[serde(default)]
    pub exempt_identities: BTreeSet<u8>,
}

impl UacSection {
    pub fn to_config(&self) -> UacConfig {
        UacConfig {
            categories: self
                .categories
                .iter()
                .map(|c| {
                    (
                        c.category,
                        CategoryBarring {
                            barring_factor: c.barring_factor,
                            barring_time_ms: c.barring_time_ms,
                            exempt_identities: c.exempt_identities.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Extra or replacement rows for the QoS table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QosSection {
    #[serde(default)]
    pub profiles: Vec<QosProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub id: u32,
    #[serde(default)]
    pub position: Point,
    pub capacity_prbs: u32,
    #[serde(default = "yes")]
    pub mbs: bool,
    /// Served by the DU of this IAB node; the cell is up only while that DU
    /// is serving.
    #[serde(default)]
    pub iab_node: Option<u32>,
    #[serde(default)]
    pub max_connections: Option<u32>,
    #[serde(default)]
    pub mc_reserved_connections: u32,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArpSpec {
    pub priority_level: u8,
    pub may_preempt: bool,
    pub preemptable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSpec {
    /// Ground-plane centre; defaults to the group's cell.
    pub center: Option<[f64; 2]>,
    pub min_radius_m: f64,
    pub radius_m: f64,
    pub height_m: f64,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        PlacementSpec {
            center: None,
            min_radius_m: 20.0,
            radius_m: 300.0,
            height_m: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccessTiming {
    pub enabled: bool,
    pub start_ms: u64,
    pub spread_ms: u64,
}

impl Default for AccessTiming {
    fn default() -> Self {
        AccessTiming {
            enabled: true,
            start_ms: 0,
            spread_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeGroupSpec {
    pub name: String,
    pub count: u32,
    pub class: UeClass,
    /// Out-of-coverage groups have no cell.
    #[serde(default)]
    pub cell: Option<u32>,
    /// Defaults to voice for mission-critical and commercial otherwise.
    #[serde(default)]
    pub services: Option<Vec<ServiceKind>>,
    #[serde(default)]
    pub rate_kbps: Option<f64>,
    #[serde(default)]
    pub arp: Option<ArpSpec>,
    #[serde(default)]
    pub power_class: PowerClass,
    #[serde(default)]
    pub placement: PlacementSpec,
    #[serde(default)]
    pub access: AccessTiming,
}

impl UeGroupSpec {
    pub fn services(&self) -> Vec<ServiceKind> {
        self.services.clone().unwrap_or_else(|| match self.class {
            UeClass::MissionCritical => vec![ServiceKind::McpttVoice],
            UeClass::Commercial => vec![ServiceKind::Commercial],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IabSection {
    pub f1_setup_delay_ms: u64,
    pub nodes: Vec<IabNodeSpec>,
    pub replacements: Vec<ReplacementSpec>,
}

impl Default for IabSection {
    fn default() -> Self {
        IabSection {
            f1_setup_delay_ms: 50,
            nodes: Vec::new(),
            replacements: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IabRoleSpec {
    Donor,
    Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IabNodeSpec {
    pub id: u32,
    pub role: IabRoleSpec,
    #[serde(default)]
    pub position: Point,
    #[serde(default)]
    pub parent: Option<u32>,
    #[serde(default = "default_backhaul_prbs")]
    pub capacity_prbs: u32,
    #[serde(default = "default_hop_latency_us")]
    pub per_hop_latency_us: u64,
    #[serde(default)]
    pub integrate_at_ms: u64,
    /// Hold F1 until the flight ends.
    #[serde(default)]
    pub defer_f1: bool,
    #[serde(default)]
    pub flight: Option<FlightSpec>,
    #[serde(default)]
    pub battery_j: Option<f64>,
    #[serde(default)]
    pub drain_w: f64,
}

fn default_backhaul_prbs() -> u32 {
    100
}

fn default_hop_latency_us() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlightSpec {
    pub waypoints: Vec<Point>,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementSpec {
    /// Node being withdrawn.
    pub source: u32,
    /// Standby node taking over.
    pub replacement: u32,
    pub mode: ReplacementMode,
    /// Fixed start time; otherwise the replacement starts
    /// `low_battery_margin_ms` before the source's battery runs out.
    #[serde(default)]
    pub at_ms: Option<u64>,
    #[serde(default = "default_margin_ms")]
    pub low_battery_margin_ms: u64,
    #[serde(default = "default_gap_ms")]
    pub gap_ms: u64,
    #[serde(default = "default_spacing_ms")]
    pub spacing_ms: u64,
}

fn default_margin_ms() -> u64 {
    5_000
}

fn default_gap_ms() -> u64 {
    30
}

fn default_spacing_ms() -> u64 {
    50
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbsSection {
    pub config: MbsConfig,
    pub sessions: Vec<SessionSpec>,
    pub handovers: Vec<MbsHandoverSpec>,
    pub adapt_interval_ms: Option<u64>,
    /// Peak-to-peak uniform noise added to every CSI report.
    pub csi_noise_db: f64,
}

impl MbsSection {
    pub fn adapt_interval_ms(&self) -> u64 {
        self.adapt_interval_ms.unwrap_or(100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub id: u32,
    pub fiveqi: u16,
    pub rate_kbps: f64,
    #[serde(default = "default_packet_interval_ms")]
    pub packet_interval_ms: u64,
    /// UE group names.
    pub members: Vec<String>,
    #[serde(default)]
    pub as_ip_unicast: bool,
    #[serde(default)]
    pub start_ms: u64,
}

fn default_packet_interval_ms() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbsHandoverSpec {
    pub group: String,
    /// Members of the group handed over; all when omitted.
    #[serde(default)]
    pub ue_index: Option<u32>,
    pub session: u32,
    pub target_cell: u32,
    pub at_ms: u64,
    #[serde(default = "default_gap_ms")]
    pub gap_ms: u64,
    /// Spacing between successive members when the whole group moves.
    #[serde(default = "default_spacing_ms")]
    pub spacing_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SidelinkSection {
    pub config: SidelinkConfig,
    pub slots_per_window: u32,
    pub subchannels: u32,
    pub groups: Vec<SidelinkGroupSpec>,
}

impl Default for SidelinkSection {
    fn default() -> Self {
        SidelinkSection {
            config: SidelinkConfig::default(),
            slots_per_window: 20,
            subchannels: 4,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidelinkGroupSpec {
    pub name: String,
    /// UE group whose members form this sidelink group.
    pub members: String,
    pub priority: u8,
    #[serde(default = "default_sl_period_ms")]
    pub period_ms: u64,
    #[serde(default)]
    pub mcs: u8,
    #[serde(default = "default_sl_power_dbm")]
    pub tx_power_dbm: f64,
    #[serde(default)]
    pub start_ms: u64,
}

fn default_sl_period_ms() -> u64 {
    100
}

fn default_sl_power_dbm() -> f64 {
    23.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositioningSection {
    pub method: Method,
    pub sigma_ns: f64,
    /// SRS occasions averaged per fix.
    pub srs_occasions: u32,
    pub draws: u32,
    pub init: Option<Point>,
    pub targets: Vec<Point>,
    pub geometries: Vec<GeometrySpec>,
}

impl Default for PositioningSection {
    fn default() -> Self {
        PositioningSection {
            method: Method::Tdoa,
            sigma_ns: 10.0,
            srs_occasions: 1,
            draws: 200,
            init: None,
            targets: Vec::new(),
            geometries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub name: String,
    pub anchors: Vec<AnchorSpec>,
    #[serde(default)]
    pub improve: Option<ImproveSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    pub position: Point,
    #[serde(default)]
    pub airborne: bool,
    #[serde(default)]
    pub clock_offset_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImproveSpec {
    pub region_min: Point,
    pub region_max: Point,
    pub step_m: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Mission-critical UEs lose UAC exemption and their RACH parameters.
    pub no_mc_access_priority: bool,
    /// Nobody may pre-empt.
    pub no_preemption: bool,
    /// Missed SDUs are not retransmitted after an MBS handover.
    pub no_mbs_pdcp_retransmission: bool,
    /// Sessions stay on PTM whatever the cost, as in semi-static broadcast.
    pub fixed_ptm: bool,
    /// IAB replacements fall back to one-by-one handover.
    pub plain_iab_handover: bool,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub path: String,
    pub message: String,
    pub line: Option<usize>,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.path, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.issues {
            writeln!(f, "  {i}")?;
        }
        Ok(())
    }
}

impl Scenario {
    /// Parses without semantic checks.
    pub fn from_toml_str(src: &str) -> Result<Self, ScenarioError> {
        toml::from_str(src).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Parses and validates; issues carry line numbers from `src`.
    pub fn load_str(src: &str) -> Result<Self, ScenarioError> {
        let s = Self::from_toml_str(src)?;
        let report = s.validate_with_source(Some(src));
        if report.is_valid() {
            Ok(s)
        } else {
            Err(ScenarioError::Invalid(report))
        }
    }

    pub fn validate(&self) -> ValidationReport {
        self.validate_with_source(None)
    }

    /// Table of this scenario: defaults plus `qos.profiles` overrides.
    pub fn qos_table(&self) -> Result<QosTable, crate::qos::QosError> {
        let mut t = QosTable::default();
        for p in &self.qos.profiles {
            t.set(p.clone())?;
        }
        Ok(t)
    }

    pub fn ue_count(&self) -> u32 {
        self.ue_groups.iter().map(|g| g.count).sum()
    }

    fn validate_with_source(&self, src: Option<&str>) -> ValidationReport {
        let mut v = Validator {
            src,
            issues: Vec::new(),
        };
        self.check(&mut v);
        ValidationReport { issues: v.issues }
    }

    fn check(&self, v: &mut Validator<'_>) {
        if let Err(e) = self.radio.validate() {
            v.err("radio", e.to_string(), None);
        }
        if let Err(e) = self.rach.validate() {
            v.err("rach", e.to_string(), None);
        }
        for (i, c) in self.uac.categories.iter().enumerate() {
            let path = format!("uac.categories[{i}]");
            if !(0.0..=1.0).contains(&c.barring_factor) {
                v.err(
                    &path,
                    format!("barring_factor {} is outside [0, 1]", c.barring_factor),
                    Some("barring_factor"),
                );
            }
            if !(c.barring_time_ms >= 0.0) {
                v.err(
                    &path,
                    "barring_time_ms must be non-negative",
                    Some("barring_time_ms"),
                );
            }
        }
        let qos = match self.qos_table() {
            Ok(t) => Some(t),
            Err(e) => {
                v.err("qos.profiles", e.to_string(), Some("fiveqi"));
                None
            }
        };

        let mut cell_ids = BTreeSet::new();
        let iab_ids: BTreeSet<u32> = self.iab.nodes.iter().map(|n| n.id).collect();
        for c in &self.cells {
            let path = format!("cells[id={}]", c.id);
            if !cell_ids.insert(c.id) {
                v.err(&path, "duplicate cell id", Some(&format!("id = {}", c.id)));
            }
            if !c.position.iter().all(|x| x.is_finite()) {
                v.err(&path, "position must be finite", None);
            }
            if let Some(n) = c.iab_node {
                if !iab_ids.contains(&n) {
                    v.err(
                        &path,
                        format!("cell refers to unknown IAB node {n}"),
                        Some(&format!("iab_node = {n}")),
                    );
                }
            }
        }

        let mut groups = BTreeMap::new();
        for g in &self.ue_groups {
            let path = format!("ue_groups[{}]", g.name);
            let anchor = format!("\"{}\"", g.name);
            if groups.insert(g.name.clone(), g).is_some() {
                v.err(&path, "duplicate ue group name", Some(&anchor));
            }
            match g.cell {
                Some(c) if !cell_ids.contains(&c) => {
                    v.err(
                        &path,
                        format!("ue group '{}' is assigned to unknown cell {c}", g.name),
                        Some(&anchor),
                    );
                }
                None if g.access.enabled && !g.services().is_empty() => {
                    v.err(
                        &path,
                        format!("ue group '{}' requests service but has no cell", g.name),
                        Some(&anchor),
                    );
                }
                _ => {}
            }
            let p = &g.placement;
            if !(p.min_radius_m >= 0.0 && p.radius_m >= p.min_radius_m) {
                v.err(
                    &path,
                    "placement needs 0 <= min_radius_m <= radius_m",
                    Some(&anchor),
                );
            }
            if let Some(a) = g.arp {
                if !(1..=15).contains(&a.priority_level) {
                    v.err(
                        &path,
                        format!("ARP priority level {} outside 1..=15", a.priority_level),
                        Some(&anchor),
                    );
                }
            }
            if let Some(r) = g.rate_kbps {
                if !(r > 0.0) {
                    v.err(&path, "rate_kbps must be positive", Some(&anchor));
                }
            }
            if let Some(q) = &qos {
                for s in g.services() {
                    if q.profile_for(s).is_err() {
                        v.err(
                            &path,
                            format!("no QoS profile for service {s}"),
                            Some(&anchor),
                        );
                    }
                }
            }
        }

        self.check_iab(v, &iab_ids);

        let mut sessions = BTreeSet::new();
        for s in &self.mbs.sessions {
            let path = format!("mbs.sessions[id={}]", s.id);
            if !sessions.insert(s.id) {
                v.err(&path, "duplicate session id", None);
            }
            if let Some(q) = &qos {
                if q.lookup(s.fiveqi).is_err() {
                    v.err(
                        &path,
                        format!("unknown 5QI {}", s.fiveqi),
                        Some(&format!("fiveqi = {}", s.fiveqi)),
                    );
                }
            }
            if !(s.rate_kbps > 0.0) || s.packet_interval_ms == 0 {
                v.err(
                    &path,
                    "rate_kbps and packet_interval_ms must be positive",
                    None,
                );
            }
            for m in &s.members {
                match groups.get(m) {
                    None => v.err(
                        &path,
                        format!("session {} has unknown member group '{m}'", s.id),
                        Some(&format!("\"{m}\"")),
                    ),
                    Some(g) if g.cell.is_none() => v.err(
                        &path,
                        format!("member group '{m}' has no cell"),
                        Some(&format!("\"{m}\"")),
                    ),
                    _ => {}
                }
            }
        }
        let mut members_seen: BTreeMap<&str, u32> = BTreeMap::new();
        for s in &self.mbs.sessions {
            for m in &s.members {
                *members_seen.entry(m).or_default() += 1;
            }
        }
        for (m, n) in members_seen {
            if n > 1 {
                v.err(
                    "mbs.sessions",
                    format!("group '{m}' joins more than one session"),
                    Some(&format!("\"{m}\"")),
                );
            }
        }
        let c = &self.mbs.config;
        if !(c.hysteresis_pct >= 0.0 && c.hysteresis_pct < 100.0) {
            v.err(
                "mbs.config",
                "hysteresis_pct must be in [0, 100)",
                Some("hysteresis_pct"),
            );
        }
        if !(self.mbs.csi_noise_db >= 0.0) {
            v.err(
                "mbs",
                "csi_noise_db must be non-negative",
                Some("csi_noise_db"),
            );
        }
        if self.mbs.adapt_interval_ms() == 0 {
            v.err(
                "mbs",
                "adapt_interval_ms must be positive",
                Some("adapt_interval_ms"),
            );
        }
        for (i, h) in self.mbs.handovers.iter().enumerate() {
            let path = format!("mbs.handovers[{i}]");
            match groups.get(&h.group) {
                None => v.err(
                    &path,
                    format!("unknown group '{}'", h.group),
                    Some(&format!("\"{}\"", h.group)),
                ),
                Some(g) => {
                    if h.ue_index.is_some_and(|u| u >= g.count) {
                        v.err(
                            &path,
                            format!("ue_index beyond group '{}' size {}", h.group, g.count),
                            None,
                        );
                    }
                    if !self
                        .mbs
                        .sessions
                        .iter()
                        .any(|s| s.id == h.session && s.members.contains(&h.group))
                    {
                        v.err(
                            &path,
                            format!("group '{}' is not in session {}", h.group, h.session),
                            None,
                        );
                    }
                }
            }
            if !cell_ids.contains(&h.target_cell) {
                v.err(
                    &path,
                    format!("unknown target cell {}", h.target_cell),
                    Some(&format!("target_cell = {}", h.target_cell)),
                );
            }
        }

        let sl = &self.sidelink;
        if !sl.groups.is_empty() && (sl.slots_per_window == 0 || sl.subchannels == 0) {
            v.err(
                "sidelink",
                "pool dimensions must be positive",
                Some("slots_per_window"),
            );
        }
        if !(0.0..=1.0).contains(&sl.config.min_candidate_fraction) {
            v.err(
                "sidelink.config",
                "min_candidate_fraction must be in [0, 1]",
                Some("min_candidate_fraction"),
            );
        }
        if !(sl.config.threshold_step_db > 0.0) {
            v.err(
                "sidelink.config",
                "threshold_step_db must be positive",
                Some("threshold_step_db"),
            );
        }
        for g in &sl.groups {
            let path = format!("sidelink.groups[{}]", g.name);
            if !groups.contains_key(&g.members) {
                v.err(
                    &path,
                    format!("unknown member group '{}'", g.members),
                    Some(&format!("\"{}\"", g.members)),
                );
            }
            if g.priority == 0 {
                v.err(&path, "priority must be at least 1", Some("priority"));
            }
            if g.period_ms == 0 {
                v.err(&path, "period_ms must be positive", Some("period_ms"));
            }
            if usize::from(g.mcs) >= self.radio.mcs_count() {
                v.err(&path, format!("unknown MCS {}", g.mcs), Some("mcs"));
            }
        }

        let pos = &self.positioning;
        if !pos.geometries.is_empty() {
            if pos.targets.is_empty() {
                v.err(
                    "positioning",
                    "geometries need at least one target",
                    Some("targets"),
                );
            }
            if !(pos.sigma_ns >= 0.0) {
                v.err(
                    "positioning",
                    "sigma_ns must be non-negative",
                    Some("sigma_ns"),
                );
            }
        }
        for g in &pos.geometries {
            let path = format!("positioning.geometries[{}]", g.name);
            if g.anchors.len() < 4 {
                v.err(
                    &path,
                    format!(
                        "geometry '{}' has {} anchors, a 3D fix needs 4",
                        g.name,
                        g.anchors.len()
                    ),
                    Some(&format!("\"{}\"", g.name)),
                );
            }
            if let Some(im) = g.improve {
                if !(im.step_m > 0.0) || (0..3).any(|k| im.region_min[k] > im.region_max[k]) {
                    v.err(
                        &path,
                        "improve needs step_m > 0 and region_min <= region_max",
                        Some("step_m"),
                    );
                }
            }
        }
    }

    fn check_iab(&self, v: &mut Validator<'_>, ids: &BTreeSet<u32>) {
        let mut seen = BTreeSet::new();
        for n in &self.iab.nodes {
            let path = format!("iab.nodes[id={}]", n.id);
            let line = format!("id = {}", n.id);
            if !seen.insert(n.id) {
                v.err(&path, "duplicate IAB node id", Some(&line));
            }
            match (n.role, n.parent) {
                (IabRoleSpec::Donor, Some(_)) => v.err(&path, "a donor has no parent", Some(&line)),
                (IabRoleSpec::Child, None) => {
                    v.err(&path, "a child node needs a parent", Some(&line))
                }
                (_, Some(p)) if !ids.contains(&p) => v.err(
                    &path,
                    format!("parent {p} is not an IAB node"),
                    Some(&format!("parent = {p}")),
                ),
                (_, Some(p)) if p == n.id => v.err(&path, "node is its own parent", Some(&line)),
                _ => {}
            }
            if let Some(f) = &n.flight {
                if f.waypoints.is_empty() || !(f.speed_mps > 0.0) {
                    v.err(
                        &path,
                        "flight needs waypoints and a positive speed",
                        Some("speed_mps"),
                    );
                }
            }
            if n.battery_j.is_some_and(|b| !(b >= 0.0)) || !(n.drain_w >= 0.0) {
                v.err(
                    &path,
                    "battery_j and drain_w must be non-negative",
                    Some("drain_w"),
                );
            }
        }
        // Parent chains must end at a donor.
        let parent: BTreeMap<u32, Option<u32>> =
            self.iab.nodes.iter().map(|n| (n.id, n.parent)).collect();
        for n in &self.iab.nodes {
            let mut cur = n.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > parent.len() {
                    v.err(
                        &format!("iab.nodes[id={}]", n.id),
                        "parent links form a cycle",
                        Some(&format!("id = {}", n.id)),
                    );
                    break;
                }
                cur = parent.get(&p).copied().flatten();
            }
        }
        for (i, r) in self.iab.replacements.iter().enumerate() {
            let path = format!("iab.replacements[{i}]");
            for id in [r.source, r.replacement] {
                if !ids.contains(&id) {
                    v.err(&path, format!("unknown IAB node {id}"), None);
                }
            }
            let parent_of = |id: u32| parent.get(&id).copied().flatten();
            if ids.contains(&r.source)
                && ids.contains(&r.replacement)
                && parent_of(r.source) != parent_of(r.replacement)
            {
                v.err(&path, "source and replacement must share a parent", None);
            }
            for id in [r.source, r.replacement] {
                if !self.cells.iter().any(|c| c.iab_node == Some(id)) {
                    v.err(&path, format!("IAB node {id} serves no cell"), None);
                }
            }
            if r.at_ms.is_none()
                && !self
                    .iab
                    .nodes
                    .iter()
                    .any(|n| n.id == r.source && n.battery_j.is_some() && n.drain_w > 0.0)
            {
                v.err(
                    &path,
                    "without at_ms the source needs a draining battery",
                    None,
                );
            }
        }
    }
}

struct Validator<'a> {
    src: Option<&'a str>,
    issues: Vec<ValidationIssue>,
}

impl Validator<'_> {
    fn err(&mut self, path: &str, message: impl Into<String>, needle: Option<&str>) {
        let line = match (self.src, needle) {
            (Some(src), Some(n)) => src.lines().position(|l| l.contains(n)).map(|i| i + 1),
            _ => None,
        };
        self.issues.push(ValidationIssue {
            path: path.to_owned(),
            message: message.into(),
            line,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "t"
duration_ms = 1000

[[cells]]
id = 0
capacity_prbs = 50

[[ue_groups]]
name = "responders"
count = 3
class = "mc"
cell = 0
"#;

    #[test]
    fn minimal_scenario_is_valid() {
        let s = Scenario::load_str(BASE).unwrap();
        assert_eq!(s.ue_count(), 3);
        assert_eq!(s.ue_groups[0].services(), vec![ServiceKind::McpttVoice]);
    }

    #[test]
    fn empty_scenario_is_valid() {
        Scenario::load_str("name = \"empty\"\n").unwrap();
    }

    #[test]
    fn unknown_cell_names_the_group() {
        let src = BASE.replace("cell = 0", "cell = 7");
        let Err(ScenarioError::Invalid(r)) = Scenario::load_str(&src) else {
            panic!("accepted")
        };
        assert!(r.issues[0].message.contains("'responders'"));
        assert!(r.issues[0].message.contains("unknown cell 7"));
        assert_eq!(r.issues[0].line, Some(10));
    }

    #[test]
    fn barring_factor_out_of_range() {
        let src = format!("{BASE}\n[[uac.categories]]\ncategory = 7\nbarring_factor = 1.3\nbarring_time_ms = 100\n");
        let Err(ScenarioError::Invalid(r)) = Scenario::load_str(&src) else {
            panic!("accepted")
        };
        assert!(r
            .issues
            .iter()
            .any(|i| i.message.contains("outside [0, 1]") && i.line.is_some()));
    }

    #[test]
    fn unknown_session_member() {
        let src = format!("{BASE}\n[[mbs.sessions]]\nid = 1\nfiveqi = 67\nrate_kbps = 500\nmembers = [\"ghosts\"]\n");
        let Err(ScenarioError::Invalid(r)) = Scenario::load_str(&src) else {
            panic!("accepted")
        };
        assert!(r.issues.iter().any(|i| i.message.contains("'ghosts'")));
    }

    #[test]
    fn unknown_keys_are_parse_errors() {
        let src = format!("{BASE}\nbogus = 1\n");
        assert!(matches!(
            Scenario::load_str(&src),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn iab_parent_rules() {
        let src = format!(
            "{BASE}\n[[iab.nodes]]\nid = 1\nrole = \"child\"\n\n[[iab.nodes]]\nid = 2\nrole = \"child\"\nparent = 9\n"
        );
        let Err(ScenarioError::Invalid(r)) = Scenario::load_str(&src) else {
            panic!("accepted")
        };
        assert!(r
            .issues
            .iter()
            .any(|i| i.message.contains("needs a parent")));
        assert!(r.issues.iter().any(|i| i.message.contains("parent 9")));
    }
}
