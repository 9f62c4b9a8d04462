//! Metric events and the report derived from them.
//!
//! The runner never writes the report directly: it emits [`MetricEvent`]s and
//! a [`Collector`] folds them into a [`Report`]. Replaying a trace therefore
//! reproduces the report exactly.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::admission::percentile;
use crate::iab::{Phase, ReplacementMode, ReplacementReport};
use crate::multicast::{HandoverReport, Leg};
use crate::positioning::percentile_f64;
use crate::qos::ServiceKind;
use crate::ue::UeClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "kebab-case")]
pub enum MetricEvent {
    ScenarioStart {
        scenario: Box<Scenario>,
        seed: u64,
    },
    UeCreated {
        ue: u32,
        class: UeClass,
        group: String,
        cell: Option<u32>,
    },
    UacPassed {
        ue: u32,
        class: UeClass,
    },
    UacBarred {
        ue: u32,
        class: UeClass,
        duration_us: u64,
    },
    RachDone {
        ue: u32,
        class: UeClass,
        cell: u32,
        success: bool,
        attempts: u32,
        latency_us: u64,
    },
    RachCollisions {
        cell: u32,
        count: u32,
    },
    RrcRejected {
        ue: u32,
        class: UeClass,
    },
    Connected {
        ue: u32,
        class: UeClass,
        cell: u32,
        /// From the first access request, barring included.
        access_latency_us: u64,
    },
    FlowRequested {
        flow: u32,
        ue: u32,
        class: UeClass,
        service: ServiceKind,
        gbr: bool,
        reserved_prbs: u32,
        feasible: bool,
        admitted: bool,
        preempted: Vec<u32>,
    },
    FlowEvicted {
        flow: u32,
        by: u32,
        preemptable: bool,
    },
    FlowReleased {
        flow: u32,
    },
    Slot {
        cell: u32,
        used_prbs: u32,
        /// (flow, delay)
        delivered: Vec<(u32, u64)>,
        dropped: Vec<u32>,
    },
    DuTx {
        node: u32,
        cell: u32,
        prbs: u64,
    },
    IabPhase {
        node: u32,
        phase: Phase,
        at_us: u64,
    },
    /// Integration stopped after RRC; the DU stays silent.
    IabHold {
        node: u32,
    },
    IabResume {
        node: u32,
    },
    IabIntegrationFailed {
        node: u32,
        reason: String,
    },
    IabReplacement {
        source: u32,
        replacement: u32,
        mode: ReplacementMode,
        report: ReplacementReport,
    },
    IabReplacementSkipped {
        source: u32,
        reason: String,
    },
    IabDepleted {
        node: u32,
    },
    MbsTx {
        session: u32,
        cell: u32,
        mode: Leg,
        prbs: u64,
        delivered: u32,
        failed: u32,
        ptm_retransmissions: u32,
        ptp_retransmissions: u32,
    },
    MbsModeSwitch {
        session: u32,
        cell: u32,
        to: Leg,
    },
    MbsHandover {
        session: u32,
        ue: u32,
        target: u32,
        report: HandoverReport,
    },
    SidelinkTx {
        group: String,
        priority: u8,
        /// Resource obtained after any re-selections.
        placed: bool,
        reselections: u32,
        retransmissions: u32,
        delivered: u32,
        undelivered: u32,
        threshold_dbm: f64,
    },
    SidelinkPreempted {
        victim: String,
        victim_priority: u8,
        by_priority: u8,
    },
    GeometryInfo {
        name: String,
        mean_hdop: f64,
        mean_vdop: f64,
    },
    PositionFix {
        geometry: String,
        target: usize,
        ok: bool,
        horizontal_error_m: f64,
        vertical_error_m: f64,
    },
    RunEnd {
        events_processed: u64,
    },
}

impl MetricEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricEvent::ScenarioStart { .. } => "scenario-start",
            MetricEvent::UeCreated { .. } => "ue-created",
            MetricEvent::UacPassed { .. } => "uac-passed",
            MetricEvent::UacBarred { .. } => "uac-barred",
            MetricEvent::RachDone { .. } => "rach-done",
            MetricEvent::RachCollisions { .. } => "rach-collisions",
            MetricEvent::RrcRejected { .. } => "rrc-rejected",
            MetricEvent::Connected { .. } => "connected",
            MetricEvent::FlowRequested { .. } => "flow-requested",
            MetricEvent::FlowEvicted { .. } => "flow-evicted",
            MetricEvent::FlowReleased { .. } => "flow-released",
            MetricEvent::Slot { .. } => "slot",
            MetricEvent::DuTx { .. } => "du-tx",
            MetricEvent::IabPhase { .. } => "iab-phase",
            MetricEvent::IabHold { .. } => "iab-hold",
            MetricEvent::IabResume { .. } => "iab-resume",
            MetricEvent::IabIntegrationFailed { .. } => "iab-integration-failed",
            MetricEvent::IabReplacement { .. } => "iab-replacement",
            MetricEvent::IabReplacementSkipped { .. } => "iab-replacement-skipped",
            MetricEvent::IabDepleted { .. } => "iab-depleted",
            MetricEvent::MbsTx { .. } => "mbs-tx",
            MetricEvent::MbsModeSwitch { .. } => "mbs-mode-switch",
            MetricEvent::MbsHandover { .. } => "mbs-handover",
            MetricEvent::SidelinkTx { .. } => "sidelink-tx",
            MetricEvent::SidelinkPreempted { .. } => "sidelink-preempted",
            MetricEvent::GeometryInfo { .. } => "geometry-info",
            MetricEvent::PositionFix { .. } => "position-fix",
            MetricEvent::RunEnd { .. } => "run-end",
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_u64(v: &[u64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<u64>() as f64 / v.len() as f64
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccess {
    pub ues: u64,
    pub uac_checks: u64,
    pub uac_barred: u64,
    pub uac_pass_rate: f64,
    pub rach_procedures: u64,
    pub rach_success: u64,
    pub rach_failed: u64,
    pub preambles_sent: u64,
    pub mean_rach_latency_us: f64,
    pub rrc_rejected: u64,
    pub connected: u64,
    pub access_success_rate: f64,
    pub mean_access_latency_us: f64,
    pub p95_access_latency_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessReport {
    pub mc: ClassAccess,
    pub commercial: ClassAccess,
    pub rach_collisions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmissionReport {
    pub requests: u64,
    pub admitted: u64,
    pub rejected: u64,
    /// Admissions that needed pre-emption.
    pub preemptions: u64,
    pub flows_evicted: u64,
    pub evicted_not_preemptable: u64,
    pub offered_gbr_prbs: u64,
    pub capacity_prbs: u64,
    pub mc_gbr_requests: u64,
    pub mc_gbr_feasible: u64,
    pub mc_gbr_admitted: u64,
    pub mc_gbr_feasible_admitted: u64,
    /// Feasible MC GBR requests that were admitted; 1 when there were none.
    pub mc_feasible_admission_ratio: f64,
    pub commercial_requests: u64,
    pub commercial_admitted: u64,
    pub commercial_rejected_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowClassStats {
    pub flows: u64,
    pub packets_delivered: u64,
    pub pdb_violations: u64,
    pub pdb_violation_rate: f64,
    pub mean_delay_us: f64,
    pub p99_delay_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerService {
    pub mcptt_voice: FlowClassStats,
    pub mcptt_signaling: FlowClassStats,
    pub mc_video: FlowClassStats,
    pub mc_data: FlowClassStats,
    pub commercial: FlowClassStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowsReport {
    pub gbr: FlowClassStats,
    pub non_gbr: FlowClassStats,
    pub per_service: PerService,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulingReport {
    pub active_slots: u64,
    pub prbs_used: u64,
    pub mean_prbs_per_active_slot: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MulticastReport {
    pub transmissions: u64,
    pub ptm_transmissions: u64,
    pub ptp_transmissions: u64,
    pub prbs: u64,
    pub ptm_retransmissions: u64,
    pub ptp_retransmissions: u64,
    pub deliveries: u64,
    pub delivery_failures: u64,
    pub mode_switches: u64,
    /// Largest switch count of any single bearer.
    pub max_bearer_switches: u64,
    pub handovers: u64,
    pub handover_sdus_lost: u64,
    pub handover_sdus_retransmitted: u64,
    pub handover_ptp_fallbacks: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplacementEntry {
    pub source: u32,
    pub replacement: u32,
    pub mode: Option<ReplacementMode>,
    pub skipped: bool,
    pub reason: String,
    pub sdus_lost: u64,
    pub sdus_delivered: u64,
    pub interruption_us: u64,
    pub handovers: u32,
    pub duplicated_sdus: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IabReport {
    pub integrations: u64,
    pub integration_failures: u64,
    pub held_integrations: u64,
    pub du_transmissions: u64,
    /// DU transmissions between a held integration and its resumption.
    pub du_tx_while_held: u64,
    pub depletions: u64,
    pub replacements: Vec<ReplacementEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SidelinkReport {
    pub transmissions: u64,
    pub placement_failures: u64,
    pub reselections: u64,
    pub preemptions: u64,
    /// Pre-emptions where the winner was not more critical; always 0.
    pub priority_inversions: u64,
    pub harq_retransmissions: u64,
    pub deliveries: u64,
    pub delivery_failures: u64,
    pub delivery_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub fixes: u64,
    pub failures: u64,
    pub mean_hdop: f64,
    pub mean_vdop: f64,
    pub horizontal_rmse_m: f64,
    pub vertical_rmse_m: f64,
    pub horizontal_p50_m: f64,
    pub horizontal_p67_m: f64,
    pub horizontal_p90_m: f64,
    pub vertical_p50_m: f64,
    pub vertical_p67_m: f64,
    pub vertical_p90_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositioningReport {
    pub fixes: u64,
    pub failures: u64,
    pub geometries: BTreeMap<String, GeometryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub events_processed: u64,
    pub access: AccessReport,
    pub admission: AdmissionReport,
    pub flows: FlowsReport,
    pub scheduling: SchedulingReport,
    pub multicast: MulticastReport,
    pub iab: IabReport,
    pub sidelink: SidelinkReport,
    pub positioning: PositioningReport,
    pub config: Scenario,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} seed={} mc_access={:.3} commercial_access={:.3} mc_feasible_admitted={:.3} preemptions={} gbr_pdb_violations={} mbs_prbs={} iab_replacements={} fixes={}",
            self.scenario,
            self.seed,
            self.access.mc.access_success_rate,
            self.access.commercial.access_success_rate,
            self.admission.mc_feasible_admission_ratio,
            self.admission.preemptions,
            self.flows.gbr.pdb_violations,
            self.multicast.prbs,
            self.iab.replacements.iter().filter(|r| !r.skipped).count(),
            self.positioning.fixes,
        )
    }
}

#[derive(Default)]
struct ClassAcc {
    ues: u64,
    uac_checks: u64,
    uac_barred: u64,
    rach_latencies: Vec<u64>,
    rach_failed: u64,
    preambles: u64,
    rrc_rejected: u64,
    access_latencies: Vec<u64>,
}

impl ClassAcc {
    fn finish(&self) -> ClassAccess {
        let rach_success = self.rach_latencies.len() as u64;
        ClassAccess {
            ues: self.ues,
            uac_checks: self.uac_checks,
            uac_barred: self.uac_barred,
            uac_pass_rate: ratio(self.uac_checks - self.uac_barred, self.uac_checks),
            rach_procedures: rach_success + self.rach_failed,
            rach_success,
            rach_failed: self.rach_failed,
            preambles_sent: self.preambles,
            mean_rach_latency_us: mean_u64(&self.rach_latencies),
            rrc_rejected: self.rrc_rejected,
            connected: self.access_latencies.len() as u64,
            access_success_rate: ratio(self.access_latencies.len() as u64, self.ues),
            mean_access_latency_us: mean_u64(&self.access_latencies),
            p95_access_latency_us: percentile(&self.access_latencies, 95.0),
        }
    }
}

#[derive(Default)]
struct FlowAcc {
    flows: u64,
    delays: Vec<u64>,
    violations: u64,
}

impl FlowAcc {
    fn finish(&self) -> FlowClassStats {
        let delivered = self.delays.len() as u64;
        FlowClassStats {
            flows: self.flows,
            packets_delivered: delivered,
            pdb_violations: self.violations,
            pdb_violation_rate: ratio(self.violations, delivered + self.violations),
            mean_delay_us: mean_u64(&self.delays),
            p99_delay_us: percentile(&self.delays, 99.0),
        }
    }
}

#[derive(Default)]
struct GeometryAcc {
    failures: u64,
    h: Vec<f64>,
    v: Vec<f64>,
    mean_hdop: f64,
    mean_vdop: f64,
}

/// Folds metric events into a [`Report`].
#[derive(Default)]
pub struct Collector {
    scenario: Option<Scenario>,
    seed: u64,
    events_processed: u64,
    mc: ClassAcc,
    commercial: ClassAcc,
    rach_collisions: u64,
    admission: AdmissionReport,
    flow_kind: BTreeMap<u32, (bool, ServiceKind)>,
    gbr: FlowAcc,
    non_gbr: FlowAcc,
    per_service: BTreeMap<ServiceKind, FlowAcc>,
    scheduling: SchedulingReport,
    multicast: MulticastReport,
    bearer_switches: BTreeMap<(u32, u32), u64>,
    iab: IabReport,
    held: BTreeSet<u32>,
    sidelink: SidelinkReport,
    geometries: BTreeMap<String, GeometryAcc>,
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    fn class(&mut self, c: UeClass) -> &mut ClassAcc {
        match c {
            UeClass::MissionCritical => &mut self.mc,
            UeClass::Commercial => &mut self.commercial,
        }
    }

    fn flow_accs(&mut self, flow: u32) -> Option<[&mut FlowAcc; 2]> {
        let (gbr, service) = *self.flow_kind.get(&flow)?;
        let class = if gbr {
            &mut self.gbr
        } else {
            &mut self.non_gbr
        };
        Some([class, self.per_service.entry(service).or_default()])
    }

    pub fn observe(&mut self, ev: &MetricEvent) {
        use MetricEvent as E;
        match ev {
            E::ScenarioStart { scenario, seed } => {
                self.admission.capacity_prbs = scenario
                    .cells
                    .iter()
                    .map(|c| u64::from(c.capacity_prbs))
                    .sum();
                self.scenario = Some((**scenario).clone());
                self.seed = *seed;
            }
            E::UeCreated { class, .. } => self.class(*class).ues += 1,
            E::UacPassed { class, .. } => self.class(*class).uac_checks += 1,
            E::UacBarred { class, .. } => {
                let a = self.class(*class);
                a.uac_checks += 1;
                a.uac_barred += 1;
            }
            E::RachDone {
                class,
                success,
                attempts,
                latency_us,
                ..
            } => {
                let a = self.class(*class);
                a.preambles += u64::from(*attempts);
                if *success {
                    a.rach_latencies.push(*latency_us);
                } else {
                    a.rach_failed += 1;
                }
            }
            E::RachCollisions { count, .. } => self.rach_collisions += u64::from(*count),
            E::RrcRejected { class, .. } => self.class(*class).rrc_rejected += 1,
            E::Connected {
                class,
                access_latency_us,
                ..
            } => self.class(*class).access_latencies.push(*access_latency_us),
            E::FlowRequested {
                flow,
                class,
                service,
                gbr,
                reserved_prbs,
                feasible,
                admitted,
                preempted,
                ..
            } => {
                let a = &mut self.admission;
                a.requests += 1;
                if *admitted {
                    a.admitted += 1;
                } else {
                    a.rejected += 1;
                }
                if !preempted.is_empty() {
                    a.preemptions += 1;
                }
                if *gbr {
                    a.offered_gbr_prbs += u64::from(*reserved_prbs);
                }
                match class {
                    UeClass::MissionCritical if *gbr => {
                        a.mc_gbr_requests += 1;
                        a.mc_gbr_feasible += u64::from(*feasible);
                        a.mc_gbr_admitted += u64::from(*admitted);
                        a.mc_gbr_feasible_admitted += u64::from(*feasible && *admitted);
                    }
                    UeClass::MissionCritical => {}
                    UeClass::Commercial => {
                        a.commercial_requests += 1;
                        a.commercial_admitted += u64::from(*admitted);
                    }
                }
                if *admitted {
                    self.flow_kind.insert(*flow, (*gbr, *service));
                    if let Some(accs) = self.flow_accs(*flow) {
                        for acc in accs {
                            acc.flows += 1;
                        }
                    }
                }
            }
            E::FlowEvicted { preemptable, .. } => {
                self.admission.flows_evicted += 1;
                if !preemptable {
                    self.admission.evicted_not_preemptable += 1;
                }
            }
            E::FlowReleased { .. } => {}
            E::Slot {
                used_prbs,
                delivered,
                dropped,
                ..
            } => {
                if *used_prbs > 0 {
                    self.scheduling.active_slots += 1;
                    self.scheduling.prbs_used += u64::from(*used_prbs);
                }
                for &(flow, delay) in delivered {
                    if let Some(accs) = self.flow_accs(flow) {
                        for acc in accs {
                            acc.delays.push(delay);
                        }
                    }
                }
                for &flow in dropped {
                    if let Some(accs) = self.flow_accs(flow) {
                        for acc in accs {
                            acc.violations += 1;
                        }
                    }
                }
            }
            E::DuTx { node, .. } => {
                self.iab.du_transmissions += 1;
                if self.held.contains(node) {
                    self.iab.du_tx_while_held += 1;
                }
            }
            E::IabPhase { phase, .. } => {
                if *phase == Phase::RrcConnected {
                    self.iab.integrations += 1;
                }
            }
            E::IabHold { node } => {
                self.iab.held_integrations += 1;
                self.held.insert(*node);
            }
            E::IabResume { node } => {
                self.held.remove(node);
            }
            E::IabIntegrationFailed { .. } => self.iab.integration_failures += 1,
            E::IabReplacement {
                source,
                replacement,
                mode,
                report,
            } => self.iab.replacements.push(ReplacementEntry {
                source: *source,
                replacement: *replacement,
                mode: Some(*mode),
                skipped: false,
                reason: String::new(),
                sdus_lost: report.sdus_lost,
                sdus_delivered: report.sdus_delivered,
                interruption_us: report.interruption_us,
                handovers: report.handovers,
                duplicated_sdus: report.duplicated_sdus,
            }),
            E::IabReplacementSkipped { source, reason } => {
                self.iab.replacements.push(ReplacementEntry {
                    source: *source,
                    skipped: true,
                    reason: reason.clone(),
                    ..Default::default()
                })
            }
            E::IabDepleted { .. } => self.iab.depletions += 1,
            E::MbsTx {
                mode,
                prbs,
                delivered,
                failed,
                ptm_retransmissions,
                ptp_retransmissions,
                ..
            } => {
                let m = &mut self.multicast;
                m.transmissions += 1;
                match mode {
                    Leg::Ptm => m.ptm_transmissions += 1,
                    Leg::Ptp => m.ptp_transmissions += 1,
                }
                m.prbs += prbs;
                m.deliveries += u64::from(*delivered);
                m.delivery_failures += u64::from(*failed);
                m.ptm_retransmissions += u64::from(*ptm_retransmissions);
                m.ptp_retransmissions += u64::from(*ptp_retransmissions);
            }
            E::MbsModeSwitch { session, cell, .. } => {
                self.multicast.mode_switches += 1;
                *self.bearer_switches.entry((*session, *cell)).or_default() += 1;
            }
            E::MbsHandover { report, .. } => {
                let m = &mut self.multicast;
                m.handovers += 1;
                m.handover_sdus_lost += report.sdus_lost;
                m.handover_sdus_retransmitted += report.sdus_retransmitted;
                m.handover_ptp_fallbacks += u64::from(report.ptp_fallback);
            }
            E::SidelinkTx {
                placed,
                reselections,
                retransmissions,
                delivered,
                undelivered,
                ..
            } => {
                let s = &mut self.sidelink;
                s.transmissions += 1;
                s.placement_failures += u64::from(!placed);
                s.reselections += u64::from(*reselections);
                s.harq_retransmissions += u64::from(*retransmissions);
                s.deliveries += u64::from(*delivered);
                s.delivery_failures += u64::from(*undelivered);
            }
            E::SidelinkPreempted {
                victim_priority,
                by_priority,
                ..
            } => {
                self.sidelink.preemptions += 1;
                if by_priority >= victim_priority {
                    self.sidelink.priority_inversions += 1;
                }
            }
            E::GeometryInfo {
                name,
                mean_hdop,
                mean_vdop,
            } => {
                let g = self.geometries.entry(name.clone()).or_default();
                g.mean_hdop = *mean_hdop;
                g.mean_vdop = *mean_vdop;
            }
            E::PositionFix {
                geometry,
                ok,
                horizontal_error_m,
                vertical_error_m,
                ..
            } => {
                let g = self.geometries.entry(geometry.clone()).or_default();
                if *ok {
                    g.h.push(*horizontal_error_m);
                    g.v.push(*vertical_error_m);
                } else {
                    g.failures += 1;
                }
            }
            E::RunEnd { events_processed } => self.events_processed = *events_processed,
        }
    }

    pub fn finish(self) -> Report {
        let scenario = self.scenario.unwrap_or_else(|| {
            Scenario::from_toml_str("name = \"\"").expect("minimal scenario parses")
        });
        let mut admission = self.admission;
        admission.mc_feasible_admission_ratio = if admission.mc_gbr_feasible == 0 {
            1.0
        } else {
            ratio(
                admission.mc_gbr_feasible_admitted,
                admission.mc_gbr_feasible,
            )
        };
        admission.commercial_rejected_fraction = ratio(
            admission.commercial_requests - admission.commercial_admitted,
            admission.commercial_requests,
        );

        let service = |k: ServiceKind| {
            self.per_service
                .get(&k)
                .map(FlowAcc::finish)
                .unwrap_or_default()
        };
        let flows = FlowsReport {
            gbr: self.gbr.finish(),
            non_gbr: self.non_gbr.finish(),
            per_service: PerService {
                mcptt_voice: service(ServiceKind::McpttVoice),
                mcptt_signaling: service(ServiceKind::McpttSignaling),
                mc_video: service(ServiceKind::McVideo),
                mc_data: service(ServiceKind::McData),
                commercial: service(ServiceKind::Commercial),
            },
        };

        let mut scheduling = self.scheduling;
        scheduling.mean_prbs_per_active_slot = ratio(scheduling.prbs_used, scheduling.active_slots);

        let mut multicast = self.multicast;
        multicast.max_bearer_switches = self.bearer_switches.values().copied().max().unwrap_or(0);

        let mut sidelink = self.sidelink;
        sidelink.delivery_ratio = ratio(
            sidelink.deliveries,
            sidelink.deliveries + sidelink.delivery_failures,
        );

        let mut positioning = PositioningReport::default();
        for (name, g) in self.geometries {
            let fixes = g.h.len() as u64;
            positioning.fixes += fixes;
            positioning.failures += g.failures;
            positioning.geometries.insert(
                name,
                GeometryReport {
                    fixes,
                    failures: g.failures,
                    mean_hdop: g.mean_hdop,
                    mean_vdop: g.mean_vdop,
                    horizontal_rmse_m: rms(&g.h),
                    vertical_rmse_m: rms(&g.v),
                    horizontal_p50_m: percentile_f64(&g.h, 50.0),
                    horizontal_p67_m: percentile_f64(&g.h, 67.0),
                    horizontal_p90_m: percentile_f64(&g.h, 90.0),
                    vertical_p50_m: percentile_f64(&g.v, 50.0),
                    vertical_p67_m: percentile_f64(&g.v, 67.0),
                    vertical_p90_m: percentile_f64(&g.v, 90.0),
                },
            );
        }

        Report {
            scenario: scenario.name.clone(),
            seed: self.seed,
            duration_ms: scenario.duration_ms,
            events_processed: self.events_processed,
            access: AccessReport {
                mc: self.mc.finish(),
                commercial: self.commercial.finish(),
                rach_collisions: self.rach_collisions,
            },
            admission,
            flows,
            scheduling,
            multicast,
            iab: self.iab,
            sidelink,
            positioning,
            config: scenario,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stream_gives_zeros() {
        let r = Collector::new().finish();
        assert_eq!(r.access.mc, ClassAccess::default());
        assert_eq!(r.admission.requests, 0);
        assert_eq!(r.admission.mc_feasible_admission_ratio, 1.0);
        assert_eq!(r.flows.gbr, FlowClassStats::default());
    }

    #[test]
    fn held_window_counts_du_tx() {
        let mut c = Collector::new();
        c.observe(&MetricEvent::DuTx {
            node: 1,
            cell: 1,
            prbs: 3,
        });
        c.observe(&MetricEvent::IabHold { node: 1 });
        c.observe(&MetricEvent::DuTx {
            node: 1,
            cell: 1,
            prbs: 3,
        });
        c.observe(&MetricEvent::DuTx {
            node: 2,
            cell: 2,
            prbs: 3,
        });
        c.observe(&MetricEvent::IabResume { node: 1 });
        c.observe(&MetricEvent::DuTx {
            node: 1,
            cell: 1,
            prbs: 3,
        });
        let r = c.finish();
        assert_eq!(r.iab.du_transmissions, 4);
        assert_eq!(r.iab.du_tx_while_held, 1);
    }

    #[test]
    fn feasible_admission_ratio() {
        let mut c = Collector::new();
        for (feasible, admitted) in [(true, true), (true, false), (false, false)] {
            c.observe(&MetricEvent::FlowRequested {
                flow: 0,
                ue: 0,
                class: UeClass::MissionCritical,
                service: ServiceKind::McpttVoice,
                gbr: true,
                reserved_prbs: 1,
                feasible,
                admitted,
                preempted: vec![],
            });
        }
        let r = c.finish();
        assert_eq!(r.admission.mc_gbr_feasible, 2);
        assert_eq!(r.admission.mc_feasible_admission_ratio, 0.5);
    }

    #[test]
    fn event_kind_matches_serde_tag() {
        let ev = MetricEvent::IabHold { node: 3 };
        let v = serde_json::to_value(&ev).unwrap();
        assert_eq!(v["kind"], ev.kind());
    }
}
