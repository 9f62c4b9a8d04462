//! Scenario execution: every mechanism shares one engine and one clock.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fmt::Display;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{MetricEvent, Report};
use super::trace::replay;
use super::{IabRoleSpec, Scenario, ValidationReport};
use crate::access::{
    run_cbra, uac_check, AccessAttempt, EstablishmentCause, RachCell, RachContender,
    RrcAcceptPolicy, UacConfig, UacDecision,
};
use crate::admission::{AdmissionOutcome, CellId, CellState, FlowId, FlowRequest};
use crate::iab::{
    DownlinkTraffic, FlightPath, IabConfig, IabError, IabNode, IabTopology, NodeId,
    ReplacementMode, ReplacementPlan, Transition,
};
use crate::multicast::{MbsSession, MulticastDomain, SessionId};
use crate::positioning::{
    gdop, improve_placement, measure_rtt, measure_ul_tdoa_averaged, solve_multi_rtt, solve_tdoa,
    Anchor, BoundingBox, Method, PositionEstimate, PositioningError, RttSet, SolverOptions,
};
use crate::qos::{Arp, PreemptionCapability, PreemptionVulnerability, QosTable};
use crate::radio::{Position, RadioConfig};
use crate::sidelink::{
    candidate_resources, groupcast_round, select_and_reserve, Placement, Reservation, Resource,
    ResourcePool,
};
use crate::sim::{Engine, Event, RngStream, SimTime};
use crate::ue::{UeClass, UeContext, UeId};

/// Retry delay when a UE or node finds its cell or parent not yet up.
const RETRY_US: u64 = 100_000;
/// MT identities live above every UE id.
const MT_ID_BASE: u32 = 1 << 30;
const MAX_RESELECTIONS: u32 = 8;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario:\n{0}")]
    Invalid(ValidationReport),
    #[error("contract violation at {at}: {message}")]
    Contract { at: SimTime, message: String },
}

fn contract(at: SimTime, e: impl Display) -> RunError {
    RunError::Contract {
        at,
        message: e.to_string(),
    }
}

pub struct RunOutput {
    pub report: Report,
    pub events: Vec<(SimTime, MetricEvent)>,
}

/// Runs `scn` to its duration with `seed`.
pub fn run(scn: &Scenario, seed: u64) -> Result<RunOutput, RunError> {
    let v = scn.validate();
    if !v.is_valid() {
        return Err(RunError::Invalid(v));
    }
    let mut engine: Engine<Ev> = Engine::new();
    let mut sim = Sim::new(scn, seed)?;
    sim.start(&mut engine)?;
    engine.try_run_until(sim.end, |eng, ev| sim.handle(eng, ev))?;
    let processed = engine.executed();
    sim.emit(
        sim.end,
        MetricEvent::RunEnd {
            events_processed: processed,
        },
    );
    let report = replay(&sim.events);
    Ok(RunOutput {
        report,
        events: sim.events,
    })
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Access(usize),
    RachOccasion(u32),
    Connect(usize),
    Arrival(u32),
    Slot(u32),
    IabIntegrate(u32),
    IabFlightDone(u32),
    IabServing(u32),
    IabDeplete(u32),
    IabReplace(usize),
    MbsTx(u32),
    MbsAdapt,
    MbsHandoverBegin(usize, usize),
    MbsHandoverEnd(usize, usize),
    Sidelink(usize),
}

struct Ue {
    ctx: UeContext,
    group: usize,
    cell: Option<u32>,
    first_request: Option<SimTime>,
}

struct Cell {
    capacity_prbs: u32,
    iab_node: Option<NodeId>,
    /// `None` while the serving DU is down.
    state: Option<CellState>,
    rach: RachCell,
    policy: RrcAcceptPolicy,
    connected: u32,
}

struct Flow {
    cell: u32,
    bits: f64,
    interval_us: u64,
    live: bool,
    next_arrival: SimTime,
    ue: usize,
}

struct Sim<'a> {
    scn: &'a Scenario,
    seed: u64,
    end: SimTime,
    radio: RadioConfig,
    qos: QosTable,
    uac: UacConfig,
    ues: Vec<Ue>,
    group_members: Vec<Vec<usize>>,
    cells: BTreeMap<u32, Cell>,
    flows: BTreeMap<u32, Flow>,
    next_flow: u32,
    topology: IabTopology,
    mbs: MulticastDomain,
    sl_pool: ResourcePool,
    sl_round: Vec<usize>,
    sl_power: BTreeMap<UeId, f64>,
    rng_uac: RngStream,
    rng_rach: RngStream,
    rng_iab: RngStream,
    rng_mbs: RngStream,
    rng_csi: RngStream,
    rng_sl: RngStream,
    events: Vec<(SimTime, MetricEvent)>,
}

fn pos(p: [f64; 3]) -> Position {
    Position::new(p[0], p[1], p[2])
}

impl<'a> Sim<'a> {
    fn new(scn: &'a Scenario, seed: u64) -> Result<Self, RunError> {
        let t0 = SimTime::ZERO;
        let qos = scn.qos_table().map_err(|e| contract(t0, e))?;
        let radio = scn.radio.clone();
        let mut topology = IabTopology::new(IabConfig {
            f1_setup_delay_us: scn.iab.f1_setup_delay_ms * 1_000,
        });
        for n in &scn.iab.nodes {
            let id = NodeId(n.id);
            let node = match n.role {
                IabRoleSpec::Donor => IabNode::donor(id, pos(n.position)),
                IabRoleSpec::Child => {
                    let mut node = IabNode::child(id, pos(n.position));
                    if let Some(f) = &n.flight {
                        node = node.with_flight(FlightPath {
                            waypoints: f.waypoints.iter().map(|&w| pos(w)).collect(),
                            speed_mps: f.speed_mps,
                            start: SimTime::from_ms(n.integrate_at_ms),
                        });
                    }
                    node
                }
            };
            let node = match n.battery_j {
                Some(b) => node.with_battery(b, n.drain_w),
                None => node,
            };
            topology.add_node(node).map_err(|e| contract(t0, e))?;
        }

        let mut cells = BTreeMap::new();
        for c in &scn.cells {
            let iab_node = c.iab_node.map(NodeId);
            let donor = iab_node.is_some_and(|n| {
                topology
                    .node(n)
                    .is_ok_and(|n| n.parent.is_none() && n.can_transmit(t0))
            });
            let state = (iab_node.is_none() || donor)
                .then(|| CellState::new(CellId(c.id), c.capacity_prbs, radio.slot_us));
            cells.insert(
                c.id,
                Cell {
                    capacity_prbs: c.capacity_prbs,
                    iab_node,
                    state,
                    rach: RachCell::new(scn.rach.clone(), radio.clone()),
                    policy: RrcAcceptPolicy {
                        max_connections: c.max_connections.unwrap_or(u32::MAX),
                        mc_reserved: c.mc_reserved_connections,
                    },
                    connected: 0,
                },
            );
        }

        let mut mbs_cfg = scn.mbs.config;
        if scn.ablation.no_mbs_pdcp_retransmission {
            mbs_cfg.pdcp_retransmission = false;
        }
        if scn.ablation.fixed_ptm {
            mbs_cfg.fixed_mode = Some(crate::multicast::Leg::Ptm);
        }
        let mut mbs = MulticastDomain::new(mbs_cfg, radio.clone());
        for c in &scn.cells {
            mbs.add_cell(CellId(c.id), c.mbs);
        }

        let sl = &scn.sidelink;
        Ok(Sim {
            scn,
            seed,
            end: SimTime::from_ms(scn.duration_ms),
            uac: scn.uac.to_config(),
            qos,
            ues: Vec::new(),
            group_members: Vec::new(),
            cells,
            flows: BTreeMap::new(),
            next_flow: 0,
            topology,
            mbs,
            sl_pool: ResourcePool::new(sl.slots_per_window.max(1), sl.subchannels.max(1)),
            sl_round: vec![0; sl.groups.len()],
            sl_power: BTreeMap::new(),
            rng_uac: RngStream::new(seed, "uac"),
            rng_rach: RngStream::new(seed, "rach"),
            rng_iab: RngStream::new(seed, "iab"),
            rng_mbs: RngStream::new(seed, "mbs"),
            rng_csi: RngStream::new(seed, "csi"),
            rng_sl: RngStream::new(seed, "sidelink"),
            radio,
            events: Vec::new(),
        })
    }

    fn emit(&mut self, at: SimTime, ev: MetricEvent) {
        self.events.push((at, ev));
    }

    /// Schedules within the horizon; later events are dropped.
    fn at(&self, eng: &mut Engine<Ev>, t: SimTime, ev: Ev) -> Result<(), RunError> {
        if t <= self.end {
            eng.schedule(t, ev).map_err(|e| contract(eng.now(), e))?;
        }
        Ok(())
    }

    /// Where UEs of a cell are dropped around: for drone cells the end of
    /// the flight.
    fn nominal_center(&self, cell: u32) -> Position {
        let spec = self
            .scn
            .cells
            .iter()
            .find(|c| c.id == cell)
            .expect("validated");
        match spec
            .iab_node
            .and_then(|n| self.scn.iab.nodes.iter().find(|s| s.id == n))
        {
            Some(n) => pos(n
                .flight
                .as_ref()
                .and_then(|f| f.waypoints.last().copied())
                .unwrap_or(n.position)),
            None => pos(spec.position),
        }
    }

    fn cell_position(&self, cell: u32, t: SimTime) -> Position {
        match self.cells[&cell]
            .iab_node
            .and_then(|n| self.topology.node(n).ok())
        {
            Some(node) => node.position_at(t),
            None => pos(self
                .scn
                .cells
                .iter()
                .find(|c| c.id == cell)
                .expect("validated")
                .position),
        }
    }

    fn start(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let t0 = SimTime::ZERO;
        self.emit(
            t0,
            MetricEvent::ScenarioStart {
                scenario: Box::new(self.scn.clone()),
                seed: self.seed,
            },
        );

        let mut placement = RngStream::new(self.seed, "placement");
        let mut next_id = 0u32;
        for (gi, g) in self.scn.ue_groups.iter().enumerate() {
            let center = match (g.placement.center, g.cell) {
                (Some(c), _) => Position::new(c[0], c[1], 0.0),
                (None, Some(cell)) => self.nominal_center(cell),
                (None, None) => Position::ORIGIN,
            };
            let mut members = Vec::new();
            for _ in 0..g.count {
                let p = &g.placement;
                let r = placement
                    .uniform_range(p.min_radius_m.powi(2), p.radius_m.powi(2))
                    .sqrt();
                let theta = placement.uniform() * TAU;
                let at = Position::new(
                    center.x + r * theta.cos(),
                    center.y + r * theta.sin(),
                    p.height_m,
                );
                let mut ctx = UeContext::new(UeId(next_id), g.class)
                    .at(at)
                    .with_services(g.services());
                ctx.power_class = g.power_class;
                let idx = self.ues.len();
                self.ues.push(Ue {
                    ctx,
                    group: gi,
                    cell: g.cell,
                    first_request: None,
                });
                self.emit(
                    t0,
                    MetricEvent::UeCreated {
                        ue: next_id,
                        class: g.class,
                        group: g.name.clone(),
                        cell: g.cell,
                    },
                );
                if g.access.enabled && g.cell.is_some() && !g.services().is_empty() {
                    let jitter =
                        (placement.uniform() * g.access.spread_ms as f64 * 1_000.0).floor() as u64;
                    self.at(
                        eng,
                        SimTime::from_ms(g.access.start_ms) + jitter,
                        Ev::Access(idx),
                    )?;
                }
                members.push(idx);
                next_id += 1;
            }
            self.group_members.push(members);
        }

        if self.end > t0 {
            for &c in self.cells.keys() {
                eng.schedule(t0, Ev::Slot(c)).map_err(|e| contract(t0, e))?;
            }
        }
        for n in &self.scn.iab.nodes {
            if n.role == IabRoleSpec::Child {
                self.at(
                    eng,
                    SimTime::from_ms(n.integrate_at_ms),
                    Ev::IabIntegrate(n.id),
                )?;
            }
        }
        for (i, r) in self.scn.iab.replacements.iter().enumerate() {
            if let Some(ms) = r.at_ms {
                self.at(eng, SimTime::from_ms(ms), Ev::IabReplace(i))?;
            }
        }

        self.start_mbs(eng)?;
        for (i, g) in self.scn.sidelink.groups.iter().enumerate() {
            for &u in &self.group_members[self.group_index(&g.members)] {
                self.sl_power.insert(
                    self.ues[u].ctx.id,
                    g.tx_power_dbm
                        .min(self.ues[u].ctx.power_class.max_tx_power_dbm()),
                );
            }
            self.at(eng, SimTime::from_ms(g.start_ms), Ev::Sidelink(i))?;
        }

        if !self.scn.positioning.geometries.is_empty() {
            let mut rng = RngStream::new(self.seed, "positioning");
            let draws = self.scn.positioning.draws;
            for (info, fixes) in positioning_fixes(self.scn, draws, &mut rng) {
                self.emit(t0, info);
                for f in fixes {
                    self.emit(
                        t0,
                        MetricEvent::PositionFix {
                            geometry: f.geometry,
                            target: f.target,
                            ok: f.ok,
                            horizontal_error_m: f.horizontal_error_m,
                            vertical_error_m: f.vertical_error_m,
                        },
                    );
                }
            }
        }
        Ok(())
    }

    fn group_index(&self, name: &str) -> usize {
        self.scn
            .ue_groups
            .iter()
            .position(|g| g.name == name)
            .expect("validated")
    }

    fn start_mbs(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let t0 = SimTime::ZERO;
        for s in &self.scn.mbs.sessions {
            let profile = self
                .qos
                .lookup(s.fiveqi)
                .map_err(|e| contract(t0, e))?
                .clone();
            let mut session = MbsSession::new(SessionId(s.id), profile, s.rate_kbps);
            session.as_ip_unicast = s.as_ip_unicast;
            self.mbs.add_session(session);
            for m in &s.members {
                for &u in &self.group_members[self.group_index(m)] {
                    let cell = self.ues[u].cell.expect("validated");
                    let id = self.ues[u].ctx.id;
                    self.mbs
                        .join(SessionId(s.id), id, CellId(cell))
                        .map_err(|e| contract(t0, e))?;
                }
            }
            self.at(eng, SimTime::from_ms(s.start_ms), Ev::MbsTx(s.id))?;
        }
        if !self.scn.mbs.sessions.is_empty() {
            self.refresh_csi(t0)?;
            self.at(eng, t0, Ev::MbsAdapt)?;
        }
        for (h, spec) in self.scn.mbs.handovers.iter().enumerate() {
            let members = &self.group_members[self.group_index(&spec.group)];
            let chosen: Vec<usize> = match spec.ue_index {
                Some(i) => vec![members[i as usize]],
                None => members.clone(),
            };
            for (k, u) in chosen.into_iter().enumerate() {
                let begin = SimTime::from_ms(spec.at_ms) + spec.spacing_ms * 1_000 * k as u64;
                self.at(eng, begin, Ev::MbsHandoverBegin(h, u))?;
                self.at(eng, begin + spec.gap_ms * 1_000, Ev::MbsHandoverEnd(h, u))?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, eng: &mut Engine<Ev>, ev: Event<Ev>) -> Result<(), RunError> {
        let now = ev.fire_time;
        match ev.action {
            Ev::Access(u) => self.on_access(eng, now, u),
            Ev::RachOccasion(c) => self.on_rach(eng, now, c),
            Ev::Connect(u) => self.on_connect(eng, now, u),
            Ev::Arrival(f) => self.on_arrival(eng, now, f),
            Ev::Slot(c) => self.on_slot(eng, now, c),
            Ev::IabIntegrate(n) => self.on_integrate(eng, now, n),
            Ev::IabFlightDone(n) => {
                let tr = self
                    .topology
                    .complete_f1(NodeId(n), now)
                    .map_err(|e| contract(now, e))?;
                self.emit_transitions(now, &tr);
                self.emit(now, MetricEvent::IabResume { node: n });
                self.schedule_serving(eng, NodeId(n), &tr)
            }
            Ev::IabServing(n) => self.on_serving(now, n),
            Ev::IabDeplete(n) => self.on_deplete(now, n),
            Ev::IabReplace(i) => self.on_replace(now, i),
            Ev::MbsTx(s) => self.on_mbs_tx(eng, now, s),
            Ev::MbsAdapt => self.on_mbs_adapt(eng, now),
            Ev::MbsHandoverBegin(h, u) => {
                let sid = SessionId(self.scn.mbs.handovers[h].session);
                self.mbs
                    .begin_handover(sid, self.ues[u].ctx.id)
                    .map_err(|e| contract(now, e))?;
                Ok(())
            }
            Ev::MbsHandoverEnd(h, u) => self.on_mbs_handover_end(now, h, u),
            Ev::Sidelink(g) => self.on_sidelink(eng, now, g),
        }
    }

    fn attempt_for(&self, u: usize, now: SimTime) -> AccessAttempt {
        let mut a = AccessAttempt::for_ue(&self.ues[u].ctx, now);
        if self.scn.ablation.no_mc_access_priority {
            a.access_identities.clear();
            a.establishment_cause = EstablishmentCause::MoData;
        }
        a
    }

    fn on_access(&mut self, eng: &mut Engine<Ev>, now: SimTime, u: usize) -> Result<(), RunError> {
        let ue = &mut self.ues[u];
        ue.first_request.get_or_insert(now);
        let cell = ue.cell.expect("only UEs with a cell request access");
        if self.cells[&cell].state.is_none() {
            return self.at(eng, now + RETRY_US, Ev::Access(u));
        }
        let attempt = self.attempt_for(u, now);
        let (class, id) = (self.ues[u].ctx.class, self.ues[u].ctx.id.0);
        let draw = self.rng_uac.uniform();
        let timer = self.rng_uac.uniform();
        match uac_check(&attempt, &self.uac, draw, timer) {
            UacDecision::Barred { duration_ms } => {
                let duration_us = (duration_ms * 1_000.0).round() as u64;
                self.emit(
                    now,
                    MetricEvent::UacBarred {
                        ue: id,
                        class,
                        duration_us,
                    },
                );
                self.at(eng, now + duration_us.max(1), Ev::Access(u))
            }
            UacDecision::Allowed => {
                self.emit(now, MetricEvent::UacPassed { ue: id, class });
                let d = self.ues[u]
                    .ctx
                    .position
                    .distance(&self.cell_position(cell, now));
                let pathloss_db = self
                    .radio
                    .pathloss(d.max(self.radio.d0_m))
                    .map_err(|e| contract(now, e))?;
                let c = self.cells.get_mut(&cell).expect("validated");
                if let Some(t) = c.rach.submit(
                    RachContender {
                        attempt,
                        pathloss_db,
                    },
                    now,
                ) {
                    self.at(eng, t, Ev::RachOccasion(cell))?;
                }
                Ok(())
            }
        }
    }

    fn on_rach(&mut self, eng: &mut Engine<Ev>, now: SimTime, cell: u32) -> Result<(), RunError> {
        let c = self.cells.get_mut(&cell).expect("validated");
        let report = c.rach.resolve(now, &mut self.rng_rach);
        for t in report.new_occasions {
            self.at(eng, t, Ev::RachOccasion(cell))?;
        }
        if report.collisions > 0 {
            self.emit(
                now,
                MetricEvent::RachCollisions {
                    cell,
                    count: report.collisions,
                },
            );
        }
        for o in report.finished {
            let u = o.ue_id.0 as usize;
            self.emit(
                now,
                MetricEvent::RachDone {
                    ue: o.ue_id.0,
                    class: self.ues[u].ctx.class,
                    cell,
                    success: o.success,
                    attempts: o.attempts,
                    latency_us: o.latency_us,
                },
            );
            if o.success {
                self.at(eng, o.completed_at, Ev::Connect(u))?;
            }
        }
        Ok(())
    }

    fn arp_for(&self, u: usize, service: crate::qos::ServiceKind) -> Result<Arp, RunError> {
        let g = &self.scn.ue_groups[self.ues[u].group];
        let base = match g.arp {
            Some(a) => Arp::new(
                a.priority_level,
                if a.may_preempt {
                    PreemptionCapability::MayPreempt
                } else {
                    PreemptionCapability::ShallNotPreempt
                },
                if a.preemptable {
                    PreemptionVulnerability::Preemptable
                } else {
                    PreemptionVulnerability::NotPreemptable
                },
            )
            .map_err(|e| contract(SimTime::ZERO, e))?,
            None => service.default_arp(),
        };
        if self.scn.ablation.no_preemption {
            let vul = if base.is_preemptable() {
                PreemptionVulnerability::Preemptable
            } else {
                PreemptionVulnerability::NotPreemptable
            };
            return Arp::new(
                base.priority_level(),
                PreemptionCapability::ShallNotPreempt,
                vul,
            )
            .map_err(|e| contract(SimTime::ZERO, e));
        }
        Ok(base)
    }

    fn on_connect(&mut self, eng: &mut Engine<Ev>, now: SimTime, u: usize) -> Result<(), RunError> {
        let cell = self.ues[u].cell.expect("connecting UEs have a cell");
        let cause = self.attempt_for(u, now).establishment_cause;
        let (class, id) = (self.ues[u].ctx.class, self.ues[u].ctx.id);
        let c = self.cells.get_mut(&cell).expect("validated");
        if c.state.is_none() || !c.policy.accepts(cause, c.connected) {
            self.emit(now, MetricEvent::RrcRejected { ue: id.0, class });
            return Ok(());
        }
        c.connected += 1;
        let latency = now.saturating_sub(self.ues[u].first_request.unwrap_or(now));
        self.emit(
            now,
            MetricEvent::Connected {
                ue: id.0,
                class,
                cell,
                access_latency_us: latency,
            },
        );

        let group = &self.scn.ue_groups[self.ues[u].group];
        let snr = self
            .radio
            .downlink_snr(
                &self.cell_position(cell, now),
                &self.ues[u].ctx.position,
                0.0,
            )
            .map_err(|e| contract(now, e))?;
        for service in self.ues[u].ctx.services.clone() {
            let profile = self
                .qos
                .profile_for(service)
                .map_err(|e| contract(now, e))?
                .clone();
            let rate = group
                .rate_kbps
                .unwrap_or_else(|| service.nominal_rate_kbps());
            let mcs = self.radio.mcs_for_snr(snr, profile.packet_error_rate);
            let arp = self.arp_for(u, service)?;
            let gbr = profile.is_gbr();
            let flow_id = FlowId(self.next_flow);
            self.next_flow += 1;
            let req = FlowRequest::new(flow_id, id, profile, arp, rate, mcs, &self.radio)
                .map_err(|e| contract(now, e))?;
            let reserved = req.reserved_prbs();
            let state = self
                .cells
                .get_mut(&cell)
                .and_then(|c| c.state.as_mut())
                .expect("checked above");
            let feasible = state.is_feasible(&req);
            let outcome = state.admit(req, now).map_err(|e| contract(now, e))?;
            let evicted = state.drain_evicted();
            if state.gbr_reserved() > state.capacity_prbs() {
                return Err(contract(
                    now,
                    format!("cell{cell} reserves more PRBs than it has"),
                ));
            }
            let mut preempted = Vec::new();
            for e in evicted {
                let victim = e.flow.request.flow_id.0;
                let preemptable = e.flow.request.arp.is_preemptable();
                if !preemptable {
                    return Err(contract(
                        now,
                        format!("flow{victim} is not pre-emptable but was evicted"),
                    ));
                }
                if let Some(f) = self.flows.get_mut(&victim) {
                    f.live = false;
                }
                preempted.push(victim);
                self.emit(
                    now,
                    MetricEvent::FlowEvicted {
                        flow: victim,
                        by: flow_id.0,
                        preemptable,
                    },
                );
            }
            let admitted = outcome.is_admitted();
            debug_assert!(
                matches!(outcome, AdmissionOutcome::AdmittedWithPreemption(_))
                    == !preempted.is_empty()
            );
            self.emit(
                now,
                MetricEvent::FlowRequested {
                    flow: flow_id.0,
                    ue: id.0,
                    class,
                    service,
                    gbr,
                    reserved_prbs: reserved,
                    feasible,
                    admitted,
                    preempted,
                },
            );
            if admitted {
                let interval_ms = u64::from(service.packet_interval_ms());
                self.flows.insert(
                    flow_id.0,
                    Flow {
                        cell,
                        bits: rate * interval_ms as f64,
                        interval_us: interval_ms * 1_000,
                        live: true,
                        next_arrival: now,
                        ue: u,
                    },
                );
                self.at(eng, now, Ev::Arrival(flow_id.0))?;
            }
        }
        Ok(())
    }

    fn on_arrival(&mut self, eng: &mut Engine<Ev>, now: SimTime, f: u32) -> Result<(), RunError> {
        let flow = self.flows.get_mut(&f).expect("arrivals belong to flows");
        if !flow.live {
            return Ok(());
        }
        let Some(state) = self
            .cells
            .get_mut(&flow.cell)
            .and_then(|c| c.state.as_mut())
        else {
            flow.live = false;
            return Ok(());
        };
        if state.enqueue(FlowId(f), flow.bits, now).is_err() {
            flow.live = false;
            return Ok(());
        }
        flow.next_arrival = now + flow.interval_us;
        let next = flow.next_arrival;
        self.at(eng, next, Ev::Arrival(f))
    }

    fn on_slot(&mut self, eng: &mut Engine<Ev>, now: SimTime, cell: u32) -> Result<(), RunError> {
        let c = self.cells.get_mut(&cell).expect("validated");
        let node = c.iab_node;
        if let Some(state) = c.state.as_mut() {
            let r = state.schedule_slot(now);
            if r.used_prbs > 0 || !r.dropped.is_empty() {
                self.emit(
                    now,
                    MetricEvent::Slot {
                        cell,
                        used_prbs: r.used_prbs,
                        delivered: r
                            .delivered
                            .iter()
                            .map(|d| (d.flow_id.0, d.delay_us))
                            .collect(),
                        dropped: r.dropped.iter().map(|d| d.0 .0).collect(),
                    },
                );
            }
            if r.used_prbs > 0 {
                self.du_tx(now, node, cell, u64::from(r.used_prbs))?;
            }
        }
        self.at(eng, now + self.radio.slot_us, Ev::Slot(cell))
    }

    /// Records a downlink transmission of an IAB-served cell; the DU must be
    /// allowed on air.
    fn du_tx(
        &mut self,
        now: SimTime,
        node: Option<NodeId>,
        cell: u32,
        prbs: u64,
    ) -> Result<(), RunError> {
        let Some(n) = node else { return Ok(()) };
        let allowed = self.topology.node(n).is_ok_and(|x| x.can_transmit(now));
        if !allowed {
            return Err(contract(
                now,
                format!("{n} transmitted on cell{cell} while its DU is not serving"),
            ));
        }
        self.emit(
            now,
            MetricEvent::DuTx {
                node: n.0,
                cell,
                prbs,
            },
        );
        Ok(())
    }

    fn emit_transitions(&mut self, now: SimTime, tr: &[Transition]) {
        for t in tr {
            self.emit(
                now,
                MetricEvent::IabPhase {
                    node: t.node.0,
                    phase: t.phase,
                    at_us: t.at.as_us(),
                },
            );
        }
    }

    fn schedule_serving(
        &mut self,
        eng: &mut Engine<Ev>,
        node: NodeId,
        tr: &[Transition],
    ) -> Result<(), RunError> {
        if let Some(t) = tr.iter().find(|t| t.phase == crate::iab::Phase::Serving) {
            self.at(eng, t.at, Ev::IabServing(node.0))?;
        }
        Ok(())
    }

    fn on_integrate(&mut self, eng: &mut Engine<Ev>, now: SimTime, n: u32) -> Result<(), RunError> {
        let spec = self
            .scn
            .iab
            .nodes
            .iter()
            .find(|s| s.id == n)
            .expect("validated");
        let id = NodeId(n);
        let parent = NodeId(spec.parent.expect("children have parents"));
        let parent_up = self
            .topology
            .node(parent)
            .is_ok_and(|p| p.can_transmit(now));
        if !parent_up {
            self.emit(
                now,
                MetricEvent::IabIntegrationFailed {
                    node: n,
                    reason: format!("parent {parent} not serving"),
                },
            );
            return self.at(eng, now + RETRY_US, Ev::IabIntegrate(n));
        }
        let here = self
            .topology
            .node(id)
            .map_err(|e| contract(now, e))?
            .position_at(now);
        let there = self
            .topology
            .node(parent)
            .map_err(|e| contract(now, e))?
            .position_at(now);
        let mt = UeContext::new(UeId(MT_ID_BASE + n), UeClass::MissionCritical).at(here);
        let contender = RachContender {
            attempt: AccessAttempt::for_ue(&mt, now),
            pathloss_db: self
                .radio
                .pathloss(here.distance(&there).max(self.radio.d0_m))
                .map_err(|e| contract(now, e))?,
        };
        let rrc = run_cbra(&[contender], &self.scn.rach, &self.radio, &mut self.rng_iab).remove(0);
        let tr = match self.topology.integrate(
            id,
            parent,
            spec.capacity_prbs,
            spec.per_hop_latency_us,
            spec.defer_f1,
            &rrc,
            now,
        ) {
            Ok(tr) => tr,
            Err(IabError::RrcFailure(_)) => {
                self.emit(
                    now,
                    MetricEvent::IabIntegrationFailed {
                        node: n,
                        reason: "MT random access failed".into(),
                    },
                );
                return self.at(eng, now + RETRY_US, Ev::IabIntegrate(n));
            }
            Err(e) => return Err(contract(now, e)),
        };
        self.topology.check_forest().map_err(|e| contract(now, e))?;
        self.emit_transitions(now, &tr);
        if spec.defer_f1 {
            self.emit(now, MetricEvent::IabHold { node: n });
            let rrc_at = tr.last().map_or(now, |t| t.at);
            let node = self.topology.node(id).map_err(|e| contract(now, e))?;
            let landed = node.flight.as_ref().map_or(rrc_at, |f| f.arrival_time());
            self.at(eng, landed.max(rrc_at), Ev::IabFlightDone(n))?;
        } else {
            self.schedule_serving(eng, id, &tr)?;
        }

        let node = self.topology.node(id).map_err(|e| contract(now, e))?;
        if let Some(flat) = node.depletion_time(now) {
            self.at(eng, flat, Ev::IabDeplete(n))?;
            for (i, r) in self.scn.iab.replacements.iter().enumerate() {
                if r.source == n && r.at_ms.is_none() {
                    let t =
                        SimTime(flat.0.saturating_sub(r.low_battery_margin_ms * 1_000)).max(now);
                    self.at(eng, t, Ev::IabReplace(i))?;
                }
            }
        }
        Ok(())
    }

    fn on_serving(&mut self, now: SimTime, n: u32) -> Result<(), RunError> {
        let id = NodeId(n);
        if !self.topology.node(id).is_ok_and(|x| x.can_transmit(now)) {
            return Ok(());
        }
        let path = self
            .topology
            .path_metrics(id)
            .map_err(|e| contract(now, e))?;
        let slot = self.radio.slot_us;
        for (&cid, c) in self.cells.iter_mut() {
            if c.iab_node == Some(id) && c.state.is_none() {
                c.state = Some(
                    CellState::new(CellId(cid), c.capacity_prbs, slot)
                        .with_backhaul(path.bottleneck_prbs, path.latency_us),
                );
            }
        }
        Ok(())
    }

    /// Takes down cells whose DU stopped serving, together with their flows.
    fn drop_dead_cells(&mut self, now: SimTime) {
        let mut dead = Vec::new();
        for (&cid, c) in self.cells.iter_mut() {
            let Some(n) = c.iab_node else { continue };
            let up = self.topology.node(n).is_ok_and(|x| x.can_transmit(now));
            if !up && c.state.is_some() {
                c.state = None;
                c.connected = 0;
                dead.push(cid);
            }
        }
        let mut released = Vec::new();
        for (&fid, f) in self.flows.iter_mut() {
            if f.live && dead.contains(&f.cell) {
                f.live = false;
                released.push(fid);
            }
        }
        for flow in released {
            self.emit(now, MetricEvent::FlowReleased { flow });
        }
    }

    fn on_deplete(&mut self, now: SimTime, n: u32) -> Result<(), RunError> {
        let id = NodeId(n);
        let attached = self.topology.node(id).is_ok_and(|x| x.parent.is_some());
        if !attached {
            return Ok(());
        }
        let tr = self
            .topology
            .deplete(id, now)
            .map_err(|e| contract(now, e))?;
        self.emit_transitions(now, &tr);
        self.emit(now, MetricEvent::IabDepleted { node: n });
        self.topology.check_forest().map_err(|e| contract(now, e))?;
        self.drop_dead_cells(now);
        Ok(())
    }

    fn on_replace(&mut self, now: SimTime, i: usize) -> Result<(), RunError> {
        let spec = self.scn.iab.replacements[i];
        let (s, r) = (NodeId(spec.source), NodeId(spec.replacement));
        let mode = if self.scn.ablation.plain_iab_handover {
            ReplacementMode::PlainHandover
        } else {
            spec.mode
        };
        let source_cells: Vec<u32> = self
            .cells
            .iter()
            .filter(|(_, c)| c.iab_node == Some(s))
            .map(|(&k, _)| k)
            .collect();
        let target_cell = *self
            .cells
            .iter()
            .find(|(_, c)| c.iab_node == Some(r))
            .map(|(k, _)| k)
            .expect("validated");

        let mut seen = BTreeSet::new();
        let mut traffic = Vec::new();
        let mut moving = Vec::new();
        for (&fid, f) in &self.flows {
            if f.live && source_cells.contains(&f.cell) {
                moving.push(fid);
                if seen.insert(f.ue) {
                    traffic.push(DownlinkTraffic {
                        ue: self.ues[f.ue].ctx.id,
                        first_arrival: f.next_arrival,
                        period_us: f.interval_us,
                    });
                }
            }
        }
        let longest = traffic.iter().map(|t| t.period_us).max().unwrap_or(0);
        let gap_us = spec.gap_ms * 1_000;
        let spacing_us = spec.spacing_ms * 1_000;
        let plan = ReplacementPlan {
            start: now,
            gap_us,
            spacing_us,
            end: now + spacing_us * traffic.len() as u64 + gap_us + longest,
        };
        let report = match self.topology.replace(s, r, mode, &traffic, &plan) {
            Ok(rep) => rep,
            Err(e @ (IabError::IllegalState { .. } | IabError::Unsupported(_))) => {
                self.emit(
                    now,
                    MetricEvent::IabReplacementSkipped {
                        source: s.0,
                        reason: e.to_string(),
                    },
                );
                return Ok(());
            }
            Err(e) => return Err(contract(now, e)),
        };
        self.topology.check_forest().map_err(|e| contract(now, e))?;
        self.emit(
            now,
            MetricEvent::IabReplacement {
                source: s.0,
                replacement: r.0,
                mode,
                report,
            },
        );

        // Move the UEs and their flows to the replacement's cell.
        for fid in moving {
            let from = self.flows[&fid].cell;
            let moved = self
                .cells
                .get_mut(&from)
                .and_then(|c| c.state.as_mut())
                .and_then(|st| st.release(FlowId(fid)));
            let target = self
                .cells
                .get_mut(&target_cell)
                .and_then(|c| c.state.as_mut());
            let admitted = match (moved, target) {
                (Some(af), Some(st)) => st
                    .admit(af.request, now)
                    .map_err(|e| contract(now, e))?
                    .is_admitted(),
                _ => false,
            };
            let f = self.flows.get_mut(&fid).expect("listed above");
            f.cell = target_cell;
            if admitted {
                if let Some(st) = self
                    .cells
                    .get_mut(&target_cell)
                    .and_then(|c| c.state.as_mut())
                {
                    if st.gbr_reserved() > st.capacity_prbs() {
                        return Err(contract(
                            now,
                            format!("cell{target_cell} over-reserved after replacement"),
                        ));
                    }
                    for e in st.drain_evicted() {
                        if !e.flow.request.arp.is_preemptable() {
                            return Err(contract(
                                now,
                                "replacement evicted a non-pre-emptable flow",
                            ));
                        }
                    }
                }
            } else {
                f.live = false;
                self.emit(now, MetricEvent::FlowReleased { flow: fid });
            }
        }
        let moved_ues: Vec<usize> = seen.into_iter().collect();
        for u in moved_ues {
            self.ues[u].cell = Some(target_cell);
        }
        let moved_count: u32 = source_cells.iter().map(|c| self.cells[c].connected).sum();
        if let Some(c) = self.cells.get_mut(&target_cell) {
            c.connected += moved_count;
        }
        self.drop_dead_cells(now);
        Ok(())
    }

    fn refresh_csi(&mut self, now: SimTime) -> Result<(), RunError> {
        let noise = self.scn.mbs.csi_noise_db;
        let mut updates = Vec::new();
        for s in self.mbs.sessions() {
            for cell in s.active_cells() {
                let at = self.cell_position(cell.0, now);
                for ue in s.members_in(cell) {
                    let p = self.ues[ue.0 as usize].ctx.position;
                    updates.push((ue, at, p));
                }
            }
        }
        for (ue, at, p) in updates {
            let snr = self
                .radio
                .downlink_snr(&at, &p, 0.0)
                .map_err(|e| contract(now, e))?;
            let jitter = if noise > 0.0 {
                self.rng_csi.uniform_range(-noise / 2.0, noise / 2.0)
            } else {
                0.0
            };
            self.mbs.set_csi(ue, snr + jitter);
        }
        Ok(())
    }

    fn on_mbs_adapt(&mut self, eng: &mut Engine<Ev>, now: SimTime) -> Result<(), RunError> {
        self.refresh_csi(now)?;
        let bearers: Vec<(SessionId, CellId)> = self
            .mbs
            .sessions()
            .flat_map(|s| s.active_cells().map(move |c| (s.session_id, c)))
            .collect();
        for (sid, cell) in bearers {
            let before = self.mbs.mrb(sid, cell).map(|m| m.mode);
            let after = self.mbs.adapt(sid, cell).map_err(|e| contract(now, e))?;
            if before.is_some_and(|b| b != after) {
                self.emit(
                    now,
                    MetricEvent::MbsModeSwitch {
                        session: sid.0,
                        cell: cell.0,
                        to: after,
                    },
                );
            }
        }
        self.at(
            eng,
            now + self.scn.mbs.adapt_interval_ms() * 1_000,
            Ev::MbsAdapt,
        )
    }

    fn on_mbs_tx(&mut self, eng: &mut Engine<Ev>, now: SimTime, s: u32) -> Result<(), RunError> {
        let spec = self
            .scn
            .mbs
            .sessions
            .iter()
            .find(|x| x.id == s)
            .expect("validated");
        let sid = SessionId(s);
        let bits = spec.rate_kbps * spec.packet_interval_ms as f64;
        let cells: Vec<CellId> = self
            .mbs
            .session(sid)
            .map_err(|e| contract(now, e))?
            .active_cells()
            .collect();
        for cell in cells {
            let Some(c) = self.cells.get(&cell.0) else {
                continue;
            };
            if c.state.is_none() {
                continue;
            }
            let node = c.iab_node;
            let mode = self
                .mbs
                .mrb(sid, cell)
                .map_or(crate::multicast::Leg::Ptp, |m| m.mode);
            let r = self
                .mbs
                .transmit(sid, cell, bits, &mut self.rng_mbs)
                .map_err(|e| contract(now, e))?;
            if r.delivered.is_empty() && r.failed.is_empty() {
                continue;
            }
            self.emit(
                now,
                MetricEvent::MbsTx {
                    session: s,
                    cell: cell.0,
                    mode,
                    prbs: r.prbs,
                    delivered: r.delivered.len() as u32,
                    failed: r.failed.len() as u32,
                    ptm_retransmissions: r.ptm_retransmissions,
                    ptp_retransmissions: r.ptp_retransmissions,
                },
            );
            self.du_tx(now, node, cell.0, r.prbs)?;
        }
        self.at(eng, now + spec.packet_interval_ms * 1_000, Ev::MbsTx(s))
    }

    fn on_mbs_handover_end(&mut self, now: SimTime, h: usize, u: usize) -> Result<(), RunError> {
        let spec = &self.scn.mbs.handovers[h];
        let sid = SessionId(spec.session);
        let target = spec.target_cell;
        let ue = &self.ues[u];
        let from = ue.cell.expect("validated");
        let offset = ue.ctx.position.to_vector() - self.nominal_center(from).to_vector();
        let mut p = Position::from_vector(&(self.nominal_center(target).to_vector() + offset));
        p.z = ue.ctx.position.z;
        self.ues[u].ctx.position = p;
        self.ues[u].cell = Some(target);
        let snr = self
            .radio
            .downlink_snr(&self.cell_position(target, now), &p, 0.0)
            .map_err(|e| contract(now, e))?;
        let id = self.ues[u].ctx.id;
        self.mbs.set_csi(id, snr);
        let report = self
            .mbs
            .complete_handover(sid, id, CellId(target), &mut self.rng_mbs)
            .map_err(|e| contract(now, e))?;
        self.emit(
            now,
            MetricEvent::MbsHandover {
                session: sid.0,
                ue: id.0,
                target,
                report,
            },
        );
        Ok(())
    }

    fn sidelink_snr(
        &self,
        from: &Position,
        to: &Position,
        tx_dbm: f64,
    ) -> Result<f64, crate::radio::RadioError> {
        Ok(tx_dbm
            - self
                .radio
                .pathloss(from.distance(to).max(self.radio.d0_m))?
            - self.radio.noise_dbm)
    }

    fn on_sidelink(
        &mut self,
        eng: &mut Engine<Ev>,
        now: SimTime,
        g: usize,
    ) -> Result<(), RunError> {
        let spec = &self.scn.sidelink.groups[g];
        let cfg = self.scn.sidelink.config;
        let members = self.group_members[self.group_index(&spec.members)].clone();
        let tx_idx = members[self.sl_round[g] % members.len()];
        self.sl_round[g] += 1;
        let tx = self.ues[tx_idx].ctx.id;
        let tx_pos = self.ues[tx_idx].ctx.position;
        let tx_dbm = self.sl_power[&tx];

        self.sl_pool.release_owner(tx);
        let mut sensed: Vec<Reservation> = Vec::new();
        for r in self.sl_pool.reservations() {
            let owner_pos = self.ues[r.owner.0 as usize].ctx.position;
            let pl = self
                .radio
                .pathloss(owner_pos.distance(&tx_pos).max(self.radio.d0_m))
                .map_err(|e| contract(now, e))?;
            sensed.push(Reservation {
                measured_rsrp_dbm: self.sl_power[&r.owner] - pl,
                ..*r
            });
        }
        let mut refused: BTreeSet<Resource> = BTreeSet::new();
        let mut placed = false;
        let mut reselections = 0;
        let mut threshold = cfg.rsrp_threshold_dbm;
        while reselections <= MAX_RESELECTIONS {
            let mut cands = candidate_resources(&self.sl_pool, &sensed, &cfg);
            threshold = cands.final_threshold_dbm;
            cands.resources.retain(|r| !refused.contains(r));
            if cands.resources.is_empty() {
                break;
            }
            let draw = self.rng_sl.uniform();
            let res = select_and_reserve(tx, &cands, spec.priority, tx_dbm, draw)
                .map_err(|e| contract(now, e))?;
            match self.sl_pool.place(res).map_err(|e| contract(now, e))? {
                Placement::Placed => {
                    placed = true;
                    break;
                }
                Placement::Displaced(old) => {
                    let victim_group = self.scn.ue_groups[self.ues[old.owner.0 as usize].group]
                        .name
                        .clone();
                    self.emit(
                        now,
                        MetricEvent::SidelinkPreempted {
                            victim: victim_group,
                            victim_priority: old.priority,
                            by_priority: spec.priority,
                        },
                    );
                    placed = true;
                    break;
                }
                Placement::Refused => {
                    refused.insert(res.resource);
                    reselections += 1;
                }
            }
        }

        let receivers: Vec<(UeId, f64)> = members
            .iter()
            .filter(|&&m| m != tx_idx)
            .map(|&m| {
                let p = self.ues[m].ctx.position;
                let snr = self.sidelink_snr(&tx_pos, &p, tx_dbm)?;
                Ok((
                    self.ues[m].ctx.id,
                    self.radio.packet_error_prob(snr, spec.mcs)?,
                ))
            })
            .collect::<Result<_, crate::radio::RadioError>>()
            .map_err(|e| contract(now, e))?;
        let (mut retx, mut delivered, mut undelivered) = (0, 0, receivers.len() as u32);
        if placed && !receivers.is_empty() {
            let r = groupcast_round(&receivers, cfg.max_harq, &mut self.rng_sl)
                .map_err(|e| contract(now, e))?;
            retx = r.retransmissions;
            delivered = r.delivered.len() as u32;
            undelivered = r.undelivered.len() as u32;
        }
        self.emit(
            now,
            MetricEvent::SidelinkTx {
                group: spec.name.clone(),
                priority: spec.priority,
                placed,
                reselections,
                retransmissions: retx,
                delivered,
                undelivered,
                threshold_dbm: threshold,
            },
        );
        self.at(eng, now + spec.period_ms * 1_000, Ev::Sidelink(g))
    }
}

/// One Monte Carlo position fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixRecord {
    pub geometry: String,
    pub target: usize,
    pub ok: bool,
    pub truth: [f64; 3],
    pub estimate: Option<[f64; 3]>,
    pub horizontal_error_m: f64,
    pub vertical_error_m: f64,
}

fn mean_rtt(
    ue: &Position,
    anchors: &[Anchor],
    sigma_s: f64,
    k: u32,
    rng: &mut RngStream,
) -> Result<RttSet, PositioningError> {
    let k = k.max(1);
    let mut acc = measure_rtt(ue, anchors, sigma_s, rng)?;
    for _ in 1..k {
        let next = measure_rtt(ue, anchors, sigma_s, rng)?;
        for (id, v) in acc.rtts_s.iter_mut() {
            *v += next.rtts_s[id];
        }
    }
    for v in acc.rtts_s.values_mut() {
        *v /= f64::from(k);
    }
    acc.noise_sigma_s = sigma_s / f64::from(k).sqrt();
    Ok(acc)
}

/// Anchors of every geometry (after optional placement improvement) and
/// `draws` fixes each, cycling through the targets.
fn positioning_fixes(
    scn: &Scenario,
    draws: u32,
    rng: &mut RngStream,
) -> Vec<(MetricEvent, Vec<FixRecord>)> {
    let p = &scn.positioning;
    let targets: Vec<Position> = p.targets.iter().map(|&t| pos(t)).collect();
    let sigma_s = p.sigma_ns * 1e-9;
    let opts = SolverOptions::default();
    let init = p.init.map(pos);
    let mut out = Vec::new();
    for g in &p.geometries {
        let mut anchors: Vec<Anchor> = g
            .anchors
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut x = Anchor::new(i as u32, pos(a.position));
                x.is_airborne = a.airborne;
                x.clock_offset_s = a.clock_offset_ns * 1e-9;
                x
            })
            .collect();
        if let Some(im) = g.improve {
            let region = BoundingBox {
                min: pos(im.region_min),
                max: pos(im.region_max),
            };
            anchors = improve_placement(&anchors, &region, &targets, im.step_m, p.method).anchors;
        }
        let dops: Vec<_> = targets
            .iter()
            .filter_map(|t| gdop(&anchors, t, p.method).ok())
            .collect();
        let mean = |f: &dyn Fn(&crate::positioning::Dop) -> f64| {
            if dops.is_empty() {
                0.0
            } else {
                dops.iter().map(f).sum::<f64>() / dops.len() as f64
            }
        };
        let info = MetricEvent::GeometryInfo {
            name: g.name.clone(),
            mean_hdop: mean(&|d| d.hdop),
            mean_vdop: mean(&|d| d.vdop),
        };
        let mut fixes = Vec::new();
        for d in 0..draws as usize {
            if targets.is_empty() {
                break;
            }
            let ti = d % targets.len();
            let truth = targets[ti];
            let est: Result<PositionEstimate, PositioningError> = match p.method {
                Method::Tdoa => {
                    measure_ul_tdoa_averaged(&truth, &anchors, sigma_s, p.srs_occasions, rng)
                        .and_then(|m| solve_tdoa(&m, &anchors, init, &opts))
                }
                Method::Rtt => mean_rtt(&truth, &anchors, sigma_s, p.srs_occasions, rng)
                    .and_then(|m| solve_multi_rtt(&m, &anchors, init, &opts)),
            };
            let rec = match est {
                Ok(e) if e.position.is_finite() => {
                    let dv = e.position.to_vector() - truth.to_vector();
                    FixRecord {
                        geometry: g.name.clone(),
                        target: ti,
                        ok: true,
                        truth: [truth.x, truth.y, truth.z],
                        estimate: Some([e.position.x, e.position.y, e.position.z]),
                        horizontal_error_m: dv.x.hypot(dv.y),
                        vertical_error_m: dv.z.abs(),
                    }
                }
                _ => FixRecord {
                    geometry: g.name.clone(),
                    target: ti,
                    ok: false,
                    truth: [truth.x, truth.y, truth.z],
                    estimate: None,
                    horizontal_error_m: 0.0,
                    vertical_error_m: 0.0,
                },
            };
            fixes.push(rec);
        }
        out.push((info, fixes));
    }
    out
}

/// Positioning Monte Carlo of `scn` alone, with `draws` fixes per geometry.
pub fn positioning_demo(scn: &Scenario, draws: u32, seed: u64) -> Vec<FixRecord> {
    let mut rng = RngStream::new(seed, "positioning");
    positioning_fixes(scn, draws, &mut rng)
        .into_iter()
        .flat_map(|(_, f)| f)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(src: &str) -> Scenario {
        Scenario::load_str(src).unwrap()
    }

    #[test]
    fn empty_scenario_reports_zeros() {
        let out = run(&scenario("name = \"empty\"\n"), 1).unwrap();
        let r = &out.report;
        assert_eq!(r.access.mc.ues + r.access.commercial.ues, 0);
        assert_eq!(r.admission.requests, 0);
        assert_eq!(r.multicast.transmissions, 0);
        assert_eq!(r.positioning.fixes, 0);
        assert!(matches!(
            out.events.first(),
            Some((_, MetricEvent::ScenarioStart { .. }))
        ));
    }

    #[test]
    fn invalid_scenarios_do_not_run() {
        let mut s = scenario("name = \"x\"\n");
        s.ue_groups.push(super::super::UeGroupSpec {
            name: "g".into(),
            count: 1,
            class: UeClass::Commercial,
            cell: Some(5),
            services: None,
            rate_kbps: None,
            arp: None,
            power_class: Default::default(),
            placement: Default::default(),
            access: Default::default(),
        });
        assert!(matches!(run(&s, 0), Err(RunError::Invalid(_))));
    }

    const SMALL: &str = r#"
name = "small"
duration_ms = 1500

[[cells]]
id = 0
capacity_prbs = 50

[[ue_groups]]
name = "mc"
count = 5
class = "mc"
cell = 0
placement = { radius_m = 100 }

[[ue_groups]]
name = "shoppers"
count = 20
class = "commercial"
cell = 0
rate_kbps = 200
"#;

    #[test]
    fn ues_connect_and_get_served() {
        let r = run(&scenario(SMALL), 3).unwrap().report;
        assert_eq!(r.access.mc.ues, 5);
        assert_eq!(r.access.mc.connected, 5);
        assert_eq!(r.access.commercial.connected, 20);
        assert_eq!(r.admission.mc_gbr_requests, 5);
        assert_eq!(r.admission.mc_gbr_admitted, 5);
        assert!(r.flows.per_service.mcptt_voice.packets_delivered > 0);
        assert!(r.flows.per_service.commercial.packets_delivered > 0);
        assert_eq!(r.flows.gbr.pdb_violations, 0);
    }

    #[test]
    fn same_seed_same_report() {
        let s = scenario(SMALL);
        let a = run(&s, 9).unwrap().report.to_json();
        let b = run(&s, 9).unwrap().report.to_json();
        assert_eq!(a, b);
        let c = run(&s, 10).unwrap().report.to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn replay_reproduces_the_report() {
        let out = run(&scenario(SMALL), 2).unwrap();
        let mut buf = Vec::new();
        super::super::write_trace(&out.events, &mut buf).unwrap();
        let back = super::super::read_trace(buf.as_slice()).unwrap();
        assert_eq!(replay(&back).to_json(), out.report.to_json());
    }

    #[test]
    fn barring_delays_commercial_access() {
        let src = format!(
            "{SMALL}\n[[uac.categories]]\ncategory = 7\nbarring_factor = 0.0\nbarring_time_ms = 10000\nexempt_identities = [1]\n"
        );
        let r = run(&scenario(&src), 3).unwrap().report;
        assert_eq!(r.access.mc.connected, 5);
        assert_eq!(r.access.mc.uac_barred, 0);
        assert_eq!(r.access.commercial.connected, 0);
        assert_eq!(r.access.commercial.uac_pass_rate, 0.0);
    }
}
