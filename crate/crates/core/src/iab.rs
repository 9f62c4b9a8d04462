//! Integrated access and backhaul topology.
//!
//! A donor hosts the CU; child nodes carry an MT (towards the parent) and a
//! DU (towards UEs). Children integrate by first bringing up the MT's RRC
//! connection to the donor CU and then establishing F1, which may be held
//! back while a drone is still flying. A serving child can be replaced by
//! another child under the same parent, either by handing UEs over one at a
//! time or by having the parent duplicate downlink data to both nodes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access::CbraOutcome;
use crate::radio::Position;
use crate::sim::{Engine, SimTime};
use crate::ue::UeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iab{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IabError {
    #[error("unknown IAB node {0}")]
    UnknownNode(NodeId),
    #[error("illegal state for {node}: {reason}")]
    IllegalState { node: NodeId, reason: String },
    #[error("RRC connection of {0} failed")]
    RrcFailure(NodeId),
    #[error("topology error at {node}: {reason}")]
    Topology { node: NodeId, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

fn illegal(node: NodeId, reason: impl Into<String>) -> IabError {
    IabError::IllegalState {
        node,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IabRole {
    Donor,
    Child,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MtState {
    Idle,
    RrcConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuState {
    Inactive,
    F1Setup,
    Serving,
}

/// Piecewise-linear flight at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightPath {
    pub waypoints: Vec<Position>,
    pub speed_mps: f64,
    pub start: SimTime,
}

impl FlightPath {
    fn legs(&self) -> impl Iterator<Item = (Position, Position, f64)> + '_ {
        self.waypoints
            .windows(2)
            .map(|w| (w[0], w[1], w[0].distance(&w[1])))
    }

    pub fn length_m(&self) -> f64 {
        self.legs().map(|(_, _, d)| d).sum()
    }

    pub fn arrival_time(&self) -> SimTime {
        if self.speed_mps <= 0.0 {
            return self.start;
        }
        self.start + (self.length_m() / self.speed_mps * 1e6).round() as u64
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        let Some(first) = self.waypoints.first() else {
            return Position::ORIGIN;
        };
        if t <= self.start || self.speed_mps <= 0.0 {
            return *first;
        }
        let mut left = (t.0 - self.start.0) as f64 * 1e-6 * self.speed_mps;
        for (a, b, d) in self.legs() {
            if left <= d {
                return if d > 0.0 { a.lerp(&b, left / d) } else { b };
            }
            left -= d;
        }
        *self.waypoints.last().expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IabNode {
    pub node_id: NodeId,
    pub role: IabRole,
    pub mt_state: MtState,
    pub du_state: DuState,
    pub f1_established: bool,
    pub parent: Option<NodeId>,
    pub position: Position,
    pub flight: Option<FlightPath>,
    pub battery_j: Option<f64>,
    pub drain_w: f64,
    /// The MT link can double as the drone's control channel; not simulated.
    pub drone_control_via_mt: bool,
    pub serving_since: Option<SimTime>,
}

impl IabNode {
    pub fn donor(node_id: NodeId, position: Position) -> Self {
        IabNode {
            node_id,
            role: IabRole::Donor,
            mt_state: MtState::Idle,
            du_state: DuState::Serving,
            f1_established: true,
            parent: None,
            position,
            flight: None,
            battery_j: None,
            drain_w: 0.0,
            drone_control_via_mt: false,
            serving_since: Some(SimTime::ZERO),
        }
    }

    pub fn child(node_id: NodeId, position: Position) -> Self {
        IabNode {
            node_id,
            role: IabRole::Child,
            mt_state: MtState::Idle,
            du_state: DuState::Inactive,
            f1_established: false,
            parent: None,
            position,
            flight: None,
            battery_j: None,
            drain_w: 0.0,
            drone_control_via_mt: false,
            serving_since: None,
        }
    }

    pub fn with_flight(mut self, flight: FlightPath) -> Self {
        self.flight = Some(flight);
        self
    }

    pub fn with_battery(mut self, battery_j: f64, drain_w: f64) -> Self {
        self.battery_j = Some(battery_j);
        self.drain_w = drain_w;
        self
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        self.flight
            .as_ref()
            .map_or(self.position, |f| f.position_at(t))
    }

    /// Whether the DU may put downlink on air at `t`.
    pub fn can_transmit(&self, t: SimTime) -> bool {
        self.du_state == DuState::Serving && self.serving_since.is_some_and(|s| s <= t)
    }

    /// Time at which the battery runs flat, if the node has one and drains.
    pub fn depletion_time(&self, from: SimTime) -> Option<SimTime> {
        let b = self.battery_j?;
        (self.drain_w > 0.0).then(|| from + (b / self.drain_w * 1e6).round() as u64)
    }

    fn check(&self) -> Result<(), IabError> {
        if self.du_state == DuState::Serving
            && self.role == IabRole::Child
            && !(self.mt_state == MtState::RrcConnected && self.f1_established)
        {
            return Err(illegal(
                self.node_id,
                "serving DU without MT connection and F1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackhaulLink {
    pub child: NodeId,
    pub parent: NodeId,
    pub capacity_prbs: u32,
    pub per_hop_latency_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Idle,
    RrcConnected,
    F1Setup,
    Serving,
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: SimTime,
    pub node: NodeId,
    pub phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub hops: u32,
    pub latency_us: u64,
    /// Smallest link capacity on the path; `u32::MAX` for a donor.
    pub bottleneck_prbs: u32,
}

impl PathMetrics {
    pub fn effective_capacity(&self, access_prbs: u32) -> u32 {
        access_prbs.min(self.bottleneck_prbs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplacementMode {
    PlainHandover,
    CoordinatedDuplication,
}

/// Periodic downlink arrivals for one UE, used to replay a replacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownlinkTraffic {
    pub ue: UeId,
    pub first_arrival: SimTime,
    pub period_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub start: SimTime,
    /// Per-UE handover interruption for plain handover.
    pub gap_us: u64,
    /// Spacing between successive UE handovers.
    pub spacing_us: u64,
    /// Traffic is replayed until this time.
    pub end: SimTime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub sdus_lost: u64,
    pub sdus_delivered: u64,
    /// Largest per-UE service interruption.
    pub interruption_us: u64,
    pub handovers: u32,
    pub duplicated_sdus: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IabConfig {
    pub f1_setup_delay_us: u64,
}

impl Default for IabConfig {
    fn default() -> Self {
        IabConfig {
            f1_setup_delay_us: 50_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IabTopology {
    config: IabConfig,
    nodes: BTreeMap<NodeId, IabNode>,
    links: BTreeMap<NodeId, BackhaulLink>,
}

impl IabTopology {
    pub fn new(config: IabConfig) -> Self {
        IabTopology {
            config,
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &IabConfig {
        &self.config
    }

    pub fn add_node(&mut self, node: IabNode) -> Result<(), IabError> {
        if self.nodes.contains_key(&node.node_id) {
            return Err(IabError::Topology {
                node: node.node_id,
                reason: "duplicate node id".into(),
            });
        }
        node.check()?;
        self.nodes.insert(node.node_id, node);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&IabNode, IabError> {
        self.nodes.get(&id).ok_or(IabError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut IabNode, IabError> {
        self.nodes.get_mut(&id).ok_or(IabError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &IabNode> {
        self.nodes.values()
    }

    pub fn link(&self, child: NodeId) -> Option<&BackhaulLink> {
        self.links.get(&child)
    }

    /// Walks up from `id`; true if `ancestor` is on the path.
    fn has_ancestor(&self, id: NodeId, ancestor: NodeId) -> bool {
        let mut cur = Some(id);
        let mut steps = 0;
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            steps += 1;
            if steps > self.nodes.len() {
                return false;
            }
            cur = self.links.get(&c).map(|l| l.parent);
        }
        false
    }

    /// Brings up the MT's RRC connection over `parent` and, unless
    /// `defer_f1`, F1 right after. `rrc` is the MT's random-access outcome.
    #[allow(clippy::too_many_arguments)]
    pub fn integrate(
        &mut self,
        node: NodeId,
        parent: NodeId,
        capacity_prbs: u32,
        per_hop_latency_us: u64,
        defer_f1: bool,
        rrc: &CbraOutcome,
        now: SimTime,
    ) -> Result<Vec<Transition>, IabError> {
        let n = self.node(node)?;
        if n.role != IabRole::Child {
            return Err(illegal(node, "only child nodes integrate"));
        }
        if n.mt_state != MtState::Idle {
            return Err(illegal(node, "MT is not idle"));
        }
        let p = self.node(parent)?;
        if !(p.role == IabRole::Donor || p.du_state == DuState::Serving) {
            return Err(illegal(parent, "parent DU is not serving"));
        }
        if self.has_ancestor(parent, node) {
            return Err(IabError::Topology {
                node,
                reason: format!("attaching to {parent} would create a cycle"),
            });
        }
        if !rrc.success {
            return Err(IabError::RrcFailure(node));
        }
        let t_rrc = now + rrc.latency_us;
        self.links.insert(
            node,
            BackhaulLink {
                child: node,
                parent,
                capacity_prbs,
                per_hop_latency_us,
            },
        );
        let n = self.node_mut(node)?;
        n.parent = Some(parent);
        n.mt_state = MtState::RrcConnected;
        let mut trace = vec![
            Transition {
                at: now,
                node,
                phase: Phase::Idle,
            },
            Transition {
                at: t_rrc,
                node,
                phase: Phase::RrcConnected,
            },
        ];
        if !defer_f1 {
            trace.extend(self.setup_f1(node, t_rrc)?);
        }
        Ok(trace)
    }

    /// Resumes a held integration once the drone is in place.
    pub fn complete_f1(&mut self, node: NodeId, now: SimTime) -> Result<Vec<Transition>, IabError> {
        let n = self.node(node)?;
        if n.mt_state != MtState::RrcConnected {
            return Err(illegal(node, "MT not RRC connected"));
        }
        if n.du_state != DuState::Inactive {
            return Err(illegal(node, "DU already set up"));
        }
        self.setup_f1(node, now)
    }

    fn setup_f1(&mut self, node: NodeId, at: SimTime) -> Result<Vec<Transition>, IabError> {
        let delay = self.config.f1_setup_delay_us;
        let n = self.node_mut(node)?;
        n.f1_established = true;
        n.du_state = DuState::Serving;
        n.serving_since = Some(at + delay);
        Ok(vec![
            Transition {
                at,
                node,
                phase: Phase::F1Setup,
            },
            Transition {
                at: at + delay,
                node,
                phase: Phase::Serving,
            },
        ])
    }

    /// Drops the MT connection (and therefore the DU) of a child.
    pub fn disconnect_mt(
        &mut self,
        node: NodeId,
        now: SimTime,
    ) -> Result<Vec<Transition>, IabError> {
        self.links.remove(&node);
        let n = self.node_mut(node)?;
        if n.role == IabRole::Donor {
            return Err(illegal(node, "donors have no MT"));
        }
        n.mt_state = MtState::Idle;
        n.du_state = DuState::Inactive;
        n.f1_established = false;
        n.parent = None;
        n.serving_since = None;
        Ok(vec![Transition {
            at: now,
            node,
            phase: Phase::Inactive,
        }])
    }

    /// Battery ran flat: the node drops out and its subtree is detached.
    pub fn deplete(&mut self, node: NodeId, now: SimTime) -> Result<Vec<Transition>, IabError> {
        let mut trace = Vec::new();
        let children: Vec<NodeId> = self
            .links
            .values()
            .filter(|l| l.parent == node)
            .map(|l| l.child)
            .collect();
        for c in children {
            trace.extend(self.deplete_subtree(c, now)?);
        }
        {
            let n = self.node_mut(node)?;
            n.battery_j = Some(0.0);
        }
        trace.extend(self.disconnect_mt(node, now)?);
        Ok(trace)
    }

    fn deplete_subtree(&mut self, node: NodeId, now: SimTime) -> Result<Vec<Transition>, IabError> {
        let children: Vec<NodeId> = self
            .links
            .values()
            .filter(|l| l.parent == node)
            .map(|l| l.child)
            .collect();
        let mut trace = Vec::new();
        for c in children {
            trace.extend(self.deplete_subtree(c, now)?);
        }
        trace.extend(self.disconnect_mt(node, now)?);
        Ok(trace)
    }

    pub fn path_metrics(&self, node: NodeId) -> Result<PathMetrics, IabError> {
        let n = self.node(node)?;
        if n.role == IabRole::Donor {
            return Ok(PathMetrics {
                hops: 0,
                latency_us: 0,
                bottleneck_prbs: u32::MAX,
            });
        }
        if n.parent.is_none() {
            return Err(IabError::Topology {
                node,
                reason: "orphaned node has no path to a donor".into(),
            });
        }
        if n.du_state != DuState::Serving {
            return Err(illegal(node, "path metrics need a serving DU"));
        }
        let mut m = PathMetrics {
            hops: 0,
            latency_us: 0,
            bottleneck_prbs: u32::MAX,
        };
        let mut cur = node;
        loop {
            let cur_node = self.node(cur)?;
            if cur_node.role == IabRole::Donor {
                return Ok(m);
            }
            let link = self.links.get(&cur).ok_or_else(|| IabError::Topology {
                node: cur,
                reason: "orphaned node has no path to a donor".into(),
            })?;
            m.hops += 1;
            m.latency_us += link.per_hop_latency_us;
            m.bottleneck_prbs = m.bottleneck_prbs.min(link.capacity_prbs);
            if m.hops as usize > self.nodes.len() {
                return Err(IabError::Topology {
                    node,
                    reason: "cycle in backhaul graph".into(),
                });
            }
            cur = link.parent;
        }
    }

    /// Every linked node reaches a donor without cycles, links agree with
    /// the nodes' parent fields and every node satisfies its state rules.
    pub fn check_forest(&self) -> Result<(), IabError> {
        for n in self.nodes.values() {
            n.check()?;
            match (n.parent, self.links.get(&n.node_id)) {
                (None, None) => {
                    if n.role == IabRole::Child && n.du_state == DuState::Serving {
                        return Err(IabError::Topology {
                            node: n.node_id,
                            reason: "serving child without a parent".into(),
                        });
                    }
                }
                (Some(p), Some(l)) if l.parent == p => {
                    let mut cur = p;
                    let mut steps = 0;
                    loop {
                        let c = self.node(cur)?;
                        if c.role == IabRole::Donor {
                            break;
                        }
                        steps += 1;
                        let next = self.links.get(&cur).map(|l| l.parent);
                        match next {
                            Some(nx) if steps <= self.nodes.len() => cur = nx,
                            _ => {
                                return Err(IabError::Topology {
                                    node: n.node_id,
                                    reason: "not rooted at a donor".into(),
                                })
                            }
                        }
                    }
                }
                _ => {
                    return Err(IabError::Topology {
                        node: n.node_id,
                        reason: "parent field and backhaul link disagree".into(),
                    })
                }
            }
        }
        Ok(())
    }

    /// Moves the UEs of `s_iab` to `r_iab` and withdraws `s_iab`.
    ///
    /// The downlink of each UE is replayed through the procedure: with plain
    /// handover every UE spends `gap_us` attached to neither node and loses
    /// whatever arrives meanwhile; with coordinated duplication the common
    /// parent feeds both nodes so the switch is instantaneous.
    pub fn replace(
        &mut self,
        s_iab: NodeId,
        r_iab: NodeId,
        mode: ReplacementMode,
        traffic: &[DownlinkTraffic],
        plan: &ReplacementPlan,
    ) -> Result<ReplacementReport, IabError> {
        let s = self.node(s_iab)?;
        let r = self.node(r_iab)?;
        if s.role != IabRole::Child || r.role != IabRole::Child {
            return Err(IabError::Unsupported(
                "only child nodes can be replaced".into(),
            ));
        }
        if s.parent.is_none() || s.parent != r.parent {
            return Err(IabError::Unsupported(format!(
                "{s_iab} and {r_iab} do not share a parent"
            )));
        }
        if r.du_state != DuState::Serving {
            return Err(illegal(r_iab, "replacement node is not serving"));
        }
        if s.du_state != DuState::Serving {
            return Err(illegal(s_iab, "node to replace is not serving"));
        }

        let report = replay_replacement(mode, traffic, plan);
        let end = plan.start + plan.spacing_us * traffic.len() as u64;
        self.disconnect_mt(s_iab, end)?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Attach {
    Source,
    Detached,
    Target,
}

#[derive(Debug, Clone, Copy)]
enum ReplayEvent {
    HandoverStart(usize),
    HandoverDone(usize),
    Arrival(usize),
}

fn replay_replacement(
    mode: ReplacementMode,
    traffic: &[DownlinkTraffic],
    plan: &ReplacementPlan,
) -> ReplacementReport {
    let mut report = ReplacementReport::default();
    let mut engine: Engine<ReplayEvent> = Engine::new();
    let mut attach = vec![Attach::Source; traffic.len()];
    let gap = match mode {
        ReplacementMode::PlainHandover => plan.gap_us,
        ReplacementMode::CoordinatedDuplication => 0,
    };
    // Handover events go in first so that at equal times they precede
    // arrivals: an SDU arriving exactly when the gap opens is lost, one
    // arriving exactly when it closes is delivered.
    for i in 0..traffic.len() {
        let t = plan.start + plan.spacing_us * i as u64;
        engine
            .schedule(t, ReplayEvent::HandoverStart(i))
            .expect("future");
        engine
            .schedule(t + gap, ReplayEvent::HandoverDone(i))
            .expect("future");
    }
    for (i, tr) in traffic.iter().enumerate() {
        if tr.first_arrival <= plan.end {
            engine
                .schedule(tr.first_arrival, ReplayEvent::Arrival(i))
                .expect("future");
        }
    }
    let mut gap_start = vec![SimTime::ZERO; traffic.len()];
    engine.run_until(plan.end, |eng, ev| match ev.action {
        ReplayEvent::HandoverStart(i) => {
            gap_start[i] = ev.fire_time;
            attach[i] = match mode {
                ReplacementMode::PlainHandover => Attach::Detached,
                ReplacementMode::CoordinatedDuplication => Attach::Target,
            };
        }
        ReplayEvent::HandoverDone(i) => {
            attach[i] = Attach::Target;
            report.handovers += 1;
            report.interruption_us = report
                .interruption_us
                .max(ev.fire_time.saturating_sub(gap_start[i]));
        }
        ReplayEvent::Arrival(i) => {
            match attach[i] {
                Attach::Detached => report.sdus_lost += 1,
                Attach::Source | Attach::Target => report.sdus_delivered += 1,
            }
            if mode == ReplacementMode::CoordinatedDuplication {
                report.duplicated_sdus += 1;
            }
            let tr = &traffic[i];
            if tr.period_us > 0 {
                let next = ev.fire_time + tr.period_us;
                if next <= plan.end {
                    eng.schedule(next, ReplayEvent::Arrival(i)).expect("future");
                }
            }
        }
    });
    report
}
