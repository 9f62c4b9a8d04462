//! Per-cell admission control with ARP pre-emption, and a slot scheduler
//! that serves GBR flows by 5QI priority and tracks RAN delay-budget
//! compliance.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qos::{Arp, QosProfile};
use crate::radio::{Mcs, RadioConfig, RadioError};
use crate::sim::SimTime;
use crate::ue::UeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "flow{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdmissionError {
    #[error("GBR flow {0} must demand at least one PRB")]
    ZeroGbrDemand(FlowId),
    #[error("flow {0} is already admitted")]
    Duplicate(FlowId),
    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),
    #[error(transparent)]
    Radio(#[from] RadioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRequest {
    pub flow_id: FlowId,
    pub ue_id: UeId,
    pub profile: QosProfile,
    pub arp: Arp,
    pub demand_prbs: u32,
    /// Payload one PRB carries per slot at this flow's MCS.
    pub bits_per_prb: f64,
}

impl FlowRequest {
    pub fn new(
        flow_id: FlowId,
        ue_id: UeId,
        profile: QosProfile,
        arp: Arp,
        rate_kbps: f64,
        mcs: Mcs,
        radio: &RadioConfig,
    ) -> Result<Self, AdmissionError> {
        Ok(FlowRequest {
            flow_id,
            ue_id,
            demand_prbs: radio.required_prbs(rate_kbps, mcs)?,
            bits_per_prb: radio.bits_per_prb_slot(mcs)?,
            profile,
            arp,
        })
    }

    /// PRBs this flow reserves against capacity (zero for non-GBR).
    pub fn reserved_prbs(&self) -> u32 {
        if self.profile.is_gbr() {
            self.demand_prbs
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmissionOutcome {
    Admitted,
    Rejected,
    AdmittedWithPreemption(Vec<FlowId>),
}

impl AdmissionOutcome {
    pub fn is_admitted(&self) -> bool {
        !matches!(self, AdmissionOutcome::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Packet {
    sn: u64,
    arrival: SimTime,
    remaining_bits: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub delivered: u64,
    pub pdb_violations: u64,
    pub latencies_us: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmittedFlow {
    pub request: FlowRequest,
    pub admitted_at: SimTime,
    admission_seq: u64,
    queue: VecDeque<Packet>,
    next_sn: u64,
    pub stats: FlowStats,
}

impl AdmittedFlow {
    pub fn backlog_bits(&self) -> f64 {
        self.queue.iter().map(|p| p.remaining_bits).sum()
    }

    pub fn queued_packets(&self) -> usize {
        self.queue.len()
    }

    fn head_deadline(&self) -> u64 {
        self.queue
            .front()
            .map(|p| p.arrival.0 + self.request.profile.ran_delay_budget_us())
            .unwrap_or(u64::MAX)
    }
}

/// A flow removed from the cell by pre-emption.
#[derive(Debug, Clone, PartialEq)]
pub struct EvictedFlow {
    pub flow: AdmittedFlow,
    pub preempted_by: FlowId,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub flow_id: FlowId,
    pub sn: u64,
    pub delay_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub allocations: BTreeMap<FlowId, u32>,
    pub used_prbs: u32,
    pub delivered: Vec<Delivery>,
    /// Packets dropped for exceeding their RAN delay budget.
    pub dropped: Vec<(FlowId, u64)>,
}

#[derive(Debug, Clone)]
pub struct CellState {
    pub cell_id: CellId,
    capacity_prbs: u32,
    /// Extra delay added by the backhaul path (IAB), counted against the budget.
    backhaul_latency_us: u64,
    slot_us: u64,
    flows: BTreeMap<FlowId, AdmittedFlow>,
    admissions: u64,
    evicted: Vec<EvictedFlow>,
}

impl CellState {
    pub fn new(cell_id: CellId, capacity_prbs: u32, slot_us: u64) -> Self {
        CellState {
            cell_id,
            capacity_prbs,
            backhaul_latency_us: 0,
            slot_us,
            flows: BTreeMap::new(),
            admissions: 0,
            evicted: Vec::new(),
        }
    }

    /// Throttles capacity to a backhaul bottleneck and charges path latency.
    pub fn with_backhaul(mut self, bottleneck_prbs: u32, latency_us: u64) -> Self {
        self.capacity_prbs = self.capacity_prbs.min(bottleneck_prbs);
        self.backhaul_latency_us = latency_us;
        self
    }

    pub fn capacity_prbs(&self) -> u32 {
        self.capacity_prbs
    }

    pub fn backhaul_latency_us(&self) -> u64 {
        self.backhaul_latency_us
    }

    pub fn gbr_reserved(&self) -> u32 {
        self.flows.values().map(|f| f.request.reserved_prbs()).sum()
    }

    pub fn headroom(&self) -> u32 {
        self.capacity_prbs.saturating_sub(self.gbr_reserved())
    }

    pub fn flow(&self, id: FlowId) -> Option<&AdmittedFlow> {
        self.flows.get(&id)
    }

    pub fn flows(&self) -> impl Iterator<Item = &AdmittedFlow> {
        self.flows.values()
    }

    pub fn drain_evicted(&mut self) -> Vec<EvictedFlow> {
        std::mem::take(&mut self.evicted)
    }

    pub fn admit(
        &mut self,
        req: FlowRequest,
        now: SimTime,
    ) -> Result<AdmissionOutcome, AdmissionError> {
        if req.profile.is_gbr() && req.demand_prbs == 0 {
            return Err(AdmissionError::ZeroGbrDemand(req.flow_id));
        }
        if self.flows.contains_key(&req.flow_id) {
            return Err(AdmissionError::Duplicate(req.flow_id));
        }
        let need = req.reserved_prbs();
        if need > self.capacity_prbs {
            return Ok(AdmissionOutcome::Rejected);
        }
        if self.headroom() >= need {
            self.insert(req, now);
            return Ok(AdmissionOutcome::Admitted);
        }
        if !req.arp.may_preempt() {
            return Ok(AdmissionOutcome::Rejected);
        }
        let victims = self.select_victims(need - self.headroom(), &req.arp);
        if victims.is_empty() {
            return Ok(AdmissionOutcome::Rejected);
        }
        for v in &victims {
            let flow = self.flows.remove(v).expect("victims are admitted flows");
            self.evicted.push(EvictedFlow {
                flow,
                preempted_by: req.flow_id,
                at: now,
            });
        }
        debug_assert!(self.headroom() >= need);
        self.insert(req, now);
        Ok(AdmissionOutcome::AdmittedWithPreemption(victims))
    }

    fn insert(&mut self, request: FlowRequest, now: SimTime) {
        self.admissions += 1;
        self.flows.insert(
            request.flow_id,
            AdmittedFlow {
                request,
                admitted_at: now,
                admission_seq: self.admissions,
                queue: VecDeque::new(),
                next_sn: 0,
                stats: FlowStats::default(),
            },
        );
    }

    /// Whether `req` could be admitted by pre-empting every flow its ARP
    /// allows it to pre-empt.
    pub fn is_feasible(&self, req: &FlowRequest) -> bool {
        let protected: u32 = self
            .flows
            .values()
            .filter(|f| {
                !(req.arp.may_preempt()
                    && f.request.arp.is_preemptable()
                    && f.request.arp.priority_level() > req.arp.priority_level())
            })
            .map(|f| f.request.reserved_prbs())
            .sum();
        req.reserved_prbs() + protected <= self.capacity_prbs
    }

    /// Pre-emptable flows with a strictly worse ARP level, worst first and
    /// most recently admitted first among equals; the shortest prefix whose
    /// reserved PRBs cover `needed_prbs`. Empty when no such prefix exists.
    pub fn select_victims(&self, needed_prbs: u32, requester: &Arp) -> Vec<FlowId> {
        if !requester.may_preempt() {
            return Vec::new();
        }
        let mut candidates: Vec<&AdmittedFlow> = self
            .flows
            .values()
            .filter(|f| {
                f.request.arp.is_preemptable()
                    && f.request.arp.priority_level() > requester.priority_level()
                    && f.request.reserved_prbs() > 0
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.request
                .arp
                .priority_level()
                .cmp(&a.request.arp.priority_level())
                .then(b.admission_seq.cmp(&a.admission_seq))
        });
        let mut freed = 0u32;
        let mut out = Vec::new();
        for c in candidates {
            if freed >= needed_prbs {
                break;
            }
            freed += c.request.reserved_prbs();
            out.push(c.request.flow_id);
        }
        if freed >= needed_prbs {
            out
        } else {
            Vec::new()
        }
    }

    pub fn release(&mut self, id: FlowId) -> Option<AdmittedFlow> {
        self.flows.remove(&id)
    }

    /// Queues a packet; returns its per-flow sequence number.
    pub fn enqueue(
        &mut self,
        id: FlowId,
        bits: f64,
        arrival: SimTime,
    ) -> Result<u64, AdmissionError> {
        let flow = self
            .flows
            .get_mut(&id)
            .ok_or(AdmissionError::UnknownFlow(id))?;
        let sn = flow.next_sn;
        flow.next_sn += 1;
        flow.queue.push_back(Packet {
            sn,
            arrival,
            remaining_bits: bits,
        });
        Ok(sn)
    }

    /// Serves one slot starting at `slot_start`. Packets that arrived at or
    /// before `slot_start` are eligible; a packet served in this slot counts
    /// as delivered at the slot end plus backhaul latency.
    pub fn schedule_slot(&mut self, slot_start: SimTime) -> SlotReport {
        let mut report = SlotReport::default();
        let done_at = slot_start.0 + self.slot_us + self.backhaul_latency_us;

        for flow in self.flows.values_mut() {
            let budget = flow.request.profile.ran_delay_budget_us();
            while let Some(p) = flow.queue.front() {
                if done_at.saturating_sub(p.arrival.0) > budget {
                    report.dropped.push((flow.request.flow_id, p.sn));
                    flow.stats.pdb_violations += 1;
                    flow.queue.pop_front();
                } else {
                    break;
                }
            }
        }

        let mut remaining = self.capacity_prbs;
        let eligible_bits = |f: &AdmittedFlow| -> f64 {
            f.queue
                .iter()
                .filter(|p| p.arrival <= slot_start)
                .map(|p| p.remaining_bits)
                .sum()
        };
        let needed: BTreeMap<FlowId, u32> = self
            .flows
            .values()
            .map(|f| {
                (
                    f.request.flow_id,
                    (eligible_bits(f) / f.request.bits_per_prb).ceil() as u32,
                )
            })
            .filter(|(_, n)| *n > 0)
            .collect();

        let mut gbr: Vec<&AdmittedFlow> = self
            .flows
            .values()
            .filter(|f| f.request.profile.is_gbr() && needed.contains_key(&f.request.flow_id))
            .collect();
        gbr.sort_by_key(|f| {
            (
                f.request.profile.priority_level,
                f.head_deadline(),
                f.request.flow_id,
            )
        });
        let gbr_order: Vec<FlowId> = gbr.iter().map(|f| f.request.flow_id).collect();

        let mut alloc: BTreeMap<FlowId, u32> = BTreeMap::new();
        // Guaranteed share first, then excess, both in priority order.
        for pass in 0..2 {
            for id in &gbr_order {
                let want = needed[id] - alloc.get(id).copied().unwrap_or(0);
                let cap = if pass == 0 {
                    self.flows[id].request.demand_prbs.min(want)
                } else {
                    want
                };
                let give = cap.min(remaining);
                if give > 0 {
                    *alloc.entry(*id).or_default() += give;
                    remaining -= give;
                }
            }
        }

        let mut non_gbr: Vec<&AdmittedFlow> = self
            .flows
            .values()
            .filter(|f| !f.request.profile.is_gbr() && needed.contains_key(&f.request.flow_id))
            .collect();
        non_gbr.sort_by_key(|f| (f.request.profile.priority_level, f.request.flow_id));
        let non_gbr: Vec<FlowId> = non_gbr.iter().map(|f| f.request.flow_id).collect();
        while remaining > 0 {
            let mut progressed = false;
            for id in &non_gbr {
                if remaining == 0 {
                    break;
                }
                let got = alloc.get(id).copied().unwrap_or(0);
                if got < needed[id] {
                    *alloc.entry(*id).or_default() += 1;
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }

        for (id, prbs) in &alloc {
            let flow = self.flows.get_mut(id).expect("allocated flows exist");
            let mut bits = f64::from(*prbs) * flow.request.bits_per_prb;
            while bits > 0.0 {
                let Some(p) = flow.queue.front_mut() else {
                    break;
                };
                if p.arrival > slot_start {
                    break;
                }
                if p.remaining_bits <= bits + 1e-9 {
                    bits -= p.remaining_bits;
                    let delay = done_at - p.arrival.0;
                    flow.stats.delivered += 1;
                    flow.stats.latencies_us.push(delay);
                    report.delivered.push(Delivery {
                        flow_id: *id,
                        sn: p.sn,
                        delay_us: delay,
                    });
                    flow.queue.pop_front();
                } else {
                    p.remaining_bits -= bits;
                    bits = 0.0;
                }
            }
        }
        report.used_prbs = self.capacity_prbs - remaining;
        report.allocations = alloc;
        report
    }
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty sample.
pub fn percentile(sample: &[u64], pct: f64) -> u64 {
    if sample.is_empty() {
        return 0;
    }
    let mut v = sample.to_vec();
    v.sort_unstable();
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
