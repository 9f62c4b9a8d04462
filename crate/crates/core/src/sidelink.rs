//! UE-autonomous sidelink: sensing-based resource selection, priority
//! pre-emption and NACK-only groupcast HARQ.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RngStream;
use crate::ue::UeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SidelinkError {
    #[error("no candidate resources to select from")]
    EmptyCandidates,
    #[error("groupcast needs at least one member")]
    EmptyGroup,
    #[error("priority must be at least 1")]
    InvalidPriority,
    #[error("resource {0:?} is outside the pool")]
    OutOfPool(Resource),
}

/// One (slot, subchannel) cell of the selection window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Resource {
    pub slot: u32,
    pub subchannel: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub resource: Resource,
    pub owner: UeId,
    /// Lower is more critical.
    pub priority: u8,
    pub measured_rsrp_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SidelinkConfig {
    pub rsrp_threshold_dbm: f64,
    pub threshold_step_db: f64,
    pub min_candidate_fraction: f64,
    pub max_harq: u32,
}

impl Default for SidelinkConfig {
    fn default() -> Self {
        SidelinkConfig {
            rsrp_threshold_dbm: -110.0,
            threshold_step_db: 3.0,
            min_candidate_fraction: 0.2,
            max_harq: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourcePool {
    pub slots_per_window: u32,
    pub subchannels: u32,
    reservations: BTreeMap<Resource, Reservation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreemptDecision {
    Kept,
    Preempted,
}

/// Result of placing a reservation into the pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Placement {
    Placed,
    /// The incumbent lost and must re-select.
    Displaced(Reservation),
    /// The incumbent held; the newcomer must re-select.
    Refused,
}

pub fn preempt(existing: &Reservation, challenger_priority: u8) -> PreemptDecision {
    if challenger_priority < existing.priority {
        PreemptDecision::Preempted
    } else {
        PreemptDecision::Kept
    }
}

impl ResourcePool {
    pub fn new(slots_per_window: u32, subchannels: u32) -> Self {
        ResourcePool {
            slots_per_window,
            subchannels,
            reservations: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.slots_per_window as usize * self.subchannels as usize
    }

    pub fn contains(&self, r: Resource) -> bool {
        r.slot < self.slots_per_window && r.subchannel < self.subchannels
    }

    pub fn resources(&self) -> impl Iterator<Item = Resource> + '_ {
        (0..self.slots_per_window).flat_map(move |slot| {
            (0..self.subchannels).map(move |subchannel| Resource { slot, subchannel })
        })
    }

    pub fn reservation(&self, r: Resource) -> Option<&Reservation> {
        self.reservations.get(&r)
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    pub fn release_owner(&mut self, owner: UeId) {
        self.reservations.retain(|_, r| r.owner != owner);
    }

    pub fn clear(&mut self) {
        self.reservations.clear();
    }

    /// Places `res`, resolving a clash with the incumbent by priority.
    pub fn place(&mut self, res: Reservation) -> Result<Placement, SidelinkError> {
        if res.priority == 0 {
            return Err(SidelinkError::InvalidPriority);
        }
        if !self.contains(res.resource) {
            return Err(SidelinkError::OutOfPool(res.resource));
        }
        match self.reservations.get(&res.resource) {
            None => {
                self.reservations.insert(res.resource, res);
                Ok(Placement::Placed)
            }
            Some(old) => match preempt(old, res.priority) {
                PreemptDecision::Kept => Ok(Placement::Refused),
                PreemptDecision::Preempted => {
                    let old = *old;
                    self.reservations.insert(res.resource, res);
                    Ok(Placement::Displaced(old))
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub resources: Vec<Resource>,
    pub final_threshold_dbm: f64,
}

/// Pool resources not covered by a sensed reservation at or above the
/// threshold; the threshold steps up until enough of the pool is free.
pub fn candidate_resources(
    pool: &ResourcePool,
    sensed: &[Reservation],
    cfg: &SidelinkConfig,
) -> CandidateSet {
    let needed = (cfg.min_candidate_fraction * pool.size() as f64).ceil() as usize;
    let mut threshold = cfg.rsrp_threshold_dbm;
    loop {
        let blocked: BTreeSet<Resource> = sensed
            .iter()
            .filter(|r| r.measured_rsrp_dbm >= threshold)
            .map(|r| r.resource)
            .collect();
        let resources: Vec<Resource> = pool.resources().filter(|r| !blocked.contains(r)).collect();
        if resources.len() >= needed || blocked.is_empty() {
            return CandidateSet {
                resources,
                final_threshold_dbm: threshold,
            };
        }
        threshold += cfg.threshold_step_db;
    }
}

/// Uniform choice over `candidates` with `draw` in [0, 1).
pub fn select_and_reserve(
    owner: UeId,
    candidates: &CandidateSet,
    priority: u8,
    measured_rsrp_dbm: f64,
    draw: f64,
) -> Result<Reservation, SidelinkError> {
    if candidates.resources.is_empty() {
        return Err(SidelinkError::EmptyCandidates);
    }
    if priority == 0 {
        return Err(SidelinkError::InvalidPriority);
    }
    let n = candidates.resources.len();
    let idx = ((draw * n as f64) as usize).min(n - 1);
    Ok(Reservation {
        resource: candidates.resources[idx],
        owner,
        priority,
        measured_rsrp_dbm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupcastReport {
    pub delivered: BTreeSet<UeId>,
    pub undelivered: BTreeSet<UeId>,
    pub retransmissions: u32,
    /// Transmission round (0 = initial) in which each member decoded.
    pub decoded_in_round: BTreeMap<UeId, u32>,
}

/// One groupcast packet with NACK-only feedback. `members` pairs each UE
/// with its link PER. Every member draws in every round, decoded or not,
/// so a larger `max_harq` replays the same draws plus more.
pub fn groupcast_round(
    members: &[(UeId, f64)],
    max_harq: u32,
    rng: &mut RngStream,
) -> Result<GroupcastReport, SidelinkError> {
    if members.is_empty() {
        return Err(SidelinkError::EmptyGroup);
    }
    let mut report = GroupcastReport {
        delivered: BTreeSet::new(),
        undelivered: BTreeSet::new(),
        retransmissions: 0,
        decoded_in_round: BTreeMap::new(),
    };
    let mut round = 0;
    loop {
        for &(ue, per) in members {
            let lost = rng.uniform() < per;
            if !lost && report.delivered.insert(ue) {
                report.decoded_in_round.insert(ue, round);
            }
        }
        let nack = report.delivered.len() < members.len();
        if !nack || round >= max_harq {
            break;
        }
        round += 1;
        report.retransmissions += 1;
    }
    report.undelivered = members
        .iter()
        .map(|m| m.0)
        .filter(|u| !report.delivered.contains(u))
        .collect();
    Ok(report)
}
