//! Multicast/broadcast group delivery.
//!
//! Each session is carried per cell on a multicast radio bearer with a PTM
//! leg (one transmission at the worst member's MCS) and PTP legs (one per
//! UE at its own MCS). The RAN picks the cheaper leg with hysteresis, picks
//! PTM or PTP for HARQ retransmissions by NACK count, and keeps mobility
//! lossless by retransmitting PDCP SDUs missed during a handover.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::CellId;
use crate::qos::QosProfile;
use crate::radio::{Mcs, RadioConfig, RadioError};
use crate::sim::RngStream;
use crate::ue::UeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u32);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mbs{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MulticastError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown cell {0}")]
    UnknownCell(CellId),
    #[error("{0} is not a member of the session")]
    NotMember(UeId),
    #[error("{ue} already joined the session in {cell}")]
    AlreadyMember { ue: UeId, cell: CellId },
    #[error("group has no members")]
    EmptyGroup,
    #[error("no CSI for {0}")]
    MissingCsi(UeId),
    #[error("{0} is not in a handover")]
    NotInHandover(UeId),
    #[error(transparent)]
    Radio(#[from] RadioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Leg {
    Ptm,
    Ptp,
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Leg::Ptm => "ptm",
            Leg::Ptp => "ptp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MbsConfig {
    pub hysteresis_pct: f64,
    /// NACK count at or above which a retransmission goes out on PTM.
    pub nack_threshold_k: usize,
    pub max_harq: u32,
    /// Retransmit SDUs missed during handover from the PDCP status.
    pub pdcp_retransmission: bool,
    /// Cap on PTP attempts per retransmitted SDU.
    pub max_pdcp_attempts: u32,
    /// Semi-static single-mode delivery, for comparison.
    pub fixed_mode: Option<Leg>,
}

impl Default for MbsConfig {
    fn default() -> Self {
        MbsConfig {
            hysteresis_pct: 20.0,
            nack_threshold_k: 2,
            max_harq: 3,
            pdcp_retransmission: true,
            max_pdcp_attempts: 64,
            fixed_mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbsSession {
    pub session_id: SessionId,
    pub profile: QosProfile,
    pub rate_kbps: f64,
    /// The application server delivers this session over IP unicast and
    /// bypasses the multicast bearer.
    pub as_ip_unicast: bool,
    members: BTreeMap<CellId, BTreeSet<UeId>>,
    next_sn: u64,
}

impl MbsSession {
    pub fn new(session_id: SessionId, profile: QosProfile, rate_kbps: f64) -> Self {
        MbsSession {
            session_id,
            profile,
            rate_kbps,
            as_ip_unicast: false,
            members: BTreeMap::new(),
            next_sn: 0,
        }
    }

    pub fn cell_of(&self, ue: UeId) -> Option<CellId> {
        self.members
            .iter()
            .find(|(_, m)| m.contains(&ue))
            .map(|(c, _)| *c)
    }

    pub fn members_in(&self, cell: CellId) -> impl Iterator<Item = UeId> + '_ {
        self.members.get(&cell).into_iter().flatten().copied()
    }

    pub fn active_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.members.keys().copied()
    }

    pub fn member_count(&self) -> usize {
        self.members.values().map(BTreeSet::len).sum()
    }

    fn join(&mut self, ue: UeId, cell: CellId) -> Result<(), MulticastError> {
        if let Some(c) = self.cell_of(ue) {
            return Err(MulticastError::AlreadyMember { ue, cell: c });
        }
        self.members.entry(cell).or_default().insert(ue);
        Ok(())
    }

    fn leave(&mut self, ue: UeId) -> Option<CellId> {
        let cell = self.cell_of(ue)?;
        let set = self.members.get_mut(&cell).expect("cell_of found it");
        set.remove(&ue);
        if set.is_empty() {
            self.members.remove(&cell);
        }
        Some(cell)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegCosts {
    pub ptm_prbs: u32,
    pub ptp_prbs: u32,
    pub ptm_mcs: Mcs,
    pub ue_mcs: BTreeMap<UeId, Mcs>,
}

/// PRBs per slot needed to carry `rate_kbps` on either leg. The MCS of each
/// UE is the highest meeting the profile's packet error rate at its SNR.
pub fn leg_costs(
    radio: &RadioConfig,
    profile: &QosProfile,
    rate_kbps: f64,
    csi: &BTreeMap<UeId, f64>,
) -> Result<LegCosts, MulticastError> {
    if csi.is_empty() {
        return Err(MulticastError::EmptyGroup);
    }
    let target = profile.packet_error_rate;
    let ue_mcs: BTreeMap<UeId, Mcs> = csi
        .iter()
        .map(|(&u, &snr)| (u, radio.mcs_for_snr(snr, target)))
        .collect();
    let ptm_mcs = *ue_mcs.values().min().expect("non-empty");
    let ptm_prbs = radio.required_prbs(rate_kbps, ptm_mcs)?;
    let mut ptp_prbs = 0;
    for &m in ue_mcs.values() {
        ptp_prbs += radio.required_prbs(rate_kbps, m)?;
    }
    Ok(LegCosts {
        ptm_prbs,
        ptp_prbs,
        ptm_mcs,
        ue_mcs,
    })
}

/// Switches only when the other leg is cheaper by more than
/// `hysteresis_pct` of the current leg's cost.
pub fn decide_delivery(costs: &LegCosts, members: usize, current: Leg, hysteresis_pct: f64) -> Leg {
    if members <= 1 {
        return Leg::Ptp;
    }
    let (cur, other, other_leg) = match current {
        Leg::Ptm => (costs.ptm_prbs, costs.ptp_prbs, Leg::Ptp),
        Leg::Ptp => (costs.ptp_prbs, costs.ptm_prbs, Leg::Ptm),
    };
    let cur = f64::from(cur);
    if f64::from(other) < cur * (1.0 - hysteresis_pct / 100.0) {
        other_leg
    } else {
        current
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mrb {
    pub session_id: SessionId,
    pub cell_id: CellId,
    pub mode: Leg,
    pub ptm_mcs: Mcs,
    pub legs: BTreeMap<UeId, Leg>,
    pub mode_switches: u32,
    /// No multicast support in this cell: members are served by unicast.
    pub unicast_fallback: bool,
}

/// Per-UE PDCP receive state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PdcpStatus {
    pub delivered: BTreeSet<u64>,
    pub lost: BTreeSet<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliveryReport {
    pub sn: u64,
    pub delivered: BTreeSet<UeId>,
    pub failed: BTreeSet<UeId>,
    pub prbs: u64,
    pub ptm_retransmissions: u32,
    pub ptp_retransmissions: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HandoverReport {
    pub sdus_lost: u64,
    pub sdus_retransmitted: u64,
    pub target_joined_session: bool,
    pub ptp_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retransmission {
    pub leg: Leg,
    pub mcs: Mcs,
    pub prbs: u64,
}

/// PRBs to carry `bits` once at `mcs`.
pub fn packet_prbs(radio: &RadioConfig, bits: f64, mcs: Mcs) -> Result<u64, RadioError> {
    let per = radio.bits_per_prb_slot(mcs)?;
    Ok((bits / per).ceil().max(1.0) as u64)
}

/// Chooses how to retransmit to `nackers` (UE, SNR): one PTM transmission at
/// the worst NACKer's MCS when at least `k` NACKed, otherwise one PTP each.
pub fn plan_retransmission(
    radio: &RadioConfig,
    target_per: f64,
    bits: f64,
    nackers: &[(UeId, f64)],
    k: usize,
) -> Result<Vec<(Retransmission, Vec<UeId>)>, RadioError> {
    if nackers.is_empty() {
        return Ok(Vec::new());
    }
    if nackers.len() >= k {
        let worst = nackers.iter().map(|n| n.1).fold(f64::INFINITY, f64::min);
        let mcs = radio.mcs_for_snr(worst, target_per);
        let r = Retransmission {
            leg: Leg::Ptm,
            mcs,
            prbs: packet_prbs(radio, bits, mcs)?,
        };
        return Ok(vec![(r, nackers.iter().map(|n| n.0).collect())]);
    }
    nackers
        .iter()
        .map(|&(u, snr)| {
            let mcs = radio.mcs_for_snr(snr, target_per);
            Ok((
                Retransmission {
                    leg: Leg::Ptp,
                    mcs,
                    prbs: packet_prbs(radio, bits, mcs)?,
                },
                vec![u],
            ))
        })
        .collect()
}

/// Sessions, their per-cell bearers and the members' PDCP state.
#[derive(Debug, Clone)]
pub struct MulticastDomain {
    pub config: MbsConfig,
    radio: RadioConfig,
    mbs_cells: BTreeSet<CellId>,
    sessions: BTreeMap<SessionId, MbsSession>,
    mrbs: BTreeMap<(SessionId, CellId), Mrb>,
    csi: BTreeMap<UeId, f64>,
    pdcp: BTreeMap<(SessionId, UeId), PdcpStatus>,
    /// UEs between `begin_handover` and `complete_handover`, with the SNs
    /// sent while they were away and the cell they left.
    in_handover: BTreeMap<(SessionId, UeId), (CellId, Vec<u64>)>,
}

impl MulticastDomain {
    pub fn new(config: MbsConfig, radio: RadioConfig) -> Self {
        MulticastDomain {
            config,
            radio,
            mbs_cells: BTreeSet::new(),
            sessions: BTreeMap::new(),
            mrbs: BTreeMap::new(),
            csi: BTreeMap::new(),
            pdcp: BTreeMap::new(),
            in_handover: BTreeMap::new(),
        }
    }

    pub fn add_cell(&mut self, cell: CellId, supports_mbs: bool) {
        if supports_mbs {
            self.mbs_cells.insert(cell);
        } else {
            self.mbs_cells.remove(&cell);
        }
    }

    pub fn add_session(&mut self, session: MbsSession) {
        self.sessions.insert(session.session_id, session);
    }

    pub fn session(&self, id: SessionId) -> Result<&MbsSession, MulticastError> {
        self.sessions
            .get(&id)
            .ok_or(MulticastError::UnknownSession(id))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &MbsSession> {
        self.sessions.values()
    }

    pub fn mrb(&self, session: SessionId, cell: CellId) -> Option<&Mrb> {
        self.mrbs.get(&(session, cell))
    }

    pub fn mrbs(&self) -> impl Iterator<Item = &Mrb> {
        self.mrbs.values()
    }

    pub fn pdcp_status(&self, session: SessionId, ue: UeId) -> Option<&PdcpStatus> {
        self.pdcp.get(&(session, ue))
    }

    pub fn set_csi(&mut self, ue: UeId, snr_db: f64) {
        self.csi.insert(ue, snr_db);
    }

    fn snr(&self, ue: UeId) -> Result<f64, MulticastError> {
        self.csi
            .get(&ue)
            .copied()
            .ok_or(MulticastError::MissingCsi(ue))
    }

    fn ensure_mrb(&mut self, session: SessionId, cell: CellId) -> bool {
        if self.mrbs.contains_key(&(session, cell)) {
            return false;
        }
        let unicast = !self.mbs_cells.contains(&cell) || self.sessions[&session].as_ip_unicast;
        self.mrbs.insert(
            (session, cell),
            Mrb {
                session_id: session,
                cell_id: cell,
                mode: Leg::Ptp,
                ptm_mcs: 0,
                legs: BTreeMap::new(),
                mode_switches: 0,
                unicast_fallback: unicast,
            },
        );
        true
    }

    pub fn join(
        &mut self,
        session: SessionId,
        ue: UeId,
        cell: CellId,
    ) -> Result<(), MulticastError> {
        let s = self
            .sessions
            .get_mut(&session)
            .ok_or(MulticastError::UnknownSession(session))?;
        s.join(ue, cell)?;
        self.pdcp.entry((session, ue)).or_default();
        self.ensure_mrb(session, cell);
        self.mrbs
            .get_mut(&(session, cell))
            .expect("ensured")
            .legs
            .insert(ue, Leg::Ptp);
        Ok(())
    }

    /// Re-evaluates the delivery mode of one bearer from current CSI.
    pub fn adapt(&mut self, session: SessionId, cell: CellId) -> Result<Leg, MulticastError> {
        let s = self.session(session)?;
        let csi: BTreeMap<UeId, f64> = s
            .members_in(cell)
            .filter(|u| !self.in_handover.contains_key(&(session, *u)))
            .map(|u| Ok((u, self.snr(u)?)))
            .collect::<Result<_, MulticastError>>()?;
        let (profile, rate) = (s.profile.clone(), s.rate_kbps);
        let cfg = self.config;
        let mrb = self
            .mrbs
            .get_mut(&(session, cell))
            .ok_or(MulticastError::UnknownCell(cell))?;
        if csi.is_empty() {
            return Ok(mrb.mode);
        }
        let costs = leg_costs(&self.radio, &profile, rate, &csi)?;
        let next = if mrb.unicast_fallback {
            Leg::Ptp
        } else if let Some(fixed) = cfg.fixed_mode {
            fixed
        } else {
            decide_delivery(&costs, csi.len(), mrb.mode, cfg.hysteresis_pct)
        };
        if next != mrb.mode {
            mrb.mode_switches += 1;
            mrb.mode = next;
        }
        mrb.ptm_mcs = costs.ptm_mcs;
        for (u, leg) in mrb.legs.iter_mut() {
            if csi.contains_key(u) {
                *leg = next;
            }
        }
        Ok(next)
    }

    /// Sends the session's next SDU in `cell` and runs HARQ for it.
    pub fn transmit(
        &mut self,
        session: SessionId,
        cell: CellId,
        bits: f64,
        rng: &mut RngStream,
    ) -> Result<DeliveryReport, MulticastError> {
        let s = self
            .sessions
            .get_mut(&session)
            .ok_or(MulticastError::UnknownSession(session))?;
        let sn = s.next_sn;
        s.next_sn += 1;
        let target = s.profile.packet_error_rate;
        let members: Vec<UeId> = s.members_in(cell).collect();
        // Members away in a handover miss the SDU for now.
        for (&(sid, _), (from, missed)) in self.in_handover.iter_mut() {
            if sid == session && *from == cell {
                missed.push(sn);
            }
        }
        let present: Vec<(UeId, f64)> = members
            .iter()
            .filter(|u| !self.in_handover.contains_key(&(session, **u)))
            .map(|&u| Ok((u, self.snr(u)?)))
            .collect::<Result<_, MulticastError>>()?;
        let mut report = DeliveryReport {
            sn,
            ..Default::default()
        };
        if present.is_empty() {
            return Ok(report);
        }
        let mrb = self
            .mrbs
            .get(&(session, cell))
            .ok_or(MulticastError::UnknownCell(cell))?
            .clone();

        let mut nack: Vec<(UeId, f64)> = Vec::new();
        let attempt = |snr: f64, mcs: Mcs, rng: &mut RngStream| -> Result<bool, MulticastError> {
            Ok(!self.radio.draw_packet_error(snr, mcs, rng)?)
        };
        if mrb.mode == Leg::Ptm {
            report.prbs += packet_prbs(&self.radio, bits, mrb.ptm_mcs)?;
            for &(u, snr) in &present {
                if attempt(snr, mrb.ptm_mcs, rng)? {
                    report.delivered.insert(u);
                } else {
                    nack.push((u, snr));
                }
            }
        } else {
            for &(u, snr) in &present {
                let mcs = self.radio.mcs_for_snr(snr, target);
                report.prbs += packet_prbs(&self.radio, bits, mcs)?;
                if attempt(snr, mcs, rng)? {
                    report.delivered.insert(u);
                } else {
                    nack.push((u, snr));
                }
            }
        }
        let k = if mrb.unicast_fallback {
            usize::MAX
        } else {
            self.config.nack_threshold_k
        };
        for _ in 0..self.config.max_harq {
            if nack.is_empty() {
                break;
            }
            let plan = plan_retransmission(&self.radio, target, bits, &nack, k)?;
            let snr_of: BTreeMap<UeId, f64> = nack.iter().copied().collect();
            let mut still = Vec::new();
            for (r, ues) in plan {
                report.prbs += r.prbs;
                match r.leg {
                    Leg::Ptm => report.ptm_retransmissions += 1,
                    Leg::Ptp => report.ptp_retransmissions += 1,
                }
                for u in ues {
                    let snr = snr_of[&u];
                    if attempt(snr, r.mcs, rng)? {
                        report.delivered.insert(u);
                    } else {
                        still.push((u, snr));
                    }
                }
            }
            nack = still;
        }
        report.failed = nack.iter().map(|n| n.0).collect();
        for &u in &report.delivered {
            self.pdcp
                .entry((session, u))
                .or_default()
                .delivered
                .insert(sn);
        }
        for &u in &report.failed {
            self.pdcp.entry((session, u)).or_default().lost.insert(sn);
        }
        Ok(report)
    }

    /// The UE detaches from its source cell; SDUs sent meanwhile are noted
    /// against its PDCP status.
    pub fn begin_handover(
        &mut self,
        session: SessionId,
        ue: UeId,
    ) -> Result<CellId, MulticastError> {
        let cell = self
            .session(session)?
            .cell_of(ue)
            .ok_or(MulticastError::NotMember(ue))?;
        self.in_handover.insert((session, ue), (cell, Vec::new()));
        Ok(cell)
    }

    /// The UE arrives in `target` with its PDCP status; the target joins the
    /// session if needed and the SDUs missed in the gap are retransmitted.
    pub fn complete_handover(
        &mut self,
        session: SessionId,
        ue: UeId,
        target: CellId,
        rng: &mut RngStream,
    ) -> Result<HandoverReport, MulticastError> {
        let (source, missed) = self
            .in_handover
            .remove(&(session, ue))
            .ok_or(MulticastError::NotInHandover(ue))?;
        let target_per = self.session(session)?.profile.packet_error_rate;
        let mut report = HandoverReport::default();

        let s = self.sessions.get_mut(&session).expect("checked");
        s.leave(ue);
        let target_had_session =
            s.members.contains_key(&target) || self.mrbs.contains_key(&(session, target));
        s.join(ue, target)?;
        if s.cell_of(ue) != Some(source) {
            if let Some(m) = self.mrbs.get_mut(&(session, source)) {
                m.legs.remove(&ue);
            }
        }
        let created = self.ensure_mrb(session, target);
        let mrb = self.mrbs.get_mut(&(session, target)).expect("ensured");
        mrb.legs.insert(ue, Leg::Ptp);
        report.ptp_fallback = mrb.unicast_fallback;
        report.target_joined_session = created && !target_had_session && !mrb.unicast_fallback;

        let snr = self.snr(ue)?;
        let mcs = self.radio.mcs_for_snr(snr, target_per);
        let max_attempts = self.config.max_pdcp_attempts;
        let status = self.pdcp.entry((session, ue)).or_default();
        for sn in missed {
            if status.delivered.contains(&sn) {
                continue;
            }
            if !self.config.pdcp_retransmission {
                status.lost.insert(sn);
                report.sdus_lost += 1;
                continue;
            }
            report.sdus_retransmitted += 1;
            let mut ok = false;
            for _ in 0..max_attempts {
                if !self.radio.draw_packet_error(snr, mcs, rng)? {
                    ok = true;
                    break;
                }
            }
            if ok {
                status.delivered.insert(sn);
            } else {
                status.lost.insert(sn);
                report.sdus_lost += 1;
            }
        }
        Ok(report)
    }
}
