//! Initial access: unified access control (UAC) barring and 4-step
//! contention-based random access (CBRA) with class-specific power ramping
//! and backoff.
//!
//! The CBRA model is a per-cell state machine ([`RachCell`]) that is driven
//! from outside by RACH-occasion events. [`run_cbra`] wraps it in a private
//! engine for standalone use.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::RadioConfig;
use crate::sim::{Engine, RngStream, SimTime};
use crate::ue::{UeClass, UeContext, UeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccessError {
    #[error("invalid access configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstablishmentCause {
    McsPriorityAccess,
    MoData,
    MoSignalling,
    MtAccess,
    Emergency,
    HighPriorityAccess,
}

impl EstablishmentCause {
    pub fn is_mission_critical(self) -> bool {
        self == EstablishmentCause::McsPriorityAccess
    }
}

pub fn classify_cause(ue: &UeContext) -> EstablishmentCause {
    match ue.class {
        UeClass::MissionCritical => EstablishmentCause::McsPriorityAccess,
        UeClass::Commercial => EstablishmentCause::MoData,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessAttempt {
    pub ue_id: UeId,
    pub access_category: u8,
    pub access_identities: BTreeSet<u8>,
    pub establishment_cause: EstablishmentCause,
    pub request_time: SimTime,
}

impl AccessAttempt {
    pub fn for_ue(ue: &UeContext, request_time: SimTime) -> Self {
        AccessAttempt {
            ue_id: ue.id,
            access_category: ue.access_category,
            access_identities: ue.access_identities.clone(),
            establishment_cause: classify_cause(ue),
            request_time,
        }
    }

    pub fn class(&self) -> UeClass {
        if self.establishment_cause.is_mission_critical() {
            UeClass::MissionCritical
        } else {
            UeClass::Commercial
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryBarring {
    pub barring_factor: f64,
    pub barring_time_ms: f64,
    #[serde(default)]
    pub exempt_identities: BTreeSet<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UacConfig {
    pub categories: BTreeMap<u8, CategoryBarring>,
}

impl UacConfig {
    pub fn validate(&self) -> Result<(), AccessError> {
        for (cat, b) in &self.categories {
            if !(0.0..=1.0).contains(&b.barring_factor) {
                return Err(AccessError::InvalidConfig(format!(
                    "category {cat}: barring_factor {} outside [0, 1]",
                    b.barring_factor
                )));
            }
            if !(b.barring_time_ms >= 0.0) {
                return Err(AccessError::InvalidConfig(format!(
                    "category {cat}: barring_time_ms must be non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Lowest pass probability, then longest barring time.
    fn most_restrictive(&self) -> Option<&CategoryBarring> {
        self.categories.values().min_by(|a, b| {
            a.barring_factor
                .total_cmp(&b.barring_factor)
                .then(b.barring_time_ms.total_cmp(&a.barring_time_ms))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UacDecision {
    Allowed,
    Barred { duration_ms: f64 },
}

impl UacDecision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, UacDecision::Allowed)
    }
}

/// Evaluates broadcast barring for one attempt.
///
/// `draw` decides pass/fail; `timer_draw` places the barring timer in
/// `[0.7, 1.3) * barring_time`. Both are uniform in `[0, 1)`.
pub fn uac_check(
    attempt: &AccessAttempt,
    config: &UacConfig,
    draw: f64,
    timer_draw: f64,
) -> UacDecision {
    let barring = match config.categories.get(&attempt.access_category) {
        Some(b) => b,
        None => match config.most_restrictive() {
            Some(b) => {
                log::warn!(
                    "access category {} not configured, applying most restrictive barring",
                    attempt.access_category
                );
                b
            }
            // No barring information broadcast at all.
            None => return UacDecision::Allowed,
        },
    };
    if attempt
        .access_identities
        .iter()
        .any(|id| barring.exempt_identities.contains(id))
    {
        return UacDecision::Allowed;
    }
    if draw < barring.barring_factor {
        UacDecision::Allowed
    } else {
        UacDecision::Barred {
            duration_ms: (0.7 + 0.6 * timer_draw) * barring.barring_time_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRachParams {
    pub power_ramp_step_db: f64,
    pub backoff_max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbraParams {
    pub preamble_pool_size: u32,
    pub initial_tx_power_dbm: f64,
    pub max_attempts: u32,
    pub rach_period_ms: f64,
    /// Preamble transmission to Msg4 reception on success.
    pub procedure_latency_ms: f64,
    /// Preamble transmission to the point a UE learns it lost contention.
    pub contention_resolution_ms: f64,
    /// Draw Msg1 detection failures from the link curve at the lowest MCS.
    pub msg1_detection: bool,
    pub mc: ClassRachParams,
    pub commercial: ClassRachParams,
}

impl Default for CbraParams {
    fn default() -> Self {
        CbraParams {
            preamble_pool_size: 64,
            initial_tx_power_dbm: -10.0,
            max_attempts: 10,
            rach_period_ms: 10.0,
            procedure_latency_ms: 8.0,
            contention_resolution_ms: 8.0,
            msg1_detection: false,
            mc: ClassRachParams {
                power_ramp_step_db: 4.0,
                backoff_max_ms: 20.0,
            },
            commercial: ClassRachParams {
                power_ramp_step_db: 2.0,
                backoff_max_ms: 80.0,
            },
        }
    }
}

impl CbraParams {
    pub fn validate(&self) -> Result<(), AccessError> {
        let bad = |m: &str| Err(AccessError::InvalidConfig(m.to_owned()));
        if self.preamble_pool_size == 0 {
            return bad("preamble_pool_size must be positive");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        if !(self.rach_period_ms > 0.0) {
            return bad("rach_period_ms must be positive");
        }
        if self.mc.power_ramp_step_db < self.commercial.power_ramp_step_db {
            return bad("MC power ramp step must be at least the commercial step");
        }
        if self.mc.backoff_max_ms > self.commercial.backoff_max_ms {
            return bad("MC backoff_max must not exceed the commercial backoff_max");
        }
        if self.mc.backoff_max_ms < 0.0 || self.mc.power_ramp_step_db < 0.0 {
            return bad("ramp steps and backoffs must be non-negative");
        }
        Ok(())
    }

    pub fn class_params(&self, class: UeClass) -> &ClassRachParams {
        match class {
            UeClass::MissionCritical => &self.mc,
            UeClass::Commercial => &self.commercial,
        }
    }

    fn period_us(&self) -> u64 {
        (self.rach_period_ms * 1_000.0).round().max(1.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbraOutcome {
    pub ue_id: UeId,
    pub class: UeClass,
    pub success: bool,
    pub attempts: u32,
    pub latency_us: u64,
    pub final_power_dbm: f64,
    /// Transmit power of every preamble sent, in order.
    pub power_trace: Vec<f64>,
    /// Backoff drawn after each failed try.
    pub backoffs_us: Vec<u64>,
    pub completed_at: SimTime,
}

#[derive(Debug, Clone)]
pub struct RachContender {
    pub attempt: AccessAttempt,
    /// Uplink pathloss towards the cell; only used with Msg1 detection on.
    pub pathloss_db: f64,
}

#[derive(Debug, Clone)]
struct TryState {
    contender: RachContender,
    class: UeClass,
    tries: u32,
    power_dbm: f64,
    power_trace: Vec<f64>,
    backoffs_us: Vec<u64>,
}

/// Result of resolving one RACH occasion.
#[derive(Debug, Default)]
pub struct OccasionReport {
    pub finished: Vec<CbraOutcome>,
    /// Occasions that newly need an event after retries were queued.
    pub new_occasions: Vec<SimTime>,
    pub collisions: u32,
}

/// Per-cell CBRA state machine.
#[derive(Debug, Clone)]
pub struct RachCell {
    params: CbraParams,
    radio: RadioConfig,
    waiting: BTreeMap<u64, Vec<TryState>>,
}

impl RachCell {
    pub fn new(params: CbraParams, radio: RadioConfig) -> Self {
        RachCell {
            params,
            radio,
            waiting: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &CbraParams {
        &self.params
    }

    pub fn occasion_time(&self, index: u64) -> SimTime {
        SimTime(index * self.params.period_us())
    }

    /// First occasion at or after `t`.
    fn occasion_index(&self, t: SimTime) -> u64 {
        t.0.div_ceil(self.params.period_us())
    }

    /// Queues a fresh attempt. Returns the occasion time when that occasion
    /// had nothing queued yet and therefore needs an event.
    pub fn submit(&mut self, contender: RachContender, ready_at: SimTime) -> Option<SimTime> {
        let class = contender.attempt.class();
        let state = TryState {
            contender,
            class,
            tries: 0,
            power_dbm: self.params.initial_tx_power_dbm,
            power_trace: Vec::new(),
            backoffs_us: Vec::new(),
        };
        self.enqueue(state, ready_at)
    }

    fn enqueue(&mut self, state: TryState, ready_at: SimTime) -> Option<SimTime> {
        let idx = self.occasion_index(ready_at);
        let slot = self.waiting.entry(idx).or_default();
        slot.push(state);
        (slot.len() == 1).then(|| self.occasion_time(idx))
    }

    pub fn is_idle(&self) -> bool {
        self.waiting.is_empty()
    }

    /// Runs preamble selection and contention for the occasion at `at`.
    pub fn resolve(&mut self, at: SimTime, rng: &mut RngStream) -> OccasionReport {
        let mut report = OccasionReport::default();
        let idx = self.occasion_index(at);
        if self.occasion_time(idx) != at {
            return report;
        }
        let Some(mut contenders) = self.waiting.remove(&idx) else {
            return report;
        };

        let pool = self.params.preamble_pool_size as usize;
        let mut choice = Vec::with_capacity(contenders.len());
        let mut per_preamble: BTreeMap<usize, u32> = BTreeMap::new();
        for c in contenders.iter_mut() {
            c.tries += 1;
            c.power_trace.push(c.power_dbm);
            let preamble = rng.index(pool);
            let detected = if self.params.msg1_detection {
                let snr = c.power_dbm - c.contender.pathloss_db - self.radio.noise_dbm;
                let per = self.radio.packet_error_prob(snr, 0).unwrap_or(1.0);
                rng.uniform() >= per
            } else {
                true
            };
            if detected {
                *per_preamble.entry(preamble).or_default() += 1;
            }
            choice.push((preamble, detected));
        }
        report.collisions = per_preamble.values().filter(|&&n| n > 1).count() as u32;

        let latency_done = (self.params.procedure_latency_ms * 1_000.0).round() as u64;
        let cr_us = (self.params.contention_resolution_ms * 1_000.0).round() as u64;
        for (mut c, (preamble, detected)) in contenders.into_iter().zip(choice) {
            let won = detected && per_preamble[&preamble] == 1;
            if won {
                let done = at + latency_done;
                report.finished.push(finish(c, true, done));
                continue;
            }
            if c.tries >= self.params.max_attempts {
                let done = at + cr_us;
                report.finished.push(finish(c, false, done));
                continue;
            }
            let class = *self.params.class_params(c.class);
            let backoff_us = (rng.uniform() * class.backoff_max_ms * 1_000.0).floor() as u64;
            c.backoffs_us.push(backoff_us);
            c.power_dbm += class.power_ramp_step_db;
            if let Some(t) = self.enqueue(c, at + cr_us + backoff_us) {
                report.new_occasions.push(t);
            }
        }
        report
    }
}

fn finish(c: TryState, success: bool, done: SimTime) -> CbraOutcome {
    CbraOutcome {
        ue_id: c.contender.attempt.ue_id,
        class: c.class,
        success,
        attempts: c.tries,
        latency_us: done.saturating_sub(c.contender.attempt.request_time),
        final_power_dbm: c.power_dbm,
        power_trace: c.power_trace,
        backoffs_us: c.backoffs_us,
        completed_at: done,
    }
}

/// Runs CBRA for a batch of UEs sharing one cell until every UE succeeds or
/// exhausts its attempts. Outcomes are returned in input order.
pub fn run_cbra(
    contenders: &[RachContender],
    params: &CbraParams,
    radio: &RadioConfig,
    rng: &mut RngStream,
) -> Vec<CbraOutcome> {
    let mut cell = RachCell::new(params.clone(), radio.clone());
    let mut engine: Engine<()> = Engine::new();
    for c in contenders {
        if let Some(t) = cell.submit(c.clone(), c.attempt.request_time) {
            engine
                .schedule(t, ())
                .expect("initial engine clock is zero");
        }
    }
    let mut done: BTreeMap<UeId, CbraOutcome> = BTreeMap::new();
    engine.run_until(SimTime(u64::MAX), |eng, ev| {
        let report = cell.resolve(ev.fire_time, rng);
        for t in report.new_occasions {
            eng.schedule(t, ()).expect("retries land in the future");
        }
        for o in report.finished {
            done.insert(o.ue_id, o);
        }
    });
    contenders
        .iter()
        .map(|c| {
            done.remove(&c.attempt.ue_id)
                .expect("every contender finishes")
        })
        .collect()
}

/// gNB-side RRC acceptance: under resource limitation only mission-critical
/// (and emergency) requests are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RrcAcceptPolicy {
    pub max_connections: u32,
    /// Connections held back for `mcs-PriorityAccess` requests.
    pub mc_reserved: u32,
}

impl Default for RrcAcceptPolicy {
    fn default() -> Self {
        RrcAcceptPolicy {
            max_connections: u32::MAX,
            mc_reserved: 0,
        }
    }
}

impl RrcAcceptPolicy {
    pub fn accepts(&self, cause: EstablishmentCause, connected: u32) -> bool {
        match cause {
            EstablishmentCause::McsPriorityAccess | EstablishmentCause::Emergency => {
                connected < self.max_connections
            }
            _ => connected < self.max_connections.saturating_sub(self.mc_reserved),
        }
    }
}
