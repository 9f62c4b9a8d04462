//! Single-threaded discrete-event engine.
//!
//! Time is integer microseconds. Events with equal fire time run in the
//! order they were scheduled. Randomness comes from named [`RngStream`]s so
//! that one module's draws never perturb another's.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round() as u64)
    }

    pub fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-6
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cannot schedule at {at} while clock is {now}")]
    ClockViolation { now: SimTime, at: SimTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<E> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub action: E,
}

pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    payloads: HashMap<u64, E>,
    executed: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            payloads: HashMap::new(),
            executed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.payloads.len()
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn schedule(&mut self, at: SimTime, action: E) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::ClockViolation { now: self.now, at });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.payloads.insert(seq, action);
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(&mut self, delay_us: u64, action: E) -> EventHandle {
        let at = self.now + delay_us;
        self.schedule(at, action)
            .expect("relative scheduling is never in the past")
    }

    /// Returns `true` if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.payloads.remove(&handle.0).is_some()
    }

    /// Pops the next live event with `fire_time <= t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<E>> {
        while let Some(&Reverse((t, seq))) = self.heap.peek() {
            if t > t_end {
                return None;
            }
            self.heap.pop();
            if let Some(action) = self.payloads.remove(&seq) {
                debug_assert!(t >= self.now);
                self.now = t;
                self.executed += 1;
                return Some(Event {
                    fire_time: t,
                    sequence: seq,
                    action,
                });
            }
        }
        None
    }

    /// Runs every event with `fire_time <= t_end` and leaves the clock at
    /// `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<E>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            count += 1;
        }
        self.advance_to(t_end);
        count
    }

    /// Fallible variant of [`run_until`](Self::run_until); stops at the first
    /// handler error.
    pub fn try_run_until<F, Err>(&mut self, t_end: SimTime, mut handler: F) -> Result<u64, Err>
    where
        F: FnMut(&mut Self, Event<E>) -> Result<(), Err>,
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev)?;
            count += 1;
        }
        self.advance_to(t_end);
        Ok(count)
    }

    fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 so the draw sequence is identical on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: &str) -> Self {
        let key = splitmix64(seed ^ fnv1a64(stream_id.as_bytes()));
        let mut bytes = [0u8; 32];
        let mut state = key;
        for chunk in bytes.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        RngStream {
            seed,
            stream_id: stream_id.to_owned(),
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self, sigma: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        sigma * z
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Hands out one stream per label, creating them lazily.
#[derive(Debug, Clone)]
pub struct RngBank {
    seed: u64,
    streams: std::collections::BTreeMap<String, RngStream>,
}

impl RngBank {
    pub fn new(seed: u64) -> Self {
        RngBank {
            seed,
            streams: Default::default(),
        }
    }

    pub fn stream(&mut self, id: &str) -> &mut RngStream {
        let seed = self.seed;
        self.streams
            .entry(id.to_owned())
            .or_insert_with(|| RngStream::new(seed, id))
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.streams.keys().map(String::as_str).collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
