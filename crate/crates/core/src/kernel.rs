//! Deterministic discrete-event core: virtual clock, ordered event queue and
//! labeled random streams.
//!
//! Simulated time is kept in integer nanoseconds. All durations derived from
//! real-valued inputs (flops, bytes, rates) are rounded to the nanosecond
//! grid once, and every later combination of times is exact integer
//! arithmetic. This is what lets estimates, overhead accounting and view
//! merges be compared for exact equality.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NANOS_PER_SEC: f64 = 1e9;

/// Converts non-negative seconds to the nanosecond grid.
fn secs_to_nanos(secs: f64) -> Result<u64, TimeError> {
    if !secs.is_finite() || secs < 0.0 {
        return Err(TimeError::Invalid(secs));
    }
    let nanos = (secs * NANOS_PER_SEC).round();
    if nanos >= u64::MAX as f64 {
        return Err(TimeError::Overflow(secs));
    }
    Ok(nanos as u64)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimeError {
    #[error("time value {0} is negative or not finite")]
    Invalid(f64),
    #[error("time value {0} s overflows the simulation clock")]
    Overflow(f64),
}

/// A point on the simulated clock (nanosecond resolution).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

/// A non-negative span of simulated time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimDuration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_nanos(nanos: u64) -> Self {
        SimTime(nanos)
    }

    pub fn from_secs(secs: f64) -> Result<Self, TimeError> {
        secs_to_nanos(secs).map(SimTime)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    /// Elapsed time since `earlier`, zero if `earlier` is later.
    pub fn saturating_since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }

    pub fn saturating_add(self, d: SimDuration) -> SimTime {
        SimTime(self.0.saturating_add(d.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);
    pub const MAX: SimDuration = SimDuration(u64::MAX);

    pub fn from_nanos(nanos: u64) -> Self {
        SimDuration(nanos)
    }

    pub fn from_secs(secs: f64) -> Result<Self, TimeError> {
        secs_to_nanos(secs).map(SimDuration)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn saturating_sub(self, other: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_sub(other.0))
    }

    pub fn saturating_mul(self, n: u64) -> SimDuration {
        SimDuration(self.0.saturating_mul(n))
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("simulation clock overflow"))
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0.checked_sub(rhs.0).expect("negative time difference"))
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.checked_add(rhs.0).expect("duration overflow"))
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for SimDuration {
    fn sum<I: Iterator<Item = SimDuration>>(iter: I) -> SimDuration {
        iter.fold(SimDuration::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs())
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs())
    }
}

/// Handle returned by [`Simulation::schedule`], usable for cancellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("cannot schedule at {at}, clock is already at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
}

/// An event taken off the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Fired<E> {
    pub id: EventId,
    pub at: SimTime,
    pub payload: E,
}

/// Single-threaded event loop. Events fire in `(fire_at, seq)` order, where
/// `seq` is the insertion counter, so simultaneous events keep insertion order.
pub struct Simulation<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    payloads: HashMap<u64, E>,
    // tombstones: cancelled but still sitting in the heap
    cancelled: HashSet<u64>,
    scheduled: u64,
    cancelled_total: u64,
    processed: u64,
}

impl<E> Default for Simulation<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Simulation<E> {
    pub fn new() -> Self {
        Simulation {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            payloads: HashMap::new(),
            cancelled: HashSet::new(),
            scheduled: 0,
            cancelled_total: 0,
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn schedule(&mut self, payload: E, at: SimTime) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.payloads.insert(seq, payload);
        self.scheduled += 1;
        Ok(EventId(seq))
    }

    /// Schedules `payload` at `now + delay`.
    pub fn schedule_in(&mut self, payload: E, delay: SimDuration) -> EventId {
        let at = self.now + delay;
        self.schedule(payload, at).expect("relative scheduling is never in the past")
    }

    /// Cancels a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        if self.payloads.remove(&id.0).is_some() {
            self.cancelled.insert(id.0);
            self.cancelled_total += 1;
            true
        } else {
            false
        }
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.payloads.contains_key(&id.0)
    }

    /// Time of the next live event, if any.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.skip_tombstones();
        self.heap.peek().map(|Reverse((at, _))| *at)
    }

    fn skip_tombstones(&mut self) {
        while let Some(Reverse((_, seq))) = self.heap.peek() {
            if self.cancelled.remove(seq) {
                self.heap.pop();
            } else {
                break;
            }
        }
    }

    /// Pops the next event if it fires at or before `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Fired<E>> {
        self.skip_tombstones();
        let Reverse((at, seq)) = *self.heap.peek()?;
        if at > limit {
            return None;
        }
        self.heap.pop();
        let payload = self.payloads.remove(&seq).expect("live event has a payload");
        debug_assert!(at >= self.now);
        self.now = at;
        self.processed += 1;
        Some(Fired { id: EventId(seq), at, payload })
    }

    /// Processes every event with `fire_at <= t`, then sets the clock to `t`.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> usize
    where
        F: FnMut(&mut Self, Fired<E>),
    {
        assert!(t >= self.now, "run_until target is in the past");
        let mut count = 0;
        while let Some(ev) = self.pop_until(t) {
            handler(self, ev);
            count += 1;
        }
        self.now = t;
        count
    }

    pub fn scheduled_count(&self) -> u64 {
        self.scheduled
    }

    pub fn cancelled_count(&self) -> u64 {
        self.cancelled_total
    }

    pub fn processed_count(&self) -> u64 {
        self.processed
    }

    pub fn pending_count(&self) -> u64 {
        self.payloads.len() as u64
    }
}

/// A labeled, seeded random stream. `(seed, label)` fully determines the
/// sequence, so one concern (churn, workload, ...) can be toggled without
/// shifting the draws of another.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_key(seed: u64, label: &str) -> [u8; 32] {
    // FNV-1a over the label, then splitmix to spread it over the key
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut state = seed ^ splitmix64(h);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        RngStream { seed, label: label.to_string(), rng: ChaCha8Rng::from_seed(stream_key(seed, label)) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

pub fn rng_stream(seed: u64, label: &str) -> RngStream {
    RngStream::new(seed, label)
}
