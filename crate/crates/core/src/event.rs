//! Deterministic discrete-event core.
//!
//! Simulated time is kept in integer nanoseconds. Events with the same fire
//! time are dispatched in insertion order, so a run is a pure function of the
//! scenario and the seed.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};
use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A point on the simulated clock, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    /// Rounds to the nearest nanosecond. Negative or NaN inputs map to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if secs.is_nan() || secs <= 0.0 {
            return SimTime::ZERO;
        }
        SimTime((secs * 1e9).round() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}s", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

/// Coarse classification of events, used for dispatch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    PacketArrival,
    PacketDeparture,
    FeedbackDelivery,
    TimerExpiry,
    FlowStart,
    FlowStop,
    TraceSample,
}

impl EventKind {
    pub const ALL: [EventKind; 7] = [
        EventKind::PacketArrival,
        EventKind::PacketDeparture,
        EventKind::FeedbackDelivery,
        EventKind::TimerExpiry,
        EventKind::FlowStart,
        EventKind::FlowStop,
        EventKind::TraceSample,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EventKind::PacketArrival => "packet_arrival",
            EventKind::PacketDeparture => "packet_departure",
            EventKind::FeedbackDelivery => "feedback_delivery",
            EventKind::TimerExpiry => "timer_expiry",
            EventKind::FlowStart => "flow_start",
            EventKind::FlowStop => "flow_stop",
            EventKind::TraceSample => "trace_sample",
        }
    }
}

/// Implemented by event payloads so the queue can keep per-kind counts.
pub trait Classify {
    fn kind(&self) -> EventKind;
}

/// A dispatched event.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub fire_time: SimTime,
    pub sequence: u64,
    pub payload: P,
}

/// Handle returned by [`EventQueue::schedule`]; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

struct Entry<P> {
    time: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Outcome of [`EventQueue::run_until`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub end_time: SimTime,
    pub dispatched: u64,
    pub by_kind: [u64; 7],
    pub wall_time: Duration,
}

impl SimSummary {
    pub fn count(&self, kind: EventKind) -> u64 {
        self.by_kind[kind.index()]
    }

    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &SimSummary) -> bool {
        self.end_time == other.end_time
            && self.dispatched == other.dispatched
            && self.by_kind == other.by_kind
    }
}

/// Time-ordered event queue with a global simulated clock.
pub struct EventQueue<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Entry<P>>,
    live: HashSet<u64>,
    dispatched: u64,
    by_kind: [u64; 7],
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            dispatched: 0,
            by_kind: [0; 7],
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of pending (not cancelled, not dispatched) events.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<EventHandle> {
        if at < self.now {
            return Err(Error::ScheduleInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry {
            time: at,
            seq,
            payload,
        });
        self.live.insert(seq);
        Ok(EventHandle(seq))
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: P) -> Result<EventHandle> {
        self.schedule(self.now + delay, payload)
    }

    /// Returns `true` if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    /// Fire time of the next pending event.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_cancelled();
        self.heap.peek().map(|e| e.time)
    }

    fn discard_cancelled(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.live.contains(&top.seq) {
                break;
            }
            self.heap.pop();
        }
    }

    fn pop_until(&mut self, limit: SimTime) -> Option<SimEvent<P>> {
        self.discard_cancelled();
        if self.heap.peek()?.time > limit {
            return None;
        }
        let entry = self.heap.pop()?;
        self.live.remove(&entry.seq);
        debug_assert!(entry.time >= self.now);
        self.now = entry.time;
        Some(SimEvent {
            fire_time: entry.time,
            sequence: entry.seq,
            payload: entry.payload,
        })
    }
}

impl<P: Classify> EventQueue<P> {
    /// Dispatches every event with `fire_time <= t_end` in order, then sets
    /// the clock to `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<SimSummary>
    where
        F: FnMut(&mut EventQueue<P>, SimEvent<P>) -> Result<()>,
    {
        if t_end < self.now {
            return Err(Error::EndBeforeClock {
                end: t_end,
                now: self.now,
            });
        }
        let started = Instant::now();
        while let Some(event) = self.pop_until(t_end) {
            self.dispatched += 1;
            self.by_kind[event.payload.kind().index()] += 1;
            handler(self, event)?;
        }
        self.now = t_end;
        Ok(SimSummary {
            end_time: self.now,
            dispatched: self.dispatched,
            by_kind: self.by_kind,
            wall_time: started.elapsed(),
        })
    }
}

/// 64-bit finaliser from SplitMix64; used to derive independent stream seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded pseudo-random stream backed by ChaCha8, whose output is specified
/// independently of platform and word size.
///
/// Sub-streams are derived as `splitmix64(master ^ splitmix64(stream_id))`,
/// so each sampling entity draws from its own sequence and adding an entity
/// never perturbs the others.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derive(master: u64, stream_id: u64) -> Self {
        Self::new(splitmix64(master ^ splitmix64(stream_id)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `true` with probability `p`; always consumes exactly one draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_u64(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            return lo;
        }
        let span = hi - lo + 1;
        lo + (self.uniform() * span as f64).floor().min((span - 1) as f64) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Tag(u32);

    impl Classify for Tag {
        fn kind(&self) -> EventKind {
            EventKind::TimerExpiry
        }
    }

    #[test]
    fn schedule_at_zero_fires_first() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_nanos(5), Tag(1)).unwrap();
        q.schedule(SimTime::ZERO, Tag(0)).unwrap();
        let mut seen = Vec::new();
        q.run_until(SimTime::from_nanos(10), |_, ev| {
            seen.push(ev.payload.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn equal_times_dispatch_in_insertion_order() {
        let mut q = EventQueue::new();
        for i in 0..100 {
            q.schedule(SimTime::from_nanos(7), Tag(i)).unwrap();
        }
        let mut seen = Vec::new();
        q.run_until(SimTime::from_nanos(7), |_, ev| {
            seen.push(ev.payload.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn scheduling_in_the_past_is_rejected() {
        let mut q: EventQueue<Tag> = EventQueue::new();
        q.run_until(SimTime::from_nanos(100), |_, _| Ok(())).unwrap();
        let err = q.schedule(SimTime::from_nanos(99), Tag(0)).unwrap_err();
        assert!(matches!(err, Error::ScheduleInPast { .. }));
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut q: EventQueue<Tag> = EventQueue::new();
        let s = q.run_until(SimTime::from_secs_f64(1.0), |_, _| Ok(())).unwrap();
        assert_eq!(q.now(), SimTime::from_millis(1000));
        assert_eq!(s.dispatched, 0);
    }

    #[test]
    fn end_before_clock_is_an_error() {
        let mut q: EventQueue<Tag> = EventQueue::new();
        q.run_until(SimTime::from_nanos(10), |_, _| Ok(())).unwrap();
        assert!(matches!(
            q.run_until(SimTime::from_nanos(9), |_, _| Ok(())),
            Err(Error::EndBeforeClock { .. })
        ));
    }

    #[test]
    fn cancelled_events_do_not_fire() {
        let mut q = EventQueue::new();
        let h = q.schedule(SimTime::from_nanos(3), Tag(3)).unwrap();
        q.schedule(SimTime::from_nanos(4), Tag(4)).unwrap();
        assert!(q.cancel(h));
        assert!(!q.cancel(h));
        let mut seen = Vec::new();
        q.run_until(SimTime::from_nanos(10), |_, ev| {
            seen.push(ev.payload.0);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![4]);
    }

    #[test]
    fn handler_may_schedule_at_current_time() {
        let mut q = EventQueue::new();
        q.schedule(SimTime::from_nanos(1), Tag(0)).unwrap();
        let mut seen = Vec::new();
        q.run_until(SimTime::from_nanos(5), |q, ev| {
            seen.push((q.now().as_nanos(), ev.payload.0));
            if ev.payload.0 < 3 {
                q.schedule(q.now(), Tag(ev.payload.0 + 1))?;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 0), (1, 1), (1, 2), (1, 3)]);
    }

    #[test]
    fn rng_streams_are_reproducible_and_independent() {
        let mut a = RngStream::derive(42, 1);
        let mut b = RngStream::derive(42, 1);
        let mut c = RngStream::derive(42, 2);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn rng_output_is_pinned() {
        // Frozen from the first run; guards against silent algorithm changes.
        let mut r = RngStream::new(7);
        assert_eq!(r.next_u64(), 2910824217569608635);
    }

    #[test]
    fn sim_time_display() {
        assert_eq!(SimTime::from_nanos(1_500_000_123).to_string(), "1.500000123s");
    }
}
