//! QCN reaction point: multiplicative decrease on feedback, then recovery
//! toward the pre-decrease target in byte-counter and timer cycles.

use crate::cp::{FeedbackFrame, FeedbackPayload};
use crate::error::{Error, Result};
use crate::event::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct QcnParams {
    /// Decrease gain per feedback code unit.
    pub gd: f64,
    pub fb_max_code: u8,
    pub bc_limit_bytes: u64,
    pub fr_cycles: u32,
    pub r_ai_bps: f64,
    pub r_hai_bps: f64,
    pub timer_period: SimTime,
    pub r_min_bps: f64,
    /// Cut an inflated target back by 8x when it exceeds ten times the rate.
    pub trr: bool,
    /// Keep the old target when a second decrease lands in the first cycle.
    pub efr: bool,
}

impl QcnParams {
    /// Defaults for a source whose NIC runs at `nic_bps`.
    pub fn standard(nic_bps: f64) -> Self {
        let fb_max_code = 63;
        QcnParams {
            gd: gain_for_max_code(fb_max_code),
            fb_max_code,
            bc_limit_bytes: 150_000,
            fr_cycles: 5,
            r_ai_bps: 5e6,
            r_hai_bps: 50e6,
            timer_period: default_timer_period(150_000, nic_bps),
            r_min_bps: 1e6,
            trr: true,
            efr: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let halved = self.gd * self.fb_max_code as f64;
        if (halved - 0.5).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "decrease gain {} times max code {} must be 1/2",
                self.gd, self.fb_max_code
            )));
        }
        if self.bc_limit_bytes == 0 || self.timer_period == SimTime::ZERO {
            return Err(Error::Validation("byte limit and timer period must be positive".into()));
        }
        Ok(())
    }
}

/// Gain such that the largest code halves the rate.
pub fn gain_for_max_code(max_code: u8) -> f64 {
    1.0 / (2.0 * max_code as f64)
}

/// Time to send `bytes` at a tenth of the NIC rate.
pub fn default_timer_period(bytes: u64, nic_bps: f64) -> SimTime {
    SimTime::from_secs_f64(bytes as f64 * 8.0 / (0.1 * nic_bps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    FastRecovery,
    ActiveIncrease,
    HyperActiveIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleSource {
    ByteCounter,
    Timer,
}

#[derive(Debug, Clone)]
pub struct QcnRpState {
    pub rate_bps: f64,
    pub target_bps: f64,
    pub byte_count: u64,
    pub cycle_index: u32,
    pub timer_cycle_index: u32,
    pub nic_capacity_bps: f64,
    decreased_once: bool,
    pub decreases: u64,
    pub malformed: u64,
}

impl QcnRpState {
    pub fn new(initial_rate_bps: f64, nic_capacity_bps: f64) -> Self {
        let r = initial_rate_bps.min(nic_capacity_bps);
        QcnRpState {
            rate_bps: r,
            target_bps: r,
            byte_count: 0,
            cycle_index: 0,
            timer_cycle_index: 0,
            nic_capacity_bps,
            decreased_once: false,
            decreases: 0,
            malformed: 0,
        }
    }

    pub fn phase(&self, params: &QcnParams) -> Phase {
        let n = params.fr_cycles;
        if self.cycle_index >= n && self.timer_cycle_index >= n {
            Phase::HyperActiveIncrease
        } else if self.cycle_index >= n {
            Phase::ActiveIncrease
        } else {
            Phase::FastRecovery
        }
    }

    /// Bytes per byte-counter cycle in the current phase.
    pub fn byte_limit(&self, params: &QcnParams) -> u64 {
        match self.phase(params) {
            Phase::FastRecovery => params.bc_limit_bytes,
            _ => params.bc_limit_bytes / 2,
        }
    }

    /// Multiplicative decrease by `fb` code units. Returns `false` (and does
    /// nothing) for a zero code.
    pub fn rate_decrease(&mut self, fb: u8, params: &QcnParams) -> bool {
        if fb == 0 {
            return false;
        }
        let fb = fb.min(params.fb_max_code);
        let first_cycle = self.cycle_index == 0 && self.timer_cycle_index == 0;
        if !(params.efr && self.decreased_once && first_cycle) {
            self.target_bps = self.rate_bps;
        }
        self.rate_bps = (self.rate_bps * (1.0 - params.gd * fb as f64)).max(params.r_min_bps);
        if params.trr && self.target_bps > 10.0 * self.rate_bps {
            self.target_bps /= 8.0;
        }
        self.target_bps = self.target_bps.max(self.rate_bps);
        self.byte_count = 0;
        self.cycle_index = 0;
        self.timer_cycle_index = 0;
        self.decreased_once = true;
        self.decreases += 1;
        true
    }

    /// Applies a QCN frame; any other payload is counted as malformed.
    pub fn on_feedback(&mut self, frame: &FeedbackFrame, params: &QcnParams) -> bool {
        match frame.payload {
            FeedbackPayload::Qcn { fb } => self.rate_decrease(fb, params),
            FeedbackPayload::Asm { .. } => {
                self.malformed += 1;
                false
            }
        }
    }

    /// One recovery step, then advances the counter that triggered it.
    pub fn cycle_complete(&mut self, source: CycleSource, params: &QcnParams) {
        match self.phase(params) {
            Phase::FastRecovery => {}
            Phase::ActiveIncrease => self.target_bps += params.r_ai_bps,
            Phase::HyperActiveIncrease => self.target_bps += params.r_hai_bps,
        }
        self.target_bps = self.target_bps.min(self.nic_capacity_bps);
        self.rate_bps = ((self.rate_bps + self.target_bps) / 2.0).min(self.nic_capacity_bps);
        match source {
            CycleSource::ByteCounter => {
                self.cycle_index = self.cycle_index.saturating_add(1);
                self.byte_count = 0;
            }
            CycleSource::Timer => self.timer_cycle_index = self.timer_cycle_index.saturating_add(1),
        }
    }

    /// Accounts transmitted bytes; returns `true` when a byte-counter cycle
    /// completed (the step has already been applied).
    pub fn on_bytes_sent(&mut self, bytes: u64, params: &QcnParams) -> bool {
        self.byte_count += bytes;
        if self.byte_count >= self.byte_limit(params) {
            self.cycle_complete(CycleSource::ByteCounter, params);
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> QcnParams {
        QcnParams {
            trr: false,
            efr: false,
            ..QcnParams::standard(10e9)
        }
    }

    #[test]
    fn max_code_halves_the_rate() {
        let p = params();
        assert!((p.gd - 1.0 / 126.0).abs() < 1e-15);
        p.validate().unwrap();
        let mut s = QcnRpState::new(10e9, 10e9);
        s.rate_decrease(63, &p);
        assert!((s.rate_bps - 5e9).abs() < 1.0);
        assert_eq!(s.target_bps, 10e9);
    }

    #[test]
    fn zero_code_is_ignored() {
        let p = params();
        let mut s = QcnRpState::new(3e9, 10e9);
        assert!(!s.rate_decrease(0, &p));
        assert_eq!(s.rate_bps, 3e9);
    }

    #[test]
    fn partial_decrease() {
        let p = params();
        let mut s = QcnRpState::new(1e9, 10e9);
        s.rate_decrease(31, &p);
        assert!((s.rate_bps - 1e9 * (1.0 - 31.0 / 126.0)).abs() < 1.0);
        assert!((s.rate_bps - 754e6).abs() < 1e6);
    }

    #[test]
    fn fast_recovery_midpoints() {
        let p = params();
        let mut s = QcnRpState::new(10e9, 10e9);
        s.rate_decrease(63, &p);
        let mut seen = Vec::new();
        for _ in 0..5 {
            s.cycle_complete(CycleSource::ByteCounter, &p);
            seen.push(s.rate_bps / 1e9);
        }
        let expect = [7.5, 8.75, 9.375, 9.6875, 9.84375];
        for (a, b) in seen.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(s.phase(&p), Phase::ActiveIncrease);
        assert_eq!(s.byte_limit(&p), 75_000);
    }

    #[test]
    fn active_increase_step() {
        let p = params();
        let mut s = QcnRpState::new(1e9, 10e9);
        s.cycle_index = 5;
        s.cycle_complete(CycleSource::ByteCounter, &p);
        assert!((s.target_bps - 1.005e9).abs() < 1.0);
        assert!((s.rate_bps - 1.0025e9).abs() < 1.0);
    }

    #[test]
    fn hyper_active_needs_both_counters() {
        let p = params();
        let mut s = QcnRpState::new(1e9, 10e9);
        s.cycle_index = 5;
        s.timer_cycle_index = 4;
        assert_eq!(s.phase(&p), Phase::ActiveIncrease);
        s.timer_cycle_index = 5;
        assert_eq!(s.phase(&p), Phase::HyperActiveIncrease);
        s.cycle_complete(CycleSource::Timer, &p);
        assert!((s.target_bps - 1.05e9).abs() < 1.0);
        s.cycle_index = 0;
        s.timer_cycle_index = 9;
        assert_eq!(s.phase(&p), Phase::FastRecovery);
    }

    #[test]
    fn byte_counter_triggers_cycles() {
        let p = params();
        let mut s = QcnRpState::new(10e9, 10e9);
        s.rate_decrease(63, &p);
        let mut cycles = 0;
        for _ in 0..200 {
            if s.on_bytes_sent(1500, &p) {
                cycles += 1;
            }
        }
        // 300 KB in FR at 150 KB per cycle.
        assert_eq!(cycles, 2);
    }

    #[test]
    fn extra_fast_recovery_keeps_target() {
        let p = QcnParams {
            efr: true,
            ..params()
        };
        let mut s = QcnRpState::new(8e9, 10e9);
        s.rate_decrease(63, &p);
        assert_eq!(s.target_bps, 8e9);
        s.rate_decrease(63, &p);
        assert_eq!(s.target_bps, 8e9);
        assert!((s.rate_bps - 2e9).abs() < 1.0);
        s.cycle_complete(CycleSource::Timer, &p);
        s.rate_decrease(10, &p);
        assert!(s.target_bps < 8e9);
    }

    #[test]
    fn target_rate_reduction() {
        let p = QcnParams {
            efr: true,
            trr: true,
            ..params()
        };
        let mut s = QcnRpState::new(8e9, 10e9);
        for _ in 0..4 {
            s.rate_decrease(63, &p);
        }
        // 8 Gb/s halved four times is 0.5 Gb/s; the 8 Gb/s target exceeds
        // ten times that and is cut to 1 Gb/s.
        assert!((s.rate_bps - 0.5e9).abs() < 1.0);
        assert!((s.target_bps - 1e9).abs() < 1.0);
    }

    #[test]
    fn default_timer_is_150kb_at_a_tenth_of_line_rate() {
        assert_eq!(default_timer_period(150_000, 10e9), SimTime::from_micros(1200));
        assert_eq!(QcnParams::standard(1e9).timer_period, SimTime::from_micros(12_000));
    }

    #[test]
    fn rate_floor() {
        let p = params();
        let mut s = QcnRpState::new(1.5e6, 10e9);
        s.rate_decrease(63, &p);
        assert_eq!(s.rate_bps, 1e6);
    }

    proptest! {
        #[test]
        fn decrease_at_most_half(r in 2e6f64..1e10, fb in 1u8..=63) {
            let p = params();
            let mut s = QcnRpState::new(r, 1e10);
            s.rate_decrease(fb, &p);
            prop_assert!(s.rate_bps >= r * 0.5 - 1e-6);
            prop_assert!(s.target_bps >= s.rate_bps);
        }

        #[test]
        fn recovery_never_overshoots_target(r in 1e6f64..1e10, gap in 0f64..1e9, ai in 0u32..12, tc in 0u32..12) {
            let p = params();
            let mut s = QcnRpState::new(r, 2e10);
            s.target_bps = r + gap;
            s.cycle_index = ai;
            s.timer_cycle_index = tc;
            s.cycle_complete(CycleSource::ByteCounter, &p);
            prop_assert!(s.rate_bps <= s.target_bps + 1e-6);
        }

        #[test]
        fn five_fast_recovery_cycles_close_the_gap(r in 1e6f64..5e9, gap in 1f64..5e9) {
            let p = params();
            let mut s = QcnRpState::new(r, 2e10);
            s.target_bps = r + gap;
            for _ in 0..5 {
                s.cycle_complete(CycleSource::ByteCounter, &p);
            }
            let left = s.target_bps - s.rate_bps;
            prop_assert!(left <= gap / 32.0 * (1.0 + 1e-9));
        }
    }
}
