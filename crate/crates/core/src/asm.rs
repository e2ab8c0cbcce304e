//! ASM reaction point: a per-source rate limiter driven by quantized queue
//! offset and queue variation, with two coefficient regimes.

use serde::{Deserialize, Serialize};

use crate::cp::{compute_fb, Cpid, FeedbackFrame, FeedbackPayload};
use crate::error::{Error, Result};

/// The four gains of one regime, in bits/s per quantized unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsmCoefficients {
    pub a_plus: f64,
    pub a_minus: f64,
    pub b_plus: f64,
    pub b_minus: f64,
}

impl AsmCoefficients {
    pub fn pair(&self, branch: Branch) -> (f64, f64) {
        match branch {
            Branch::Plus => (self.a_plus, self.b_plus),
            Branch::Minus => (self.a_minus, self.b_minus),
        }
    }

    fn validate(&self, label: &str) -> Result<()> {
        let ok = self.a_plus > 0.0 && self.b_plus > 0.0 && self.b_minus > 0.0 && self.a_minus >= 0.0;
        let finite = [self.a_plus, self.a_minus, self.b_plus, self.b_minus]
            .iter()
            .all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{label} coefficients must be positive (a_minus may be zero): {self:?}"
            )))
        }
    }
}

/// Rate caps of one regime as fractions of link capacity, in the order
/// `a_plus, a_minus, b_plus, b_minus`.
pub type CapFractions = [f64; 4];

pub const DEFAULT_CAPS_APPROACH: CapFractions = [1.0 / 8.0, 1.0 / 64.0, 1.0 / 16.0, 1.0 / 2.0];
pub const DEFAULT_CAPS_SLIDING: CapFractions = [1.0 / 16.0, 1.0 / 128.0, 1.0 / 32.0, 1.0 / 4.0];

/// Gains such that a full-scale code moves the rate by exactly
/// `fraction * capacity_bps`.
pub fn coefficients_from_caps(caps: CapFractions, capacity_bps: f64, max_code: u32) -> Result<AsmCoefficients> {
    if max_code == 0 {
        return Err(Error::Validation("max_code must be positive".into()));
    }
    if let Some(bad) = caps.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
        return Err(Error::Validation(format!("cap fraction must be positive, got {bad}")));
    }
    let per_unit = |f: f64| f * capacity_bps / max_code as f64;
    Ok(AsmCoefficients {
        a_plus: per_unit(caps[0]),
        a_minus: per_unit(caps[1]),
        b_plus: per_unit(caps[2]),
        b_minus: per_unit(caps[3]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Large gains, used far from the sliding line and near the stable point.
    Approach,
    /// Smaller gains once the state is close to the sliding line.
    Sliding,
}

/// Which half of the sign-switched gain pair is in force.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsmParams {
    pub approach: AsmCoefficients,
    pub sliding: AsmCoefficients,
    /// `|Q_f| + |ΔQ|` below this (quantized units) re-arms the approach gains.
    pub b0: f64,
    /// `|F_b|` below this (quantized units) enters the sliding regime.
    pub bf: f64,
    pub w: f64,
    pub p: f64,
}

impl AsmParams {
    pub fn coefficients(&self, regime: Regime) -> &AsmCoefficients {
        match regime {
            Regime::Approach => &self.approach,
            Regime::Sliding => &self.sliding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.approach.validate("approach")?;
        self.sliding.validate("sliding")?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Validation(format!("sampling probability {} not in (0, 1]", self.p)));
        }
        if !(self.w > 0.0) || !(self.b0 >= 0.0) || !(self.bf >= 0.0) {
            return Err(Error::Validation("w must be positive and bounds non-negative".into()));
        }
        Ok(())
    }
}

/// Regime for the next adjustment. The near-stable test runs first.
pub fn select_regime(fb: f64, qf: f64, dq: f64, params: &AsmParams, current: Regime) -> Regime {
    if qf.abs() + dq.abs() < params.b0 {
        Regime::Approach
    } else if fb.abs() < params.bf {
        Regime::Sliding
    } else {
        current
    }
}

/// Branch of the gain pair. With `F_b = -Q_f - w ΔQ` the plus gains apply
/// while `Q_f` and `F_b` have opposite signs, i.e. while the state is still
/// heading for the sliding line; the minus gains apply once it has crossed.
/// A zero product takes the plus branch.
pub fn select_branch(qf: f64, fb: f64) -> Branch {
    if qf * fb > 0.0 {
        Branch::Minus
    } else {
        Branch::Plus
    }
}

pub fn select_coefficients(qf: f64, fb: f64, regime: Regime, params: &AsmParams) -> (f64, f64) {
    params.coefficients(regime).pair(select_branch(qf, fb))
}

/// What a feedback frame did to the rate limiter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Adjustment {
    Decreased { delta: f64 },
    Increased { delta: f64 },
    Unchanged,
    /// Increase refused because the frame came from a different CP.
    CpidMismatch,
    Malformed,
}

#[derive(Debug, Clone)]
pub struct AsmRpState {
    pub rate_bps: f64,
    pub stored_cpid: Option<Cpid>,
    pub regime: Regime,
    pub nic_capacity_bps: f64,
    pub r_min_bps: f64,
    pub malformed: u64,
    pub cpid_rejections: u64,
}

impl AsmRpState {
    pub fn new(initial_rate_bps: f64, nic_capacity_bps: f64, r_min_bps: f64) -> Self {
        AsmRpState {
            rate_bps: initial_rate_bps.clamp(r_min_bps, nic_capacity_bps),
            stored_cpid: None,
            regime: Regime::Approach,
            nic_capacity_bps,
            r_min_bps,
            malformed: 0,
            cpid_rejections: 0,
        }
    }

    /// Applies one frame. `qf` and `dq` are taken in code units; the gains
    /// are per code unit.
    pub fn on_feedback(&mut self, frame: &FeedbackFrame, params: &AsmParams) -> Adjustment {
        let (qf, dq) = match frame.payload {
            FeedbackPayload::Asm { qf, dq } => (qf as f64, dq as f64),
            FeedbackPayload::Qcn { .. } => {
                self.malformed += 1;
                return Adjustment::Malformed;
            }
        };
        let fb = compute_fb(qf, dq, params.w);
        let regime = select_regime(fb, qf, dq, params, self.regime);
        let (alpha, beta) = select_coefficients(qf, fb, regime, params);
        let delta = -alpha * qf - beta * dq;

        if delta > 0.0 {
            if let Some(stored) = self.stored_cpid {
                if stored != frame.cpid {
                    self.cpid_rejections += 1;
                    return Adjustment::CpidMismatch;
                }
            }
        }
        self.regime = regime;
        if delta < 0.0 {
            self.stored_cpid = Some(frame.cpid);
        }
        let old = self.rate_bps;
        self.rate_bps = (old + delta).clamp(self.r_min_bps, self.nic_capacity_bps);
        let applied = self.rate_bps - old;
        if applied < 0.0 {
            Adjustment::Decreased { delta: applied }
        } else if applied > 0.0 {
            Adjustment::Increased { delta: applied }
        } else {
            Adjustment::Unchanged
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::HostAddr;
    use proptest::prelude::*;

    const C: f64 = 1e9;

    fn params() -> AsmParams {
        AsmParams {
            approach: coefficients_from_caps(DEFAULT_CAPS_APPROACH, C, 127).unwrap(),
            sliding: coefficients_from_caps(DEFAULT_CAPS_SLIDING, C, 127).unwrap(),
            b0: 16.0,
            bf: 64.0,
            w: 32.0,
            p: 0.01,
        }
    }

    fn frame(cpid: u32, qf: i8, dq: i8) -> FeedbackFrame {
        FeedbackFrame {
            cpid: Cpid(cpid),
            dst: HostAddr(0),
            payload: FeedbackPayload::Asm { qf, dq },
        }
    }

    #[test]
    fn regime_selection() {
        let p = params();
        assert_eq!(select_regime(100.0, 100.0, 20.0, &p, Regime::Approach), Regime::Approach);
        assert_eq!(select_regime(100.0, 100.0, 20.0, &p, Regime::Sliding), Regime::Sliding);
        assert_eq!(select_regime(10.0, 30.0, 10.0, &p, Regime::Approach), Regime::Sliding);
        assert_eq!(select_regime(500.0, 3.0, 2.0, &p, Regime::Sliding), Regime::Approach);
        // Both bounds satisfied: the near-stable test wins.
        assert_eq!(select_regime(1.0, 3.0, 2.0, &p, Regime::Sliding), Regime::Approach);
    }

    #[test]
    fn branch_selection() {
        let p = params();
        // Above target and still rising: heading for the line, plus gains.
        assert_eq!(select_coefficients(10.0, -74.0, Regime::Approach, &p), (p.approach.a_plus, p.approach.b_plus));
        // Below target, queue falling fast: crossed the line, minus gains.
        assert_eq!(select_coefficients(-5.0, -10.0, Regime::Approach, &p), (p.approach.a_minus, p.approach.b_minus));
        assert_eq!(select_coefficients(0.0, 12.0, Regime::Sliding, &p), (p.sliding.a_plus, p.sliding.b_plus));
        assert_eq!(select_branch(3.0, 0.0), Branch::Plus);
    }

    #[test]
    fn caps_to_coefficients() {
        let c = coefficients_from_caps(DEFAULT_CAPS_APPROACH, C, 127).unwrap();
        assert!((c.a_plus - 0.984e6).abs() < 1e3);
        assert!((c.b_minus - 3.937e6).abs() < 1e3);
        assert!(coefficients_from_caps([0.0, 0.1, 0.1, 0.1], C, 127).is_err());
        assert!(coefficients_from_caps([0.1, -0.1, 0.1, 0.1], C, 127).is_err());
        assert!(coefficients_from_caps(DEFAULT_CAPS_APPROACH, C, 0).is_err());
    }

    #[test]
    fn stable_point_is_fixed() {
        let p = params();
        let mut rp = AsmRpState::new(500e6, C, 1e6);
        assert_eq!(rp.on_feedback(&frame(1, 0, 0), &p), Adjustment::Unchanged);
        assert_eq!(rp.rate_bps, 500e6);
    }

    #[test]
    fn full_scale_offset_cuts_an_eighth_of_capacity() {
        let p = params();
        let mut rp = AsmRpState::new(500e6, C, 1e6);
        rp.on_feedback(&frame(1, 127, 0), &p);
        assert!((rp.rate_bps - 375e6).abs() < 1.0, "{}", rp.rate_bps);
        assert_eq!(rp.stored_cpid, Some(Cpid(1)));
    }

    #[test]
    fn increase_from_other_cp_is_refused() {
        let p = params();
        let mut rp = AsmRpState::new(500e6, C, 1e6);
        rp.on_feedback(&frame(1, 50, 0), &p);
        let before = rp.rate_bps;
        assert_eq!(rp.on_feedback(&frame(2, -50, 0), &p), Adjustment::CpidMismatch);
        assert_eq!(rp.rate_bps, before);
        assert!(matches!(rp.on_feedback(&frame(1, -50, 0), &p), Adjustment::Increased { .. }));
        // A decrease from another CP always applies and takes over.
        assert!(matches!(rp.on_feedback(&frame(2, 50, 0), &p), Adjustment::Decreased { .. }));
        assert_eq!(rp.stored_cpid, Some(Cpid(2)));
    }

    #[test]
    fn increase_without_stored_cpid_applies() {
        let p = params();
        let mut rp = AsmRpState::new(100e6, C, 1e6);
        assert!(matches!(rp.on_feedback(&frame(7, -40, 0), &p), Adjustment::Increased { .. }));
        assert_eq!(rp.stored_cpid, None);
    }

    #[test]
    fn qcn_payload_is_malformed() {
        let p = params();
        let mut rp = AsmRpState::new(100e6, C, 1e6);
        let f = FeedbackFrame {
            cpid: Cpid(1),
            dst: HostAddr(0),
            payload: FeedbackPayload::Qcn { fb: 3 },
        };
        assert_eq!(rp.on_feedback(&f, &p), Adjustment::Malformed);
        assert_eq!(rp.malformed, 1);
        assert_eq!(rp.rate_bps, 100e6);
    }

    proptest! {
        #[test]
        fn rate_stays_in_bounds(seq in prop::collection::vec((0u32..3, any::<i8>(), any::<i8>()), 0..400),
                                start in 1e6f64..1e9) {
            let p = params();
            let mut rp = AsmRpState::new(start, C, 1e6);
            for (cpid, qf, dq) in seq {
                rp.on_feedback(&frame(cpid, qf, dq), &p);
                prop_assert!(rp.rate_bps >= 1e6 && rp.rate_bps <= C);
            }
        }

        #[test]
        fn monotone_response_to_offset(qf in any::<i8>(), regime in prop::bool::ANY) {
            let p = params();
            let mut rp = AsmRpState::new(500e6, C, 1e6);
            rp.regime = if regime { Regime::Sliding } else { Regime::Approach };
            let before = rp.rate_bps;
            rp.on_feedback(&frame(1, qf, 0), &p);
            if qf > 0 { prop_assert!(rp.rate_bps <= before); }
            if qf < 0 { prop_assert!(rp.rate_bps >= before); }
        }
    }

    #[test]
    fn per_adjustment_change_is_capped() {
        // Exhaustive over all code pairs in both regimes. Full scale is 127,
        // so -128 overshoots its cap by one code.
        let p = params();
        let full = 128.0 / 127.0;
        for regime in [Regime::Approach, Regime::Sliding] {
            for qf in i8::MIN..=i8::MAX {
                for dq in i8::MIN..=i8::MAX {
                    let mut rp = AsmRpState::new(500e6, C, 1e6);
                    rp.regime = regime;
                    let fb = compute_fb(qf as f64, dq as f64, p.w);
                    let active = select_regime(fb, qf as f64, dq as f64, &p, regime);
                    let caps = match active {
                        Regime::Approach => DEFAULT_CAPS_APPROACH,
                        Regime::Sliding => DEFAULT_CAPS_SLIDING,
                    };
                    let (ca, cb) = match select_branch(qf as f64, fb) {
                        Branch::Plus => (caps[0], caps[2]),
                        Branch::Minus => (caps[1], caps[3]),
                    };
                    rp.on_feedback(&frame(1, qf, dq), &p);
                    let delta = (rp.rate_bps - 500e6).abs();
                    let bound = (ca * (qf as f64).abs() + cb * (dq as f64).abs()) / 127.0 * C;
                    assert!(delta <= bound + 1e-3, "{qf} {dq}");
                    assert!(delta <= (ca + cb) * C * full + 1e-3);
                }
            }
        }
    }
}
