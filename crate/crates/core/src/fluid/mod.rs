//! Continuous (fluid) model of a switched rate controller feeding one
//! bottleneck queue, plus the stability bounds derived from it.
//!
//! State is `x1 = q - q0` (packets) and `x2 = N r - C` (packets/s). With one
//! gain pair `(a, b)` in force the model is
//!
//! ```text
//! dx1/dt = x2
//! dx2/dt = -N a x1 - (N b / (p C)) x2
//! ```
//!
//! and the switching line is `F_b = -x1 - (w / (p C)) x2 = 0`.

mod qcn_bound;
mod robustness;

pub use qcn_bound::{OmegaStarForm, QcnStabilityParams, QcnStability};
pub use robustness::{delay_robustness_bounds, delayed_rhs, drift_terms, drifted_rhs, h0_width, DelayRobustness, DriftTerms};

use num_complex::Complex64;

use crate::asm::{select_branch, AsmCoefficients, Branch};
use crate::error::{Error, Result};

/// Parameters of the fluid model. Gains are in fluid units: `N a` is in
/// 1/s² and `N b / (p C)` in 1/s.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidSystem {
    pub n: f64,
    /// Bottleneck capacity in packets/s.
    pub capacity_pps: f64,
    pub p: f64,
    pub w: f64,
    pub q0: f64,
    pub gains: AsmCoefficients,
    /// Feedback delay in seconds.
    pub tau: f64,
}

impl FluidSystem {
    /// Converts rate-limiter gains (bits/s per code unit) into fluid gains.
    ///
    /// Each source hears `p C / N` frames per second and a code unit is
    /// `scale` packets, so a per-frame gain `g` becomes `g p C / N` after
    /// conversion to packets.
    pub fn from_rate_gains(
        n: usize,
        capacity_bps: f64,
        packet_bytes: u32,
        p: f64,
        w: f64,
        q0: f64,
        gains: &AsmCoefficients,
        scale: f64,
    ) -> Self {
        let bits = 8.0 * packet_bytes as f64;
        let capacity_pps = capacity_bps / bits;
        let per_packet = |g: f64| g / (bits * scale) * p * capacity_pps / n as f64;
        FluidSystem {
            n: n as f64,
            capacity_pps,
            p,
            w,
            q0,
            gains: AsmCoefficients {
                a_plus: per_packet(gains.a_plus),
                a_minus: per_packet(gains.a_minus),
                b_plus: per_packet(gains.b_plus),
                b_minus: per_packet(gains.b_minus),
            },
            tau: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n >= 1.0) || !(self.capacity_pps > 0.0) || !(self.p > 0.0 && self.p <= 1.0) || !(self.w > 0.0) {
            return Err(Error::Analysis(format!(
                "need N >= 1, C > 0, 0 < p <= 1, w > 0 (got N={}, C={}, p={}, w={})",
                self.n, self.capacity_pps, self.p, self.w
            )));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::Analysis(format!("negative delay {}", self.tau)));
        }
        Ok(())
    }

    /// `p C`, the aggregate sampling rate.
    pub fn pc(&self) -> f64 {
        self.p * self.capacity_pps
    }

    /// Stiffness `N a` and damping `N b / (p C)` of one branch.
    pub fn branch_gains(&self, branch: Branch) -> (f64, f64) {
        let (a, b) = self.gains.pair(branch);
        (self.n * a, self.n * b / self.pc())
    }

    pub fn feedback(&self, x1: f64, x2: f64) -> f64 {
        -x1 - self.w / self.pc() * x2
    }

    /// Branch in force at a state: plus while heading for the switching
    /// line, minus once past it.
    pub fn branch_at(&self, x1: f64, x2: f64) -> Branch {
        select_branch(x1, self.feedback(x1, x2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingCheck {
    pub holds: bool,
    pub lhs_minus: f64,
    pub lhs_plus: f64,
}

fn sliding_lhs(sys: &FluidSystem, a: f64, b: f64) -> f64 {
    let pc2 = sys.pc() * sys.pc();
    sys.w * sys.w * sys.n / pc2 * a - sys.w * sys.n / pc2 * b + 1.0
}

/// Whether both branches point toward the switching line, so that a
/// trajectory reaching it stays on it.
pub fn sliding_condition(sys: &FluidSystem) -> SlidingCheck {
    let lhs_minus = sliding_lhs(sys, sys.gains.a_minus, sys.gains.b_minus);
    let lhs_plus = sliding_lhs(sys, sys.gains.a_plus, sys.gains.b_plus);
    SlidingCheck {
        holds: lhs_minus < 0.0 && lhs_plus > 0.0,
        lhs_minus,
        lhs_plus,
    }
}

/// Roots of `λ² + damping λ + stiffness = 0`, larger real part first.
pub fn quadratic_roots(damping: f64, stiffness: f64) -> (Complex64, Complex64) {
    let disc = Complex64::new(damping * damping / 4.0 - stiffness, 0.0).sqrt();
    let mid = Complex64::new(-damping / 2.0, 0.0);
    (mid + disc, mid - disc)
}

pub fn eigenvalues(sys: &FluidSystem, branch: Branch) -> (Complex64, Complex64) {
    let (stiffness, damping) = sys.branch_gains(branch);
    quadratic_roots(damping, stiffness)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryClass {
    /// Complex roots. `marginal` is set for a pure rotation (zero real part).
    Spiral { decay: f64, frequency: f64, marginal: bool },
    /// Real roots; the trajectory bends onto the eigen-directions
    /// `x2 = slope * x1`. `boundary` flags a zero root.
    Parabola { slow_slope: f64, fast_slope: f64, boundary: bool },
}

/// Classifies one branch. The plus branch is expected to spiral and the
/// minus branch to be parabolic; anything else means the gains are
/// inconsistent with sliding operation.
pub fn classify_trajectory(sys: &FluidSystem, branch: Branch) -> Result<TrajectoryClass> {
    let check = sliding_condition(sys);
    if !check.holds {
        return Err(Error::Analysis(format!(
            "sliding condition fails (lhs_minus = {:.4}, lhs_plus = {:.4})",
            check.lhs_minus, check.lhs_plus
        )));
    }
    let (l1, l2) = eigenvalues(sys, branch);
    let complex = l1.im.abs() > 0.0;
    match (branch, complex) {
        (Branch::Plus, true) if l1.re <= 0.0 => Ok(TrajectoryClass::Spiral {
            decay: l1.re,
            frequency: l1.im.abs(),
            marginal: l1.re == 0.0,
        }),
        (Branch::Minus, false) if l1.re <= 0.0 => Ok(TrajectoryClass::Parabola {
            slow_slope: l1.re,
            fast_slope: l2.re,
            boundary: l1.re == 0.0 || l2.re == 0.0,
        }),
        _ => Err(Error::Analysis(format!(
            "{branch:?} branch has roots {l1}, {l2}, which do not match its expected shape"
        ))),
    }
}

/// `q0 + (q_init - q0) exp(-p C t / w)`: the queue while the state slides
/// along the switching line.
pub fn sliding_queue_solution(q_init: f64, sys: &FluidSystem, t: f64) -> f64 {
    sys.q0 + (q_init - sys.q0) * (-sys.pc() * t / sys.w).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Switched,
    Frozen(Branch),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `Δx2 / Δx1` between consecutive samples; `None` where `Δx1 = 0`.
    pub fn slopes(&self) -> Vec<Option<f64>> {
        self.x1
            .windows(2)
            .zip(self.x2.windows(2))
            .map(|(q, a)| {
                let dq = q[1] - q[0];
                (dq != 0.0).then(|| (a[1] - a[0]) / dq)
            })
            .collect()
    }
}

fn rhs(stiffness: f64, damping: f64, force: [f64; 2], x2: f64) -> [f64; 2] {
    [x2, -stiffness * force[0] - damping * force[1]]
}

/// Fixed-step RK4 integration of the (optionally delayed) switched model.
///
/// The branch is chosen once per step from the delayed state at the start
/// of the step. Restoring forces act on the delayed state, which is
/// linearly interpolated from the step history; before `t = 0` the state is
/// taken as `x0`.
pub fn integrate_fluid(sys: &FluidSystem, x0: [f64; 2], t_end: f64, dt: f64, mode: BranchMode) -> Result<Trajectory> {
    sys.validate()?;
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::Analysis(format!("bad step {dt} or horizon {t_end}")));
    }
    if sys.tau > 0.0 && dt > sys.tau / 10.0 {
        return Err(Error::Analysis(format!(
            "step {dt} too coarse for delay {}; need dt <= tau/10",
            sys.tau
        )));
    }
    let steps = (t_end / dt).round() as usize;
    let mut out = Trajectory {
        t: Vec::with_capacity(steps + 1),
        x1: Vec::with_capacity(steps + 1),
        x2: Vec::with_capacity(steps + 1),
    };
    out.t.push(0.0);
    out.x1.push(x0[0]);
    out.x2.push(x0[1]);

    let norm0 = x0[0].hypot(x0[1]);
    let limit = if norm0 > 0.0 { 1e9 * norm0 } else { f64::INFINITY };
    let delayed = sys.tau > 0.0;
    let lag = sys.tau;

    // Delayed state at absolute time `s` from the step history.
    let history = |out: &Trajectory, s: f64| -> [f64; 2] {
        if s <= 0.0 {
            return x0;
        }
        let pos = s / dt;
        let i = (pos.floor() as usize).min(out.t.len() - 1);
        if i + 1 >= out.t.len() {
            return [out.x1[i], out.x2[i]];
        }
        let f = pos - i as f64;
        [
            out.x1[i] + f * (out.x1[i + 1] - out.x1[i]),
            out.x2[i] + f * (out.x2[i + 1] - out.x2[i]),
        ]
    };

    let mut x = x0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let probe = if delayed { history(&out, t - lag) } else { x };
        let branch = match mode {
            BranchMode::Switched => sys.branch_at(probe[0], probe[1]),
            BranchMode::Frozen(b) => b,
        };
        let (stiffness, damping) = sys.branch_gains(branch);
        let force_at = |s: f64, state: [f64; 2]| if delayed { history(&out, s - lag) } else { state };

        let k1 = rhs(stiffness, damping, force_at(t, x), x[1]);
        let s2 = [x[0] + 0.5 * dt * k1[0], x[1] + 0.5 * dt * k1[1]];
        let k2 = rhs(stiffness, damping, force_at(t + 0.5 * dt, s2), s2[1]);
        let s3 = [x[0] + 0.5 * dt * k2[0], x[1] + 0.5 * dt * k2[1]];
        let k3 = rhs(stiffness, damping, force_at(t + 0.5 * dt, s3), s3[1]);
        let s4 = [x[0] + dt * k3[0], x[1] + dt * k3[1]];
        let k4 = rhs(stiffness, damping, force_at(t + dt, s4), s4[1]);
        for j in 0..2 {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }

        let norm = x[0].hypot(x[1]);
        if !norm.is_finite() || norm > limit {
            return Err(Error::Divergence { t: t + dt, norm });
        }
        out.t.push((k + 1) as f64 * dt);
        out.x1.push(x[0]);
        out.x2.push(x[1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The unit-scale example: w=2, N=1, p=1, C=1.
    pub(crate) fn normalized() -> FluidSystem {
        FluidSystem {
            n: 1.0,
            capacity_pps: 1.0,
            p: 1.0,
            w: 2.0,
            q0: 0.0,
            gains: AsmCoefficients {
                a_plus: 1.0,
                a_minus: 0.0,
                b_plus: 0.0,
                b_minus: 1.0,
            },
            tau: 0.0,
        }
    }

    fn close(a: Complex64, re: f64, im: f64) -> bool {
        (a.re - re).abs() < 1e-12 && (a.im - im).abs() < 1e-12
    }

    #[test]
    fn sliding_condition_normalized() {
        let c = sliding_condition(&normalized());
        assert_eq!(c.lhs_minus, -1.0);
        assert_eq!(c.lhs_plus, 5.0);
        assert!(c.holds);
    }

    #[test]
    fn sliding_condition_fails_without_minus_damping() {
        let mut s = normalized();
        s.gains.b_minus = 0.0;
        for a in [0.0, 0.5, 3.0] {
            s.gains.a_minus = a;
            let c = sliding_condition(&s);
            assert!(c.lhs_minus >= 1.0);
            assert!(!c.holds);
        }
    }

    #[test]
    fn quadratic_root_cases() {
        let (a, b) = quadratic_roots(0.0, 1.0);
        assert!(close(a, 0.0, 1.0) && close(b, 0.0, -1.0));
        let (a, b) = quadratic_roots(3.0, 2.0);
        assert!(close(a, -1.0, 0.0) && close(b, -2.0, 0.0));
        let (a, b) = quadratic_roots(2.0, 2.0);
        assert!(close(a, -1.0, 1.0) && close(b, -1.0, -1.0));
    }

    #[test]
    fn classification() {
        let s = normalized();
        assert!(matches!(
            classify_trajectory(&s, Branch::Plus).unwrap(),
            TrajectoryClass::Spiral { marginal: true, .. }
        ));
        match classify_trajectory(&s, Branch::Minus).unwrap() {
            TrajectoryClass::Parabola {
                slow_slope,
                fast_slope,
                boundary,
            } => {
                assert_eq!(slow_slope, 0.0);
                assert_eq!(fast_slope, -1.0);
                assert!(boundary);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = s.clone();
        bad.gains.b_minus = 0.0;
        assert!(classify_trajectory(&bad, Branch::Plus).is_err());
    }

    #[test]
    fn sliding_solution_properties() {
        let s = FluidSystem { q0: 64.0, ..normalized() };
        assert_eq!(sliding_queue_solution(64.0, &s, 3.0), 64.0);
        let t = s.w / s.pc();
        assert!((sliding_queue_solution(164.0, &s, t) - 64.0 - 100.0 / std::f64::consts::E).abs() < 1e-9);
        let half = s.w * std::f64::consts::LN_2 / s.pc();
        assert!((sliding_queue_solution(164.0, &s, half) - 114.0).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_stays_put() {
        let tr = integrate_fluid(&normalized(), [0.0, 0.0], 5.0, 0.01, BranchMode::Switched).unwrap();
        assert!(tr.x1.iter().chain(&tr.x2).all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_linear_system_matches_closed_form() {
        // λ = -1, -2: x1 = 2 e^{-t} - e^{-2t} from (1, 0).
        let mut s = normalized();
        s.gains.a_minus = 2.0;
        s.gains.b_minus = 3.0;
        let tr = integrate_fluid(&s, [1.0, 0.0], 1.0, 1e-3, BranchMode::Frozen(Branch::Minus)).unwrap();
        let want = 2.0 / std::f64::consts::E - (-2.0f64).exp();
        assert!((tr.x1.last().unwrap() - want).abs() < 1e-9);
        assert!((want - 0.6004).abs() < 1e-4);
    }

    #[test]
    fn delay_needs_fine_step() {
        let s = FluidSystem { tau: 0.1, ..normalized() };
        assert!(integrate_fluid(&s, [1.0, 0.0], 1.0, 0.05, BranchMode::Switched).is_err());
        assert!(integrate_fluid(&s, [1.0, 0.0], 1.0, 0.01, BranchMode::Switched).is_ok());
    }

    #[test]
    fn runaway_is_reported_as_divergence() {
        let mut s = normalized();
        s.gains.a_minus = -1.0;
        s.gains.b_minus = -5.0;
        let err = integrate_fluid(&s, [1.0, 0.0], 100.0, 1e-3, BranchMode::Frozen(Branch::Minus)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn slope_column() {
        let tr = Trajectory {
            t: vec![0.0, 1.0, 2.0],
            x1: vec![0.0, 2.0, 2.0],
            x2: vec![1.0, 5.0, 7.0],
        };
        assert_eq!(tr.slopes(), vec![Some(2.0), None]);
    }

    #[test]
    fn gain_conversion_round_trips_through_sliding_lhs() {
        // With the rate gains chosen so that w a = b, the minus inequality
        // sits exactly at 1 whatever the unit conversion.
        let g = AsmCoefficients {
            a_plus: 1e6,
            a_minus: 1e5,
            b_plus: 1e6,
            b_minus: 32e5,
        };
        let s = FluidSystem::from_rate_gains(3, 1e9, 1500, 0.01, 32.0, 64.0, &g, 1.0);
        assert!((sliding_condition(&s).lhs_minus - 1.0).abs() < 1e-12);
    }
}
