//! Delay robustness of the switched model: how far a feedback delay can
//! push the state off the switching line, and the equivalent view of the
//! delay as drifted gains plus a bounded disturbance.

use crate::error::{Error, Result};

use super::FluidSystem;

/// Gains split into mean and half-spread, and the delay-dependent bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayRobustness {
    pub tau: f64,
    /// `1 / (p C)`.
    pub k: f64,
    /// `N (a+ + a-) / 2`.
    pub a_avg: f64,
    /// `N (a+ - a-) / 2`.
    pub a_dev: f64,
    pub b_avg: f64,
    pub b_dev: f64,
    pub gamma: f64,
    pub gamma_dev: f64,
    /// `|ε1| <= nu1 L`.
    pub nu1: f64,
    /// `|ε2| <= nu2 L`.
    pub nu2: f64,
    /// Largest gain drift, per unit of `L`.
    pub drift_amplitude: f64,
    /// Disturbance bound per unit of `L`.
    pub e1_rate: f64,
}

impl DelayRobustness {
    pub fn eps1_bound(&self, l: f64) -> f64 {
        self.nu1 * l
    }

    pub fn eps2_bound(&self, l: f64) -> f64 {
        self.nu2 * l
    }

    /// Bound on the disturbance `A ε1 + K B ε2` when `|x1| + |x2| = l`.
    pub fn e1_bound(&self, l: f64) -> f64 {
        self.e1_rate * l
    }
}

pub fn delay_robustness_bounds(sys: &FluidSystem, tau: f64) -> Result<DelayRobustness> {
    if !(tau >= 0.0) {
        return Err(Error::Analysis(format!("negative delay {tau}")));
    }
    let g = &sys.gains;
    let n = sys.n;
    let k = 1.0 / sys.pc();
    let a_avg = n * (g.a_plus + g.a_minus) / 2.0;
    let a_dev = n * (g.a_plus - g.a_minus) / 2.0;
    let b_avg = n * (g.b_plus + g.b_minus) / 2.0;
    let b_dev = n * (g.b_plus - g.b_minus) / 2.0;
    let gamma = a_avg.hypot(b_avg);
    let gamma_dev = a_dev.hypot(b_dev);
    let growth = ((1.0 + gamma + gamma_dev) * tau).exp();
    let nu1 = tau * growth;
    let nu2 = tau * (gamma + gamma_dev) * growth;
    Ok(DelayRobustness {
        tau,
        k,
        a_avg,
        a_dev,
        b_avg,
        b_dev,
        gamma,
        gamma_dev,
        nu1,
        nu2,
        drift_amplitude: a_dev.abs() * nu1 + k * b_dev.abs() * nu2,
        e1_rate: a_avg * nu1 + k * b_avg * nu2,
    })
}

/// Half-width of the region around the stable point in which a disturbance
/// of size `e1` can keep the state off the switching line.
pub fn h0_width(sys: &FluidSystem, e1: f64) -> Result<f64> {
    let pc2 = sys.pc() * sys.pc();
    let w = sys.w;
    let n = sys.n;
    let g = &sys.gains;
    let mut widest: f64 = 0.0;
    for (a, b, label) in [(g.a_minus, g.b_minus, "minus"), (g.a_plus, g.b_plus, "plus")] {
        let den = (w * w * n * a - w * n * b + pc2).abs();
        if den == 0.0 {
            return Err(Error::Analysis(format!("{label} branch sits exactly on the sliding boundary")));
        }
        widest = widest.max(w * w * e1.abs() / den);
    }
    Ok(widest)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `dx2/dt` of the delayed model at state `x` with delay offsets
/// `eps = x(t - τ) - x(t)` and delayed feedback sign `fb_sign`.
pub fn delayed_rhs(r: &DelayRobustness, x: [f64; 2], eps: [f64; 2], fb_sign: f64) -> f64 {
    let d1 = x[0] + eps[0];
    let d2 = x[1] + eps[1];
    -r.a_avg * d1 - r.k * r.b_avg * d2 - (r.a_dev * d1.abs() + r.k * r.b_dev * d2.abs()) * sign(fb_sign)
}

/// Drifted gains that absorb the delay into the undelayed switching law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftTerms {
    pub phi: f64,
    pub a_drifted: f64,
    /// Drifted damping, already multiplied by `K`.
    pub b_drifted: f64,
}

pub fn drift_terms(r: &DelayRobustness, x: [f64; 2], eps: [f64; 2], fb_sign: f64) -> Result<DriftTerms> {
    let l = x[0].abs() + x[1].abs();
    if l == 0.0 {
        return Err(Error::Analysis("drift undefined at the stable point".into()));
    }
    let phi = (r.a_dev * ((x[0] + eps[0]).abs() - x[0].abs()) + r.k * r.b_dev * ((x[1] + eps[1]).abs() - x[1].abs()))
        * sign(fb_sign);
    Ok(DriftTerms {
        phi,
        a_drifted: r.a_avg + phi / l * sign(x[0]),
        b_drifted: r.k * r.b_avg + phi / l * sign(x[1]),
    })
}

/// `dx2/dt` written as the undelayed law with drifted gains plus the
/// disturbance `A ε1 + K B ε2`.
pub fn drifted_rhs(r: &DelayRobustness, x: [f64; 2], eps: [f64; 2], fb_sign: f64) -> Result<f64> {
    let d = drift_terms(r, x, eps, fb_sign)?;
    Ok(-d.a_drifted * x[0] - d.b_drifted * x[1] - r.a_avg * eps[0] - r.k * r.b_avg * eps[1]
        - (r.a_dev * x[0].abs() + r.k * r.b_dev * x[1].abs()) * sign(fb_sign))
}
