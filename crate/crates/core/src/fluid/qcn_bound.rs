//! Lower bound on the feedback delay beyond which the linearized QCN loop
//! loses stability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which radical to use for the phase-crossing frequency `ω*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaStarForm {
    /// `sqrt(a3²/2 + sqrt(a3⁴/4 + γ² a3²))`, dimensionally consistent.
    #[default]
    Corrected,
    /// `sqrt(a3²/2 + sqrt(a4³/4 + γ² a3²))`; kept for comparison.
    Printed,
}

/// Inputs of the QCN stability bound. Rates are in bits/s and converted to
/// packets/s with `packet_bits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcnStabilityParams {
    pub capacity_bps: f64,
    pub n: f64,
    pub p_s: f64,
    pub gd: f64,
    pub w: f64,
    pub r_ai_bps: f64,
    #[serde(default = "default_packet_bits")]
    pub packet_bits: f64,
    #[serde(default)]
    pub omega_star: OmegaStarForm,
}

fn default_packet_bits() -> f64 {
    12_000.0
}

/// Bundled parameter set for the bound.
pub const RECOMMENDED_PARAMS: &str = include_str!("../../scenarios/qcn_stability.toml");

impl QcnStabilityParams {
    pub fn recommended() -> Self {
        toml::from_str(RECOMMENDED_PARAMS).expect("bundled parameter file parses")
    }

    pub fn with_capacity(&self, capacity_bps: f64) -> Self {
        QcnStabilityParams {
            capacity_bps,
            ..self.clone()
        }
    }

    /// Derived constants and the delay bound.
    pub fn evaluate(&self) -> Result<QcnStability> {
        let p = self.p_s;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Analysis(format!("p_s = {p} must lie in (0, 1)")));
        }
        if !(self.n >= 1.0) || !(self.capacity_bps > 0.0) || !(self.packet_bits > 0.0) {
            return Err(Error::Analysis("need N >= 1 and positive capacity".into()));
        }
        let rc = self.capacity_bps / self.n / self.packet_bits;
        let r_ai = self.r_ai_bps / self.packet_bits;
        let eta = p / ((1.0 - p).powi(-100) - 1.0);
        let zeta = eta * (1.0 - p).powi(500);
        let a1 = eta * rc / 2.0 + eta * zeta * r_ai / (2.0 * p);
        let a2 = eta * rc / 2.0;
        let a3 = self.gd * self.w * rc;
        let a4 = p * rc * self.gd;
        if !(a3 > 0.0) {
            return Err(Error::Analysis(format!("a3 = {a3} must be positive")));
        }
        let b = p * rc;
        let alpha = b * (a1 - a2);
        let beta = b + a1;
        let gamma = self.n * a4 / a3;

        let inner = match self.omega_star {
            OmegaStarForm::Corrected => a3.powi(4) / 4.0,
            OmegaStarForm::Printed => a4.powi(3) / 4.0,
        } + gamma * gamma * a3 * a3;
        let omega_star = (a3 * a3 / 2.0 + inner.sqrt()).sqrt();

        let x = a3 * a3 + 2.0 * alpha - beta * beta;
        let disc = x * x + 4.0 * (a3 * a3 * gamma * gamma - alpha * alpha);
        if disc < 0.0 {
            return Err(Error::Analysis(format!("negative radicand {disc:e} in the gain-crossover frequency")));
        }
        let omega_bar_sq = (x + disc.sqrt()) / 2.0;
        if !(omega_bar_sq > 0.0) {
            return Err(Error::Analysis(format!(
                "gain-crossover frequency squared is {omega_bar_sq:e}"
            )));
        }
        let omega_bar = omega_bar_sq.sqrt();

        let tau_min = ((omega_star / b).atan() + (omega_star / gamma).atan()
            - (omega_bar / beta - alpha / (beta * omega_bar)).atan())
            / omega_bar;

        let out = QcnStability {
            eta,
            zeta,
            a1,
            a2,
            a3,
            a4,
            b,
            alpha,
            beta,
            gamma,
            omega_star,
            omega_bar,
            tau_min,
        };
        if [eta, zeta, a1, a2, a3, a4, b, alpha, beta, gamma, omega_star, omega_bar, tau_min]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Analysis(format!("non-finite constant in {out:?}")));
        }
        Ok(out)
    }

    pub fn delay_lower_bound(&self) -> Result<f64> {
        Ok(self.evaluate()?.tau_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcnStability {
    pub eta: f64,
    pub zeta: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub omega_star: f64,
    pub omega_bar: f64,
    pub tau_min: f64,
}

impl QcnStability {
    /// Open-loop gain magnitude `|G(jω)|` of the linearized loop.
    pub fn loop_gain(&self, omega: f64) -> f64 {
        let w2 = omega * omega;
        let num = self.a3 * ((w2 + self.b * self.b) * (w2 + self.gamma * self.gamma)).sqrt();
        let den = omega * ((self.alpha - w2).powi(2) + self.beta * self.beta * w2).sqrt();
        num / den
    }

    /// Largest frequency in `(lo, hi)` where the loop gain crosses 1 from
    /// above, found by a log-spaced scan refined with bisection.
    pub fn gain_crossover(&self, lo: f64, hi: f64) -> Option<f64> {
        let steps = 20_000;
        let ratio = (hi / lo).powf(1.0 / steps as f64);
        let mut found = None;
        let mut prev = lo;
        for _ in 0..steps {
            let next = prev * ratio;
            if self.loop_gain(prev) >= 1.0 && self.loop_gain(next) < 1.0 {
                let (mut a, mut b) = (prev, next);
                for _ in 0..100 {
                    let m = 0.5 * (a + b);
                    if self.loop_gain(m) >= 1.0 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                found = Some(0.5 * (a + b));
            }
            prev = next;
        }
        found
    }
}
