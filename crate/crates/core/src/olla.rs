//! Outer-loop link adaptation (OLLA).
//!
//! The offset `delta` moves up by `delta_ack = tau / (1 - tau) * delta_nack`
//! on every ACK and down by `delta_nack` on every NACK, so the loop is at rest
//! when the NACK ratio equals `tau`. The same recursion written on the
//! estimate itself is a constant-stepsize stochastic approximation:
//!
//! ```text
//! est <- est + delta_nack / (1 - tau) * (tau - nack)
//! ```

use serde::{Deserialize, Serialize};

use crate::blermodel::BlerTable;
use crate::error::{Error, Result};
use crate::illa::{select_mcs_illa, IllaDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OllaConfig {
    pub tau: f64,
    pub delta_nack: f64,
}

impl Default for OllaConfig {
    fn default() -> Self {
        OllaConfig { tau: 0.1, delta_nack: 1.0 }
    }
}

impl OllaConfig {
    pub fn new(tau: f64, delta_nack: f64) -> Result<Self> {
        let cfg = OllaConfig { tau, delta_nack };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("olla tau must be in (0, 1), got {}", self.tau)));
        }
        if !(self.delta_nack > 0.0 && self.delta_nack.is_finite()) {
            return Err(Error::Config(format!("olla delta_nack must be > 0, got {}", self.delta_nack)));
        }
        Ok(())
    }

    pub fn delta_ack(&self) -> f64 {
        self.tau / (1.0 - self.tau) * self.delta_nack
    }

    /// Constant SA stepsize `delta_nack / (1 - tau)`.
    pub fn sa_stepsize(&self) -> f64 {
        self.delta_nack / (1.0 - self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct OllaState {
    pub offset: f64,
    pub reported_sinr: f64,
}

impl OllaState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Offset-form update.
    pub fn on_feedback(&mut self, cfg: &OllaConfig, nack: bool) {
        if nack {
            self.offset -= cfg.delta_nack;
        } else {
            self.offset += cfg.delta_ack();
        }
    }

    /// SA-form update, applied to the offset (the reported SINR is a constant shift).
    pub fn sa_update(&mut self, cfg: &OllaConfig, nack: bool) {
        self.offset += sa_increment(cfg, nack);
    }

    /// Overwrites the reported SINR; the offset is kept.
    pub fn ingest_report(&mut self, reported_sinr: f64) {
        self.reported_sinr = reported_sinr;
    }

    pub fn estimate(&self) -> f64 {
        self.reported_sinr + self.offset
    }

    pub fn select(&self, table: &BlerTable, tau: f64, tbs: u32) -> Result<IllaDecision> {
        select_mcs_illa(table, self.estimate(), tau, tbs)
    }
}

pub fn sa_increment(cfg: &OllaConfig, nack: bool) -> f64 {
    cfg.sa_stepsize() * (cfg.tau - f64::from(u8::from(nack)))
}

/// Increment of OLLA with a time-varying NACK step and target:
/// `delta_nack_t / (1 - tau_t) * (tau_t - nack)`.
pub fn time_adaptive_increment(delta_nack: f64, tau: f64, nack: bool) -> f64 {
    delta_nack / (1.0 - tau) * (tau - f64::from(u8::from(nack)))
}
