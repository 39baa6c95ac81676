//! Self-adaptive link adaptation (SALAD).
//!
//! Per slot the adapter
//!
//! 1. folds every delivered ACK/NACK into the integral error
//!    `E += tau - nack` and into the student SINR estimate
//!    `est += epsilon / s * (BLER(u, est, b) - nack)` (BLER and `s` clipped),
//! 2. when scheduled, tests the last `T` delivered records for SINR
//!    underestimation with the calibration bias score `S` and its variance under
//!    the null hypothesis, probing a high BLER target with probability
//!    `p_probe` when `S / sqrt(Var) > rho`,
//! 3. shifts the instantaneous target by `k_E * E` and picks the MCS by ILLA,
//! 4. every `n_eps` slots, re-selects `epsilon` by distillation from a
//!    piece-wise linear teacher.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blermodel::{BlerTable, Mcs};
use crate::error::{Error, Result};
use crate::illa::{IllaDecision, Selector};
use crate::sim::HarqFeedback;
use crate::teacher::{distill, DistillConfig, HistoryBatch, HistorySample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaladConfig {
    pub epsilon: f64,
    pub rho: f64,
    pub window: usize,
    pub p_probe: f64,
    pub tau_probe: f64,
    pub k_e: f64,
    /// Long-term BLER target. Set from the `[adapter]` section of a scenario.
    #[serde(skip)]
    pub tau: f64,
    /// Distillation period in slots; 0 disables distillation.
    pub n_eps: u64,
    pub adjust_only_when_not_probing: bool,
    pub distill: DistillConfig,
}

impl Default for SaladConfig {
    fn default() -> Self {
        SaladConfig {
            epsilon: 1.0,
            rho: 0.25,
            window: 15,
            p_probe: 0.15,
            tau_probe: 0.999,
            k_e: 0.01,
            tau: 0.1,
            n_eps: 0,
            adjust_only_when_not_probing: false,
            distill: DistillConfig::default(),
        }
    }
}

impl SaladConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if self.window < 1 {
            return bad("window must be >= 1".into());
        }
        if !(self.p_probe > 0.0 && self.p_probe <= 1.0) {
            return bad(format!("p_probe must be in (0, 1], got {}", self.p_probe));
        }
        if !(self.tau > 0.0 && self.tau < self.tau_probe && self.tau_probe <= 1.0) {
            return bad(format!("need 0 < tau ({}) < tau_probe ({}) <= 1", self.tau, self.tau_probe));
        }
        if !(self.k_e > 0.0) {
            return bad(format!("k_e must be > 0, got {}", self.k_e));
        }
        if self.n_eps > 0 && self.distill.epsilon_grid.is_empty() {
            return bad("distillation enabled with an empty epsilon grid".into());
        }
        Ok(())
    }
}

/// One delivered feedback as seen by the bias score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeedbackRecord {
    /// Clipped BLER predicted at update time with the then-current estimate.
    pub predicted_bler: f64,
    pub nack: bool,
    pub scale_used: f64,
    pub mcs: Mcs,
    pub tbs: u32,
}

/// Effect of one student update, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateInfo {
    pub predicted_bler: f64,
    pub scale: f64,
    pub nack: bool,
    pub increment: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DistillRecord {
    tx_slot: u64,
    mcs: Mcs,
    tbs: u32,
    nack: bool,
    estimate_before: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaladState {
    /// Student estimate, an offset on top of `reported_sinr`.
    pub gamma_est: f64,
    pub integral_error: f64,
    pub epsilon: f64,
    pub reported_sinr: f64,
    history: VecDeque<FeedbackRecord>,
    capacity: usize,
    distill_log: VecDeque<DistillRecord>,
}

impl SaladState {
    pub fn new(cfg: &SaladConfig, initial_estimate: f64) -> Self {
        SaladState {
            gamma_est: initial_estimate,
            integral_error: 0.0,
            epsilon: cfg.epsilon,
            reported_sinr: 0.0,
            history: VecDeque::with_capacity(cfg.window),
            capacity: cfg.window,
            distill_log: VecDeque::new(),
        }
    }

    pub fn estimate(&self) -> f64 {
        self.reported_sinr + self.gamma_est
    }

    pub fn history(&self) -> &VecDeque<FeedbackRecord> {
        &self.history
    }

    /// Student update and integral-error bookkeeping for one delivered feedback.
    pub fn student_update(&mut self, table: &BlerTable, tau: f64, fb: &HarqFeedback, keep_for_distill: bool) -> Result<UpdateInfo> {
        let estimate_before = self.estimate();
        let (predicted_bler, scale) = table.clipped_pair(fb.mcs, estimate_before, fb.tbs)?;
        let nack = f64::from(u8::from(fb.nack));
        let increment = self.epsilon / scale * (predicted_bler - nack);
        self.gamma_est += increment;
        self.integral_error += tau - nack;
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(FeedbackRecord { predicted_bler, nack: fb.nack, scale_used: scale, mcs: fb.mcs, tbs: fb.tbs });
        if keep_for_distill {
            self.distill_log.push_back(DistillRecord {
                tx_slot: fb.tx_slot,
                mcs: fb.mcs,
                tbs: fb.tbs,
                nack: fb.nack,
                estimate_before,
            });
        }
        Ok(UpdateInfo { predicted_bler, scale, nack: fb.nack, increment })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasScore {
    pub score: f64,
    pub variance: f64,
}

impl BiasScore {
    pub fn ratio(&self) -> f64 {
        self.score / self.variance.sqrt()
    }
}

/// Bias score over the `window` most recent records, or `None` if fewer are available.
pub fn bias_score<'a, I>(history: I, window: usize) -> Option<BiasScore>
where
    I: IntoIterator<Item = &'a FeedbackRecord>,
    I::IntoIter: DoubleEndedIterator,
{
    let mut n = 0usize;
    let (mut sum, mut var) = (0.0, 0.0);
    for r in history.into_iter().rev().take(window) {
        let nack = f64::from(u8::from(r.nack));
        sum += r.predicted_bler - nack;
        var += r.predicted_bler * (1.0 - r.predicted_bler);
        n += 1;
    }
    if n < window || window == 0 {
        return None;
    }
    let t = window as f64;
    Some(BiasScore { score: sum / t, variance: var / (t * t) })
}

/// Probe iff the normalized score exceeds `rho` and a uniform draw falls below `p_probe`.
///
/// The RNG is consumed only when the threshold condition holds.
pub fn probe_decision<R: RngCore + ?Sized>(score: &BiasScore, rho: f64, p_probe: f64, rng: &mut R) -> bool {
    score.ratio() > rho && rng.random::<f64>() < p_probe
}

pub fn instantaneous_target(integral_error: f64, probing: bool, cfg: &SaladConfig) -> f64 {
    let base = if probing { cfg.tau_probe } else { cfg.tau };
    if probing && cfg.adjust_only_when_not_probing {
        return base;
    }
    (base + cfg.k_e * integral_error).clamp(0.0, 1.0)
}

/// Per-slot inputs to an adapter.
#[derive(Debug, Clone, Copy)]
pub struct SlotContext<'a> {
    pub slot: u64,
    pub scheduled: bool,
    pub tbs: u32,
    pub feedback: &'a [HarqFeedback],
    pub reported_sinr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaladDecision {
    pub illa: IllaDecision,
    pub estimate: f64,
    pub instant_target: f64,
    pub bias_ratio: Option<f64>,
    pub probing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistillEvent {
    pub slot: u64,
    pub epsilon: f64,
    pub knots: usize,
}

/// SALAD adapter for one run.
#[derive(Debug, Clone)]
pub struct SaladAdapter {
    cfg: SaladConfig,
    table: Arc<BlerTable>,
    selector: Selector,
    state: SaladState,
    rng: ChaCha8Rng,
    last_updates: Vec<UpdateInfo>,
    distill_events: Vec<DistillEvent>,
    distill_failures: usize,
}

impl SaladAdapter {
    pub fn new(cfg: SaladConfig, table: Arc<BlerTable>, probe_rng: ChaCha8Rng, initial_estimate: f64) -> Result<Self> {
        cfg.validate()?;
        let state = SaladState::new(&cfg, initial_estimate);
        Ok(SaladAdapter {
            cfg,
            table,
            selector: Selector::Illa,
            state,
            rng: probe_rng,
            last_updates: Vec::new(),
            distill_events: Vec::new(),
            distill_failures: 0,
        })
    }

    pub fn with_selector(mut self, selector: Selector) -> Self {
        self.selector = selector;
        self
    }

    pub fn config(&self) -> &SaladConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SaladState {
        &self.state
    }

    /// Student updates applied during the most recent `step` or `absorb`.
    pub fn last_updates(&self) -> &[UpdateInfo] {
        &self.last_updates
    }

    pub fn distill_events(&self) -> &[DistillEvent] {
        &self.distill_events
    }

    pub fn distill_failures(&self) -> usize {
        self.distill_failures
    }

    /// Folds delivered feedback into the state without scheduling.
    pub fn absorb(&mut self, feedback: &[HarqFeedback]) -> Result<()> {
        self.last_updates.clear();
        let keep = self.cfg.n_eps > 0;
        for fb in feedback {
            let info = self.state.student_update(&self.table, self.cfg.tau, fb, keep)?;
            self.last_updates.push(info);
        }
        Ok(())
    }

    pub fn step(&mut self, ctx: &SlotContext<'_>) -> Result<Option<SaladDecision>> {
        if let Some(r) = ctx.reported_sinr {
            self.state.reported_sinr = r;
        }
        self.absorb(ctx.feedback)?;
        let decision = if ctx.scheduled { Some(self.decide(ctx.tbs)?) } else { None };
        self.maybe_distill(ctx.slot);
        Ok(decision)
    }

    fn decide(&mut self, tbs: u32) -> Result<SaladDecision> {
        let score = bias_score(&self.state.history, self.cfg.window);
        let probing = match &score {
            Some(s) => probe_decision(s, self.cfg.rho, self.cfg.p_probe, &mut self.rng),
            None => false,
        };
        let instant_target = instantaneous_target(self.state.integral_error, probing, &self.cfg);
        let estimate = self.state.estimate();
        let illa = self.selector.select(&self.table, estimate, instant_target, tbs)?;
        Ok(SaladDecision { illa, estimate, instant_target, bias_ratio: score.map(|s| s.ratio()), probing })
    }

    /// Re-selects the learning rate when `slot` is a multiple of the distillation period.
    pub fn maybe_distill(&mut self, slot: u64) {
        let period = self.cfg.n_eps;
        if period == 0 || slot == 0 || !slot.is_multiple_of(period) {
            return;
        }
        let start = slot.saturating_sub(period);
        while self.state.distill_log.front().is_some_and(|r| r.tx_slot < start) {
            self.state.distill_log.pop_front();
        }
        let min_len = self.cfg.distill.knot_candidates.iter().copied().min().unwrap_or(2).max(2) * 2;
        if self.state.distill_log.len() < min_len {
            return;
        }
        let clip = *self.table.clip();
        let samples: Result<Vec<HistorySample>> = self
            .state
            .distill_log
            .iter()
            .map(|r| {
                let e = self.table.entry(r.mcs, r.tbs)?;
                Ok(HistorySample {
                    slot: r.tx_slot as f64,
                    mcs: r.mcs,
                    tbs: r.tbs,
                    nack: r.nack,
                    center: e.center,
                    scale: clip.clip_scale(e.scale),
                })
            })
            .collect();
        let init = self.state.distill_log[0].estimate_before;
        let outcome = samples.and_then(|s| HistoryBatch::new(s, clip)).and_then(|b| distill(&b, &self.cfg.distill, init));
        match outcome {
            Ok(o) => {
                self.state.epsilon = o.epsilon;
                self.distill_events.push(DistillEvent { slot, epsilon: o.epsilon, knots: o.knots });
            }
            Err(e) => {
                self.distill_failures += 1;
                log::warn!("distillation at slot {slot} failed, keeping epsilon = {}: {e}", self.state.epsilon);
            }
        }
        self.state.distill_log.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rec(p: f64, nack: bool) -> FeedbackRecord {
        FeedbackRecord { predicted_bler: p, nack, scale_used: 1.0, mcs: Mcs(0), tbs: 100 }
    }

    /// Single-MCS table whose clipped BLER at estimate 0 is `p` and clipped scale is `s`.
    fn table_for(p: f64, s: f64) -> BlerTable {
        use crate::blermodel::{ClipConfig, McsTable, SigmoidBlerEntry};
        // BLER(0) = 1 / (1 + exp(-c / s)) = p  =>  c = s * ln(p / (1 - p))
        let center = s * (p / (1.0 - p)).ln();
        let mcs = McsTable::nr_table2().subset(&[Mcs(0)]).unwrap();
        BlerTable::new(mcs, vec![SigmoidBlerEntry { mcs: Mcs(0), cbs: 100, center, scale: s }], ClipConfig::default()).unwrap()
    }

    fn fb(nack: bool) -> HarqFeedback {
        HarqFeedback { tx_slot: 0, mcs: Mcs(0), tbs: 100, nack }
    }

    #[test]
    fn surprise_updates() {
        let cfg = SaladConfig::default();
        let t = table_for(0.99, 0.5);
        let mut s = SaladState::new(&cfg, 0.0);
        let info = s.student_update(&t, 0.1, &fb(false), false).unwrap();
        assert!((info.increment - 1.98).abs() < 1e-9);

        let mut s = SaladState::new(&cfg, 0.0);
        let info = s.student_update(&t, 0.1, &fb(true), false).unwrap();
        assert!((info.increment + 0.02).abs() < 1e-9, "{}", info.increment);

        let t = table_for(0.01, 0.5);
        let mut s = SaladState::new(&cfg, 0.0);
        let info = s.student_update(&t, 0.1, &fb(true), false).unwrap();
        assert!((info.increment + 1.98).abs() < 1e-9);
        assert!((s.gamma_est + 1.98).abs() < 1e-9);
        assert_eq!(s.integral_error, 0.1 - 1.0);
    }

    #[test]
    fn scale_and_bler_are_clipped_in_update() {
        let cfg = SaladConfig::default();
        let t = table_for(0.9999, 0.04);
        let mut s = SaladState::new(&cfg, 0.0);
        let info = s.student_update(&t, 0.1, &fb(false), false).unwrap();
        assert_eq!(info.scale, 0.5);
        assert_eq!(info.predicted_bler, 0.99);
        assert_eq!(s.history()[0].predicted_bler, 0.99);
    }

    #[test]
    fn bias_score_examples() {
        let h = [rec(0.5, false), rec(0.5, true), rec(0.5, false), rec(0.5, true)];
        let b = bias_score(&h, 4).unwrap();
        assert!(b.score.abs() < 1e-15);
        assert!((b.variance - 0.0625).abs() < 1e-15);

        let h = [rec(0.9, false), rec(0.9, false)];
        let b = bias_score(&h, 2).unwrap();
        assert!((b.score - 0.9).abs() < 1e-15);
        assert!((b.variance - 0.045).abs() < 1e-15);

        assert!(bias_score(&h, 3).is_none());
    }

    #[test]
    fn bias_score_uses_most_recent() {
        let h = [rec(0.1, true), rec(0.9, false), rec(0.9, false)];
        let b = bias_score(&h, 2).unwrap();
        assert!((b.score - 0.9).abs() < 1e-15);
    }

    #[test]
    fn probe_decision_rng_discipline() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        let zero = BiasScore { score: 0.0, variance: 0.01 };
        assert!(!probe_decision(&zero, 0.25, 1.0, &mut rng));
        assert_eq!(rng, before, "no draw below threshold");

        let strong = BiasScore { score: 1.0, variance: 0.01 };
        assert!(probe_decision(&strong, 0.25, 1.0, &mut rng));
        assert_ne!(rng, before);
    }

    #[test]
    fn probe_frequency_matches_p_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let strong = BiasScore { score: 1.0, variance: 0.01 };
        let n = 10_000;
        let hits = (0..n).filter(|_| probe_decision(&strong, 0.25, 0.15, &mut rng)).count();
        let f = hits as f64 / n as f64;
        assert!((f - 0.15).abs() < 0.01, "{f}");
    }

    #[test]
    fn instantaneous_target_examples() {
        let cfg = SaladConfig::default();
        assert_eq!(instantaneous_target(0.0, false, &cfg), 0.1);
        assert_eq!(instantaneous_target(-20.0, false, &cfg), 0.0);
        assert_eq!(instantaneous_target(50.0, true, &cfg), 1.0);
        let variant = SaladConfig { adjust_only_when_not_probing: true, ..cfg };
        assert_eq!(instantaneous_target(-20.0, true, &variant), 0.999);
        assert_eq!(instantaneous_target(-5.0, false, &variant), 0.1 - 0.05);
    }

    #[test]
    fn idle_slot_is_identity() {
        let cfg = SaladConfig::default();
        let mut a = SaladAdapter::new(cfg, Arc::new(BlerTable::bundled()), ChaCha8Rng::seed_from_u64(0), 3.0).unwrap();
        let before = a.state().clone();
        let out = a.step(&SlotContext { slot: 7, scheduled: false, tbs: 2000, feedback: &[], reported_sinr: None }).unwrap();
        assert!(out.is_none());
        assert_eq!(a.state(), &before);
    }

    #[test]
    fn warmup_disables_probing() {
        let cfg = SaladConfig::default();
        let mut a = SaladAdapter::new(cfg, Arc::new(BlerTable::bundled()), ChaCha8Rng::seed_from_u64(0), 3.0).unwrap();
        let d = a.step(&SlotContext { slot: 0, scheduled: true, tbs: 2000, feedback: &[], reported_sinr: None }).unwrap().unwrap();
        assert!(!d.probing && d.bias_ratio.is_none());
        assert_eq!(d.instant_target, 0.1);
    }

    #[test]
    fn distill_guards() {
        let cfg = SaladConfig { n_eps: 100, ..SaladConfig::default() };
        let mut a = SaladAdapter::new(cfg, Arc::new(BlerTable::bundled()), ChaCha8Rng::seed_from_u64(0), 3.0).unwrap();
        a.maybe_distill(50);
        a.maybe_distill(100);
        assert_eq!(a.state().epsilon, 1.0);
        assert!(a.distill_events().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(SaladConfig::default().validate().is_ok());
        assert!(SaladConfig { tau_probe: 0.05, ..SaladConfig::default() }.validate().is_err());
        assert!(SaladConfig { window: 0, ..SaladConfig::default() }.validate().is_err());
        assert!(SaladConfig { p_probe: 0.0, ..SaladConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn update_sign_and_surprise(p in 0.0f64..1.0, s in 0.1f64..20.0, nack: bool, eps in 0.01f64..5.0) {
            let t = table_for(p.clamp(1e-6, 1.0 - 1e-6), s);
            let cfg = SaladConfig { epsilon: eps, ..SaladConfig::default() };
            let mut st = SaladState::new(&cfg, 0.0);
            let info = st.student_update(&t, 0.1, &fb(nack), false).unwrap();
            if nack { prop_assert!(info.increment <= 0.0) } else { prop_assert!(info.increment >= 0.0) }
            let surprise = (info.predicted_bler - f64::from(u8::from(nack))).abs();
            prop_assert!((info.increment.abs() - eps / info.scale * surprise).abs() < 1e-12);
        }

        #[test]
        fn integral_error_is_sum(seq in prop::collection::vec(any::<bool>(), 0..200)) {
            let cfg = SaladConfig::default();
            let t = table_for(0.3, 1.0);
            let mut st = SaladState::new(&cfg, 0.0);
            for &n in &seq { st.student_update(&t, 0.1, &fb(n), false).unwrap(); }
            let expected: f64 = seq.iter().map(|&n| 0.1 - f64::from(u8::from(n))).sum();
            prop_assert!((st.integral_error - expected).abs() < 1e-9);
            prop_assert!(st.history().len() <= cfg.window);
        }
    }
}
