//! Piece-wise linear "teacher" SINR estimator and learning-rate distillation.
//!
//! The teacher fits a first-order spline `gamma_i(theta)` over a window of
//! delivered feedback by minimizing binary cross-entropy between the observed
//! NACKs and the sigmoid BLER predicted at `gamma_i(theta)`, plus a
//! total-variation penalty `beta * sum_k (theta_k - theta_{k-1})^2`.
//!
//! With the sigmoid model the per-sample gradient is exact:
//! `d BCE_i / d gamma = (nack_i - BLER_i) / s_i`.
//!
//! Distillation replays the student recursion for each candidate learning
//! rate and keeps the one closest, in squared error, to the teacher.

use serde::Serialize;

use crate::blermodel::{BlerTable, ClipConfig, Mcs};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistorySample {
    pub slot: f64,
    pub mcs: Mcs,
    pub tbs: u32,
    pub nack: bool,
    pub center: f64,
    /// Clipped sigmoid scale.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBatch {
    samples: Vec<HistorySample>,
    clip: ClipConfig,
}

impl HistoryBatch {
    /// Builds a batch from `(slot, mcs, tbs, nack)` tuples, resolving sigmoid
    /// parameters from `table`. Slots must be non-decreasing.
    pub fn from_feedback<I>(table: &BlerTable, feedback: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, Mcs, u32, bool)>,
    {
        let mut samples = Vec::new();
        for (slot, mcs, tbs, nack) in feedback {
            let e = table.entry(mcs, tbs)?;
            samples.push(HistorySample {
                slot: slot as f64,
                mcs,
                tbs,
                nack,
                center: e.center,
                scale: table.clip().clip_scale(e.scale),
            });
        }
        Self::new(samples, *table.clip())
    }

    pub fn new(samples: Vec<HistorySample>, clip: ClipConfig) -> Result<Self> {
        if samples.windows(2).any(|w| w[1].slot < w[0].slot) {
            return Err(Error::Config("history slots must be non-decreasing".into()));
        }
        Ok(HistoryBatch { samples, clip })
    }

    pub fn samples(&self) -> &[HistorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn clip(&self) -> &ClipConfig {
        &self.clip
    }

    fn span(&self) -> (f64, f64) {
        let first = self.samples[0].slot;
        let last = self.samples[self.samples.len() - 1].slot;
        (first, last.max(first + 1.0))
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> HistoryBatch {
        let samples = self.samples.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, s)| *s).collect();
        HistoryBatch { samples, clip: self.clip }
    }
}

/// First-order spline with `K` knots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplineModel {
    pub knots: Vec<f64>,
    pub theta: Vec<f64>,
    pub beta: f64,
}

impl SplineModel {
    /// `k` knots spread uniformly over `[first, last]`, all heights set to `init`.
    pub fn uniform(first: f64, last: f64, k: usize, init: f64, beta: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("spline needs at least 2 knots, got {k}")));
        }
        if !(last > first) {
            return Err(Error::Config(format!("empty spline span [{first}, {last}]")));
        }
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        let mut knots: Vec<f64> = (0..k).map(|j| first + (last - first) * j as f64 / (k - 1) as f64).collect();
        knots[k - 1] = last;
        Ok(SplineModel { knots, theta: vec![init; k], beta })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.knots[0]
    }

    pub fn last(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Index `k` and weight `w` such that the value at `slot` is
    /// `(1 - w) * theta[k] + w * theta[k + 1]`.
    fn locate(&self, slot: f64) -> Result<(usize, f64)> {
        if !(slot >= self.first() && slot <= self.last()) {
            return Err(Error::Extrapolation { slot, first: self.first(), last: self.last() });
        }
        let k = match self.knots.partition_point(|&t| t <= slot) {
            0 => 0,
            p => (p - 1).min(self.knots.len() - 2),
        };
        let (t0, t1) = (self.knots[k], self.knots[k + 1]);
        Ok((k, (slot - t0) / (t1 - t0)))
    }

    pub fn eval(&self, slot: f64) -> Result<f64> {
        let (k, w) = self.locate(slot)?;
        Ok((1.0 - w) * self.theta[k] + w * self.theta[k + 1])
    }

    /// Value of every triangle basis function at `slot`.
    pub fn basis(&self, slot: f64) -> Result<Vec<f64>> {
        let (k, w) = self.locate(slot)?;
        let mut b = vec![0.0; self.len()];
        b[k] = 1.0 - w;
        b[k + 1] += w;
        Ok(b)
    }

    pub fn total_variation(&self) -> f64 {
        self.beta * self.theta.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>()
    }

    pub fn total_variation_grad(&self) -> Vec<f64> {
        let th = &self.theta;
        let k = th.len();
        (0..k)
            .map(|j| {
                let v = if j == 0 {
                    th[0] - th[1]
                } else if j == k - 1 {
                    th[k - 1] - th[k - 2]
                } else {
                    2.0 * th[j] - th[j - 1] - th[j + 1]
                };
                2.0 * self.beta * v
            })
            .collect()
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Cross-entropy of one sample at SINR `gamma`, and its derivative in `gamma`.
fn sample_bce(s: &HistorySample, gamma: f64) -> (f64, f64) {
    let z = (gamma - s.center) / s.scale;
    let bler = 1.0 / (1.0 + z.exp());
    let loss = if s.nack { softplus(z) } else { softplus(-z) };
    let nack = if s.nack { 1.0 } else { 0.0 };
    (loss, (nack - bler) / s.scale)
}

/// Cross-entropy summed over the batch, without the regularizer.
pub fn bce_loss(model: &SplineModel, batch: &HistoryBatch) -> Result<f64> {
    let mut loss = 0.0;
    for s in batch.samples() {
        loss += sample_bce(s, model.eval(s.slot)?).0;
    }
    Ok(loss)
}

/// Regularized loss and its gradient with respect to the knot heights.
pub fn bce_loss_and_grad(model: &SplineModel, batch: &HistoryBatch) -> Result<(f64, Vec<f64>)> {
    let mut loss = model.total_variation();
    let mut grad = model.total_variation_grad();
    for s in batch.samples() {
        let (k, w) = model.locate(s.slot)?;
        let gamma = (1.0 - w) * model.theta[k] + w * model.theta[k + 1];
        let (l, dg) = sample_bce(s, gamma);
        loss += l;
        grad[k] += dg * (1.0 - w);
        grad[k + 1] += dg * w;
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GdParams {
    /// Initial stepsize in dB per unit gradient; halved whenever a step raises the loss.
    pub step: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for GdParams {
    fn default() -> Self {
        GdParams { step: 0.5, max_iters: 500, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFit {
    pub model: SplineModel,
    pub initial_loss: f64,
    /// Loss after every accepted step, starting with the initial loss.
    pub losses: Vec<f64>,
    pub iterations: usize,
}

impl TeacherFit {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().unwrap_or(&self.initial_loss)
    }
}

/// Batch gradient descent with backtracking on a `k`-knot spline spanning the batch.
pub fn fit_teacher(batch: &HistoryBatch, k: usize, beta: f64, init: f64, gd: &GdParams) -> Result<TeacherFit> {
    if batch.len() < k {
        return Err(Error::Config(format!("batch of {} samples is smaller than K = {k}", batch.len())));
    }
    let (first, last) = batch.span();
    fit_on_span(batch, SplineModel::uniform(first, last, k, init, beta)?, gd)
}

fn fit_on_span(batch: &HistoryBatch, mut model: SplineModel, gd: &GdParams) -> Result<TeacherFit> {
    let (mut loss, mut grad) = bce_loss_and_grad(&model, batch)?;
    if !loss.is_finite() {
        return Err(Error::Fit("non-finite teacher loss".into()));
    }
    let initial_loss = loss;
    let mut losses = vec![loss];
    let mut step = gd.step;
    let mut iterations = 0;
    while iterations < gd.max_iters {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < gd.grad_tol {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = model.clone();
            for (t, g) in trial.theta.iter_mut().zip(&grad) {
                *t -= step * g;
            }
            let (tl, tg) = bce_loss_and_grad(&trial, batch)?;
            if tl.is_finite() && tl < loss {
                model = trial;
                loss = tl;
                grad = tg;
                losses.push(loss);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(TeacherFit { model, initial_loss, losses, iterations })
}

/// Picks the knot count minimizing held-out cross-entropy.
///
/// Even-indexed samples train, odd-indexed samples test; knots always span the
/// full batch. Ties go to the smaller `K`.
pub fn select_knots_cv(batch: &HistoryBatch, candidates: &[usize], beta: f64, init: f64, gd: &GdParams) -> Result<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    match sorted.as_slice() {
        [] => return Err(Error::Config("no knot candidates".into())),
        [only] => return Ok(*only),
        _ => {}
    }
    if batch.len() < 2 {
        return Err(Error::Config("cross-validation needs at least 2 samples".into()));
    }
    let train = batch.subset(|i| i % 2 == 0);
    let test = batch.subset(|i| i % 2 == 1);
    let (first, last) = batch.span();
    let mut best: Option<(usize, f64)> = None;
    for &k in &sorted {
        if k > train.len() {
            break;
        }
        let fit = fit_on_span(&train, SplineModel::uniform(first, last, k, init, beta)?, gd)?;
        let score = bce_loss(&fit.model, &test)?;
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k).ok_or_else(|| Error::Config("batch too small for every knot candidate".into()))
}

/// Student estimate before each sample when replaying the update with learning rate `epsilon`.
pub fn replay_student(batch: &HistoryBatch, start: f64, epsilon: f64) -> Vec<f64> {
    let clip = batch.clip();
    let mut est = start;
    batch
        .samples()
        .iter()
        .map(|s| {
            let before = est;
            let bler = clip.clip_bler(1.0 / (1.0 + ((est - s.center) / s.scale).exp()));
            let nack = if s.nack { 1.0 } else { 0.0 };
            est += epsilon / s.scale * (bler - nack);
            before
        })
        .collect()
}

/// Learning rate from `grid` whose replayed student best matches the teacher.
///
/// The replay starts at the teacher's value at the first sample. Ties go to the smaller rate.
pub fn distill_learning_rate(batch: &HistoryBatch, teacher: &SplineModel, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty history batch".into()));
    }
    let target: Vec<f64> = batch.samples().iter().map(|s| teacher.eval(s.slot)).collect::<Result<_>>()?;
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &eps in &sorted {
        let replay = replay_student(batch, target[0], eps);
        let err: f64 = replay.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((eps, err));
        }
    }
    Ok(best.unwrap().0)
}

/// Settings for one distillation round.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub knot_candidates: Vec<usize>,
    pub beta: f64,
    pub epsilon_grid: Vec<f64>,
    pub gd: GdParams,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            knot_candidates: vec![2, 3, 4, 6, 8, 12, 16],
            beta: 0.0,
            epsilon_grid: (1..=30).map(|i| i as f64 / 10.0).collect(),
            gd: GdParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub epsilon: f64,
    pub knots: usize,
    pub teacher: SplineModel,
}

/// Cross-validates `K`, fits the teacher and distills the learning rate.
pub fn distill(batch: &HistoryBatch, cfg: &DistillConfig, init: f64) -> Result<DistillOutcome> {
    if batch.len() < 2 {
        return Err(Error::Config("history too short to distill".into()));
    }
    let knots = select_knots_cv(batch, &cfg.knot_candidates, cfg.beta, init, &cfg.gd)?;
    let fit = fit_teacher(batch, knots, cfg.beta, init, &cfg.gd)?;
    let epsilon = distill_learning_rate(batch, &fit.model, &cfg.epsilon_grid)?;
    Ok(DistillOutcome { epsilon, knots, teacher: fit.model })
}
