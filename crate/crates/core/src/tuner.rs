//! Nelder-Mead search over SALAD parameters.
//!
//! The objective is `w_tp * TP / TP_0 - w_bler * MSD / MSD_0`, averaged over a
//! fixed set of scenarios and seeds, where `TP` is the normalized throughput,
//! `MSD` the mean squared deviation of the sliding BLER from the target, and
//! the `_0` values come from the starting configuration. Every evaluation
//! reuses the same seeds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blermodel::BlerTable;
use crate::error::{Error, Result};
use crate::salad::SaladConfig;
use crate::sim::{run_scenario, AdapterKind, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TunableParam {
    Epsilon,
    Rho,
    Window,
    PProbe,
    TauProbe,
    KE,
}

impl TunableParam {
    pub fn name(self) -> &'static str {
        match self {
            TunableParam::Epsilon => "epsilon",
            TunableParam::Rho => "rho",
            TunableParam::Window => "window",
            TunableParam::PProbe => "p_probe",
            TunableParam::TauProbe => "tau_probe",
            TunableParam::KE => "k_e",
        }
    }

    pub fn get(self, cfg: &SaladConfig) -> f64 {
        match self {
            TunableParam::Epsilon => cfg.epsilon,
            TunableParam::Rho => cfg.rho,
            TunableParam::Window => cfg.window as f64,
            TunableParam::PProbe => cfg.p_probe,
            TunableParam::TauProbe => cfg.tau_probe,
            TunableParam::KE => cfg.k_e,
        }
    }

    pub fn set(self, cfg: &mut SaladConfig, v: f64) {
        match self {
            TunableParam::Epsilon => cfg.epsilon = v,
            TunableParam::Rho => cfg.rho = v,
            TunableParam::Window => cfg.window = v.round().max(1.0) as usize,
            TunableParam::PProbe => cfg.p_probe = v,
            TunableParam::TauProbe => cfg.tau_probe = v,
            TunableParam::KE => cfg.k_e = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBound {
    pub name: TunableParam,
    pub lower: f64,
    pub upper: f64,
}

// ---------------------------------------------------------------------------
// Nelder-Mead
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmCoefficients {
    pub reflect: f64,
    pub expand: f64,
    pub contract: f64,
    pub shrink: f64,
}

impl Default for NmCoefficients {
    fn default() -> Self {
        NmCoefficients { reflect: 1.0, expand: 2.0, contract: 0.5, shrink: 0.5 }
    }
}

pub const DEFAULT_BUDGET: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmIteration {
    pub iteration: usize,
    pub evaluations: usize,
    pub best_value: f64,
    pub best_x: Vec<f64>,
    pub operation: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    /// Best vertex ever evaluated.
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// One entry per iteration, plus iteration 0 for the initial simplex.
    pub log: Vec<NmIteration>,
}

fn clamp(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Initial simplex: `x0` plus one vertex per axis moved by 5% of the box
/// width (backwards when forward would leave the box).
pub fn initial_simplex(x0: &[f64], lower: &[f64], upper: &[f64]) -> Vec<Vec<f64>> {
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let h = 0.05 * (upper[i] - lower[i]);
        let mut v = x0.to_vec();
        v[i] = if x0[i] + h <= upper[i] { x0[i] + h } else { x0[i] - h };
        simplex.push(v);
    }
    simplex
}

/// Minimizes `f` inside the box, with clamped candidate vertices.
///
/// `max_iters = 0` evaluates and returns `x0`.
pub fn nelder_mead<F>(f: F, x0: &[f64], lower: &[f64], upper: &[f64], max_iters: usize) -> NmResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    try_nelder_mead(|x| Ok::<_, Error>(f(x)), x0, lower, upper, max_iters).expect("infallible objective")
}

/// [`nelder_mead`] for objectives that can fail; the first error aborts the search.
pub fn try_nelder_mead<F, E>(f: F, x0: &[f64], lower: &[f64], upper: &[f64], max_iters: usize) -> std::result::Result<NmResult, E>
where
    F: Fn(&[f64]) -> std::result::Result<f64, E> + Sync,
    E: Send,
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n, "bound dimensions");
    let c = NmCoefficients::default();
    let mut x0 = x0.to_vec();
    clamp(&mut x0, lower, upper);

    let mut evaluations = 0usize;
    let mut best: (Vec<f64>, f64);
    let mut log = Vec::new();

    if max_iters == 0 || n == 0 {
        let v = f(&x0)?;
        log.push(NmIteration { iteration: 0, evaluations: 1, best_value: v, best_x: x0.clone(), operation: "init" });
        return Ok(NmResult { x: x0, value: v, evaluations: 1, log });
    }

    let evaluate_all = |pts: &[Vec<f64>]| -> std::result::Result<Vec<f64>, E> { pts.par_iter().map(|p| f(p)).collect() };

    let points = initial_simplex(&x0, lower, upper);
    let values = evaluate_all(&points)?;
    evaluations += points.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = points.into_iter().zip(values).collect();
    best = simplex.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().expect("non-empty simplex");
    log.push(NmIteration { iteration: 0, evaluations, best_value: best.1, best_x: best.0.clone(), operation: "init" });

    for iteration in 1..=max_iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&worst.0).map(|(c, w)| c + t * (c - w)).collect();
            clamp(&mut p, lower, upper);
            p
        };

        let xr = along(c.reflect);
        let fr = f(&xr)?;
        evaluations += 1;
        let track = |p: &Vec<f64>, v: f64, best: &mut (Vec<f64>, f64)| {
            if v < best.1 {
                *best = (p.clone(), v);
            }
        };
        track(&xr, fr, &mut best);

        let operation;
        if fr < simplex[0].1 {
            let xe = along(c.reflect * c.expand);
            let fe = f(&xe)?;
            evaluations += 1;
            track(&xe, fe, &mut best);
            if fe < fr {
                simplex[n] = (xe, fe);
                operation = "expand";
            } else {
                simplex[n] = (xr, fr);
                operation = "reflect";
            }
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            operation = "reflect";
        } else {
            let (xc, fc, target) = if fr < worst.1 {
                let xc = along(c.reflect * c.contract);
                let fc = f(&xc)?;
                (xc, fc, fr)
            } else {
                let xc = along(-c.contract);
                let fc = f(&xc)?;
                (xc, fc, worst.1)
            };
            evaluations += 1;
            track(&xc, fc, &mut best);
            if fc < target {
                simplex[n] = (xc, fc);
                operation = "contract";
            } else {
                let x_best = simplex[0].0.clone();
                let shrunk: Vec<Vec<f64>> = simplex[1..]
                    .iter()
                    .map(|(p, _)| {
                        let mut q: Vec<f64> = x_best.iter().zip(p).map(|(b, v)| b + c.shrink * (v - b)).collect();
                        clamp(&mut q, lower, upper);
                        q
                    })
                    .collect();
                let vals = evaluate_all(&shrunk)?;
                evaluations += shrunk.len();
                for (i, (p, v)) in shrunk.into_iter().zip(vals).enumerate() {
                    track(&p, v, &mut best);
                    simplex[i + 1] = (p, v);
                }
                operation = "shrink";
            }
        }
        log.push(NmIteration { iteration, evaluations, best_value: best.1, best_x: best.0.clone(), operation });
    }

    Ok(NmResult { x: best.0, value: best.1, evaluations, log })
}

// ---------------------------------------------------------------------------
// SALAD tuning problem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TuningProblem {
    pub params: Vec<ParamBound>,
    pub w_tp: f64,
    pub w_bler: f64,
    /// Scenarios are run with the SALAD adapter regardless of their `kind`.
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    /// Starting configuration; also defines the normalizers.
    pub start: SaladConfig,
    pub budget: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RawScore {
    pub normalized_tp: f64,
    pub bler_msd: f64,
}

impl TuningProblem {
    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::Config("tuning problem has no free parameters".into()));
        }
        for p in &self.params {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(Error::Config(format!("bounds of {} must be finite with lower < upper", p.name.name())));
            }
        }
        if !(self.w_tp >= 0.0 && self.w_bler >= 0.0 && self.w_tp + self.w_bler > 0.0) {
            return Err(Error::Config("weights must be >= 0 and not both zero".into()));
        }
        if self.scenarios.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("tuning problem needs at least one scenario and one seed".into()));
        }
        // every constraint is an interval per parameter, so the two corners cover the box
        for corner in [self.lower(), self.upper()] {
            self.config_at(&corner)
                .validate()
                .map_err(|e| Error::Config(format!("tuning bounds reach an invalid SALAD config: {e}")))?;
        }
        Ok(())
    }

    pub fn lower(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.upper).collect()
    }

    pub fn x0(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.name.get(&self.start).clamp(p.lower, p.upper)).collect()
    }

    /// Start configuration with the free parameters replaced (clamped to bounds).
    pub fn config_at(&self, x: &[f64]) -> SaladConfig {
        let mut cfg = self.start.clone();
        for (p, &v) in self.params.iter().zip(x) {
            p.name.set(&mut cfg, v.clamp(p.lower, p.upper));
        }
        cfg
    }

    /// Mean normalized throughput and BLER deviation over all scenario/seed pairs.
    pub fn raw_score(&self, cfg: &SaladConfig, table: &Arc<BlerTable>) -> Result<RawScore> {
        let runs: Vec<(Scenario, u64)> =
            self.scenarios.iter().flat_map(|s| self.seeds.iter().map(move |&seed| (s.clone(), seed))).collect();
        let scores: Vec<RawScore> = runs
            .into_par_iter()
            .map(|(mut s, seed)| {
                s.seed = seed;
                s.adapter.kind = AdapterKind::Salad;
                s.adapter.salad = SaladConfig { tau: s.adapter.tau, ..cfg.clone() };
                let m = run_scenario(&s, table.clone())?.metrics;
                Ok(RawScore { normalized_tp: m.normalized_tp, bler_msd: m.bler_msd })
            })
            .collect::<Result<_>>()?;
        let k = scores.len() as f64;
        Ok(RawScore {
            normalized_tp: scores.iter().map(|r| r.normalized_tp).sum::<f64>() / k,
            bler_msd: scores.iter().map(|r| r.bler_msd).sum::<f64>() / k,
        })
    }
}

/// Objective evaluator with normalizers fixed at the start configuration.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    problem: &'a TuningProblem,
    table: Arc<BlerTable>,
    reference: RawScore,
}

impl<'a> Objective<'a> {
    pub fn new(problem: &'a TuningProblem, table: Arc<BlerTable>) -> Result<Self> {
        problem.validate()?;
        let reference = problem.raw_score(&problem.start, &table)?;
        Ok(Objective { problem, table, reference })
    }

    pub fn reference(&self) -> RawScore {
        self.reference
    }

    pub fn combine(&self, raw: RawScore) -> f64 {
        let norm = |v: f64, r: f64| if r > 0.0 { v / r } else { v };
        self.problem.w_tp * norm(raw.normalized_tp, self.reference.normalized_tp)
            - self.problem.w_bler * norm(raw.bler_msd, self.reference.bler_msd)
    }

    /// Objective at parameter vector `x` (maximized).
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let cfg = self.problem.config_at(x);
        cfg.validate()?;
        Ok(self.combine(self.problem.raw_score(&cfg, &self.table)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best: SaladConfig,
    pub best_x: Vec<f64>,
    pub best_objective: f64,
    pub start_objective: f64,
    /// Best-seen objective after each iteration (maximization sign).
    pub log: Vec<NmIteration>,
}

pub fn tune(problem: &TuningProblem, table: Arc<BlerTable>) -> Result<TuneOutcome> {
    let obj = Objective::new(problem, table)?;
    let start_objective = obj.combine(obj.reference());
    let res = try_nelder_mead(|x| obj.value(x).map(|v| -v), &problem.x0(), &problem.lower(), &problem.upper(), problem.budget)?;
    let log = res
        .log
        .into_iter()
        .map(|mut it| {
            it.best_value = -it.best_value;
            it
        })
        .collect();
    Ok(TuneOutcome {
        best: problem.config_at(&res.x),
        best_x: res.x,
        best_objective: -res.value,
        start_objective,
        log,
    })
}

pub fn write_log<W: std::io::Write>(mut w: W, problem: &TuningProblem, log: &[NmIteration]) -> std::io::Result<()> {
    let names: Vec<&str> = problem.params.iter().map(|p| p.name.name()).collect();
    writeln!(w, "iteration,evaluations,operation,best_objective,{}", names.join(","))?;
    for it in log {
        let xs: Vec<String> = it.best_x.iter().map(|v| crate::sim::fmt_sig9(*v)).collect();
        writeln!(w, "{},{},{},{},{}", it.iteration, it.evaluations, it.operation, crate::sim::fmt_sig9(it.best_value), xs.join(","))?;
    }
    Ok(())
}

/// Tuning problem file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "one")]
    pub w_tp: f64,
    #[serde(default = "one")]
    pub w_bler: f64,
    /// Scenario files, relative to the problem file.
    pub scenarios: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    #[serde(rename = "param")]
    pub params: Vec<ParamBound>,
    /// Starting SALAD configuration; defaults when absent.
    #[serde(default)]
    pub start: SaladConfig,
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

fn one() -> f64 {
    1.0
}

impl ProblemFile {
    pub fn load(path: &Path) -> Result<TuningProblem> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ProblemFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let scenarios = file.scenarios.iter().map(|p| Scenario::load(&base.join(p), &[])).collect::<Result<Vec<_>>>()?;
        let tau = scenarios.first().map(|s| s.adapter.tau).unwrap_or(0.1);
        let problem = TuningProblem {
            params: file.params,
            w_tp: file.w_tp,
            w_bler: file.w_bler,
            scenarios,
            seeds: file.seeds,
            start: SaladConfig { tau, ..file.start },
            budget: file.budget,
        };
        problem.validate()?;
        Ok(problem)
    }
}
