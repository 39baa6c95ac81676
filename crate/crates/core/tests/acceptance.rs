//! Acceptance criteria, one line of output per criterion.
//!
//! Runs without the libtest harness so that every line is printed; the
//! process exits nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salad::blermodel::ClipConfig;
use salad::olla::{time_adaptive_increment, OllaConfig, OllaState};
use salad::salad::{bias_score, FeedbackRecord, SaladAdapter, SaladConfig, SlotContext};
use salad::sim::{run_scenario, AdapterKind, ChannelSection, HarqFeedback, Scenario};
use salad::teacher::{bce_loss_and_grad, HistoryBatch, HistorySample, SplineModel};
use salad::tuner::{nelder_mead, tune, ParamBound, TunableParam, TuningProblem};
use salad::{BlerTable, Mcs};

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let verdict = if out.pass { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} [{verdict}] {name}: {} ({:.2} s)", out.detail, t0.elapsed().as_secs_f64());
    out.pass
}

fn within(t0: Instant, limit: f64) -> (bool, Duration) {
    let e = t0.elapsed();
    (e.as_secs_f64() < limit, e)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn table() -> Arc<BlerTable> {
    Arc::new(BlerTable::bundled())
}

/// Offset form against the SA rewrite (tracked on the estimate itself).
fn c1_olla_dual_form() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = rng.random_range(0.02..0.5);
        let cfg = OllaConfig::new(tau, rng.random_range(0.05..2.0)).unwrap();
        let mut offset_form = OllaState { offset: 0.0, reported_sinr: 7.0 };
        let mut est = offset_form.estimate();
        for _ in 0..10_000 {
            let nack = rng.random::<f64>() < tau;
            offset_form.on_feedback(&cfg, nack);
            est += cfg.delta_nack / (1.0 - cfg.tau) * (cfg.tau - if nack { 1.0 } else { 0.0 });
            worst = worst.max((offset_form.estimate() - est).abs());
        }
    }
    let (fast, e) = within(t0, 1.0);
    Outcome { pass: worst <= 1e-9 && fast, detail: format!("max |diff| = {worst:.3e} dB over 10 x 1e4 steps, {e:.2?}") }
}

/// Zero-delay SALAD increments against time-adaptive OLLA with the effective BLER as target.
fn c2_zero_delay_reduction() -> Outcome {
    let t0 = Instant::now();
    let cfg = SaladConfig::default();
    let eps = cfg.epsilon;
    let table = table();
    let mut adapter = SaladAdapter::new(cfg, table.clone(), ChaCha8Rng::seed_from_u64(7), 5.0).unwrap();
    let mut chan = ChaCha8Rng::seed_from_u64(8);
    let mut gamma = 5.0;
    let mut pending: Vec<HarqFeedback> = Vec::new();
    let (mut worst, mut steps) = (0.0f64, 0usize);
    for slot in 0..10_001u64 {
        let before = adapter.state().estimate();
        let d = adapter.step(&SlotContext { slot, scheduled: true, tbs: 2000, feedback: &pending, reported_sinr: None }).unwrap().unwrap();
        for u in adapter.last_updates() {
            let dn = eps / u.scale * (1.0 - u.predicted_bler);
            let olla = time_adaptive_increment(dn, u.predicted_bler, u.nack);
            worst = worst.max((olla - u.increment).abs());
            worst = worst.max((adapter.state().estimate() - before - u.increment).abs());
            steps += 1;
        }
        gamma += chan.random_range(-0.3..0.3);
        let nack = chan.random::<f64>() < table.bler(d.illa.mcs, gamma, 2000).unwrap();
        pending = vec![HarqFeedback { tx_slot: slot, mcs: d.illa.mcs, tbs: 2000, nack }];
    }
    let (fast, e) = within(t0, 1.0);
    Outcome {
        pass: worst <= 1e-9 && steps == 10_000 && fast,
        detail: format!("max |diff| = {worst:.3e} over {steps} steps, {e:.2?}"),
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss oracle written from the model definition, independent of the crate's evaluator.
fn oracle_loss(knots: &[f64], theta: &[f64], beta: f64, samples: &[HistorySample]) -> f64 {
    let mut loss = beta * theta.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
    for s in samples {
        let mut gamma = 0.0;
        for k in 0..knots.len() {
            let tri = if k + 1 < knots.len() && s.slot >= knots[k] && s.slot <= knots[k + 1] {
                (knots[k + 1] - s.slot) / (knots[k + 1] - knots[k])
            } else if k > 0 && s.slot >= knots[k - 1] && s.slot <= knots[k] {
                (s.slot - knots[k - 1]) / (knots[k] - knots[k - 1])
            } else {
                0.0
            };
            gamma += theta[k] * tri;
        }
        let x = (gamma - s.center) / s.scale;
        loss += if s.nack { softplus(x) } else { softplus(-x) };
    }
    loss
}

fn c3_teacher_gradient() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let k = [3, 5, 9][draw % 3];
        let mut slots: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..400.0)).collect();
        slots.sort_by(f64::total_cmp);
        let samples: Vec<HistorySample> = slots
            .iter()
            .map(|&slot| HistorySample {
                slot,
                mcs: Mcs(0),
                tbs: 100,
                nack: rng.random::<bool>(),
                center: rng.random_range(-5.0..20.0),
                scale: rng.random_range(0.5..3.0),
            })
            .collect();
        let batch = HistoryBatch::new(samples.clone(), ClipConfig::default()).unwrap();
        let beta = rng.random_range(0.0..2.0);
        let mut m = SplineModel::uniform(slots[0], slots[199], k, 0.0, beta).unwrap();
        for t in m.theta.iter_mut() {
            *t = rng.random_range(-5.0..20.0);
        }
        let (_, g) = bce_loss_and_grad(&m, &batch).unwrap();
        let h = 1e-5;
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for j in 0..k {
            let mut p = m.theta.clone();
            p[j] += h;
            let mut q = m.theta.clone();
            q[j] -= h;
            let fd = (oracle_loss(&m.knots, &p, beta, &samples) - oracle_loss(&m.knots, &q, beta, &samples)) / (2.0 * h);
            err = err.max((fd - g[j]).abs());
            norm = norm.max(fd.abs());
        }
        worst = worst.max(err / norm.max(1e-8));
    }
    let (fast, e) = within(t0, 5.0);
    Outcome { pass: worst < 1e-5 && fast, detail: format!("max relative error {worst:.2e} over 100 draws, {e:.2?}") }
}

fn c4_bias_score_variance() -> Outcome {
    let t0 = Instant::now();
    let t = 15;
    let clip = ClipConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let p: Vec<f64> = (0..t).map(|i| clip.clip_bler(if i % 4 == 0 { rng.random_range(0.9..1.0) } else { rng.random_range(0.0..0.6) })).collect();
    let formula = p.iter().map(|q| q * (1.0 - q)).sum::<f64>() / (t * t) as f64;
    let trials = 100_000;
    let mut scores = Vec::with_capacity(trials);
    let mut hist: Vec<FeedbackRecord> = Vec::with_capacity(t);
    for _ in 0..trials {
        hist.clear();
        for &q in &p {
            hist.push(FeedbackRecord { predicted_bler: q, nack: rng.random::<f64>() < q, scale_used: 1.0, mcs: Mcs(0), tbs: 100 });
        }
        let b = bias_score(&hist, t).unwrap();
        assert!((b.variance - formula).abs() < 1e-15);
        scores.push(b.score);
    }
    let empirical = variance(&scores);
    let rel = (empirical - formula).abs() / formula;
    let (fast, e) = within(t0, 5.0);
    Outcome {
        pass: rel < 0.05 && fast,
        detail: format!("empirical {empirical:.5e} vs formula {formula:.5e} (rel. diff {:.2}%), {e:.2?}", 100.0 * rel),
    }
}

fn c5_long_term_bler() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in [AdapterKind::Salad, AdapterKind::Olla] {
        let mut s = Scenario::new(200_000, 5, ChannelSection::constant(10.0), kind);
        s.harq.delay = 5;
        s.adapter.olla.delta_nack = 1.0;
        let m = run_scenario(&s, table()).unwrap().metrics;
        ok &= (0.08..=0.12).contains(&m.long_term_bler);
        parts.push(format!("{kind} {:.4}", m.long_term_bler));
    }
    let (fast, e) = within(t0, 10.0);
    Outcome { pass: ok && fast, detail: format!("long-term BLER {} (bound [0.08, 0.12]), {e:.2?}", parts.join(", ")) }
}

const C6_SEGMENT: u64 = 3000;

fn two_level(seed: u64, delta_nack: f64) -> (f64, f64, f64) {
    let levels = vec![5.0, 15.0, 5.0, 15.0];
    let switches = vec![C6_SEGMENT, 2 * C6_SEGMENT, 3 * C6_SEGMENT];
    let mut s = Scenario::new(4 * C6_SEGMENT, seed, ChannelSection::steps(levels, switches), AdapterKind::Olla);
    s.harq.delay = 5;
    s.metrics.sliding_window = 50;
    s.adapter.initial_estimate_db = 5.0;
    s.adapter.olla.delta_nack = delta_nack;
    let out = run_scenario(&s, table()).unwrap();
    let adapt = out.metrics.adaptation_time.map_or(f64::INFINITY, |t| t as f64);
    // stationary phase: second half of every constant segment
    let stationary = |slot: u64| slot % C6_SEGMENT >= C6_SEGMENT / 2;
    let bler: Vec<f64> = out.metrics.sliding_bler.iter().filter(|(t, _)| stationary(*t)).map(|(_, b)| *b).collect();
    let mcs_var = (0..4)
        .map(|seg| {
            let mcs: Vec<f64> = out
                .trace
                .iter()
                .filter(|r| r.slot / C6_SEGMENT == seg && stationary(r.slot))
                .filter_map(|r| r.mcs.map(|u| f64::from(u.0)))
                .collect();
            variance(&mcs)
        })
        .sum::<f64>()
        / 4.0;
    (adapt, variance(&bler), mcs_var)
}

fn c6_olla_step_sizes() -> Outcome {
    let runs = |dn: f64| -> Vec<(f64, f64, f64)> { (0..20).map(|seed| two_level(seed, dn)).collect() };
    let (small, unit, large) = (runs(0.1), runs(1.0), runs(2.0));
    let med = |r: &[(f64, f64, f64)], f: fn(&(f64, f64, f64)) -> f64| median(&r.iter().map(f).collect::<Vec<_>>());
    let (a_small, a_unit) = (med(&small, |r| r.0), med(&unit, |r| r.0));
    let (v_small, v_large) = (med(&small, |r| r.1), med(&large, |r| r.1));
    let (m_small, m_large) = (med(&small, |r| r.2), med(&large, |r| r.2));
    let adapt_ok = a_small > a_unit;
    let var_ok = v_large > v_small;
    Outcome {
        pass: adapt_ok && var_ok,
        detail: format!(
            "median adaptation {a_small} slots (dn 0.1) vs {a_unit} (dn 1.0) [{}]; stationary sliding-BLER variance {v_large:.3e} (dn 2.0) vs {v_small:.3e} (dn 0.1) [{}]; for reference MCS variance {m_large:.3} vs {m_small:.3}",
            if adapt_ok { "ok" } else { "not ok" },
            if var_ok { "ok" } else { "not ok" },
        ),
    }
}

fn surge(seed: u64, kind: AdapterKind) -> f64 {
    let mut s = Scenario::new(3000, seed, ChannelSection::steps(vec![-3.0, 7.0], vec![1000]), kind);
    s.harq.delay = 5;
    s.traffic.offered_load_mbps = Some(1.0);
    s.adapter.initial_estimate_db = -3.0;
    s.adapter.olla.delta_nack = 1.0;
    run_scenario(&s, table()).unwrap().metrics.adaptation_time.map_or(f64::INFINITY, |t| t as f64)
}

fn c7_surge() -> Outcome {
    let salad: Vec<f64> = (0..20).map(|s| surge(s, AdapterKind::Salad)).collect();
    let olla: Vec<f64> = (0..20).map(|s| surge(s, AdapterKind::Olla)).collect();
    let (ms, mo) = (median(&salad), median(&olla));
    let ratio = ms / mo;
    Outcome { pass: ratio <= 0.75, detail: format!("median adaptation SALAD {ms} vs OLLA {mo} slots, ratio {ratio:.3} (bound 0.75)") }
}

fn c8_distillation_chirp() -> Outcome {
    let t0 = Instant::now();
    let n = 6000u64;
    let mut wins = 0;
    let mut means = Vec::new();
    for seed in 0..10 {
        let mut s = Scenario::new(n, seed, ChannelSection::chirp(10.0, 5.0, 0.0005, 0.01), AdapterKind::Salad);
        s.harq.delay = 5;
        s.adapter.initial_estimate_db = 10.0;
        s.adapter.salad.n_eps = 200;
        let m = run_scenario(&s, table()).unwrap().metrics;
        let mean = |lo: u64, hi: u64| {
            let v: Vec<f64> = m.distill_events.iter().filter(|e| e.slot >= lo && e.slot < hi).map(|e| e.epsilon).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (slow, fast) = (mean(0, n / 3), mean(2 * n / 3, n));
        wins += usize::from(fast >= slow);
        means.push(format!("{slow:.2}/{fast:.2}"));
    }
    let (quick, e) = within(t0, 30.0);
    Outcome {
        pass: wins >= 8 && quick,
        detail: format!("{wins}/10 seeds with eps(high freq) >= eps(low freq) [low/high: {}], {e:.2?}", means.join(" ")),
    }
}

fn c9_nelder_mead() -> Outcome {
    let quad = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2);
    let r = nelder_mead(quad, &[0.0, 0.0], &[-10.0, -10.0], &[10.0, 10.0], 100);
    let dist = ((r.x[0] - 3.0).powi(2) + (r.x[1] + 1.0).powi(2)).sqrt();

    let mut s = Scenario::new(2000, 0, ChannelSection::steps(vec![-3.0, 7.0], vec![500]), AdapterKind::Salad);
    s.traffic.offered_load_mbps = Some(1.0);
    s.adapter.initial_estimate_db = -3.0;
    let problem = TuningProblem {
        params: vec![
            ParamBound { name: TunableParam::Epsilon, lower: 0.1, upper: 3.0 },
            ParamBound { name: TunableParam::Rho, lower: 0.05, upper: 2.0 },
        ],
        w_tp: 1.0,
        w_bler: 1.0,
        scenarios: vec![s],
        seeds: vec![1, 2, 3],
        start: SaladConfig::default(),
        budget: 25,
    };
    let out = tune(&problem, table()).unwrap();
    let monotone = out.log.windows(2).all(|w| w[1].best_value >= w[0].best_value);
    let iterations = out.log.len() - 1;
    Outcome {
        pass: dist < 1e-3 && monotone && iterations == 25 && out.best_objective >= out.start_objective,
        detail: format!(
            "quadratic optimum error {dist:.2e}; 25-step tuning best-seen monotone = {monotone}, objective {:.4} -> {:.4}",
            out.start_objective, out.best_objective
        ),
    }
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.toml");
    std::fs::write(
        &scenario,
        "slots = 4000\nseed = 11\n\n[channel]\nkind = \"step\"\nlevels_db = [-3.0, 7.0]\nswitch_slots = [1000]\n\n\
         [traffic]\noffered_load_mbps = 1.0\n\n[harq]\ndelay = 5\n\n[adapter]\nkind = \"salad\"\ninitial_estimate_db = -3.0\n\n\
         [adapter.salad]\nn_eps = 500\n",
    )
    .unwrap();
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_salad-sim"))
            .args(["run", "--scenario"])
            .arg(&scenario)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (sa, sb) = (run(&a), run(&b));
    let mut same = sa.success() && sb.success();
    let mut files = 0;
    for name in ["trace.csv", "metrics.json", "mcs_vs_slot.csv", "sinr_vs_slot.csv", "sliding_bler_vs_slot.csv"] {
        let (x, y) = (std::fs::read(a.join(name)), std::fs::read(b.join(name)));
        same &= matches!((&x, &y), (Ok(x), Ok(y)) if x == y);
        files += 1;
    }
    Outcome { pass: same, detail: format!("two `run` invocations, {files} output files byte-identical = {same}") }
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "OLLA dual-form equivalence", c1_olla_dual_form),
        (2, "zero-delay reduction to time-adaptive OLLA", c2_zero_delay_reduction),
        (3, "teacher gradient check", c3_teacher_gradient),
        (4, "bias-score variance", c4_bias_score_variance),
        (5, "long-term BLER control", c5_long_term_bler),
        (6, "OLLA step sizes on a two-level channel", c6_olla_step_sizes),
        (7, "surge adaptation", c7_surge),
        (8, "distillation on a chirp", c8_distillation_chirp),
        (9, "Nelder-Mead sanity", c9_nelder_mead),
        (10, "run determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !check(id, name, f) {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: {} of 10 criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
