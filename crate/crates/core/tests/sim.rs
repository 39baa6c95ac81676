use std::sync::Arc;

use proptest::prelude::*;
use salad::sim::{read_trace, run_scenario, write_trace, AdapterKind, ChannelSection, Scenario};
use salad::{BlerTable, Mcs};

fn table() -> Arc<BlerTable> {
    Arc::new(BlerTable::bundled())
}

/// SINR where the sigmoid of `(center, scale)` equals `p`, from the closed-form inverse.
fn sinr_for_bler(center: f64, scale: f64, p: f64) -> f64 {
    center + scale * (1.0 / p - 1.0).ln()
}

#[test]
fn oracle_on_a_constant_channel_hits_the_curve_value() {
    let t = table();
    let tbs = 2000;
    let target = 0.095;
    // pick an MCS whose successor is infeasible at the chosen SINR
    let (u, gamma) = (5u8..26)
        .map(|u| {
            let e = t.entry(Mcs(u), tbs).unwrap();
            (u, sinr_for_bler(e.center, e.scale, target))
        })
        .find(|&(u, g)| {
            let next = t.entry(Mcs(u + 1), tbs).unwrap();
            1.0 / (1.0 + ((g - next.center) / next.scale).exp()) > 0.1
        })
        .expect("some MCS is isolated at the target");

    let mut s = Scenario::new(100_000, 21, ChannelSection::constant(gamma), AdapterKind::Oracle);
    s.traffic.tbs = Some(tbs);
    let out = run_scenario(&s, t).unwrap();
    assert!(out.trace.iter().all(|r| r.mcs == Some(Mcs(u))));
    let bler = out.metrics.long_term_bler;
    // binomial standard error is about 1e-3 here
    assert!((bler - target).abs() < 4e-3, "mcs {u} at {gamma:.3} dB: {bler}");
}

#[test]
fn adapters_share_the_channel_realisation() {
    let base = Scenario::new(3000, 4, ChannelSection::chirp(8.0, 4.0, 0.001, 0.01), AdapterKind::Olla);
    let a = run_scenario(&base, table()).unwrap();
    let b = run_scenario(&salad::sim::with_adapter(&base, AdapterKind::Salad), table()).unwrap();
    assert!(a.trace.iter().zip(&b.trace).all(|(x, y)| x.true_sinr_db == y.true_sinr_db));
}

#[test]
fn trace_survives_a_file_roundtrip() {
    let mut s = Scenario::new(800, 2, ChannelSection::steps(vec![0.0, 9.0], vec![300]), AdapterKind::Salad);
    s.harq.slot_mask = Some("DDDSU".into());
    let out = run_scenario(&s, table()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace(std::fs::File::create(&path).unwrap(), &out.trace).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back.len(), out.trace.len());
    for (x, y) in out.trace.iter().zip(&back) {
        assert_eq!((x.slot, x.mcs, x.tbs, x.nack, x.probe_flag), (y.slot, y.mcs, y.tbs, y.nack, y.probe_flag));
        assert!((x.true_sinr_db - y.true_sinr_db).abs() <= 1e-8 * x.true_sinr_db.abs().max(1.0));
    }
    assert!(back.iter().filter(|r| r.slot % 5 >= 3).all(|r| r.mcs.is_none()));
}

#[test]
fn every_transmission_gets_exactly_one_feedback() {
    let mut s = Scenario::new(2000, 8, ChannelSection::constant(6.0), AdapterKind::Olla);
    s.harq.delay = 7;
    s.harq.slot_mask = Some("DDDDDDDSUU".into());
    let m = run_scenario(&s, table()).unwrap().metrics;
    assert_eq!(m.scheduled, m.feedbacks);
    assert_eq!(m.scheduled, 2000 / 10 * 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_reproducible_and_bounded(seed in 0u64..1000, level in -5.0f64..25.0, delay in 0u64..8) {
        let mut s = Scenario::new(400, seed, ChannelSection::constant(level), AdapterKind::Salad);
        s.harq.delay = delay;
        let a = run_scenario(&s, table()).unwrap();
        let b = run_scenario(&s, table()).unwrap();
        prop_assert_eq!(&a.trace, &b.trace);
        let m = &a.metrics;
        prop_assert!((0.0..=1.0).contains(&m.long_term_bler));
        prop_assert!(m.nacks <= m.feedbacks);
        for r in &a.trace {
            if let Some(t) = r.instant_target {
                prop_assert!((0.0..=1.0).contains(&t));
            }
        }
    }
}
