//! Runs OLLA, SALAD and the genie oracle over the same seeds and prints medians.

use std::sync::Arc;

use rayon::prelude::*;
use salad::sim::{run_scenario, with_adapter, AdapterKind, ChannelSection, Scenario};
use salad::BlerTable;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

fn main() -> salad::Result<()> {
    let table = Arc::new(BlerTable::bundled());
    let mut base = Scenario::new(5000, 0, ChannelSection::chirp(9.0, 4.0, 0.0002, 0.002), AdapterKind::Olla);
    base.harq.slot_mask = Some("DDDDDDDSUU".into());
    println!("adapter  bler       norm_tp  mean_se");
    for kind in [AdapterKind::Olla, AdapterKind::Salad, AdapterKind::Oracle] {
        let metrics = (0..16u64)
            .into_par_iter()
            .map(|seed| {
                let mut s = with_adapter(&base, kind);
                s.seed = seed;
                run_scenario(&s, table.clone()).map(|o| o.metrics)
            })
            .collect::<salad::Result<Vec<_>>>()?;
        let col = |f: fn(&salad::sim::Metrics) -> f64| median(metrics.iter().map(f).collect());
        println!("{:<7}  {:.4}  {:>10.1}  {:.3}", kind.to_string(), col(|m| m.long_term_bler), col(|m| m.normalized_tp), col(|m| m.mean_se));
    }
    Ok(())
}
