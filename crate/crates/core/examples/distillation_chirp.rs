//! Online learning-rate distillation on a chirp whose frequency rises over the run.
//!
//! The distilled epsilon should grow as the channel speeds up.

use std::sync::Arc;

use salad::sim::{run_scenario, AdapterKind, ChannelSection, Scenario};
use salad::BlerTable;

fn main() -> salad::Result<()> {
    let mut s = Scenario::new(6000, 3, ChannelSection::chirp(10.0, 5.0, 0.0005, 0.01), AdapterKind::Salad);
    s.adapter.initial_estimate_db = 10.0;
    s.adapter.salad.n_eps = 200;
    let out = run_scenario(&s, Arc::new(BlerTable::bundled()))?;
    println!("slot   epsilon  knots");
    for e in &out.metrics.distill_events {
        println!("{:>5}  {:>7.2}  {:>5}", e.slot, e.epsilon, e.knots);
    }
    println!("final epsilon {:.2}, long-term BLER {:.4}", out.metrics.final_epsilon.unwrap_or(f64::NAN), out.metrics.long_term_bler);
    Ok(())
}
