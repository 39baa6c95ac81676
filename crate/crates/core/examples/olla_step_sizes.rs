//! OLLA on a channel that alternates between 5 and 15 dB, for three step sizes.
//!
//! Small steps track slowly; large steps wobble the MCS once converged.

use std::sync::Arc;

use salad::sim::{run_scenario, AdapterKind, ChannelSection, Scenario};
use salad::BlerTable;

fn main() -> salad::Result<()> {
    let table = Arc::new(BlerTable::bundled());
    let channel = ChannelSection::steps(vec![5.0, 15.0, 5.0, 15.0], vec![3000, 6000, 9000]);
    println!("delta_nack  adapt_time  long_term_bler  mean_se");
    for dn in [0.1, 0.5, 1.0, 2.0] {
        let mut s = Scenario::new(12_000, 1, channel.clone(), AdapterKind::Olla);
        s.adapter.initial_estimate_db = 5.0;
        s.adapter.olla.delta_nack = dn;
        let m = run_scenario(&s, table.clone())?.metrics;
        let t = m.adaptation_time.map_or("-".to_string(), |t| t.to_string());
        println!("{dn:>10}  {t:>10}  {:>14.4}  {:>7.3}", m.long_term_bler, m.mean_se);
    }
    Ok(())
}
