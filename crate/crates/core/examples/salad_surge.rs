//! An SINR surge from -3 to 7 dB: SALAD against OLLA over paired seeds.

use std::sync::Arc;

use salad::sim::{run_scenario, AdapterKind, ChannelSection, Scenario};
use salad::BlerTable;

fn main() -> salad::Result<()> {
    let table = Arc::new(BlerTable::bundled());
    for kind in [AdapterKind::Olla, AdapterKind::Salad] {
        let mut times = Vec::new();
        for seed in 0..10 {
            let mut s = Scenario::new(3000, seed, ChannelSection::steps(vec![-3.0, 7.0], vec![1000]), kind);
            s.traffic.offered_load_mbps = Some(1.0);
            s.adapter.initial_estimate_db = -3.0;
            let m = run_scenario(&s, table.clone())?.metrics;
            times.push(m.adaptation_time.map_or(f64::INFINITY, |t| t as f64));
        }
        times.sort_by(f64::total_cmp);
        println!("{:>6}: median adaptation {} slots, range {}..{}", kind.to_string(), 0.5 * (times[4] + times[5]), times[0], times[9]);
    }
    Ok(())
}
