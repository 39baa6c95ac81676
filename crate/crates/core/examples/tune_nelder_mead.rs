//! Tunes epsilon, rho and k_e on a surge scenario with a 25-iteration budget.

use std::sync::Arc;

use salad::sim::{AdapterKind, ChannelSection, Scenario};
use salad::tuner::{tune, ParamBound, TunableParam, TuningProblem};
use salad::{BlerTable, SaladConfig};

fn main() -> salad::Result<()> {
    let mut s = Scenario::new(2000, 0, ChannelSection::steps(vec![-3.0, 7.0], vec![500]), AdapterKind::Salad);
    s.traffic.offered_load_mbps = Some(1.0);
    s.adapter.initial_estimate_db = -3.0;
    let bound = |name, lower, upper| ParamBound { name, lower, upper };
    let problem = TuningProblem {
        params: vec![
            bound(TunableParam::Epsilon, 0.1, 3.0),
            bound(TunableParam::Rho, 0.05, 2.0),
            bound(TunableParam::KE, 0.001, 0.1),
        ],
        w_tp: 1.0,
        w_bler: 1.0,
        scenarios: vec![s],
        seeds: vec![1, 2, 3, 4],
        start: SaladConfig::default(),
        budget: 25,
    };
    let out = tune(&problem, Arc::new(BlerTable::bundled()))?;
    for it in &out.log {
        println!("iter {:>2} ({:<10}) best {:.4} at {:.3?}", it.iteration, it.operation, it.best_value, it.best_x);
    }
    println!("objective {:.4} -> {:.4}", out.start_objective, out.best_objective);
    let b = &out.best;
    println!("epsilon {:.3}, rho {:.3}, k_e {:.4}", b.epsilon, b.rho, b.k_e);
    Ok(())
}
