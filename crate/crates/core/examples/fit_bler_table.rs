//! Fits sigmoid BLER curves to noisy link-level samples and compares with the truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salad::blermodel::{fit_mse, fit_sigmoid, sigmoid_bler};

fn main() -> salad::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (center, scale) in [(-2.0, 0.6), (4.5, 1.1), (12.0, 0.3)] {
        // each point is an empirical BLER from 2000 simulated blocks
        let points: Vec<(f64, f64)> = (0..30)
            .map(|i| {
                let g = center - 4.0 + 8.0 * f64::from(i) / 29.0;
                let p = sigmoid_bler(g, center, scale);
                let errors = (0..2000).filter(|_| rng.random::<f64>() < p).count();
                (g, errors as f64 / 2000.0)
            })
            .collect();
        let (c, s) = fit_sigmoid(&points)?;
        println!("true ({center:>5.2}, {scale:.2})  fitted ({c:>6.3}, {s:.3})  mse {:.2e}", fit_mse(&points, c, s));
    }
    Ok(())
}
