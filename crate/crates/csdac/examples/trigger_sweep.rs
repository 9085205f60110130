//! Sweep the event-trigger thresholds of the model-based baseline and print
//! the resulting tradeoff between update traffic and survival.
//!
//! The trigger requests an update when the deviation from the last sent state
//! exceeds `sigma * ||x|| + eps0`, so larger thresholds hold the last force
//! longer and spend fewer URLLC transmissions, at the price of larger plant
//! excursions. Run with:
//!
//! ```text
//! cargo run --release --example trigger_sweep
//! ```

use csdac::baseline::{default_lqr_gain, DisjointController};
use csdac::config::AppConfig;
use csdac::plant::LinearModel;
use csdac::train::{run_episodes, EvalConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = AppConfig::default();
    let gain = default_lqr_gain(&LinearModel::default())?;
    let rewards = config.env.rewards();

    let eval = EvalConfig {
        episodes: 30,
        episode_len: 300,
        seed: 7,
        ..EvalConfig::new(30, 7)
    };

    println!(
        "{:>6} {:>6} | {:>8} {:>8} {:>10} {:>10}",
        "sigma", "eps0", "updates", "len", "viol/ep", "radiated_J"
    );
    for &sigma in &[0.0, 0.1, 0.2, 0.3, 0.5] {
        for &eps0 in &[0.005, 0.01, 0.02, 0.04, 0.08, 0.15] {
            let mut ctrl = DisjointController::new(gain);
            ctrl.sigma = sigma;
            ctrl.eps0 = eps0;
            let episodes =
                run_episodes(&mut ctrl, &config.plant, &config.network, &rewards, &eval)?;
            let n = episodes.len() as f64;
            let updates: f64 =
                episodes.iter().map(|e| e.updates_effective as f64).sum::<f64>() / n;
            let len: f64 = episodes.iter().map(|e| e.len as f64).sum::<f64>() / n;
            let viol: f64 =
                episodes.iter().map(|e| e.violation_steps as f64).sum::<f64>() / n;
            let rad: f64 =
                episodes.iter().map(|e| e.radiated_energy_j).sum::<f64>() / n;
            println!(
                "{:>6.2} {:>6.3} | {:>8.1} {:>8.1} {:>10.2} {:>10.5}",
                sigma, eps0, updates, len, viol, rad
            );
        }
    }
    Ok(())
}
