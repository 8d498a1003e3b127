//! Cosine annealing with warm restarts, printed as a coarse bar chart.
//!
//! cargo run --example lr_schedule -- [epochs]

use tauflow::config::TrainConfig;
use tauflow::optim::lr_at;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(70);
    let tc = TrainConfig::default();
    for e in 0..epochs {
        let lr = lr_at(e as f64, tc.lr, tc.t0, tc.t_mult, tc.eta_min);
        let bar = "#".repeat((lr / tc.lr * 50.0).round() as usize);
        println!("{e:>4} {lr:.3e} {bar}");
    }
}
