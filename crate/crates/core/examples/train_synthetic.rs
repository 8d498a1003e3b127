//! Overfits a handful of synthetic images at reduced resolution and prints
//! the per-epoch metric log.
//!
//! cargo run --release --example train_synthetic -- [n_samples] [epochs] [batch_size]

use std::time::Instant;

use tauflow::config::ModelConfig;
use tauflow::data::generate_synthetic;
use tauflow::model::TauFlowNet;
use tauflow::train::{train, LOG_HEADER};

fn main() -> tauflow::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(60);

    let mut cfg = ModelConfig { base_channel: 16, ..ModelConfig::reduced() };
    cfg.train.max_epochs = epochs;
    cfg.train.patience = epochs;
    cfg.train.augment = false;
    cfg.train.batch_size = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    cfg.train.target_dice = Some(0.95);
    cfg.train.target_main_loss = Some(0.1);

    let data = generate_synthetic(n, cfg.train.seed, cfg.input_size, cfg.input_size);
    let (net, store) = TauFlowNet::build::<f32>(&cfg, cfg.train.seed)?;
    println!("{} parameters, {n} samples at {}x{}", store.element_count(), cfg.input_size, cfg.input_size);

    let start = Instant::now();
    let out = train(&net, store, &data, &data, None)?;
    println!("{LOG_HEADER}");
    for rec in &out.history {
        println!("{}", rec.log_line());
    }
    println!(
        "best dice {:.4} at epoch {} after {} epochs, {:.1}s",
        out.best_dice,
        out.best_epoch,
        out.epochs_run,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
